use std::fmt::Write as _;
use std::path::PathBuf;

use super::{age_invariant_reconstruct, image_fid, Extractor};
use crate::data::Dataset;
use crate::model::ModelParams;
use crate::trainer::load_model;
use crate::{AblationRow, Error, Result};

/// Fréchet distance between a split's images and their age-invariant
/// reconstructions.
pub fn reconstruction_fid(params: &ModelParams<f32>, data: &Dataset, extractor: &Extractor) -> Result<f64> {
    let recon = age_invariant_reconstruct(params, &data.images, &data.bins)?;
    image_fid(&data.images, &recon, data.image_size, extractor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationEntry {
    pub row: AblationRow,
    pub checkpoint: PathBuf,
    pub fid: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub entries: Vec<AblationEntry>,
    /// Description of the evaluated images (e.g. `"test split, 50 images"`).
    pub evaluated_on: String,
}

/// FID of each of the four rows, in table order.
pub fn ablation_report(
    data: &Dataset,
    checkpoints: &[(AblationRow, PathBuf)],
    extractor: &Extractor,
    evaluated_on: &str,
) -> Result<AblationReport> {
    let mut entries = Vec::new();
    for row in AblationRow::ALL {
        let (_, path) = checkpoints
            .iter()
            .find(|(r, _)| *r == row)
            .ok_or_else(|| Error::Checkpoint(format!("missing checkpoint for row {:?} ({})", row.label(), row.slug())))?;
        let params = load_model(path)?;
        if params.config.row() != Some(row) {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} does not have the flags of row {:?}",
                path.display(),
                row.label()
            )));
        }
        let fid = super::ablation::reconstruction_fid(&params, data, extractor)?;
        entries.push(AblationEntry {
            row,
            checkpoint: path.clone(),
            fid,
        });
    }
    Ok(AblationReport {
        entries,
        evaluated_on: evaluated_on.to_string(),
    })
}

fn mark(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        "✗"
    }
}

impl AblationReport {
    pub const COLUMNS: [&'static str; 5] = ["Model", "D_age", "LS", "SA", "FID"];

    pub fn to_csv(&self) -> String {
        let mut s = Self::COLUMNS.join(",");
        s.push('\n');
        for e in &self.entries {
            let (d, l, a) = e.row.flags();
            let _ = writeln!(s, "\"{}\",{d},{l},{a},{:.6}", e.row.label(), e.fid);
        }
        s
    }

    pub fn to_pretty(&self) -> String {
        let mut s = format!("FID, real vs age-invariant reconstruction ({})\n", self.evaluated_on);
        let _ = writeln!(s, "{:<14} {:>5} {:>3} {:>3} {:>9}", "Model", "D_age", "LS", "SA", "FID");
        for e in &self.entries {
            let (d, l, a) = e.row.flags();
            let _ = writeln!(
                s,
                "{:<14} {:>5} {:>3} {:>3} {:>9.2}",
                e.row.label(),
                mark(d),
                mark(l),
                mark(a),
                e.fid
            );
        }
        s
    }

    pub fn fid(&self, row: AblationRow) -> Option<f64> {
        self.entries.iter().find(|e| e.row == row).map(|e| e.fid)
    }
}
