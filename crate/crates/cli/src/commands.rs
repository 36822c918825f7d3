//! One function per verb.

use std::path::{Path, PathBuf};

use bapgan_core::data::{
    emit_phantom_dataset, load_gray, load_manifest, preprocess, save_png, Dataset, PhantomDatasetSpec, Split,
};
use bapgan_core::eval::{
    ablation_report, age_invariant_reconstruct, extract_features, frechet_distance, measure_gap_width,
    progress_image, render_tsne_png, target_bin, tsne_embed, uniform_noise_images, write_tsne_csv, Extractor,
    FeatureStats, TsneConfig, TsnePoint,
};
use bapgan_core::trainer::{load_checkpoint, load_model, train, RunOutput, StepRecord, TrainConfig};
use bapgan_core::AblationRow;
use bapgan_vtt::{AppState, DiskSource, SessionStore};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::{self, FileConfig};
use crate::failure::Failure;
use crate::{Cli, Command};

type CmdResult<T = ()> = Result<T, Failure>;

struct Ctx<'a> {
    cli: &'a Cli,
    file: FileConfig,
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.cli.seed.or(self.file.seed).unwrap_or(0)
    }

    /// Output path: absolute paths as given, relative ones under `--out`.
    fn out(&self, p: impl AsRef<Path>) -> PathBuf {
        let p = p.as_ref();
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.cli.out.join(p)
        }
    }

    fn out_dir(&self) -> CmdResult<&Path> {
        std::fs::create_dir_all(&self.cli.out)
            .map_err(|e| Failure::new("io", format!("cannot create {}: {e}", self.cli.out.display())))?;
        Ok(&self.cli.out)
    }
}

pub fn dispatch(cli: &Cli) -> CmdResult {
    let file = match &cli.config {
        Some(p) => config::load(p)?,
        None => FileConfig {
            format_version: config::CONFIG_FORMAT_VERSION,
            ..FileConfig::default()
        },
    };
    let ctx = Ctx { cli, file };
    match &cli.command {
        Command::Phantom(a) => phantom(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
        Command::Fid(a) => fid(&ctx, a),
        Command::Tsne(a) => tsne(&ctx, a),
        Command::VttServe(a) => serve(&ctx, a),
        Command::Progress(a) => progress(&ctx, a),
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new("io", format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

// ---- data selection ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitSel {
    Train,
    Val,
    Test,
    All,
}

impl SplitSel {
    fn name(self) -> &'static str {
        match self {
            SplitSel::Train => "train",
            SplitSel::Val => "val",
            SplitSel::Test => "test",
            SplitSel::All => "all",
        }
    }
}

fn manifest_file(dataset: &Path) -> PathBuf {
    if dataset.is_dir() {
        dataset.join("manifest.csv")
    } else {
        dataset.to_path_buf()
    }
}

fn load_split(dataset: &Path, split: SplitSel, size: usize, k: usize) -> CmdResult<Dataset> {
    let manifest = load_manifest(&manifest_file(dataset))?;
    for w in &manifest.warnings {
        log::warn!("{w}");
    }
    let records = match split {
        SplitSel::All => manifest.records.clone(),
        SplitSel::Train => manifest.records_in(Split::Train),
        SplitSel::Val => manifest.records_in(Split::Val),
        SplitSel::Test => manifest.records_in(Split::Test),
    };
    if records.is_empty() {
        return Err(Failure::new(
            "ingestion",
            format!("{} has no {} records", manifest.path.display(), split.name()),
        ));
    }
    Ok(Dataset::load(&manifest, &records, size, k)?)
}

// ---- phantom ----

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Number of phantoms.
    #[arg(long)]
    pub n: Option<usize>,
    /// Image side length in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Draw identities from a pool of this many (default: all distinct).
    #[arg(long)]
    pub identities: Option<usize>,
    /// Dataset tag written to the manifest.
    #[arg(long)]
    pub tag: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhantomSection {
    n: usize,
    size: usize,
    identities: Option<usize>,
    tag: String,
}

fn phantom(ctx: &Ctx, a: &PhantomArgs) -> CmdResult {
    let defaults = PhantomSection {
        n: 500,
        size: 64,
        identities: None,
        tag: "phantom".into(),
    };
    let mut s: PhantomSection = config::overlay(&defaults, ctx.file.phantom.as_ref(), "phantom")?;
    s.n = a.n.unwrap_or(s.n);
    s.size = a.size.unwrap_or(s.size);
    s.identities = a.identities.or(s.identities);
    if let Some(t) = &a.tag {
        s.tag = t.clone();
    }
    let spec = PhantomDatasetSpec {
        identities: s.identities,
        dataset_tag: s.tag,
        ..PhantomDatasetSpec::new(s.n, s.size, ctx.seed())
    };
    let out = ctx.out_dir()?;
    let records = emit_phantom_dataset(&spec, out)?;
    let count = |sp| records.iter().filter(|r| r.split == Some(sp)).count();
    println!(
        "wrote {} phantoms ({}x{}; train {}, val {}, test {}) to {}",
        records.len(),
        s.size,
        s.size,
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        out.display()
    );
    Ok(())
}

// ---- training ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RowArg {
    Caae,
    DageLs,
    Sa,
    Bapgan,
}

impl From<RowArg> for AblationRow {
    fn from(r: RowArg) -> Self {
        match r {
            RowArg::Caae => AblationRow::Caae,
            RowArg::DageLs => AblationRow::DageLs,
            RowArg::Sa => AblationRow::Sa,
            RowArg::Bapgan => AblationRow::Bapgan,
        }
    }
}

fn parse_row(slug: &str) -> CmdResult<AblationRow> {
    AblationRow::ALL
        .into_iter()
        .find(|r| r.slug() == slug)
        .ok_or_else(|| Failure::new("config", format!("unknown row {slug:?} (caae, dage_ls, sa, bapgan)")))
}

/// Training settings shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct TrainingFlags {
    /// Starting configuration before the config file and flags apply.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Model image size S.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Train without augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Print losses every this many steps.
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
}

fn resolve_train(ctx: &Ctx, f: &TrainingFlags, row: Option<AblationRow>) -> CmdResult<TrainConfig> {
    let preset = match f.preset {
        Some(p) => p,
        None => match ctx.file.preset.as_deref() {
            None | Some("desk") => Preset::Desk,
            Some("full") => Preset::Full,
            Some(other) => return Err(Failure::new("config", format!("unknown preset {other:?}"))),
        },
    };
    let base = match preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::full(),
    };
    let mut c = config::overlay(&base, ctx.file.train.as_ref(), "train")?;
    let row = match (row, &ctx.file.row) {
        (Some(r), _) => Some(r),
        (None, Some(slug)) => Some(parse_row(slug)?),
        (None, None) => None,
    };
    if let Some(r) = row {
        c.model = c.model.with_row(r);
    }
    if let Some(s) = f.image_size {
        // keep attention at a quarter of the image side
        c.model.image_size = s;
        c.model.sa_resolution = (s / 4).max(4);
    }
    if let Some(b) = f.base_channels {
        c.model.base_channels = b;
    }
    c.steps = f.steps.unwrap_or(c.steps);
    c.batch = f.batch.unwrap_or(c.batch);
    c.checkpoint_every = f.checkpoint_every.unwrap_or(c.checkpoint_every);
    c.eval_every = f.eval_every.unwrap_or(c.eval_every);
    if f.no_augment {
        c.augment = None;
    }
    if ctx.cli.seed.is_some() || ctx.file.seed.is_some() {
        c.seed = ctx.seed();
    }
    c.validate()?;
    Ok(c)
}

fn progress_printer(total: u64, every: u64) -> impl FnMut(&StepRecord) {
    let start = std::time::Instant::now();
    move |r: &StepRecord| {
        if every > 0 && (r.step % every == 0 || r.step == total) {
            let acc = r.age_val_acc.map(|a| format!(" age_val_acc {a:.3}")).unwrap_or_default();
            eprintln!(
                "step {}/{total} [{:.0}s] recon {:.5} loss_eg {:.3} loss_did {:.4} loss_dimg {:.4} loss_dage {:.4}{acc}",
                r.step,
                start.elapsed().as_secs_f64(),
                r.bundle.component(bapgan_core::objectives::RECON),
                r.bundle.loss_eg,
                r.bundle.loss_did,
                r.bundle.loss_dimg,
                r.bundle.loss_dage,
            );
        }
    }
}

fn run_training(config: &TrainConfig, dataset: &Path, out: &Path, resume: Option<&Path>, log_every: u64) -> CmdResult<PathBuf> {
    let k = config.model.age_bins;
    let s = config.model.image_size;
    let train_data = load_split(dataset, SplitSel::Train, s, k)?;
    let val = load_split(dataset, SplitSel::Val, s, k).ok();
    let output = RunOutput::new(out);
    let resume_state = match resume {
        Some(dir) => Some(load_checkpoint(dir)?.0),
        None => None,
    };
    write_text(
        &out.join("train_config.json"),
        &serde_json::to_string_pretty(config).expect("config serializes"),
    )?;
    let mut printer = progress_printer(config.steps, log_every);
    train(config, &train_data, val.as_ref(), Some(&output), resume_state, &mut printer)?;
    Ok(output.final_checkpoint())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (with manifest.csv) or manifest file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Ablation row; sets the D_age / LS / SA flags.
    #[arg(long, value_enum)]
    pub row: Option<RowArg>,
    /// Continue from a checkpoint directory (its configuration is reused;
    /// `--steps` may extend it).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainingFlags,
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> CmdResult {
    let config = match &a.resume {
        Some(dir) => {
            let (_, mut c) = load_checkpoint(dir)?;
            c.steps = a.flags.steps.unwrap_or(c.steps);
            c
        }
        None => resolve_train(ctx, &a.flags, a.row.map(Into::into))?,
    };
    let out = ctx.out_dir()?.to_path_buf();
    let last = run_training(&config, &a.dataset, &out, a.resume.as_deref(), a.flags.log_every)?;
    println!("final checkpoint: {}", last.display());
    Ok(())
}

// ---- ablation ----

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Split whose images and reconstructions enter the FID.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitSel,
    /// Feature extractor: desk or inception.
    #[arg(long, default_value = "desk")]
    pub extractor: String,
    /// Keep rows whose final checkpoint already exists instead of retraining.
    #[arg(long)]
    pub reuse: bool,
    #[command(flatten)]
    pub flags: TrainingFlags,
}

fn ablate(ctx: &Ctx, a: &AblateArgs) -> CmdResult {
    let extractor = Extractor::parse(&a.extractor)?;
    let out = ctx.out_dir()?.to_path_buf();
    let mut checkpoints = Vec::new();
    let mut size_k = None;
    for row in AblationRow::ALL {
        let config = resolve_train(ctx, &a.flags, Some(row))?;
        size_k = Some((config.model.image_size, config.model.age_bins));
        let dir = out.join(row.slug());
        let fin = RunOutput::new(&dir).final_checkpoint();
        if a.reuse && fin.join("manifest.json").is_file() {
            eprintln!("{}: reusing {}", row.label(), fin.display());
        } else {
            eprintln!("{}: training {} steps", row.label(), config.steps);
            run_training(&config, &a.dataset, &dir, None, a.flags.log_every)?;
        }
        checkpoints.push((row, fin));
    }
    let (s, k) = size_k.expect("four rows");
    let data = load_split(&a.dataset, a.split, s, k)?;
    let what = format!("{} split, {} images", a.split.name(), data.len());
    let report = ablation_report(&data, &checkpoints, &extractor, &what)?;
    write_text(&out.join("ablation.csv"), &report.to_csv())?;
    write_text(&out.join("ablation.txt"), &report.to_pretty())?;
    print!("{}", report.to_pretty());
    Ok(())
}

// ---- FID ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Against {
    /// Age-invariant reconstructions of the same images.
    Recon,
    /// Uniform-noise images.
    Noise,
    /// The images themselves (sanity check; 0).
    Real,
}

#[derive(Debug, Args)]
pub struct FidArgs {
    /// Dataset directory or manifest.
    #[arg(long, required_unless_present = "features_a")]
    pub dataset: Option<PathBuf>,
    /// Checkpoint directory, needed for `--against recon`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitSel,
    #[arg(long, value_enum, default_value = "recon")]
    pub against: Against,
    #[arg(long, default_value = "desk")]
    pub extractor: String,
    /// Image size used when no checkpoint fixes it.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Precomputed feature CSV (one row per image), e.g. Inception pool
    /// features computed elsewhere.
    #[arg(long, requires = "features_b", conflicts_with = "dataset")]
    pub features_a: Option<PathBuf>,
    #[arg(long, requires = "features_a")]
    pub features_b: Option<PathBuf>,
}

fn read_features(path: &Path) -> CmdResult<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Failure::new("ingestion", format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Failure::new("ingestion", format!("{} line {}: {e}", path.display(), i + 1)))?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            // a header line
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Failure::new("ingestion", format!("{} line {}: {e}", path.display(), i + 1)));
            }
        }
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != rows[0].len()) {
        return Err(Failure::new(
            "ingestion",
            format!("{}: row {} has {} features, expected {}", path.display(), bad + 1, rows[bad].len(), rows[0].len()),
        ));
    }
    Ok(rows)
}

fn fid(ctx: &Ctx, a: &FidArgs) -> CmdResult {
    let extractor = Extractor::parse(&a.extractor)?;
    let (fa, fb, reference, comparison, split) = if let (Some(pa), Some(pb)) = (&a.features_a, &a.features_b) {
        (
            read_features(pa)?,
            read_features(pb)?,
            pa.display().to_string(),
            pb.display().to_string(),
            "-".to_string(),
        )
    } else {
        let dataset = a.dataset.as_ref().expect("clap requires dataset");
        let params = match &a.checkpoint {
            Some(c) => Some(load_model(c)?),
            None => None,
        };
        let (s, k) = params
            .as_ref()
            .map(|p| (p.config.image_size, p.config.age_bins))
            .unwrap_or((a.size, 5));
        let data = load_split(dataset, a.split, s, k)?;
        let other = match a.against {
            Against::Recon => {
                let p = params.as_ref().ok_or_else(|| Failure::usage("--against recon needs --checkpoint"))?;
                age_invariant_reconstruct(p, &data.images, &data.bins)?
            }
            Against::Noise => uniform_noise_images(data.len(), s, ctx.seed()),
            Against::Real => data.images.clone(),
        };
        (
            extract_features(&data.images, s, &extractor)?,
            extract_features(&other, s, &extractor)?,
            "real".to_string(),
            format!("{:?}", a.against).to_lowercase(),
            a.split.name().to_string(),
        )
    };
    let value = frechet_distance(&FeatureStats::from_features(&fa)?, &FeatureStats::from_features(&fb)?)?;
    let out = ctx.out("fid.csv");
    ctx.out_dir()?;
    let mut text = String::from("reference,comparison,extractor,split,n_reference,n_comparison,fid\n");
    text.push_str(&format!(
        "{reference},{comparison},{},{split},{},{},{value:.6}\n",
        a.extractor,
        fa.len(),
        fb.len()
    ));
    write_text(&out, &text)?;
    println!("{value:.6}");
    Ok(())
}

// ---- t-SNE ----

#[derive(Debug, Args)]
pub struct TsneArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitSel,
    /// Real images per age bin.
    #[arg(long)]
    pub per_bin: Option<usize>,
    /// CAAE checkpoint; its reconstructions join the embedding.
    #[arg(long)]
    pub caae: Option<PathBuf>,
    /// BAPGAN checkpoint; its reconstructions join the embedding.
    #[arg(long)]
    pub bapgan: Option<PathBuf>,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Image size when no checkpoint is given.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Side of the scatter PNG in pixels.
    #[arg(long, default_value_t = 800)]
    pub png_size: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TsneSection {
    per_bin: usize,
    perplexity: f64,
    steps: usize,
}

fn tsne(ctx: &Ctx, a: &TsneArgs) -> CmdResult {
    let defaults = TsneSection {
        per_bin: 42,
        perplexity: 50.0,
        steps: 500,
    };
    let mut s: TsneSection = config::overlay(&defaults, ctx.file.tsne.as_ref(), "tsne")?;
    s.per_bin = a.per_bin.unwrap_or(s.per_bin);
    s.perplexity = a.perplexity.unwrap_or(s.perplexity);
    s.steps = a.steps.unwrap_or(s.steps);

    let models: Vec<(&str, bapgan_core::model::ModelParams<f32>)> = [("caae", &a.caae), ("bapgan", &a.bapgan)]
        .into_iter()
        .filter_map(|(name, p)| p.as_ref().map(|p| (name, p)))
        .map(|(name, p)| Ok((name, load_model(p)?)))
        .collect::<CmdResult<_>>()?;
    let (size, k) = models
        .first()
        .map(|(_, p)| (p.config.image_size, p.config.age_bins))
        .unwrap_or((a.size, 5));
    let data = load_split(&a.dataset, a.split, size, k)?;
    let mut chosen = Vec::new();
    for bin in 0..k {
        let idx = data.indices_in_bin(bin);
        if idx.len() < s.per_bin {
            return Err(Failure::new(
                "config",
                format!(
                    "bin {bin} of the {} split has {} images, {} requested; use --split all or a smaller --per-bin",
                    a.split.name(),
                    idx.len(),
                    s.per_bin
                ),
            ));
        }
        chosen.extend_from_slice(&idx[..s.per_bin]);
    }
    let images: Vec<Vec<f32>> = chosen.iter().map(|&i| data.images[i].clone()).collect();
    let bins: Vec<usize> = chosen.iter().map(|&i| data.bins[i]).collect();
    let mut sets = vec![("real", images.clone())];
    for (name, p) in &models {
        sets.push((name, age_invariant_reconstruct(p, &images, &bins)?));
    }
    // pixels rescaled to [0, 1]
    let x: Vec<Vec<f64>> = sets
        .iter()
        .flat_map(|(_, imgs)| imgs.iter().map(|im| im.iter().map(|&v| (v as f64 + 1.0) / 2.0).collect()))
        .collect();
    let cfg = TsneConfig {
        perplexity: s.perplexity,
        steps: s.steps,
        seed: ctx.seed(),
        ..TsneConfig::default()
    };
    let emb = tsne_embed(&x, &cfg)?;
    let mut points = Vec::with_capacity(x.len());
    for (si, (name, _)) in sets.iter().enumerate() {
        for (j, &bin) in bins.iter().enumerate() {
            let p = emb.points[si * bins.len() + j];
            points.push(TsnePoint {
                index: chosen[j],
                age_bin: bin,
                source: name.to_string(),
                x: p[0],
                y: p[1],
            });
        }
    }
    ctx.out_dir()?;
    let csv = ctx.out("tsne.csv");
    let png = ctx.out("tsne.png");
    write_tsne_csv(&csv, &points)?;
    render_tsne_png(&png, &points, a.png_size)?;
    println!("{} points -> {} and {}", points.len(), csv.display(), png.display());
    Ok(())
}

// ---- VTT service ----

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
    /// Session logs and trial images (default: `<out>/vtt`).
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Datasets as `<root>/<dataset_tag>/manifest.csv`.
    #[arg(long)]
    pub dataset_root: PathBuf,
    /// Checkpoints as `<root>/<dataset_tag>/<model_tag>` or `<root>/<model_tag>`.
    #[arg(long)]
    pub checkpoint_root: PathBuf,
    /// Held-out split the trials draw from.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitSel,
}

fn serve(ctx: &Ctx, a: &ServeArgs) -> CmdResult {
    let split = match a.split {
        SplitSel::Train => Split::Train,
        SplitSel::Val => Split::Val,
        SplitSel::Test => Split::Test,
        SplitSel::All => return Err(Failure::usage("the test service needs a held-out split, not all")),
    };
    let root = a.data_root.clone().unwrap_or_else(|| ctx.out("vtt"));
    let store = SessionStore::open(&root)?;
    eprintln!("{} sessions restored from {}", store.session_ids().len(), root.display());
    let state = AppState::new(
        store,
        DiskSource {
            dataset_root: a.dataset_root.clone(),
            checkpoint_root: a.checkpoint_root.clone(),
            split,
        },
    );
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::new("service", e.to_string()))?;
    rt.block_on(bapgan_vtt::serve(a.addr, state))
        .map_err(|e| Failure::new("service", format!("{}: {e}", a.addr)))
}

// ---- progression ----

#[derive(Debug, Args)]
pub struct ProgressArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Shift in years (negative regresses); must be whole bins.
    #[arg(long, allow_hyphen_values = true)]
    pub delta: i32,
    /// Source age bin of the inputs.
    #[arg(long)]
    pub source_bin: usize,
    /// Input images (PNG); alternatively use `--dataset`.
    #[arg(long, conflicts_with = "dataset")]
    pub image: Vec<PathBuf>,
    /// Dataset whose images in `--source-bin` are shifted.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitSel,
    /// At most this many dataset images.
    #[arg(long, default_value_t = 20)]
    pub limit: usize,
}

fn progress(ctx: &Ctx, a: &ProgressArgs) -> CmdResult {
    let params = load_model(&a.checkpoint)?;
    let (s, k) = (params.config.image_size, params.config.age_bins);
    let target = target_bin(a.source_bin, a.delta, k)?;
    let (names, images): (Vec<String>, Vec<Vec<f32>>) = if let Some(d) = &a.dataset {
        let data = load_split(d, a.split, s, k)?;
        data.indices_in_bin(a.source_bin)
            .into_iter()
            .take(a.limit)
            .map(|i| (data.paths[i].clone(), data.images[i].clone()))
            .unzip()
    } else {
        a.image
            .iter()
            .map(|p| {
                let (w, h, raw) = load_gray(p)?;
                Ok((p.display().to_string(), preprocess(&raw, w, h, s)?))
            })
            .collect::<Result<Vec<_>, bapgan_core::Error>>()?
            .into_iter()
            .unzip()
    };
    if images.is_empty() {
        return Err(Failure::usage("no input images (give --image or --dataset with images in --source-bin)"));
    }
    let outputs = progress_image(&params, &images, &vec![a.source_bin; images.len()], a.delta)?;
    let dir = ctx.out("progress");
    std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    let mut csv = String::from("index,image,source_bin,target_bin,gap_source_px,gap_output_px\n");
    let (mut g_in, mut g_out) = (0.0, 0.0);
    for (i, (src, dst)) in images.iter().zip(&outputs).enumerate() {
        save_png(&dir.join(format!("{i:04}_source.png")), src, s)?;
        save_png(&dir.join(format!("{i:04}_output.png")), dst, s)?;
        let (a_px, b_px) = (measure_gap_width(src, s), measure_gap_width(dst, s));
        g_in += a_px as f64;
        g_out += b_px as f64;
        csv.push_str(&format!("{i},{},{},{target},{a_px},{b_px}\n", names[i], a.source_bin));
    }
    write_text(&ctx.out("progress.csv"), &csv)?;
    let n = images.len() as f64;
    println!(
        "{} images, bin {} -> {target}: mean gap {:.2} px -> {:.2} px",
        images.len(),
        a.source_bin,
        g_in / n,
        g_out / n
    );
    Ok(())
}
