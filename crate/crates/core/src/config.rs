//! Model configuration and the four ablation rows.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture and modification flags shared by every network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Spatial size `S` of the square grayscale input.
    pub image_size: usize,
    /// Dimension of the identity code `z`.
    pub latent_dim: usize,
    /// Number of age bins `K`.
    pub age_bins: usize,
    /// Channel count of the first convolution; deeper stages double it.
    pub base_channels: usize,
    /// Side length of the feature map that receives a self-attention block
    /// in the generator and in the discriminator trunk.
    pub sa_resolution: usize,
    /// Query/key channel reduction factor inside self-attention.
    pub sa_reduction: usize,
    pub use_dage: bool,
    pub use_ls: bool,
    pub use_sa: bool,
    /// Spectral normalization of discriminator weights. Travels with the
    /// self-attention modification by default (see [`ModelConfig::with_row`]).
    pub spectral_norm: bool,
    /// Give the age classifier its own convolutional trunk instead of
    /// sharing the image discriminator's.
    #[serde(default)]
    pub separate_age_trunk: bool,
    /// Age-label smoothing mass assigned to each neighbouring bin.
    pub smoothing: f64,
}

impl ModelConfig {
    /// 128×128 configuration with every modification enabled.
    pub fn full() -> Self {
        Self {
            image_size: 128,
            latent_dim: 50,
            age_bins: 5,
            base_channels: 64,
            sa_resolution: 32,
            sa_reduction: 8,
            use_dage: true,
            use_ls: true,
            use_sa: true,
            spectral_norm: true,
            separate_age_trunk: false,
            smoothing: 0.2,
        }
    }

    /// 64×64 configuration sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            base_channels: 16,
            sa_resolution: 16,
            ..Self::full()
        }
    }

    pub fn with_row(mut self, row: AblationRow) -> Self {
        let (dage, ls, sa) = row.flags();
        self.use_dage = dage;
        self.use_ls = ls;
        self.use_sa = sa;
        self.spectral_norm = sa;
        self
    }

    pub fn row(&self) -> Option<AblationRow> {
        AblationRow::ALL
            .into_iter()
            .find(|r| r.flags() == (self.use_dage, self.use_ls, self.use_sa))
    }

    /// Number of stride-2 stages in the encoder (and transposed stages in
    /// the generator): `S → 4`.
    pub fn encoder_stages(&self) -> usize {
        log2(self.image_size) - 2
    }

    /// Number of stride-2 stages in the discriminator trunk: `S → 8`, at
    /// least one.
    pub fn trunk_stages(&self) -> usize {
        (log2(self.image_size) as isize - 3).max(1) as usize
    }

    pub fn trunk_resolution(&self) -> usize {
        self.image_size >> self.trunk_stages()
    }

    pub fn trunk_channels(&self) -> usize {
        self.base_channels << (self.trunk_stages() - 1)
    }

    /// Channel count of the generator's 4×4 seed map.
    pub fn generator_top_channels(&self) -> usize {
        self.base_channels << (self.encoder_stages() - 1)
    }

    /// Channels of the generator feature map at side `res` (4 ≤ res < S).
    pub fn generator_channels_at(&self, res: usize) -> usize {
        let j = log2(res) - 2;
        self.generator_top_channels() >> j
    }

    pub fn trunk_channels_at(&self, res: usize) -> usize {
        let stage = log2(self.image_size) - log2(res) - 1;
        self.base_channels << stage
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if !s.is_power_of_two() || s < 8 {
            return Err(Error::Config(format!("image size {s} must be a power of two >= 8")));
        }
        if s > 128 {
            return Err(Error::Config(format!("image size {s} exceeds 128")));
        }
        if self.latent_dim == 0 || self.base_channels == 0 {
            return Err(Error::Config("latent dimension and base channels must be positive".into()));
        }
        if self.age_bins < 2 {
            return Err(Error::Config(format!("need at least 2 age bins, got {}", self.age_bins)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing {} outside [0, 1)", self.smoothing)));
        }
        if self.use_ls && self.age_bins > 2 && 1.0 - 2.0 * self.smoothing < 0.0 {
            return Err(Error::Config(format!(
                "smoothing {} leaves negative mass on interior bins",
                self.smoothing
            )));
        }
        if self.use_sa {
            let r = self.sa_resolution;
            if !r.is_power_of_two() || r < 4 || r >= s {
                return Err(Error::Config(format!(
                    "self-attention resolution {r} must be a power of two in [4, {s})"
                )));
            }
            if r < self.trunk_resolution() || r >= s {
                return Err(Error::Config(format!(
                    "self-attention resolution {r} does not occur in the discriminator trunk"
                )));
            }
            if self.sa_reduction == 0 {
                return Err(Error::Config("self-attention reduction must be positive".into()));
            }
            for (net, c) in [
                ("generator", self.generator_channels_at(r)),
                ("discriminator", self.trunk_channels_at(r)),
            ] {
                if c % self.sa_reduction != 0 || c < self.sa_reduction {
                    return Err(Error::Config(format!(
                        "{net} has {c} channels at {r}x{r}, not divisible by reduction {}",
                        self.sa_reduction
                    )));
                }
            }
        }
        Ok(())
    }
}

fn log2(n: usize) -> usize {
    n.trailing_zeros() as usize
}

/// The four rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationRow {
    Caae,
    DageLs,
    Sa,
    Bapgan,
}

impl AblationRow {
    pub const ALL: [AblationRow; 4] = [AblationRow::Caae, AblationRow::DageLs, AblationRow::Sa, AblationRow::Bapgan];

    /// `(use_dage, use_ls, use_sa)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            AblationRow::Caae => (false, false, false),
            AblationRow::DageLs => (true, true, false),
            AblationRow::Sa => (false, false, true),
            AblationRow::Bapgan => (true, true, true),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::Caae => "CAAE",
            AblationRow::DageLs => "+ D_age, LS",
            AblationRow::Sa => "+ SA",
            AblationRow::Bapgan => "BAPGAN",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            AblationRow::Caae => "caae",
            AblationRow::DageLs => "dage_ls",
            AblationRow::Sa => "sa",
            AblationRow::Bapgan => "bapgan",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_cover_the_four_flag_combinations() {
        let flags: Vec<_> = AblationRow::ALL.iter().map(|r| r.flags()).collect();
        assert_eq!(
            flags,
            vec![(false, false, false), (true, true, false), (false, false, true), (true, true, true)]
        );
        for row in AblationRow::ALL {
            assert_eq!(ModelConfig::desk().with_row(row).row(), Some(row));
        }
    }

    #[test]
    fn stage_counts_follow_resolution() {
        let p = ModelConfig::full();
        assert_eq!((p.encoder_stages(), p.trunk_stages()), (5, 4));
        assert_eq!(p.generator_top_channels(), 1024);
        assert_eq!(p.generator_channels_at(32), 128);
        assert_eq!(p.trunk_channels_at(32), 128);
        let d = ModelConfig::desk();
        assert_eq!((d.encoder_stages(), d.trunk_stages(), d.trunk_resolution()), (4, 3, 8));
        p.validate().unwrap();
        d.validate().unwrap();
    }

    #[test]
    fn rejects_non_power_of_two_size() {
        let c = ModelConfig {
            image_size: 48,
            ..ModelConfig::desk()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_indivisible_attention_channels() {
        let c = ModelConfig {
            base_channels: 3,
            ..ModelConfig::desk()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
