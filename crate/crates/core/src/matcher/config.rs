use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::MatcherError;
use crate::epipolar::BandSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Element-wise sum of the upsampled and lateral maps, then a 3x3 conv.
    Add,
    /// Channel concatenation followed by a 3x3 conv.
    ConcatConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatcherConfig {
    /// Patch size in pixels.
    pub p: usize,
    pub r_c: usize,
    pub r_f: usize,
    pub d_c: usize,
    pub d_f: usize,
    /// Number of (self, masked cross) layer pairs in the coarse transformer.
    pub n_c: usize,
    pub n_h: usize,
    pub tau: f64,
    pub delta_c: f64,
    /// Fine window side, odd.
    pub w: usize,
    pub gamma: f64,
    pub n_m: usize,
    pub fusion: Fusion,
    /// Encoder pyramid widths, finest first.
    pub enc_channels: [usize; 3],
    /// Decoder width.
    pub fpn_dim: usize,
    pub lora: LoraConfig,
    pub init_seed: u64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            p: 64,
            r_c: 4,
            r_f: 2,
            d_c: 32,
            d_f: 32,
            n_c: 4,
            n_h: 4,
            tau: 0.1,
            delta_c: 0.3,
            w: 5,
            gamma: 0.4,
            n_m: 1,
            fusion: Fusion::ConcatConv,
            enc_channels: [16, 32, 64],
            fpn_dim: 32,
            lora: LoraConfig::default(),
            init_seed: 0,
        }
    }
}

fn bad(field: &str, msg: impl Into<String>) -> MatcherError {
    MatcherError::Config { field: field.to_string(), msg: msg.into() }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<(), MatcherError> {
        if self.r_c != 4 && self.r_c != 8 {
            return Err(bad("r_c", format!("must be 4 or 8, got {}", self.r_c)));
        }
        if self.r_f != 2 {
            return Err(bad("r_f", format!("the toy decoder produces fine maps at 1/2, got {}", self.r_f)));
        }
        if self.p == 0 || self.p % 8 != 0 {
            return Err(bad("p", format!("must be a positive multiple of 8, got {}", self.p)));
        }
        if self.p % self.r_c != 0 {
            return Err(bad("p", format!("{} is not divisible by r_c = {}", self.p, self.r_c)));
        }
        if self.w % 2 == 0 || self.w == 0 {
            return Err(bad("w", format!("must be odd, got {}", self.w)));
        }
        if !(self.delta_c > 0.0 && self.delta_c < 1.0) {
            return Err(bad("delta_c", format!("must be in (0, 1), got {}", self.delta_c)));
        }
        if !(self.tau > 0.0) {
            return Err(bad("tau", format!("must be positive, got {}", self.tau)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(bad("gamma", format!("must be in (0, 1], got {}", self.gamma)));
        }
        if self.n_c == 0 {
            return Err(bad("n_c", "must be at least 1"));
        }
        if self.n_h == 0 || self.d_c % self.n_h != 0 {
            return Err(bad("n_h", format!("must divide d_c = {}", self.d_c)));
        }
        if self.d_f % self.n_h != 0 {
            return Err(bad("n_h", format!("must divide d_f = {}", self.d_f)));
        }
        if self.d_c == 0 || self.d_c % 4 != 0 {
            return Err(bad("d_c", "must be a positive multiple of 4 for the positional encoding"));
        }
        if self.d_f == 0 {
            return Err(bad("d_f", "must be positive"));
        }
        if self.enc_channels.iter().any(|&c| c == 0) || self.fpn_dim == 0 {
            return Err(bad("enc_channels", "widths must be positive"));
        }
        if self.lora.rank == 0 {
            return Err(bad("lora.rank", "must be at least 1"));
        }
        let fine = self.p / self.r_f;
        if self.w > fine {
            return Err(bad("w", format!("window {} exceeds the fine grid {}", self.w, fine)));
        }
        Ok(())
    }

    pub fn coarse_side(&self) -> usize {
        self.p / self.r_c
    }

    pub fn fine_side(&self) -> usize {
        self.p / self.r_f
    }

    pub fn schedule(&self) -> BandSchedule {
        BandSchedule { p: self.p as f64, gamma: self.gamma, n_c: self.n_c, n_m: self.n_m }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
