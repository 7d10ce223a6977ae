use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dct::SUPPORTED_BLOCK_SIZES;
use crate::error::{Error, Result};
use crate::nn::{FrequencyMode, LossConfig};

/// Which frequency branch the network carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    /// Context features go straight to the head.
    Baseline,
    /// Learnable frequency encoder feeding the fusion module.
    Fdl,
    /// Only the `k` lowest zigzag components, unit weights.
    TopK(usize),
    /// Every component with unit weight.
    StaticAll,
}

impl Variant {
    pub fn frequency_mode(self) -> Option<FrequencyMode> {
        match self {
            Variant::Baseline => None,
            Variant::Fdl => Some(FrequencyMode::Learnable),
            Variant::TopK(k) => Some(FrequencyMode::TopK(k)),
            Variant::StaticAll => Some(FrequencyMode::StaticAll),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Baseline => f.write_str("baseline"),
            Variant::Fdl => f.write_str("fdl"),
            Variant::TopK(k) => write!(f, "top_k:{k}"),
            Variant::StaticAll => f.write_str("static_all"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "fdl" => Ok(Variant::Fdl),
            "static_all" => Ok(Variant::StaticAll),
            _ => {
                let k = s
                    .strip_prefix("top_k:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "unknown variant `{s}` (expected baseline, fdl, top_k:<k> or static_all)"
                        ))
                    })?;
                Ok(Variant::TopK(k))
            }
        }
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyNetConfig {
    pub input_size: usize,
    pub widths: [usize; 3],
    pub ppm_bins: Vec<usize>,
    pub ppm_channels: usize,
    pub context_channels: usize,
    pub fusion_channels: usize,
    /// DCT block size `N`; the frequency branch uses all `N²` components.
    pub dct_block: usize,
    pub classes: usize,
    pub variant: Variant,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            widths: [16, 32, 64],
            ppm_bins: vec![1, 2, 3, 6],
            ppm_channels: 16,
            context_channels: 64,
            fusion_channels: 64,
            dct_block: 8,
            classes: 4,
            variant: Variant::Fdl,
        }
    }
}

pub const OUTPUT_STRIDE: usize = 8;

impl ToyNetConfig {
    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn components(&self) -> usize {
        self.dct_block * self.dct_block
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / OUTPUT_STRIDE
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(OUTPUT_STRIDE) {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of {OUTPUT_STRIDE}",
                self.input_size
            )));
        }
        if self.widths.contains(&0)
            || self.ppm_channels == 0
            || self.context_channels == 0
            || self.fusion_channels == 0
        {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.ppm_bins.is_empty() || self.ppm_bins.contains(&0) {
            return Err(Error::Config("pyramid pooling needs at least one positive bin".into()));
        }
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::Config(format!("class count {} outside 2..=255", self.classes)));
        }
        if let Some(mode) = self.variant.frequency_mode() {
            if !SUPPORTED_BLOCK_SIZES.contains(&self.dct_block) {
                return Err(Error::Config(format!(
                    "DCT block size {} not in {SUPPORTED_BLOCK_SIZES:?}",
                    self.dct_block
                )));
            }
            let (c, n) = (self.widths[2], self.components());
            if c % n != 0 {
                return Err(Error::Config(format!(
                    "backbone channels C={c} not divisible by n={n} frequency components"
                )));
            }
            if let FrequencyMode::TopK(k) = mode {
                if k == 0 || k > n {
                    return Err(Error::Config(format!("top_k needs 1 ≤ k ≤ {n}, got {k}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub threads: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-3,
            weight_decay: 5e-4,
            momentum: 0.9,
            poly_power: 0.9,
            epochs: 40,
            batch_size: 8,
            seed: 0,
            threads: 1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) || self.poly_power <= 0.0 {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config("epochs, batch size and threads must be at least 1".into()));
        }
        self.loss.validate()
    }
}
