//! Decoder-only language model whose attention and FFN sublayers are wired
//! through a selectable connection scheme.

mod checkpoint;
mod forward;
mod params;

#[cfg(test)]
mod tests;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::connections::Toggles;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{attention, ffn, lm_loss, ForwardOptions, ForwardOutput, HiddenTaps, Model};
pub use params::{param_layout, Param, ParamKind, ParamSpec, ParamStore, INIT_STD};

/// Residual-stream wiring of every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Residual,
    /// Static Frac-Connections.
    Sfc,
    /// Dynamic Frac-Connections.
    Dfc,
    /// Static Hyper-Connections.
    Shc,
    /// Dynamic Hyper-Connections.
    Dhc,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::Residual, Scheme::Sfc, Scheme::Dfc, Scheme::Shc, Scheme::Dhc];

    pub fn is_frac(self) -> bool {
        matches!(self, Scheme::Sfc | Scheme::Dfc)
    }

    pub fn is_hyper(self) -> bool {
        matches!(self, Scheme::Shc | Scheme::Dhc)
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, Scheme::Dfc | Scheme::Dhc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Residual => "residual",
            Scheme::Sfc => "sfc",
            Scheme::Dfc => "dfc",
            Scheme::Shc => "shc",
            Scheme::Dhc => "dhc",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown scheme {s:?}; expected one of residual, sfc, dfc, shc, dhc"
                ))
            })
    }
}

fn default_rate() -> usize {
    1
}

/// Shape and wiring of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub scheme: Scheme,
    /// Frac-rate `m` for FC schemes, expansion rate `n` for HC schemes.
    /// Ignored by the residual scheme.
    #[serde(default = "default_rate")]
    pub rate: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub toggles: Toggles,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return bad(format!(
                "vocab_size, d_model, n_heads and d_ffn must be positive (got {}, {}, {}, {})",
                self.vocab_size, self.d_model, self.n_heads, self.d_ffn
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model={} is not divisible by n_heads={}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return bad(format!(
                "head width {} must be even for rotary embeddings",
                self.d_model / self.n_heads
            ));
        }
        if self.scheme != Scheme::Residual && self.rate == 0 {
            return bad(format!("{} rate must be at least 1", self.scheme));
        }
        if self.scheme.is_frac() && (self.rate > self.d_model || !self.d_model.is_multiple_of(self.rate)) {
            return bad(format!(
                "frac-rate m={} must divide d={}",
                self.rate, self.d_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Same shape with a different wiring.
    pub fn with_scheme(&self, scheme: Scheme, rate: usize) -> Self {
        Self {
            scheme,
            rate,
            ..self.clone()
        }
    }

    /// Label such as `dfc×2`, or `residual`.
    pub fn label(&self) -> String {
        match self.scheme {
            Scheme::Residual => "residual".into(),
            s => format!("{s}×{}", self.rate),
        }
    }
}
