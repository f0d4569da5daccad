//! Closed-form parameter and cost accounting for the connection schemes.

use serde::{Deserialize, Serialize};

use crate::connections::Toggles;
use crate::error::{Error, Result};
use crate::model::{param_layout, ModelConfig, ParamSpec, Scheme};

/// Learnable scalars in one static Frac-Connection: `m(2m+1)`.
pub fn count_sfc(m: usize) -> Result<u64> {
    if m == 0 {
        return Err(Error::config("frac-rate must be at least 1"));
    }
    let m = m as u64;
    Ok(m * (2 * m + 1))
}

/// Learnable scalars in one dynamic Frac-Connection with RMSNorm:
/// `d/m + (d/m)(2m+1) + m(2m+1) + 2`.
pub fn count_dfc(d: usize, m: usize) -> Result<u64> {
    if m == 0 || !d.is_multiple_of(m) {
        return Err(Error::config(format!("frac-rate {m} must divide d_model {d}")));
    }
    let (c, m) = ((d / m) as u64, m as u64);
    Ok(c + c * (2 * m + 1) + m * (2 * m + 1) + 2)
}

/// Extra parameters of a model with two connections per layer.
pub fn p_extra(per_connection: u64, n_layers: usize) -> u64 {
    per_connection * 2 * n_layers as u64
}

/// `100 · p_extra / base_total`, in percent.
pub fn delta_rate(p_extra: u64, base_total: f64) -> Result<f64> {
    if !(base_total > 0.0) {
        return Err(Error::config(format!("base parameter total must be positive, got {base_total}")));
    }
    Ok(100.0 * p_extra as f64 / base_total)
}

/// Rounds to `digits` significant digits.
pub fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(digits - 1 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}

/// Connection scalars obtained by enumerating the model's parameter layout.
pub fn structural_extra(cfg: &ModelConfig) -> u64 {
    sum_numel(param_layout(cfg).iter().filter(|p| p.kind.is_connection()))
}

/// All parameters of the model, enumerated from its layout.
pub fn structural_total(cfg: &ModelConfig) -> u64 {
    sum_numel(param_layout(cfg).iter())
}

fn sum_numel<'a>(specs: impl Iterator<Item = &'a ParamSpec>) -> u64 {
    specs.map(|p| p.numel() as u64).sum()
}

/// One row of the parameter accounting CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub scheme: Scheme,
    pub m_or_n: usize,
    pub d: usize,
    #[serde(rename = "L")]
    pub n_layers: usize,
    pub per_fc: u64,
    pub p_extra: u64,
    /// Parameters of the same model wired with plain residuals.
    pub base_total: u64,
    pub delta_pct: f64,
}

impl ParamBreakdown {
    /// Uses the closed forms for SFC and for DFC with every toggle on, and
    /// the enumerated layout for everything else.
    pub fn of(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let per_fc = match cfg.scheme {
            Scheme::Residual => 0,
            Scheme::Sfc => count_sfc(cfg.rate)?,
            Scheme::Dfc if cfg.toggles == Toggles::default() => count_dfc(cfg.d_model, cfg.rate)?,
            _ if cfg.n_layers == 0 => 0,
            _ => structural_extra(cfg) / (2 * cfg.n_layers as u64),
        };
        let extra = p_extra(per_fc, cfg.n_layers);
        let base_total = structural_total(&cfg.with_scheme(Scheme::Residual, 1));
        Ok(Self {
            scheme: cfg.scheme,
            m_or_n: cfg.rate,
            d: cfg.d_model,
            n_layers: cfg.n_layers,
            per_fc,
            p_extra: extra,
            base_total,
            delta_pct: delta_rate(extra, base_total as f64)?,
        })
    }
}

/// Whether a cost count treats a multiply-add as one or two operations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    #[default]
    Mac,
    Flop,
}

/// Per-token cost of every Frac-Connection in a model of `n_layers` layers.
///
/// One connection costs the coefficient projection `d(2m+1)` and the mixing
/// `2md` as multiply-adds, plus `2d` for the depth combine and `2d/m` for the
/// normalization. [`Convention::Flop`] counts each multiply-add twice.
pub fn count_fc_flops(d: usize, m: usize, n_layers: usize, convention: Convention) -> Result<u64> {
    if m == 0 || !d.is_multiple_of(m) {
        return Err(Error::config(format!("frac-rate {m} must divide d_model {d}")));
    }
    let (d, m) = (d as u64, m as u64);
    let macs = d * (2 * m + 1) + 2 * m * d;
    let other = 2 * d + 2 * d / m;
    let per_fc = match convention {
        Convention::Mac => macs + other,
        Convention::Flop => 2 * macs + other,
    };
    Ok(per_fc * 2 * n_layers as u64)
}

/// Q, K, V and O projections of one layer: `4d²` multiply-adds per token.
pub fn attention_projection_cost(d: usize) -> u64 {
    4 * (d as u64).pow(2)
}

/// Two-matrix FFN of one layer: `2·d·d_ffn` multiply-adds per token.
pub fn ffn_cost(d: usize, d_ffn: usize) -> u64 {
    2 * d as u64 * d_ffn as u64
}

/// FC cost of one layer (two connections) over a per-layer reference cost.
pub fn fc_overhead_ratio(d: usize, m: usize, reference_per_layer: u64) -> Result<f64> {
    Ok(count_fc_flops(d, m, 1, Convention::Mac)? as f64 / reference_per_layer as f64)
}
