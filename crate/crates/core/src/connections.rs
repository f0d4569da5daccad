//! Residual-stream wiring: Pre-Norm residual, Hyper-Connections (a state of
//! `n` copies of the hidden vector) and Frac-Connections (the hidden vector
//! split into `m` fractions).
//!
//! All schemes share the same two-step interface around a sublayer:
//! [`Connection::width`] turns the stream state into the sublayer input plus a
//! carried residual, and [`Connection::depth`] folds the sublayer output back
//! into the state. Frac- and Hyper-Connections also share one coefficient
//! layout: a per-row output weight `beta` (length `r`) and a mixing matrix of
//! shape `r × c` whose leading columns build the sublayer input and whose
//! trailing columns build the carry. For Frac-Connections `r = m`, `c = 2m`
//! and the columns are `[Y | A]`; for Hyper-Connections `r = n`, `c = 1 + n`
//! and the columns are `[A_m | A_r]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{lit, Array, Scalar, Tape, Var, RMS_EPS};

/// Initial value of the dynamic scale factors.
pub const SCALE_INIT: f64 = 0.01;

/// Feature switches of the dynamic coefficient path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub use_norm: bool,
    pub use_tanh: bool,
    pub use_scale: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_norm: true,
            use_tanh: true,
            use_scale: true,
        }
    }
}

/// The `m × (d/m)` fractions of a hidden vector, batched over tokens:
/// the wrapped variable has shape `[tokens, m, d/m]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FractionState {
    pub var: Var,
    pub frac_rate: usize,
    pub width: usize,
}

impl FractionState {
    /// Scalars carried per token. Always the hidden width `d`.
    pub fn scalars_per_token(&self) -> usize {
        self.frac_rate * self.width
    }
}

fn check_frac_rate(d: usize, m: usize) -> Result<()> {
    if m == 0 || m > d || !d.is_multiple_of(m) {
        return Err(Error::config(format!(
            "frac-rate m={m} must be at least 1 and divide the hidden width d={d}"
        )));
    }
    Ok(())
}

/// Splits `h[tokens, d]` into `m` contiguous fractions per token.
pub fn split_fractions<T: Scalar>(tape: &mut Tape<T>, h: Var, m: usize) -> Result<FractionState> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim(format!("split_fractions: expected [tokens, d], got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    check_frac_rate(d, m)?;
    let var = tape.reshape(h, [n, m, d / m])?;
    Ok(FractionState {
        var,
        frac_rate: m,
        width: d / m,
    })
}

/// Concatenates the fractions back into `[tokens, d]`.
pub fn merge_fractions<T: Scalar>(tape: &mut Tape<T>, state: &FractionState) -> Result<Var> {
    let n = tape.shape(state.var)[0];
    tape.reshape(state.var, [n, state.scalars_per_token()])
}

/// Static Frac-Connection coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticFCParams<T> {
    /// `B`, shape `[m]`.
    pub beta: Array<T>,
    /// `[Y | A]`, shape `[m, 2m]`.
    pub mix: Array<T>,
}

/// Initialization that makes the block a Pre-Norm residual step:
/// `beta = 1`, `mix = [I | I]`.
pub fn fc_init_static<T: Scalar>(m: usize) -> Result<StaticFCParams<T>> {
    if m < 1 {
        return Err(Error::config("frac-rate must be at least 1"));
    }
    let mut mix = Array::zeros([m, 2 * m]);
    for i in 0..m {
        mix.data_mut()[i * 2 * m + i] = T::one();
        mix.data_mut()[i * 2 * m + m + i] = T::one();
    }
    Ok(StaticFCParams {
        beta: Array::ones([m]),
        mix,
    })
}

/// Input-conditioned projections shared by dynamic Frac- and
/// Hyper-Connections. `w` is the row width (`d/m`, or `d` for HC) and `c`
/// the number of mixing columns.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicProjections<T> {
    /// `W_β`, shape `[w]`.
    pub w_beta: Array<T>,
    /// Fused `[W_γ | W_α]` (or `[W_m | W_r]`), shape `[w, c]`.
    pub w_mix: Array<T>,
    pub s_beta: T,
    pub s_alpha: T,
    pub norm_weight: Array<T>,
}

impl<T: Scalar> DynamicProjections<T> {
    /// Zero projections, unit norm weight and scales at [`SCALE_INIT`].
    pub fn init(w: usize, c: usize) -> Self {
        Self {
            w_beta: Array::zeros([w]),
            w_mix: Array::zeros([w, c]),
            s_beta: lit(SCALE_INIT),
            s_alpha: lit(SCALE_INIT),
            norm_weight: Array::ones([w]),
        }
    }

    fn bind(&self, tape: &mut Tape<T>, toggles: Toggles) -> DynamicVars {
        DynamicVars {
            w_beta: tape.param(self.w_beta.clone()),
            w_mix: tape.param(self.w_mix.clone()),
            s_beta: toggles
                .use_scale
                .then(|| tape.param(Array::scalar(self.s_beta))),
            s_mix: toggles
                .use_scale
                .then(|| tape.param(Array::scalar(self.s_alpha))),
            norm: toggles
                .use_norm
                .then(|| tape.param(self.norm_weight.clone())),
            use_tanh: toggles.use_tanh,
        }
    }
}

/// Dynamic Frac-Connection parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicFCParams<T> {
    pub static_part: StaticFCParams<T>,
    pub dynamic: DynamicProjections<T>,
}

impl<T: Scalar> DynamicFCParams<T> {
    pub fn init(d: usize, m: usize) -> Result<Self> {
        check_frac_rate(d, m)?;
        Ok(Self {
            static_part: fc_init_static(m)?,
            dynamic: DynamicProjections::init(d / m, 2 * m),
        })
    }

    /// Puts these parameters on the tape as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape<T>, toggles: Toggles) -> ConnectionVars {
        ConnectionVars {
            beta: tape.param(self.static_part.beta.clone()),
            mix: tape.param(self.static_part.mix.clone()),
            dynamic: Some(self.dynamic.bind(tape, toggles)),
        }
    }
}

impl<T: Scalar> StaticFCParams<T> {
    pub fn bind(&self, tape: &mut Tape<T>) -> ConnectionVars {
        ConnectionVars {
            beta: tape.param(self.beta.clone()),
            mix: tape.param(self.mix.clone()),
            dynamic: None,
        }
    }
}

/// Hyper-Connection coefficients for expansion rate `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams<T> {
    /// `B`, shape `[n]`.
    pub beta: Array<T>,
    /// `A_m`, shape `[n]`.
    pub a_m: Array<T>,
    /// `A_r`, shape `[n, n]`.
    pub a_r: Array<T>,
    /// Row width `d`, mixing columns `1 + n`.
    pub dynamic: Option<DynamicProjections<T>>,
}

impl<T: Scalar> HyperParams<T> {
    /// `B = 1`, `A_m = e_1`, `A_r = I`, with zero dynamic projections of
    /// width `d` when `dynamic` is set.
    pub fn init(n: usize, d: usize, dynamic: bool) -> Result<Self> {
        if n < 1 {
            return Err(Error::config("expansion rate must be at least 1"));
        }
        let mut a_m = Array::zeros([n]);
        a_m.data_mut()[0] = T::one();
        Ok(Self {
            beta: Array::ones([n]),
            a_m,
            a_r: Array::eye(n),
            dynamic: dynamic.then(|| DynamicProjections::init(d, n + 1)),
        })
    }

    /// The `[A_m | A_r]` mixing matrix, shape `[n, 1 + n]`.
    pub fn mix(&self) -> Array<T> {
        let n = self.beta.numel();
        Array::from_fn([n, n + 1], |i| {
            let (row, col) = (i / (n + 1), i % (n + 1));
            if col == 0 {
                self.a_m.data()[row]
            } else {
                self.a_r.data()[row * n + col - 1]
            }
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>, toggles: Toggles) -> ConnectionVars {
        ConnectionVars {
            beta: tape.param(self.beta.clone()),
            mix: tape.param(self.mix()),
            dynamic: self.dynamic.as_ref().map(|p| p.bind(tape, toggles)),
        }
    }
}

/// Dynamic projections on the tape. Scale and norm are absent when switched
/// off.
#[derive(Clone, Copy, Debug)]
pub struct DynamicVars {
    pub w_beta: Var,
    pub w_mix: Var,
    pub s_beta: Option<Var>,
    pub s_mix: Option<Var>,
    pub norm: Option<Var>,
    pub use_tanh: bool,
}

/// One connection's parameters on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ConnectionVars {
    /// Static `B`, shape `[r]`.
    pub beta: Var,
    /// Static mixing matrix, shape `[r, c]`.
    pub mix: Var,
    pub dynamic: Option<DynamicVars>,
}

/// Effective coefficients: `beta` is `[r]` or `[tokens, r]`, `mix` is
/// `[1, r, c]` or `[tokens, r, c]`.
#[derive(Clone, Copy, Debug)]
pub struct Coefficients {
    pub beta: Var,
    pub mix: Var,
}

/// Coefficients for a state `[tokens, r, w]`. With dynamic projections,
/// `beta = s_β·tanh(norm(H)·W_β) + B` and `mix = s_α·tanh(norm(H)·W_mix) + M`
/// per row, where norm, tanh and the scales may be switched off. Without
/// them the static values are returned as is.
pub fn dynamic_coefficients<T: Scalar>(
    tape: &mut Tape<T>,
    state: Var,
    conn: &ConnectionVars,
) -> Result<Coefficients> {
    let shape = tape.shape(state).to_vec();
    let (r, c) = (tape.shape(conn.mix)[0], tape.shape(conn.mix)[1]);
    if shape.len() != 3 || shape[1] != r || tape.shape(conn.beta) != [r] {
        return Err(Error::dim(format!(
            "coefficients: state {shape:?} does not match {r} coefficient rows"
        )));
    }
    let Some(dy) = conn.dynamic else {
        let mix = tape.reshape(conn.mix, [1, r, c])?;
        return Ok(Coefficients {
            beta: conn.beta,
            mix,
        });
    };
    let (tokens, w) = (shape[0], shape[2]);
    if tape.shape(dy.w_beta) != [w] || tape.shape(dy.w_mix) != [w, c] {
        return Err(Error::dim(format!(
            "coefficients: row width {w} does not match projections {:?} and {:?}",
            tape.shape(dy.w_beta),
            tape.shape(dy.w_mix)
        )));
    }
    let normed = match dy.norm {
        Some(weight) => tape.rms_norm(state, weight, RMS_EPS)?,
        None => state,
    };
    let w_beta = tape.reshape(dy.w_beta, [w, 1])?;
    let beta_proj = tape.matmul(normed, w_beta)?;
    let beta_proj = tape.reshape(beta_proj, [tokens, r])?;
    let mix_proj = tape.matmul(normed, dy.w_mix)?;

    let squash = |tape: &mut Tape<T>, x: Var, scale: Option<Var>| -> Result<Var> {
        let x = if dy.use_tanh { tape.tanh(x) } else { x };
        match scale {
            Some(s) => tape.mul(x, s),
            None => Ok(x),
        }
    };
    let beta_dyn = squash(tape, beta_proj, dy.s_beta)?;
    let mix_dyn = squash(tape, mix_proj, dy.s_mix)?;
    Ok(Coefficients {
        beta: tape.add(beta_dyn, conn.beta)?,
        mix: tape.add(mix_dyn, conn.mix)?,
    })
}

/// Residual stream state of each scheme.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    /// `[tokens, d]`.
    Residual(Var),
    /// `[tokens, m, d/m]`.
    Frac(FractionState),
    /// `[tokens, n, d]`.
    Hyper(Var),
}

impl Stream {
    pub fn var(&self) -> Var {
        match self {
            Stream::Residual(v) | Stream::Hyper(v) => *v,
            Stream::Frac(s) => s.var,
        }
    }
}

/// Output of a width connection: the sublayer input, the carried residual
/// (already in stream form) and the output weights for the depth step.
#[derive(Clone, Copy, Debug)]
pub struct Width {
    pub layer_input: Var,
    pub carry: Stream,
    pub beta: Option<Var>,
}

fn mix_rows<T: Scalar>(
    tape: &mut Tape<T>,
    state: Var,
    mix: Var,
    lead: usize,
) -> Result<(Var, Var)> {
    let mixed = tape.bmm_tn(mix, state)?;
    let s = tape.shape(mixed).to_vec();
    let (rows, w) = (s[1], s[2]);
    let head = tape.slice(mixed, 1, 0, lead)?;
    let head = tape.reshape(head, [s[0], lead * w])?;
    let carry = tape.slice(mixed, 1, lead, rows - lead)?;
    Ok((head, carry))
}

/// Frac-Connection width step: `mixed = mixᵀ·H`, the first `m` rows merged
/// are the layer input, the last `m` rows are the carry.
pub fn fc_width<T: Scalar>(
    tape: &mut Tape<T>,
    h: &FractionState,
    coef: Coefficients,
) -> Result<Width> {
    let m = h.frac_rate;
    if tape.shape(coef.mix).last() != Some(&(2 * m)) {
        return Err(Error::dim(format!(
            "fc_width: mix {:?} does not have 2m={} columns",
            tape.shape(coef.mix),
            2 * m
        )));
    }
    let (layer_input, carry) = mix_rows(tape, h.var, coef.mix, m)?;
    Ok(Width {
        layer_input,
        carry: Stream::Frac(FractionState {
            var: carry,
            frac_rate: m,
            width: h.width,
        }),
        beta: Some(coef.beta),
    })
}

/// Frac-Connection depth step: fraction `i` of the layer output is weighted
/// by `beta_i` and added to carry row `i`.
pub fn fc_depth<T: Scalar>(
    tape: &mut Tape<T>,
    layer_out: Var,
    beta: Var,
    carry: &FractionState,
) -> Result<FractionState> {
    let shape = tape.shape(layer_out).to_vec();
    if shape.len() != 2 || shape[1] != carry.scalars_per_token() {
        return Err(Error::dim(format!(
            "fc_depth: layer output {shape:?} does not match the carried state"
        )));
    }
    let out = tape.reshape(layer_out, [shape[0], carry.frac_rate, carry.width])?;
    let weighted = tape.scale_rows(out, beta)?;
    let var = tape.add(weighted, carry.var)?;
    Ok(FractionState { var, ..*carry })
}

/// `n` copies of each token's hidden vector, `[tokens, n, d]`.
pub fn hc_expand<T: Scalar>(tape: &mut Tape<T>, h: Var, n: usize) -> Result<Var> {
    if n < 1 {
        return Err(Error::config("expansion rate must be at least 1"));
    }
    tape.repeat_rows(h, n)
}

/// Hyper-Connection width step: `h_0 = A_mᵀ H`, carry `A_rᵀ H`.
pub fn hc_width<T: Scalar>(tape: &mut Tape<T>, h: Var, coef: Coefficients) -> Result<Width> {
    let n = tape.shape(h).get(1).copied().unwrap_or(0);
    if tape.shape(coef.mix).last() != Some(&(n + 1)) {
        return Err(Error::dim(format!(
            "hc_width: mix {:?} does not have n+1={} columns",
            tape.shape(coef.mix),
            n + 1
        )));
    }
    let (layer_input, carry) = mix_rows(tape, h, coef.mix, 1)?;
    Ok(Width {
        layer_input,
        carry: Stream::Hyper(carry),
        beta: Some(coef.beta),
    })
}

/// Hyper-Connection depth step: `Bᵀ·layer_out + carry`.
pub fn hc_depth<T: Scalar>(tape: &mut Tape<T>, layer_out: Var, beta: Var, carry: Var) -> Result<Var> {
    let n = tape.shape(carry)[1];
    let copies = tape.repeat_rows(layer_out, n)?;
    let weighted = tape.scale_rows(copies, beta)?;
    tape.add(weighted, carry)
}

/// Sum over the `n` copies, `[tokens, n, d] -> [tokens, d]`.
pub fn hc_pool<T: Scalar>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    tape.sum_axis(h, 1)
}

/// One full Hyper-Connection step around `layer`.
pub fn hc_step<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    conn: &ConnectionVars,
    layer: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    Connection::Hyper(conn).step(tape, Stream::Hyper(h), layer).map(|s| s.var())
}

/// Pre-Norm residual step, `h + layer(norm(h))`.
pub fn residual_step<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    norm: Var,
    layer: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let x = tape.rms_norm(h, norm, RMS_EPS)?;
    let y = layer(tape, x)?;
    tape.add(h, y)
}

/// Dispatch over the connection schemes.
#[derive(Clone, Copy, Debug)]
pub enum Connection<'a> {
    Residual,
    Frac(&'a ConnectionVars),
    Hyper(&'a ConnectionVars),
}

impl Connection<'_> {
    pub fn width<T: Scalar>(&self, tape: &mut Tape<T>, stream: Stream) -> Result<Width> {
        match (self, stream) {
            (Connection::Residual, Stream::Residual(h)) => Ok(Width {
                layer_input: h,
                carry: stream,
                beta: None,
            }),
            (Connection::Frac(conn), Stream::Frac(state)) => {
                let coef = dynamic_coefficients(tape, state.var, conn)?;
                fc_width(tape, &state, coef)
            }
            (Connection::Hyper(conn), Stream::Hyper(h)) => {
                let coef = dynamic_coefficients(tape, h, conn)?;
                hc_width(tape, h, coef)
            }
            _ => Err(Error::contract("connection scheme does not match the stream state")),
        }
    }

    pub fn depth<T: Scalar>(&self, tape: &mut Tape<T>, layer_out: Var, width: Width) -> Result<Stream> {
        match (width.carry, width.beta) {
            (Stream::Residual(h), None) => Ok(Stream::Residual(tape.add(h, layer_out)?)),
            (Stream::Frac(carry), Some(beta)) => {
                Ok(Stream::Frac(fc_depth(tape, layer_out, beta, &carry)?))
            }
            (Stream::Hyper(carry), Some(beta)) => {
                Ok(Stream::Hyper(hc_depth(tape, layer_out, beta, carry)?))
            }
            _ => Err(Error::contract("width output is missing its output weights")),
        }
    }

    /// Width, `layer`, depth.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        stream: Stream,
        layer: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
    ) -> Result<Stream> {
        let width = self.width(tape, stream)?;
        let out = layer(tape, width.layer_input)?;
        self.depth(tape, out, width)
    }
}

#[cfg(test)]
mod tests;
