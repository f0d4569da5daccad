use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution};

use super::params::ParamStore;
use super::{ModelConfig, Scheme};
use crate::connections::{
    hc_expand, hc_pool, merge_fractions, split_fractions, Connection, ConnectionVars, DynamicVars, Stream,
};
use crate::error::{Error, Result};
use crate::numerics::{lit, Array, Scalar, Tape, Var, RMS_EPS};

/// Switches for one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Applies dropout when set.
    pub train: bool,
    pub dropout_seed: u64,
    /// Keeps the input of every sublayer for [`ForwardOutput::taps`].
    pub record_taps: bool,
}

/// Variables produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[batch*seq, vocab]`.
    pub logits: Var,
    /// Parameter leaves in layout order.
    pub params: Vec<Var>,
    /// Merged or pooled state after the last block, `[batch*seq, d]`.
    pub final_state: Var,
    taps: Option<Vec<Var>>,
}

impl ForwardOutput {
    /// The `2L` sublayer inputs (attention then FFN per layer).
    pub fn taps(&self) -> Result<&[Var]> {
        self.taps
            .as_deref()
            .ok_or_else(|| Error::contract("hidden taps were not recorded for this pass"))
    }
}

/// Hidden states seen by each sublayer's pre-norm, plus the final state.
/// Each array is `[batch*seq, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTaps<T> {
    pub sublayer_inputs: Vec<Array<T>>,
    pub final_state: Array<T>,
}

/// Mean next-token cross-entropy in nats.
pub fn lm_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    if rows != targets.len() {
        return Err(Error::contract(format!(
            "{rows} logit rows but {} targets",
            targets.len()
        )));
    }
    tape.cross_entropy(logits, targets)
}

/// Causal multi-head attention with rotary positions on `x[batch*seq, d]`.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    [wq, wk, wv, wo]: [Var; 4],
    heads: usize,
    seq: usize,
) -> Result<Var> {
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let q = tape.rope(q, heads, seq)?;
    let k = tape.rope(k, heads, seq)?;
    let att = tape.causal_attention(q, k, v, heads, seq)?;
    tape.matmul(att, wo)
}

/// Gated FFN, `(silu(x·W_gate) ⊙ x·W_up)·W_down`.
pub fn ffn<T: Scalar>(tape: &mut Tape<T>, x: Var, [w_gate, w_up, w_down]: [Var; 3]) -> Result<Var> {
    let g = tape.matmul(x, w_gate)?;
    let g = tape.silu(g);
    let u = tape.matmul(x, w_up)?;
    let hidden = tape.mul(g, u)?;
    tape.matmul(hidden, w_down)
}

/// Model configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

struct Bound<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    fn var(&self, name: &str) -> Var {
        self.vars[self.store.index_of(name).expect("layout name")]
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.store.index_of(name).map(|i| self.vars[i])
    }

    fn connection(&self, cfg: &ModelConfig, prefix: &str) -> Option<ConnectionVars> {
        if cfg.scheme == Scheme::Residual {
            return None;
        }
        let dynamic = cfg.scheme.is_dynamic().then(|| DynamicVars {
            w_beta: self.var(&format!("{prefix}.dyn_beta")),
            w_mix: self.var(&format!("{prefix}.dyn_mix")),
            s_beta: self.opt(&format!("{prefix}.beta_scale")),
            s_mix: self.opt(&format!("{prefix}.mix_scale")),
            norm: self.opt(&format!("{prefix}.norm")),
            use_tanh: cfg.toggles.use_tanh,
        });
        Some(ConnectionVars {
            beta: self.var(&format!("{prefix}.static_beta")),
            mix: self.var(&format!("{prefix}.static_mix")),
            dynamic,
        })
    }
}

fn dropout_mask<T: Scalar>(shape: &[usize], p: f64, seed: u64) -> Array<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = Bernoulli::new(1.0 - p).expect("valid dropout rate");
    let scale = lit::<T>(1.0 / (1.0 - p));
    Array::from_fn(shape.to_vec(), |_| if keep.sample(&mut rng) { scale } else { T::zero() })
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ParamStore::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn from_store(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let named = params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let params = ParamStore::from_named(&config, named)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Records the forward pass over `tokens`, read as `tokens.len() / seq`
    /// sequences of length `seq`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        seq: usize,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if seq == 0 || tokens.is_empty() {
            return Err(Error::input("empty token sequence"));
        }
        if !tokens.len().is_multiple_of(seq) {
            return Err(Error::contract(format!(
                "{} tokens do not form whole sequences of length {seq}",
                tokens.len()
            )));
        }
        let bound = Bound {
            store: &self.params,
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
        };
        let h = tape.embedding(bound.var("embed"), tokens)?;
        let mut stream = match cfg.scheme {
            Scheme::Residual => Stream::Residual(h),
            Scheme::Sfc | Scheme::Dfc => Stream::Frac(split_fractions(tape, h, cfg.rate)?),
            Scheme::Shc | Scheme::Dhc => Stream::Hyper(hc_expand(tape, h, cfg.rate)?),
        };
        let mut taps = opts.record_taps.then(Vec::new);
        for l in 0..cfg.n_layers {
            for (s, sub) in ["attn", "ffn"].into_iter().enumerate() {
                let p = format!("layers.{l}");
                let conn_vars = bound.connection(cfg, &format!("{p}.{sub}_conn"));
                let conn = match (&conn_vars, cfg.scheme.is_frac()) {
                    (None, _) => Connection::Residual,
                    (Some(c), true) => Connection::Frac(c),
                    (Some(c), false) => Connection::Hyper(c),
                };
                let width = conn.width(tape, stream)?;
                if let Some(t) = taps.as_mut() {
                    t.push(width.layer_input);
                }
                let x = tape.rms_norm(width.layer_input, bound.var(&format!("{p}.{sub}_norm")), RMS_EPS)?;
                let mut y = if s == 0 {
                    let w = ["wq", "wk", "wv", "wo"].map(|n| bound.var(&format!("{p}.{n}")));
                    attention(tape, x, w, cfg.n_heads, seq)?
                } else {
                    let w = ["w_gate", "w_up", "w_down"].map(|n| bound.var(&format!("{p}.{n}")));
                    ffn(tape, x, w)?
                };
                if opts.train && cfg.dropout > 0.0 {
                    let seed = opts
                        .dropout_seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add((2 * l + s) as u64);
                    let mask = dropout_mask::<T>(tape.shape(y), cfg.dropout, seed);
                    let mask = tape.constant(mask);
                    y = tape.mul(y, mask)?;
                }
                stream = conn.depth(tape, y, width)?;
            }
        }
        let final_state = match stream {
            Stream::Residual(h) => h,
            Stream::Frac(s) => merge_fractions(tape, &s)?,
            Stream::Hyper(h) => hc_pool(tape, h)?,
        };
        let normed = tape.rms_norm(final_state, bound.var("final_norm"), RMS_EPS)?;
        let logits = tape.matmul(normed, bound.var("unembed"))?;
        Ok(ForwardOutput {
            logits,
            params: bound.vars,
            final_state,
            taps,
        })
    }

    /// Logits shaped `[batch, seq, vocab]`.
    pub fn lm_forward(&self, tokens: &[usize], seq: usize) -> Result<Array<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, tokens, seq, &ForwardOptions::default())?;
        let v = self.config.vocab_size;
        tape.value(out.logits).clone().reshape([tokens.len() / seq, seq, v])
    }

    pub fn loss(&self, inputs: &[usize], targets: &[usize], seq: usize, opts: &ForwardOptions) -> Result<T> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, inputs, seq, opts)?;
        let loss = lm_loss(&mut tape, out.logits, targets)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Loss and the gradient of every parameter, in layout order.
    pub fn loss_and_grads(
        &self,
        inputs: &[usize],
        targets: &[usize],
        seq: usize,
        opts: &ForwardOptions,
    ) -> Result<(T, Vec<Array<T>>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, inputs, seq, opts)?;
        let loss = lm_loss(&mut tape, out.logits, targets)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let g = out
            .params
            .iter()
            .map(|&v| grads.take(v).expect("every parameter receives a gradient"))
            .collect();
        Ok((value, g))
    }

    pub fn hidden_taps(&self, tokens: &[usize], seq: usize) -> Result<HiddenTaps<T>> {
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            record_taps: true,
            ..ForwardOptions::default()
        };
        let out = self.forward(&mut tape, tokens, seq, &opts)?;
        Ok(HiddenTaps {
            sublayer_inputs: out.taps()?.iter().map(|&v| tape.value(v).clone()).collect(),
            final_state: tape.value(out.final_state).clone(),
        })
    }
}
