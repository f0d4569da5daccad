use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Scheme};
use crate::connections::{fc_init_static, HyperParams, SCALE_INIT};
use crate::error::{Error, Result};
use crate::numerics::{lit, Array, Scalar};

/// Standard deviation of the normal init of embeddings and projections.
pub const INIT_STD: f64 = 0.02;

/// Role of a parameter, which fixes its initialization and decay group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Embedding,
    Linear,
    Norm,
    /// Static connection coefficients `B` and the mixing matrix.
    ConnStatic,
    /// Dynamic connection projections.
    ConnDynamic,
    ConnScale,
    ConnNorm,
}

impl ParamKind {
    /// Static connection coefficients are exempt from weight decay.
    pub fn decays(self) -> bool {
        self != ParamKind::ConnStatic
    }

    pub fn is_connection(self) -> bool {
        matches!(
            self,
            ParamKind::ConnStatic | ParamKind::ConnDynamic | ParamKind::ConnScale | ParamKind::ConnNorm
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn connection_specs(cfg: &ModelConfig, prefix: &str, out: &mut Vec<ParamSpec>) {
    let d = cfg.d_model;
    let (r, c, w) = match cfg.scheme {
        Scheme::Residual => return,
        Scheme::Sfc | Scheme::Dfc => (cfg.rate, 2 * cfg.rate, d / cfg.rate),
        Scheme::Shc | Scheme::Dhc => (cfg.rate, cfg.rate + 1, d),
    };
    let mut push = |name: &str, shape: Vec<usize>, kind| {
        out.push(ParamSpec {
            name: format!("{prefix}.{name}"),
            shape,
            kind,
        })
    };
    push("static_beta", vec![r], ParamKind::ConnStatic);
    push("static_mix", vec![r, c], ParamKind::ConnStatic);
    if cfg.scheme.is_dynamic() {
        push("dyn_beta", vec![w], ParamKind::ConnDynamic);
        push("dyn_mix", vec![w, c], ParamKind::ConnDynamic);
        if cfg.toggles.use_scale {
            push("beta_scale", vec![1], ParamKind::ConnScale);
            push("mix_scale", vec![1], ParamKind::ConnScale);
        }
        if cfg.toggles.use_norm {
            push("norm", vec![w], ParamKind::ConnNorm);
        }
    }
}

/// Every learnable parameter of `cfg`, in allocation order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ffn);
    let mut out = Vec::new();
    let spec = |name: String, shape: Vec<usize>, kind| ParamSpec { name, shape, kind };
    out.push(spec("embed".into(), vec![v, d], ParamKind::Embedding));
    for l in 0..cfg.n_layers {
        let p = format!("layers.{l}");
        connection_specs(cfg, &format!("{p}.attn_conn"), &mut out);
        out.push(spec(format!("{p}.attn_norm"), vec![d], ParamKind::Norm));
        for name in ["wq", "wk", "wv", "wo"] {
            out.push(spec(format!("{p}.{name}"), vec![d, d], ParamKind::Linear));
        }
        connection_specs(cfg, &format!("{p}.ffn_conn"), &mut out);
        out.push(spec(format!("{p}.ffn_norm"), vec![d], ParamKind::Norm));
        out.push(spec(format!("{p}.w_gate"), vec![d, f], ParamKind::Linear));
        out.push(spec(format!("{p}.w_up"), vec![d, f], ParamKind::Linear));
        out.push(spec(format!("{p}.w_down"), vec![f, d], ParamKind::Linear));
    }
    out.push(spec("final_norm".into(), vec![d], ParamKind::Norm));
    out.push(spec("unembed".into(), vec![d, v], ParamKind::Linear));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Array<T>,
}

/// Named parameters in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

fn static_value<T: Scalar>(cfg: &ModelConfig, spec: &ParamSpec) -> Result<Array<T>> {
    let is_beta = spec.name.ends_with("static_beta");
    if cfg.scheme.is_frac() {
        let p = fc_init_static::<T>(cfg.rate)?;
        Ok(if is_beta { p.beta } else { p.mix })
    } else {
        let p = HyperParams::<T>::init(cfg.rate, cfg.d_model, false)?;
        Ok(if is_beta { p.beta } else { p.mix() })
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Fresh initialization. Only embeddings and projections draw from the
    /// seeded generator, so models that differ only in their connection
    /// scheme share every sublayer weight.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let mut params = Vec::new();
        for spec in param_layout(cfg) {
            let shape = spec.shape.clone();
            let value = match spec.kind {
                ParamKind::Embedding | ParamKind::Linear => {
                    Array::from_fn(shape, |_| lit(normal.sample(&mut rng)))
                }
                ParamKind::Norm | ParamKind::ConnNorm => Array::ones(shape),
                ParamKind::ConnDynamic => Array::zeros(shape),
                ParamKind::ConnScale => Array::full(shape, lit(SCALE_INIT)),
                ParamKind::ConnStatic => static_value(cfg, &spec)?,
            };
            params.push(Param {
                name: spec.name,
                kind: spec.kind,
                value,
            });
        }
        Ok(Self::from_params(params))
    }

    fn from_params(params: Vec<Param<T>>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { params, index }
    }

    /// Builds a store from named arrays, checking them against the layout of
    /// `cfg`.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Array<T>)>) -> Result<Self> {
        let layout = param_layout(cfg);
        if layout.len() != named.len() {
            return Err(Error::input(format!(
                "expected {} parameters, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.len());
        for (spec, (name, value)) in layout.into_iter().zip(named) {
            if spec.name != name || spec.shape != value.shape() {
                return Err(Error::input(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            params.push(Param {
                name,
                kind: spec.kind,
                value,
            });
        }
        Ok(Self::from_params(params))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index_of(name).map(|i| &mut self.params[i])
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Learnable scalars in connection parameters.
    pub fn connection_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.is_connection())
            .map(|p| p.value.numel())
            .sum()
    }
}
