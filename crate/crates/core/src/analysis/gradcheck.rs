//! Whole-model comparison of backpropagated and central-difference gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use super::counts::structural_total;
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::numerics::{finite_diff_grad, max_relative_error, Array, DEFAULT_EPS};

/// Largest model the finite-difference sweep accepts.
pub const MAX_GRADCHECK_PARAMS: usize = 5_000;

/// Default pass threshold on the worst relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    #[serde(default = "one")]
    pub batch: usize,
    #[serde(default = "five")]
    pub seq: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Standard deviation of the noise added to every connection parameter
    /// before checking, so that zero-initialized dynamic weights and the
    /// paths behind them carry nonzero gradients.
    #[serde(default = "default_perturb")]
    pub perturb: f64,
    /// Seeds the token draw and the perturbation.
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn five() -> usize {
    5
}
fn default_eps() -> f64 {
    DEFAULT_EPS
}
fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}
fn default_perturb() -> f64 {
    0.1
}

impl GradcheckConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            batch: 1,
            seq: 5,
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            perturb: default_perturb(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub param: String,
    pub numel: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub label: String,
    pub tolerance: f64,
    pub params: Vec<ParamError>,
}

impl GradcheckReport {
    /// The parameter with the largest relative error.
    pub fn worst(&self) -> Option<&ParamError> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.max_rel_error)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    /// CSV with columns `param,numel,max_rel_error`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        if self.params.is_empty() {
            w.write_record(["param", "numel", "max_rel_error"])
                .map_err(|e| Error::input(format!("csv: {e}")))?;
        }
        for p in &self.params {
            w.serialize(p).map_err(|e| Error::input(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::input(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Builds the model in 64-bit, perturbs its connection parameters, draws a
/// random batch and checks every parameter gradient.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.model.validate()?;
    let n = structural_total(&cfg.model);
    if n > MAX_GRADCHECK_PARAMS as u64 {
        return Err(Error::config(format!(
            "gradcheck is limited to {MAX_GRADCHECK_PARAMS} parameters, this model has {n}"
        )));
    }
    if cfg.batch == 0 || cfg.seq == 0 {
        return Err(Error::config("gradcheck batch and seq must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<f64>::new(cfg.model.clone())?;
    perturb_connections(&mut model, cfg.perturb, &mut rng)?;
    let v = cfg.model.vocab_size;
    let tokens: Vec<usize> = (0..2 * cfg.batch * cfg.seq).map(|_| rng.random_range(0..v)).collect();
    let (inputs, targets) = tokens.split_at(cfg.batch * cfg.seq);
    let opts = ForwardOptions::default();
    let (loss, analytic) = model.loss_and_grads(inputs, targets, cfg.seq, &opts)?;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("gradcheck loss is {loss}")));
    }
    check_gradients(&model, inputs, targets, cfg.seq, &analytic, cfg.eps, cfg.tolerance)
}

/// Adds `N(0, std²)` noise to every connection parameter.
pub fn perturb_connections(model: &mut Model<f64>, std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let noise = Normal::new(0.0, std).map_err(|e| Error::config(format!("perturbation std {std}: {e}")))?;
    for p in model.params_mut().params_mut() {
        if p.kind.is_connection() {
            for x in p.value.data_mut() {
                *x += noise.sample(rng);
            }
        }
    }
    Ok(())
}

/// Compares `analytic`, one array per parameter in layout order, with
/// central differences of the loss on `(inputs, targets)`.
pub fn check_gradients(
    model: &Model<f64>,
    inputs: &[usize],
    targets: &[usize],
    seq: usize,
    analytic: &[Array<f64>],
    eps: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    if analytic.len() != model.params().len() {
        return Err(Error::contract(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            model.params().len()
        )));
    }
    let opts = ForwardOptions::default();
    let mut probe = model.clone();
    let mut params = Vec::with_capacity(analytic.len());
    for (i, g) in analytic.iter().enumerate() {
        let original = model.params().params()[i].value.clone();
        let mut failure = None;
        let numeric = finite_diff_grad(
            |x| {
                probe.params_mut().params_mut()[i].value = x.clone();
                match probe.loss(inputs, targets, seq, &opts) {
                    Ok(l) => l,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &original,
            eps,
        );
        probe.params_mut().params_mut()[i].value = original;
        if let Some(e) = failure {
            return Err(e);
        }
        let name = &model.params().params()[i].name;
        let numeric = numeric.map_err(|e| Error::numeric(format!("{name}: {e}")))?;
        params.push(ParamError {
            param: name.clone(),
            numel: g.numel(),
            max_rel_error: max_relative_error(g, &numeric),
        });
    }
    Ok(GradcheckReport {
        label: model.config().label(),
        tolerance,
        params,
    })
}
