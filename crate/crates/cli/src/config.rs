//! Experiment files: one TOML document with a section per concern, plus
//! `--set section.key=value` overrides applied before validation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use fracnet_core::analysis::{Convention, GradcheckConfig, DEFAULT_TOLERANCE};
use fracnet_core::model::{ModelConfig, Scheme};
use fracnet_core::numerics::DEFAULT_EPS;
use fracnet_core::train::{Corpus, TrainConfig, DEFAULT_VAL_FRACTION};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration (exit 2).
    Usage(String),
    /// Non-finite values or a failed numerical check (exit 3).
    Numeric(String),
    /// Anything else (exit 1).
    Failure(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Failure(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl From<fracnet_core::Error> for CliError {
    fn from(e: fracnet_core::Error) -> Self {
        use fracnet_core::Error as E;
        match e {
            E::Config(_) => CliError::Usage(e.to_string()),
            E::Numeric(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            val_fraction: DEFAULT_VAL_FRACTION,
        }
    }
}

/// Variants trained by `compare`, written as `residual`, `dfc:2` or `dfc×2`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub schemes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Probes a freshly initialized model when absent.
    pub checkpoint: Option<PathBuf>,
    /// Validation windows to pool.
    pub samples: usize,
    /// Window length; defaults to `train.seq_len`.
    pub seq: Option<usize>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            samples: 64,
            seq: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CountConfig {
    pub convention: Convention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub batch: usize,
    pub seq: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub perturb: f64,
    pub seed: u64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            batch: 1,
            seq: 5,
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            perturb: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output directory, overridden by `--out`.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub count: CountConfig,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
}

/// A validated configuration and, when it names one, its corpus.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub corpus: Option<Corpus>,
}

impl Experiment {
    pub fn model(&self) -> CliResult<&ModelConfig> {
        self.config
            .model
            .as_ref()
            .ok_or_else(|| CliError::Usage("config has no [model] section".into()))
    }

    pub fn corpus(&self) -> CliResult<&Corpus> {
        self.corpus
            .as_ref()
            .ok_or_else(|| CliError::Usage("config has no data.corpus".into()))
    }

    pub fn gradcheck(&self) -> CliResult<GradcheckConfig> {
        let g = &self.config.gradcheck;
        Ok(GradcheckConfig {
            model: self.model()?.clone(),
            batch: g.batch,
            seq: g.seq,
            eps: g.eps,
            tolerance: g.tolerance,
            perturb: g.perturb,
            seed: g.seed,
        })
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(&self.config).map_err(|e| CliError::Failure(format!("cannot serialize config: {e}")))
    }
}

/// Reads `path`, applies overrides, loads the corpus and fills in
/// `model.vocab_size` from it when the file leaves it out.
pub fn load(path: &Path, overrides: &[String]) -> CliResult<Experiment> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let data: DataConfig = match table.get("data") {
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e| CliError::Usage(format!("[data]: {e}")))?,
        None => DataConfig::default(),
    };
    let corpus = match &data.corpus {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read corpus {}: {e}", p.display())))?;
            Some(Corpus::from_text(&text, data.val_fraction)?)
        }
        None => None,
    };
    if let (Some(Value::Table(model)), Some(c)) = (table.get_mut("model"), &corpus) {
        model
            .entry("vocab_size")
            .or_insert(Value::Integer(c.vocab_size() as i64));
    }
    let config: ExperimentConfig = table
        .try_into()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Some(m) = &config.model {
        m.validate()?;
    }
    config.train.validate()?;
    Ok(Experiment { config, corpus })
}

/// Applies one `a.b.c=value`. The value is read as a TOML literal when it
/// parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override key `{key}` has an empty segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Usage(format!("override `{key}`: `{p}` is not a section"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Parses `residual`, `dfc`, `dfc:2`, `dfc×2` or `dfcx2`.
pub fn parse_variant(spec: &str) -> CliResult<(Scheme, usize)> {
    let spec = spec.trim();
    let split = spec
        .split_once(':')
        .or_else(|| spec.split_once('×'))
        .or_else(|| spec.find(|c: char| c == 'x' || c.is_ascii_digit()).map(|i| spec.split_at(i)));
    let (name, rate) = match split {
        Some((n, r)) => (n, r.trim_start_matches('x')),
        None => (spec, ""),
    };
    let scheme: Scheme = name
        .parse()
        .map_err(|_| CliError::Usage(format!("unknown scheme `{name}` in `{spec}`")))?;
    let rate = if rate.is_empty() {
        1
    } else {
        rate.parse()
            .map_err(|_| CliError::Usage(format!("bad rate `{rate}` in `{spec}`")))?
    };
    Ok((scheme, rate))
}
