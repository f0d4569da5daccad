//! Cosine similarity between the inputs of adjacent layers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HiddenTaps, Model};
use crate::numerics::{Array, Scalar};
use crate::train::{batches, Corpus, Split};

/// Windows per forward pass while probing.
const PROBE_CHUNK: usize = 8;

/// Statistics of `cos(h^i, h^{i+1})` over every sampled position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub layer: usize,
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimilarityReport {
    pub layers: Vec<LayerSimilarity>,
}

/// Cosine of two vectors; zero when either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Nearest-rank percentile of sorted, non-empty data: the value at 1-based
/// rank `ceil(p/100 · n)`, and the minimum for `p = 0`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// The input of every layer (its attention sublayer input) followed by the
/// final state, so layer `i` of a report compares entries `i` and `i + 1`.
pub fn layer_inputs<T>(taps: &HiddenTaps<T>) -> Vec<&Array<T>> {
    let mut out: Vec<&Array<T>> = taps.sublayer_inputs.iter().step_by(2).collect();
    out.push(&taps.final_state);
    out
}

impl SimilarityReport {
    /// Pools the per-position cosines of several batches of taps.
    pub fn from_taps<T: Scalar>(taps: &[HiddenTaps<T>]) -> Result<Self> {
        let Some(first) = taps.first() else {
            return Err(Error::config("similarity needs at least one batch of taps"));
        };
        let n_pairs = layer_inputs(first).len() - 1;
        let mut samples = vec![Vec::new(); n_pairs];
        for t in taps {
            let states: Vec<Vec<f64>> = layer_inputs(t).iter().map(|a| a.to_f64_vec()).collect();
            if states.len() != n_pairs + 1 {
                return Err(Error::contract("batches of taps disagree on the layer count"));
            }
            let d = *t.final_state.shape().last().unwrap_or(&0);
            if d == 0 {
                return Err(Error::dim("taps have zero width"));
            }
            for (i, pair) in states.windows(2).enumerate() {
                if pair[0].len() != pair[1].len() {
                    return Err(Error::dim(format!("layer {i} and {} taps differ in size", i + 1)));
                }
                let rows = pair[0].chunks_exact(d).zip(pair[1].chunks_exact(d));
                samples[i].extend(rows.map(|(a, b)| cosine(a, b)));
            }
        }
        let layers = samples
            .into_iter()
            .enumerate()
            .map(|(layer, mut s)| {
                s.sort_by(f64::total_cmp);
                LayerSimilarity {
                    layer,
                    median: nearest_rank(&s, 50.0),
                    p5: nearest_rank(&s, 5.0),
                    p95: nearest_rank(&s, 95.0),
                    n_samples: s.len(),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// All values in `[-1, 1]` and `p5 ≤ median ≤ p95` for every layer.
    pub fn is_well_formed(&self) -> bool {
        self.layers.iter().all(|l| {
            [l.p5, l.median, l.p95].iter().all(|v| (-1.0..=1.0).contains(v)) && l.p5 <= l.median && l.median <= l.p95
        })
    }

    /// Largest difference of any statistic between two reports of equal shape.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::contract(format!(
                "reports cover {} and {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| [a.median - b.median, a.p5 - b.p5, a.p95 - b.p95])
            .fold(0.0, |m, x| m.max(x.abs())))
    }

    /// CSV with columns `layer,median,p5,p95,n_samples`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        if self.layers.is_empty() {
            w.write_record(["layer", "median", "p5", "p95", "n_samples"])
                .map_err(|e| Error::input(format!("csv: {e}")))?;
        }
        for l in &self.layers {
            w.serialize(l).map_err(|e| Error::input(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::input(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let layers = csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<std::result::Result<Vec<LayerSimilarity>, _>>()
            .map_err(|e| Error::input(format!("bad similarity report: {e}")))?;
        Ok(Self { layers })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Runs `model` over `sample_count` validation windows of length `seq`,
/// drawn with `seed`, and reports adjacent-layer cosines per position.
pub fn similarity_probe<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    sample_count: usize,
    seq: usize,
    seed: u64,
) -> Result<SimilarityReport> {
    if sample_count == 0 {
        return Err(Error::config("similarity probe needs at least one sample"));
    }
    if corpus.vocab_size() > model.config().vocab_size {
        return Err(Error::contract(format!(
            "corpus has {} symbols but the model vocabulary is {}",
            corpus.vocab_size(),
            model.config().vocab_size
        )));
    }
    let windows: Vec<Vec<usize>> = batches(corpus, seq, 1, seed, Split::Validation)?
        .take(sample_count)
        .map(|b| b.inputs)
        .collect();
    let taps = windows
        .chunks(PROBE_CHUNK)
        .map(|chunk| model.hidden_taps(&chunk.concat(), seq))
        .collect::<Result<Vec<_>>>()?;
    SimilarityReport::from_taps(&taps)
}
