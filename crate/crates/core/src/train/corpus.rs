use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Fraction of the stream held out for validation by [`ingest`].
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

/// Character-level token stream with a train/validation split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    /// Sorted distinct characters; token `i` is `vocab[i]`.
    pub vocab: Vec<char>,
    pub tokens: Vec<usize>,
    /// Training tokens are `tokens[..split]`, validation `tokens[split..]`.
    pub split: usize,
}

/// Which side of the split to draw windows from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Corpus {
    pub fn from_text(text: &str, val_fraction: f64) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::input("corpus is empty"));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config(format!(
                "validation fraction must lie in [0, 1), got {val_fraction}"
            )));
        }
        let vocab: Vec<char> = text.chars().collect::<BTreeSet<_>>().into_iter().collect();
        let tokens: Vec<usize> = text
            .chars()
            .map(|c| vocab.binary_search(&c).expect("char in vocab"))
            .collect();
        let split = tokens.len() - (tokens.len() as f64 * val_fraction).floor() as usize;
        Ok(Self { vocab, tokens, split })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn part(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.tokens[..self.split],
            Split::Validation => &self.tokens[self.split..],
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.vocab[i]).collect()
    }
}

/// Reads a UTF-8 text file into a [`Corpus`] with [`DEFAULT_VAL_FRACTION`]
/// held out.
pub fn ingest(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::input(format!("{} is not valid UTF-8", path.display())))?;
    Corpus::from_text(&text, DEFAULT_VAL_FRACTION)
}

/// `batch` windows of `seq` inputs, flattened row by row, and the matching
/// next-token targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Endless stream of batches. Each epoch visits every window start of the
/// split exactly once, in an order shuffled from `(seed, epoch)`.
#[derive(Clone, Debug)]
pub struct Batcher<'a> {
    tokens: &'a [usize],
    seq: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> Batcher<'a> {
    pub fn new(tokens: &'a [usize], seq: usize, batch: usize, seed: u64) -> Result<Self> {
        if seq == 0 || batch == 0 {
            return Err(Error::config("sequence length and batch size must be positive"));
        }
        if seq + 1 > tokens.len() {
            return Err(Error::config(format!(
                "window of {} tokens does not fit in a split of {}",
                seq + 1,
                tokens.len()
            )));
        }
        let mut b = Self {
            tokens,
            seq,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        b.shuffle();
        Ok(b)
    }

    /// Number of distinct window starts, i.e. windows per epoch.
    pub fn windows(&self) -> usize {
        self.tokens.len() - self.seq
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0xA076_1D64_78BD_642F));
        self.order = (0..self.windows()).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn next_start(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

impl Iterator for Batcher<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let mut inputs = Vec::with_capacity(self.batch * self.seq);
        let mut targets = Vec::with_capacity(self.batch * self.seq);
        for _ in 0..self.batch {
            let s = self.next_start();
            inputs.extend_from_slice(&self.tokens[s..s + self.seq]);
            targets.extend_from_slice(&self.tokens[s + 1..s + self.seq + 1]);
        }
        Some(Batch { inputs, targets })
    }
}

/// Seeded batches over one side of the corpus split.
pub fn batches(corpus: &Corpus, seq: usize, batch: usize, seed: u64, split: Split) -> Result<Batcher<'_>> {
    Batcher::new(corpus.part(split), seq, batch, seed)
}
