//! Synthetic data: copy sequences, planted needles, random tokens and
//! windows over an ingested token stream.

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BOS: usize = 0;
/// Separates the copy task's source from its copy.
pub const SEP: usize = 1;
/// Introduces the needle's key inside the haystack.
pub const NEEDLE: usize = 1;
/// Introduces the key again at the end, asking for its value.
pub const QUERY: usize = 2;

/// Token ids plus next-token targets, `batch` rows of `len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    /// Target per position; `None` positions are not scored.
    pub targets: Vec<Option<usize>>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    fn from_rows(rows: Vec<(Vec<usize>, Vec<Option<usize>>)>) -> Batch {
        let len = rows.first().map_or(0, |r| r.0.len());
        let batch = rows.len();
        let (ids, targets) = rows.into_iter().fold((Vec::new(), Vec::new()), |(mut i, mut t), r| {
            i.extend(r.0);
            t.extend(r.1);
            (i, t)
        });
        Batch { ids, targets, batch, len }
    }

    pub fn row(&self, r: usize) -> (&[usize], &[Option<usize>]) {
        (&self.ids[r * self.len..][..self.len], &self.targets[r * self.len..][..self.len])
    }

    pub fn scored(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// Anything the trainer can draw batches from.
pub trait DataSource {
    fn next_batch(&mut self, rng: &mut Rng, n: usize) -> Result<Batch>;
}

/// `BOS x₁…x_k SEP x₁…x_k`; only predictions of the copy are scored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CopyTask {
    pub vocab: usize,
    pub len: usize,
}

impl CopyTask {
    pub fn new(vocab: usize, len: usize) -> Result<Self> {
        if vocab < 3 || len < 4 || !len.is_multiple_of(2) {
            return Err(Error::config("copy task needs vocab >= 3 and an even len >= 4"));
        }
        Ok(CopyTask { vocab, len })
    }

    pub fn payload(&self) -> usize {
        self.len / 2 - 1
    }

    pub fn sample(&self, rng: &mut Rng) -> (Vec<usize>, Vec<Option<usize>>) {
        let k = self.payload();
        let x: Vec<usize> = (0..k).map(|_| rng.below(SEP + 1, self.vocab)).collect();
        let mut ids = vec![BOS];
        ids.extend(&x);
        ids.push(SEP);
        ids.extend(&x);
        let mut targets = vec![None; self.len];
        for i in k + 1..self.len - 1 {
            targets[i] = Some(ids[i + 1]);
        }
        (ids, targets)
    }
}

impl DataSource for CopyTask {
    fn next_batch(&mut self, rng: &mut Rng, n: usize) -> Result<Batch> {
        Ok(Batch::from_rows((0..n).map(|_| self.sample(rng)).collect()))
    }
}

/// A key/value pair planted in filler, then asked for at the end:
/// `BOS filler… NEEDLE key value filler… QUERY key value`.
///
/// Keys, values and filler come from disjoint token ranges, so the needle
/// is recognizable the way a number stands out in prose.
#[derive(Clone, Debug, PartialEq)]
pub struct NeedleTask {
    pub vocab: usize,
    pub context_len: usize,
    pub key_len: usize,
    pub value_len: usize,
    pub depth_fraction: f64,
    pub seed: u64,
}

/// Token ranges of one needle vocabulary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeedleVocab {
    pub keys: (usize, usize),
    pub values: (usize, usize),
    pub filler: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeedleBatch {
    pub batch: Batch,
    /// Offset of the NEEDLE marker in each row.
    pub offsets: Vec<usize>,
    pub depths: Vec<f64>,
    pub values: Vec<Vec<usize>>,
}

impl NeedleTask {
    pub fn new(vocab: usize, context_len: usize, depth_fraction: f64, seed: u64) -> Self {
        NeedleTask { vocab, context_len, key_len: 1, value_len: 2, depth_fraction, seed }
    }

    pub fn token_ranges(&self) -> Result<NeedleVocab> {
        let usable = self.vocab.saturating_sub(QUERY + 1);
        if usable < 6 {
            return Err(Error::config("needle task needs a vocabulary of at least 9"));
        }
        let k = usable / 6;
        let v = usable / 3;
        let lo = QUERY + 1;
        Ok(NeedleVocab { keys: (lo, lo + k), values: (lo + k, lo + k + v), filler: (lo + k + v, self.vocab) })
    }

    /// Tokens after the haystack: query marker, key and value.
    fn suffix_len(&self) -> usize {
        1 + self.key_len + self.value_len
    }

    fn needle_len(&self) -> usize {
        1 + self.key_len + self.value_len
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.depth_fraction) {
            return Err(Error::config("depth_fraction must lie in [0, 1]"));
        }
        if self.key_len == 0 || self.value_len == 0 {
            return Err(Error::config("needle keys and values need at least one token"));
        }
        if self.context_len < 1 + self.needle_len() + self.suffix_len() {
            return Err(Error::config(format!("context of {} cannot hold the needle", self.context_len)));
        }
        self.token_ranges().map(|_| ())
    }

    /// Earliest and latest legal offsets of the NEEDLE marker.
    pub fn offset_range(&self) -> (usize, usize) {
        (1, self.context_len - self.suffix_len() - self.needle_len())
    }

    /// `n` rows, deterministic from the task seed.
    pub fn gen_batch(&self, n: usize) -> Result<NeedleBatch> {
        self.gen_with(&mut Rng::new(self.seed), n, |_| self.depth_fraction)
    }

    fn gen_with(&self, rng: &mut Rng, n: usize, mut depth: impl FnMut(&mut Rng) -> f64) -> Result<NeedleBatch> {
        if n == 0 {
            return Err(Error::config("needle batch needs n >= 1"));
        }
        self.validate()?;
        let r = self.token_ranges()?;
        let (lo, hi) = self.offset_range();
        let mut rows = Vec::with_capacity(n);
        let (mut offsets, mut depths, mut values) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let d = depth(rng);
            let off = lo + ((hi - lo) as f64 * d).round() as usize;
            let key: Vec<usize> = (0..self.key_len).map(|_| rng.below(r.keys.0, r.keys.1)).collect();
            let val: Vec<usize> = (0..self.value_len).map(|_| rng.below(r.values.0, r.values.1)).collect();
            let mut ids: Vec<usize> = Vec::with_capacity(self.context_len);
            ids.push(BOS);
            while ids.len() < self.context_len - self.suffix_len() {
                if ids.len() == off {
                    ids.push(NEEDLE);
                    ids.extend(&key);
                    ids.extend(&val);
                } else {
                    ids.push(rng.below(r.filler.0, r.filler.1));
                }
            }
            ids.push(QUERY);
            ids.extend(&key);
            ids.extend(&val);
            let mut targets = vec![None; self.context_len];
            let first = self.context_len - self.value_len;
            for p in first..self.context_len {
                targets[p - 1] = Some(ids[p]);
            }
            rows.push((ids, targets));
            offsets.push(off);
            depths.push(d);
            values.push(val);
        }
        Ok(NeedleBatch { batch: Batch::from_rows(rows), offsets, depths, values })
    }

    /// Length of the prompt a model sees before generating the value.
    pub fn prompt_len(&self) -> usize {
        self.context_len - self.value_len
    }
}

/// Reads the answer out of a needle row by rule: take the key after the
/// last QUERY, find it after a NEEDLE marker, return what follows.
pub fn extract_needle(ids: &[usize], key_len: usize, value_len: usize) -> Option<Vec<usize>> {
    let q = ids.iter().rposition(|&t| t == QUERY)?;
    let key = ids.get(q + 1..q + 1 + key_len)?;
    (0..q).find_map(|i| {
        (ids[i] == NEEDLE && ids.get(i + 1..i + 1 + key_len) == Some(key))
            .then(|| ids.get(i + 1 + key_len..i + 1 + key_len + value_len).map(<[usize]>::to_vec))
            .flatten()
    })
}

/// Needle rows at uniformly random depths, for training.
#[derive(Clone, Debug)]
pub struct NeedleSource(pub NeedleTask);

impl DataSource for NeedleSource {
    fn next_batch(&mut self, rng: &mut Rng, n: usize) -> Result<Batch> {
        Ok(self.0.gen_with(rng, n, |r| r.uniform())?.batch)
    }
}

/// Uniform random tokens, every position scored.
#[derive(Clone, Copy, Debug)]
pub struct RandomTokens {
    pub vocab: usize,
    pub len: usize,
}

impl DataSource for RandomTokens {
    fn next_batch(&mut self, rng: &mut Rng, n: usize) -> Result<Batch> {
        let rows = (0..n)
            .map(|_| {
                let ids: Vec<usize> = (0..=self.len).map(|_| rng.below(0, self.vocab)).collect();
                (ids[..self.len].to_vec(), ids[1..].iter().map(|&t| Some(t)).collect())
            })
            .collect();
        Ok(Batch::from_rows(rows))
    }
}

/// Random windows of `len + 1` tokens from a fixed stream.
#[derive(Clone, Debug)]
pub struct TokenStream {
    pub tokens: Vec<usize>,
    pub len: usize,
}

impl TokenStream {
    pub fn new(tokens: Vec<usize>, len: usize) -> Result<Self> {
        if tokens.len() <= len || len == 0 {
            return Err(Error::config(format!("stream of {} tokens is too short for windows of {len}", tokens.len())));
        }
        Ok(TokenStream { tokens, len })
    }
}

impl DataSource for TokenStream {
    fn next_batch(&mut self, rng: &mut Rng, n: usize) -> Result<Batch> {
        let rows = (0..n)
            .map(|_| {
                let s = rng.below(0, self.tokens.len() - self.len);
                let w = &self.tokens[s..=s + self.len];
                (w[..self.len].to_vec(), w[1..].iter().map(|&t| Some(t)).collect())
            })
            .collect();
        Ok(Batch::from_rows(rows))
    }
}
