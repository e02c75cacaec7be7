//! Incremental generation with per-layer caches, and per-step cost traces.

use std::fmt::Write as _;

use crate::attention::KvCache;
use crate::cost::{self, BYTES_PER_ELEMENT, CSV_HEADER};
use crate::error::{Error, Result};
use crate::hybrid::IntraCache;
use crate::model::{Ffn, Mixer, Model};
use crate::nn::{rms_norm_rows, NORM_EPS};
use crate::rng::Rng;
use crate::ssm::SsmState;
use crate::tensor::vecmat;

#[derive(Clone, Debug)]
pub enum LayerCache {
    Kv(KvCache),
    Ssm(SsmState),
    Intra(IntraCache),
}

impl LayerCache {
    pub fn numel(&self) -> usize {
        match self {
            LayerCache::Kv(c) => c.numel(),
            LayerCache::Ssm(s) => s.numel(),
            LayerCache::Intra(c) => c.kv.numel() + c.ssm.numel(),
        }
    }

    /// Cached key/value entries, if the layer attends.
    pub fn kv_len(&self) -> Option<usize> {
        match self {
            LayerCache::Kv(c) => Some(c.len()),
            LayerCache::Intra(c) => Some(c.kv.len()),
            LayerCache::Ssm(_) => None,
        }
    }
}

/// Everything one sequence needs to continue decoding.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub caches: Vec<LayerCache>,
    /// Absolute position of the next token; also its rotary offset.
    pub position: usize,
}

impl DecodeState {
    pub fn new(model: &Model) -> Self {
        let caches = model
            .layers
            .iter()
            .map(|l| match &l.mixer {
                Mixer::Attn(b) => LayerCache::Kv(b.new_cache()),
                Mixer::Ssm(b) => LayerCache::Ssm(b.new_state()),
                Mixer::Intra(b) => LayerCache::Intra(b.new_cache()),
            })
            .collect();
        DecodeState { caches, position: 0 }
    }

    pub fn numel(&self) -> usize {
        self.caches.iter().map(LayerCache::numel).sum()
    }

    /// Size at the storage precision the cost model assumes.
    pub fn bytes(&self) -> u64 {
        BYTES_PER_ELEMENT * self.numel() as u64
    }
}

/// Feeds one token and returns the next-token logits.
pub fn decode_step(model: &Model, state: &mut DecodeState, token: usize) -> Result<Vec<f64>> {
    let cfg = &model.cfg;
    if state.position >= cfg.max_len {
        return Err(Error::PositionOverflow { pos: state.position, max: cfg.max_len - 1 });
    }
    if token >= cfg.vocab {
        return Err(Error::Contract(format!("token {token} outside vocabulary of {}", cfg.vocab)));
    }
    if state.caches.len() != model.depth() {
        return Err(Error::Contract(format!("state has {} layers, model {}", state.caches.len(), model.depth())));
    }
    let s = &model.store;
    let pos = state.position;
    let d = cfg.d_model;
    let mut h = s.get(model.embed).row(token).to_vec();
    let mut x = vec![0.0; d];
    for ((layer, cache), router) in model.layers.iter().zip(&mut state.caches).zip(&model.routers) {
        rms_norm_rows(&h, s.get(layer.norm1).data(), NORM_EPS, &mut x);
        let y = match (&layer.mixer, cache) {
            (Mixer::Attn(b), LayerCache::Kv(c)) => b.step(s, &x, pos, c),
            (Mixer::Ssm(b), LayerCache::Ssm(c)) => b.step(s, c, &x)?,
            (Mixer::Intra(b), LayerCache::Intra(c)) => b.step(s, &x, pos, c)?,
            _ => return Err(Error::Contract("decode state does not match the model".into())),
        };
        h.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
        rms_norm_rows(&h, s.get(layer.norm2).data(), NORM_EPS, &mut x);
        let y = match (&layer.ffn, router) {
            (Ffn::Dense(f), _) => f.step(s, &x),
            (Ffn::Moe(m), Some(r)) => m.step(s, &x, r).0,
            (Ffn::Moe(_), None) => return Err(Error::Contract("MoE layer without router state".into())),
        };
        h.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
    }
    rms_norm_rows(&h, s.get(model.final_norm).data(), NORM_EPS, &mut x);
    let logits = vecmat(&x, s.get(model.head));
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decode_step"));
    }
    state.position += 1;
    Ok(logits)
}

/// Steps through the prompt; returns logits after its last token.
pub fn prefill(model: &Model, prompt: &[usize]) -> Result<(Vec<f64>, DecodeState)> {
    if prompt.is_empty() {
        return Err(Error::Contract("prefill needs at least one prompt token".into()));
    }
    let mut state = DecodeState::new(model);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = decode_step(model, &mut state, t)?;
    }
    Ok((logits, state))
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt` by `n` tokens.
pub fn generate(model: &Model, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
    let (mut logits, mut state) = prefill(model, prompt)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = argmax(&logits);
        out.push(t);
        if i + 1 < n {
            logits = decode_step(model, &mut state, t)?;
        }
    }
    Ok(out)
}

/// Seeded sampling at `temperature`; zero temperature is greedy.
pub fn sample(model: &Model, prompt: &[usize], n: usize, temperature: f64, seed: u64) -> Result<Vec<usize>> {
    if temperature.is_nan() || temperature < 0.0 {
        return Err(Error::config("temperature must be nonnegative"));
    }
    if temperature == 0.0 {
        return generate(model, prompt, n);
    }
    let mut rng = Rng::new(seed);
    let (mut logits, mut state) = prefill(model, prompt)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| ((l - m) / temperature).exp()).collect();
        let mut u = rng.uniform() * w.iter().sum::<f64>();
        let mut t = w.len() - 1;
        for (j, wj) in w.iter().enumerate() {
            if u < *wj {
                t = j;
                break;
            }
            u -= wj;
        }
        out.push(t);
        if i + 1 < n {
            logits = decode_step(model, &mut state, t)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    /// Zero-based position of the token being processed.
    pub step: usize,
    pub ops: f64,
    /// State held after the step.
    pub state_bytes: u64,
}

/// Runs `prompt_len + gen_len` real decode steps (greedy after the
/// prompt) and records the modelled operation count and the measured state
/// size of each step.
pub fn measure_decode(model: &Model, prompt_len: usize, gen_len: usize) -> Result<Vec<TraceRow>> {
    if prompt_len == 0 || gen_len == 0 {
        return Err(Error::config("prompt and generation lengths must be at least 1"));
    }
    let mut state = DecodeState::new(model);
    let mut rows = Vec::with_capacity(prompt_len + gen_len);
    let mut token = 0;
    for step in 0..prompt_len + gen_len {
        if step < prompt_len {
            token = (step * 7 + 1) % model.cfg.vocab;
        }
        let logits = decode_step(model, &mut state, token)?;
        rows.push(TraceRow { step, ops: cost::decode_step_ops(model, step as u64)?, state_bytes: state.bytes() });
        token = argmax(&logits);
    }
    Ok(rows)
}

/// The same trace from formulas alone; works on shape-only models.
pub fn predict_decode(model: &Model, prompt_len: usize, gen_len: usize) -> Result<Vec<TraceRow>> {
    if prompt_len == 0 || gen_len == 0 {
        return Err(Error::config("prompt and generation lengths must be at least 1"));
    }
    (0..prompt_len + gen_len)
        .map(|step| {
            Ok(TraceRow {
                step,
                ops: cost::decode_step_ops(model, step as u64)?,
                state_bytes: cost::state_bytes(model, step as u64 + 1)?,
            })
        })
        .collect()
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = format!("{CSV_HEADER}\nstep,ops,state_bytes\n");
    for r in rows {
        let _ = writeln!(s, "{},{:e},{}", r.step, r.ops, r.state_bytes);
    }
    s
}
