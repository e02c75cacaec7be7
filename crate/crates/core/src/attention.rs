//! Causal grouped-query attention and its sliding-window-with-sink variant,
//! as a differentiable full-sequence operation and as a cached single step.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{rope_rows, RopeConfig, DEFAULT_ROPE_BASE};
use crate::params::{Init, ParamId, ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::{softmax_in_place, vecmat, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub d_model: usize,
    pub n_head: usize,
    pub n_kv: usize,
    pub d_head: usize,
    /// Query/key width per head; equals `d_head` outside intra-hybrid blocks.
    pub d_qk: usize,
    pub window: Option<usize>,
    pub sink: Option<usize>,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}

impl AttnConfig {
    pub fn full(d_model: usize, n_head: usize, n_kv: usize, d_head: usize) -> Self {
        AttnConfig { d_model, n_head, n_kv, d_head, d_qk: d_head, window: None, sink: None, rope_base: DEFAULT_ROPE_BASE }
    }

    pub fn sliding(mut self, window: usize, sink: usize) -> Self {
        self.window = Some(window);
        self.sink = Some(sink);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_head == 0 || self.n_kv == 0 || self.d_head == 0 || self.d_qk == 0 {
            return Err(Error::config("attention widths must be positive"));
        }
        if !self.n_head.is_multiple_of(self.n_kv) {
            return Err(Error::config(format!(
                "N_head ({}) is not divisible by N_kv ({})",
                self.n_head, self.n_kv
            )));
        }
        if self.d_qk > self.d_head {
            return Err(Error::config(format!("d_qk ({}) exceeds d_head ({})", self.d_qk, self.d_head)));
        }
        match (self.window, self.sink) {
            (None, None) => {}
            (Some(w), Some(_)) if w >= 1 => {}
            (Some(_), Some(_)) => return Err(Error::config("sliding window must be at least 1")),
            _ => return Err(Error::config("window and sink must be given together")),
        }
        self.rope().validate()
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig { head_dim: self.d_qk, base: self.rope_base }
    }

    pub fn mask(&self) -> Mask {
        match (self.window, self.sink) {
            (Some(window), Some(sink)) => Mask::Window { window, sink },
            _ => Mask::Causal,
        }
    }

    pub fn shape(&self) -> AttnShape {
        AttnShape { n_head: self.n_head, n_kv: self.n_kv, d_qk: self.d_qk, d_head: self.d_head }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mask {
    Causal,
    /// The `sink` first positions plus the `window` most recent ones
    /// (the query's own position included).
    Window { window: usize, sink: usize },
}

impl Mask {
    #[inline]
    pub fn visible(self, t: usize, j: usize) -> bool {
        match self {
            Mask::Causal => j <= t,
            Mask::Window { window, sink } => j <= t && (j < sink || j + window > t),
        }
    }
}

/// Visible key positions for query `t` in a sequence of length `len`.
pub fn swa_mask(t: usize, len: usize, window: usize, sink: usize) -> Result<Vec<usize>> {
    if window < 1 {
        return Err(Error::config("sliding window must be at least 1"));
    }
    if t >= len {
        return Err(Error::Contract(format!("position {t} outside length {len}")));
    }
    let m = Mask::Window { window, sink };
    Ok((0..=t).filter(|&j| m.visible(t, j)).collect())
}

/// Head layout for the attention core.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub n_head: usize,
    pub n_kv: usize,
    pub d_qk: usize,
    pub d_head: usize,
}

impl AttnShape {
    fn kv_of(&self, h: usize) -> usize {
        h / (self.n_head / self.n_kv)
    }
}

/// Core kernel over `[B, L, ·]` buffers. Returns the concatenated head
/// outputs and the probability matrices `[B, H, L, L]`.
fn attend(q: &[f64], k: &[f64], v: &[f64], b: usize, l: usize, s: AttnShape, mask: Mask) -> (Vec<f64>, Vec<f64>) {
    let (hq, hk, hv) = (s.n_head * s.d_qk, s.n_kv * s.d_qk, s.n_kv * s.d_head);
    let ho = s.n_head * s.d_head;
    let scale = 1.0 / (s.d_qk as f64).sqrt();
    let mut out = vec![0.0; b * l * ho];
    let mut probs = vec![0.0; b * s.n_head * l * l];
    let mut row = vec![0.0; l];
    for bi in 0..b {
        for h in 0..s.n_head {
            let kv = s.kv_of(h);
            for t in 0..l {
                let qt = &q[(bi * l + t) * hq + h * s.d_qk..][..s.d_qk];
                let n = t + 1;
                for (j, r) in row[..n].iter_mut().enumerate() {
                    *r = if mask.visible(t, j) {
                        let kj = &k[(bi * l + j) * hk + kv * s.d_qk..][..s.d_qk];
                        qt.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_in_place(&mut row[..n]);
                let p = &mut probs[((bi * s.n_head + h) * l + t) * l..][..l];
                p[..n].copy_from_slice(&row[..n]);
                let o = &mut out[(bi * l + t) * ho + h * s.d_head..][..s.d_head];
                for (j, &pj) in row[..n].iter().enumerate() {
                    if pj == 0.0 {
                        continue;
                    }
                    let vj = &v[(bi * l + j) * hv + kv * s.d_head..][..s.d_head];
                    for (oo, vv) in o.iter_mut().zip(vj) {
                        *oo += pj * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, s: AttnShape) -> Result<(usize, usize)> {
    let ok = q.ndim() == 3
        && k.ndim() == 3
        && v.ndim() == 3
        && q.shape()[..2] == k.shape()[..2]
        && q.shape()[..2] == v.shape()[..2]
        && q.last_dim() == s.n_head * s.d_qk
        && k.last_dim() == s.n_kv * s.d_qk
        && v.last_dim() == s.n_kv * s.d_head
        && s.n_kv > 0
        && s.n_head.is_multiple_of(s.n_kv);
    if !ok {
        return Err(Error::dim(
            "attention",
            format!("q {:?} k {:?} v {:?} for {s:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok((q.shape()[0], q.shape()[1]))
}

impl Tape {
    /// Scaled dot-product attention over `q[B, L, H·d_qk]`,
    /// `k[B, L, N_kv·d_qk]`, `v[B, L, N_kv·d_head]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, s: AttnShape, mask: Mask) -> Result<Var> {
        let (b, l) = check_qkv(self.value(q), self.value(k), self.value(v), s)?;
        let (out, probs) = attend(self.value(q).data(), self.value(k).data(), self.value(v).data(), b, l, s, mask);
        let out = Tensor::new(&[b, l, s.n_head * s.d_head], out)?;
        self.push(
            "attention",
            out,
            &[q, k, v],
            Box::new(move |g, p, _| {
                let (q, k, v) = (p[0].data(), p[1].data(), p[2].data());
                let (hq, hk, hv) = (s.n_head * s.d_qk, s.n_kv * s.d_qk, s.n_kv * s.d_head);
                let ho = s.n_head * s.d_head;
                let scale = 1.0 / (s.d_qk as f64).sqrt();
                let mut gq = vec![0.0; q.len()];
                let mut gk = vec![0.0; k.len()];
                let mut gv = vec![0.0; v.len()];
                let mut dp = vec![0.0; l];
                for bi in 0..b {
                    for h in 0..s.n_head {
                        let kv = s.kv_of(h);
                        for t in 0..l {
                            let pr = &probs[((bi * s.n_head + h) * l + t) * l..][..t + 1];
                            let go = &g.data()[(bi * l + t) * ho + h * s.d_head..][..s.d_head];
                            let mut dot = 0.0;
                            for (j, &pj) in pr.iter().enumerate() {
                                if pj == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vo = (bi * l + j) * hv + kv * s.d_head;
                                let vj = &v[vo..vo + s.d_head];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += pj * dp[j];
                                for (gvv, goo) in gv[vo..vo + s.d_head].iter_mut().zip(go) {
                                    *gvv += pj * goo;
                                }
                            }
                            let qo = (bi * l + t) * hq + h * s.d_qk;
                            for (j, &pj) in pr.iter().enumerate() {
                                if pj == 0.0 {
                                    continue;
                                }
                                let ds = pj * (dp[j] - dot) * scale;
                                let ko = (bi * l + j) * hk + kv * s.d_qk;
                                for i in 0..s.d_qk {
                                    gq[qo + i] += ds * k[ko + i];
                                    gk[ko + i] += ds * q[qo + i];
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(p[0].shape(), gq).unwrap()),
                    Some(Tensor::new(p[1].shape(), gk).unwrap()),
                    Some(Tensor::new(p[2].shape(), gv).unwrap()),
                ]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// plain functions

#[derive(Clone, Debug)]
pub struct AttnWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttnWeights {
    fn check(&self, cfg: &AttnConfig) -> Result<()> {
        let expect = [
            (&self.wq, [cfg.d_model, cfg.n_head * cfg.d_qk]),
            (&self.wk, [cfg.d_model, cfg.n_kv * cfg.d_qk]),
            (&self.wv, [cfg.d_model, cfg.n_kv * cfg.d_head]),
            (&self.wo, [cfg.n_head * cfg.d_head, cfg.d_model]),
        ];
        for (t, s) in expect {
            if t.shape() != s {
                return Err(Error::dim("attention", format!("weight {:?}, expected {s:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Projects `x[B, L, d_model]` to rotated queries/keys and values, and runs
/// the attention core. Output is the concatenated head outputs before the
/// output projection.
pub(crate) fn project_attend(t: &mut Tape, x: Var, wq: Var, wk: Var, wv: Var, cfg: &AttnConfig) -> Result<Var> {
    let q = t.matmul(x, wq)?;
    let q = t.rope(q, 0, cfg.rope())?;
    let k = t.matmul(x, wk)?;
    let k = t.rope(k, 0, cfg.rope())?;
    let v = t.matmul(x, wv)?;
    t.attention(q, k, v, cfg.shape(), cfg.mask())
}

fn forward_plain(x: &Tensor, cfg: &AttnConfig, w: &AttnWeights) -> Result<Tensor> {
    cfg.validate()?;
    w.check(cfg)?;
    if x.ndim() != 2 || x.last_dim() != cfg.d_model {
        return Err(Error::dim("attention", format!("input {:?}, d_model {}", x.shape(), cfg.d_model)));
    }
    let mut t = Tape::new();
    let xv = t.constant(x.reshape(&[1, x.shape()[0], cfg.d_model])?);
    let [wq, wk, wv, wo] = [&w.wq, &w.wk, &w.wv, &w.wo].map(|m| t.constant(m.clone()));
    let a = project_attend(&mut t, xv, wq, wk, wv, cfg)?;
    let y = t.matmul(a, wo)?;
    t.value(y).reshape(x.shape())
}

/// Full causal attention over `x[L × d_model]`.
pub fn causal_attention_forward(x: &Tensor, cfg: &AttnConfig, w: &AttnWeights) -> Result<Tensor> {
    if cfg.window.is_some() {
        return Err(Error::config("causal attention given a windowed config"));
    }
    forward_plain(x, cfg, w)
}

/// Sliding-window attention with sink tokens over `x[L × d_model]`.
pub fn swa_attention_forward(x: &Tensor, cfg: &AttnConfig, w: &AttnWeights) -> Result<Tensor> {
    if cfg.window.is_none() {
        return Err(Error::config("sliding-window attention needs window and sink"));
    }
    forward_plain(x, cfg, w)
}

/// Attention probabilities `[N_head, L, L]` for `x[L × d_model]`.
pub fn attention_weights(x: &Tensor, cfg: &AttnConfig, w: &AttnWeights) -> Result<Tensor> {
    cfg.validate()?;
    w.check(cfg)?;
    let l = x.shape()[0];
    let x3 = x.reshape(&[1, l, cfg.d_model])?;
    let mut q = crate::tensor::matmul(&x3, &w.wq)?;
    let mut k = crate::tensor::matmul(&x3, &w.wk)?;
    let v = crate::tensor::matmul(&x3, &w.wv)?;
    let rope = cfg.rope();
    rope_rows(q.data_mut(), |r| r, cfg.n_head * cfg.d_qk, &rope, 1.0);
    rope_rows(k.data_mut(), |r| r, cfg.n_kv * cfg.d_qk, &rope, 1.0);
    let (_, probs) = attend(q.data(), k.data(), v.data(), 1, l, cfg.shape(), cfg.mask());
    Tensor::new(&[cfg.n_head, l, l], probs)
}

// ---------------------------------------------------------------------------
// cached decoding

/// Key/value cache for one attention block. Keys are stored after rotation.
#[derive(Clone, Debug)]
pub enum KvCache {
    Full { k: Vec<Vec<f64>>, v: Vec<Vec<f64>> },
    /// Sink entries are kept forever; the ring holds the `window` most
    /// recent positions at or beyond `sink`.
    Rolling {
        window: usize,
        sink: usize,
        sink_kv: Vec<(Vec<f64>, Vec<f64>)>,
        ring: VecDeque<(usize, Vec<f64>, Vec<f64>)>,
    },
}

impl KvCache {
    pub fn new(cfg: &AttnConfig) -> Self {
        match cfg.mask() {
            Mask::Causal => KvCache::Full { k: Vec::new(), v: Vec::new() },
            Mask::Window { window, sink } => {
                KvCache::Rolling { window, sink, sink_kv: Vec::new(), ring: VecDeque::with_capacity(window) }
            }
        }
    }

    /// Appends the entry for position `pos` and evicts what the mask no
    /// longer shows to later queries.
    pub fn push(&mut self, pos: usize, k: Vec<f64>, v: Vec<f64>) {
        match self {
            KvCache::Full { k: ks, v: vs } => {
                ks.push(k);
                vs.push(v);
            }
            KvCache::Rolling { window, sink, sink_kv, ring } => {
                if pos < *sink {
                    sink_kv.push((k, v));
                } else {
                    ring.push_back((pos, k, v));
                    while ring.front().is_some_and(|e| e.0 + *window <= pos) {
                        ring.pop_front();
                    }
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            KvCache::Full { k, .. } => k.len(),
            KvCache::Rolling { sink_kv, ring, .. } => sink_kv.len() + ring.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> Box<dyn Iterator<Item = (&[f64], &[f64])> + '_> {
        match self {
            KvCache::Full { k, v } => Box::new(k.iter().zip(v).map(|(a, b)| (a.as_slice(), b.as_slice()))),
            KvCache::Rolling { sink_kv, ring, .. } => Box::new(
                sink_kv
                    .iter()
                    .map(|(a, b)| (a.as_slice(), b.as_slice()))
                    .chain(ring.iter().map(|(_, a, b)| (a.as_slice(), b.as_slice()))),
            ),
        }
    }

    /// Cached scalars (keys plus values).
    pub fn numel(&self) -> usize {
        self.entries().map(|(k, v)| k.len() + v.len()).sum()
    }
}

/// One query against every cached entry. `q` is already rotated.
pub(crate) fn attend_cached(q: &[f64], cache: &KvCache, s: AttnShape) -> Vec<f64> {
    let scale = 1.0 / (s.d_qk as f64).sqrt();
    let n = cache.len();
    let mut out = vec![0.0; s.n_head * s.d_head];
    let mut scores = vec![0.0; n];
    for h in 0..s.n_head {
        let kv = s.kv_of(h);
        let qh = &q[h * s.d_qk..][..s.d_qk];
        for (sc, (k, _)) in scores.iter_mut().zip(cache.entries()) {
            *sc = qh.iter().zip(&k[kv * s.d_qk..][..s.d_qk]).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_in_place(&mut scores);
        let o = &mut out[h * s.d_head..][..s.d_head];
        for (&p, (_, v)) in scores.iter().zip(cache.entries()) {
            for (oo, vv) in o.iter_mut().zip(&v[kv * s.d_head..][..s.d_head]) {
                *oo += p * vv;
            }
        }
    }
    out
}

pub(crate) fn rotate_at(x: &mut [f64], pos: usize, rope: &RopeConfig) {
    let w = x.len();
    rope_rows(x, |_| pos, w, rope, 1.0);
}

// ---------------------------------------------------------------------------
// block

#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub cfg: AttnConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttnBlock {
    pub fn build(store: &mut ParamStore, prefix: &str, cfg: AttnConfig, std: f64) -> Result<Self> {
        cfg.validate()?;
        let init = Init::Normal { std };
        let d = cfg.d_model;
        Ok(AttnBlock {
            cfg,
            wq: store.add(format!("{prefix}.wq"), &[d, cfg.n_head * cfg.d_qk], init.clone()),
            wk: store.add(format!("{prefix}.wk"), &[d, cfg.n_kv * cfg.d_qk], init.clone()),
            wv: store.add(format!("{prefix}.wv"), &[d, cfg.n_kv * cfg.d_head], init.clone()),
            wo: store.add(format!("{prefix}.wo"), &[cfg.n_head * cfg.d_head, d], init),
        })
    }

    pub fn forward(&self, t: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        let a = project_attend(t, x, vars[self.wq], vars[self.wk], vars[self.wv], &self.cfg)?;
        t.matmul(a, vars[self.wo])
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(&self.cfg)
    }

    pub fn step(&self, store: &ParamStore, x: &[f64], pos: usize, cache: &mut KvCache) -> Vec<f64> {
        let rope = self.cfg.rope();
        let mut q = vecmat(x, store.get(self.wq));
        let mut k = vecmat(x, store.get(self.wk));
        let v = vecmat(x, store.get(self.wv));
        rotate_at(&mut q, pos, &rope);
        rotate_at(&mut k, pos, &rope);
        cache.push(pos, k, v);
        let a = attend_cached(&q, cache, self.cfg.shape());
        vecmat(&a, store.get(self.wo))
    }

    pub fn weights(&self, store: &ParamStore) -> AttnWeights {
        AttnWeights {
            wq: store.get(self.wq).clone(),
            wk: store.get(self.wk).clone(),
            wv: store.get(self.wv).clone(),
            wo: store.get(self.wo).clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::gradcheck::{check, weighted_sum};
    use proptest::prelude::*;

    fn weights(cfg: &AttnConfig, rng: &mut Rng) -> AttnWeights {
        AttnWeights {
            wq: Tensor::randn(&[cfg.d_model, cfg.n_head * cfg.d_qk], 0.5, rng),
            wk: Tensor::randn(&[cfg.d_model, cfg.n_kv * cfg.d_qk], 0.5, rng),
            wv: Tensor::randn(&[cfg.d_model, cfg.n_kv * cfg.d_head], 0.5, rng),
            wo: Tensor::randn(&[cfg.n_head * cfg.d_head, cfg.d_model], 0.5, rng),
        }
    }

    fn cfg(n_head: usize, n_kv: usize) -> AttnConfig {
        AttnConfig { rope_base: 10_000.0, ..AttnConfig::full(8, n_head, n_kv, 4) }
    }

    /// Position-by-position evaluation with explicit loops and trig.
    fn naive(x: &Tensor, c: &AttnConfig, w: &AttnWeights) -> Tensor {
        let l = x.shape()[0];
        let proj = |m: &Tensor, t: usize| -> Vec<f64> {
            let n = m.shape()[1];
            (0..n).map(|j| (0..c.d_model).map(|i| x.row(t)[i] * m.data()[i * n + j]).sum()).collect()
        };
        let rot = |v: &mut Vec<f64>, pos: usize| {
            for head in v.chunks_mut(c.d_qk) {
                for i in 0..c.d_qk / 2 {
                    let th = pos as f64 * c.rope_base.powf(-2.0 * i as f64 / c.d_qk as f64);
                    let (a, b) = (head[2 * i], head[2 * i + 1]);
                    head[2 * i] = a * th.cos() - b * th.sin();
                    head[2 * i + 1] = a * th.sin() + b * th.cos();
                }
            }
        };
        let mut out = vec![0.0; l * c.d_model];
        for t in 0..l {
            let mut q = proj(&w.wq, t);
            rot(&mut q, t);
            let mut cat = vec![0.0; c.n_head * c.d_head];
            for h in 0..c.n_head {
                let kvh = h * c.n_kv / c.n_head;
                let mut scores = Vec::new();
                let mut vals = Vec::new();
                for j in 0..=t {
                    let visible = match (c.window, c.sink) {
                        (Some(wn), Some(sk)) => j < sk || t < j + wn,
                        _ => true,
                    };
                    if !visible {
                        continue;
                    }
                    let mut k = proj(&w.wk, j);
                    rot(&mut k, j);
                    let v = proj(&w.wv, j);
                    let s: f64 = (0..c.d_qk).map(|i| q[h * c.d_qk + i] * k[kvh * c.d_qk + i]).sum();
                    scores.push(s / (c.d_qk as f64).sqrt());
                    vals.push(v[kvh * c.d_head..(kvh + 1) * c.d_head].to_vec());
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (s, v) in scores.iter().zip(&vals) {
                    let p = (s - m).exp() / z;
                    for i in 0..c.d_head {
                        cat[h * c.d_head + i] += p * v[i];
                    }
                }
            }
            for o in 0..c.d_model {
                out[t * c.d_model + o] = (0..cat.len()).map(|i| cat[i] * w.wo.data()[i * c.d_model + o]).sum();
            }
        }
        Tensor::new(&[l, c.d_model], out).unwrap()
    }

    #[test]
    fn single_position_passes_value_through() {
        let mut rng = Rng::new(1);
        let c = cfg(2, 2);
        let w = weights(&c, &mut rng);
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let y = causal_attention_forward(&x, &c, &w).unwrap();
        let v = crate::tensor::matmul(&x, &w.wv).unwrap();
        let want = crate::tensor::matmul(&v, &w.wo).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = Rng::new(2);
        let c = cfg(2, 1);
        let w = weights(&c, &mut rng);
        // zero query projection makes every score equal regardless of rotation
        let w = AttnWeights { wq: Tensor::zeros(w.wq.shape()), ..w };
        let x = Tensor::from_fn(&[3, 8], |i| (i % 8) as f64);
        let p = attention_weights(&x, &c, &w).unwrap();
        for h in 0..2 {
            for j in 0..3 {
                assert!((p.data()[(h * 3 + 2) * 3 + j] - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = Rng::new(3);
        let c = cfg(2, 2);
        let w = weights(&c, &mut rng);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let y = causal_attention_forward(&x, &c, &w).unwrap();
        assert!(y.max_abs_diff(&naive(&x, &c, &w)) < 1e-10);
    }

    #[test]
    fn swa_matches_naive_oracle() {
        let mut rng = Rng::new(4);
        let c = cfg(2, 1).sliding(2, 1);
        let w = weights(&c, &mut rng);
        let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let y = swa_attention_forward(&x, &c, &w).unwrap();
        assert!(y.max_abs_diff(&naive(&x, &c, &w)) < 1e-10);
    }

    #[test]
    fn swa_mask_examples() {
        assert_eq!(swa_mask(4, 8, 2, 1).unwrap(), vec![0, 3, 4]);
        assert_eq!(swa_mask(0, 8, 3, 2).unwrap(), vec![0]);
        assert_eq!(swa_mask(2, 8, 1, 5).unwrap(), vec![0, 1, 2]);
        assert!(swa_mask(0, 8, 0, 1).is_err());
    }

    #[test]
    fn wide_window_equals_full_attention_bitwise() {
        let mut rng = Rng::new(5);
        let c = cfg(2, 1);
        let w = weights(&c, &mut rng);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let full = causal_attention_forward(&x, &c, &w).unwrap();
        for sink in [0, 2, 9] {
            let swa = swa_attention_forward(&x, &c.sliding(5, sink), &w).unwrap();
            assert_eq!(swa, full);
        }
    }

    #[test]
    fn masked_weights_are_exactly_zero() {
        let mut rng = Rng::new(6);
        let c = cfg(2, 2).sliding(3, 2);
        let w = weights(&c, &mut rng);
        let x = Tensor::randn(&[9, 8], 1.0, &mut rng);
        let p = attention_weights(&x, &c, &w).unwrap();
        for h in 0..2 {
            for t in 0..9 {
                for j in 0..9 {
                    let pj = p.data()[(h * 9 + t) * 9 + j];
                    if !c.mask().visible(t, j) {
                        assert_eq!(pj, 0.0);
                    } else {
                        assert!(pj > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(AttnConfig::full(8, 3, 2, 4).validate().is_err());
        let mut c = cfg(2, 2);
        c.window = Some(4);
        assert!(c.validate().is_err());
        assert!(cfg(2, 2).sliding(0, 1).validate().is_err());
        assert!(AttnConfig { d_qk: 6, ..cfg(2, 2) }.validate().is_err());
        assert!(cfg(2, 2).sliding(1, 0).validate().is_ok());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = Rng::new(7);
        let c = cfg(2, 2);
        let w = weights(&c, &mut rng);
        assert!(causal_attention_forward(&Tensor::ones(&[3, 7]), &c, &w).is_err());
        let bad = AttnWeights { wo: Tensor::ones(&[4, 8]), ..w };
        assert!(causal_attention_forward(&Tensor::ones(&[3, 8]), &c, &bad).is_err());
    }

    #[test]
    fn mha_and_shared_kv_by_replication() {
        let mut rng = Rng::new(8);
        // a single shared K/V head equals MHA whose K/V heads are copies
        let shared = cfg(2, 1);
        let w1 = weights(&shared, &mut rng);
        let rep = |m: &Tensor, width: usize| {
            Tensor::from_fn(&[8, 2 * width], |i| m.data()[(i / (2 * width)) * width + (i % (2 * width)) % width])
        };
        let mha = cfg(2, 2);
        let w2 = AttnWeights { wq: w1.wq.clone(), wk: rep(&w1.wk, 4), wv: rep(&w1.wv, 4), wo: w1.wo.clone() };
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let a = causal_attention_forward(&x, &shared, &w1).unwrap();
        let b = causal_attention_forward(&x, &mha, &w2).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(b.max_abs_diff(&naive(&x, &mha, &w2)) < 1e-10);
    }

    #[test]
    fn attention_gradients() {
        let mut rng = Rng::new(9);
        let s = AttnShape { n_head: 4, n_kv: 2, d_qk: 2, d_head: 3 };
        let q = Tensor::randn(&[2, 5, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[2, 5, 6], 1.0, &mut rng);
        for mask in [Mask::Causal, Mask::Window { window: 2, sink: 1 }] {
            let err = check(&[q.clone(), k.clone(), v.clone()], 1e-3, |t, x| {
                let y = t.attention(x[0], x[1], x[2], s, mask).unwrap();
                weighted_sum(t, y, 3)
            });
            assert!(err < 1e-4, "{mask:?}: {err}");
        }
    }

    #[test]
    fn cached_steps_match_full_forward() {
        let mut rng = Rng::new(10);
        for c in [cfg(2, 1), cfg(2, 2).sliding(2, 1), cfg(4, 2).sliding(3, 0)] {
            let mut store = ParamStore::new();
            let block = AttnBlock::build(&mut store, "a", c, 0.5).unwrap();
            store.materialize(11);
            let x = Tensor::randn(&[9, 8], 1.0, &mut rng);
            let full = forward_plain(&x, &c, &block.weights(&store)).unwrap();
            let mut cache = block.new_cache();
            for t in 0..9 {
                let y = block.step(&store, x.row(t), t, &mut cache);
                for (a, b) in y.iter().zip(full.row(t)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            if let Some(w) = c.window {
                assert!(cache.len() <= w + c.sink.unwrap());
            }
        }
    }

    proptest! {
        #[test]
        fn causality_under_mutation(seed in 0u64..200, p in 1usize..6, windowed in any::<bool>()) {
            let mut rng = Rng::new(seed);
            let c = if windowed { cfg(2, 1).sliding(2, 1) } else { cfg(2, 1) };
            let w = weights(&c, &mut rng);
            let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
            let mut x2 = x.clone();
            for v in &mut x2.data_mut()[p * 8..] {
                *v += 3.0;
            }
            let a = forward_plain(&x, &c, &w).unwrap();
            let b = forward_plain(&x2, &c, &w).unwrap();
            for t in 0..p {
                prop_assert_eq!(a.row(t), b.row(t));
            }
        }

        #[test]
        fn prefix_consistency(seed in 0u64..200, t in 1usize..7) {
            let mut rng = Rng::new(seed);
            let c = cfg(2, 2).sliding(3, 1);
            let w = weights(&c, &mut rng);
            let x = Tensor::randn(&[7, 8], 1.0, &mut rng);
            let full = forward_plain(&x, &c, &w).unwrap();
            let pre = forward_plain(&x.slice_rows(0, t).unwrap(), &c, &w).unwrap();
            prop_assert!(pre.max_abs_diff(&full.slice_rows(0, t).unwrap()) < 1e-10);
        }
    }
}
