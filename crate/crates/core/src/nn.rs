//! Shared neural components: RMS and per-head group normalization, the SiLU
//! gated feed-forward network, and rotary position encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::{silu, vecmat, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const DEFAULT_ROPE_BASE: f64 = 500_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnConfig {
    pub d_model: usize,
    pub d_ffn: usize,
}

impl FfnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ffn == 0 {
            return Err(Error::config("feed-forward widths must be positive"));
        }
        if self.d_ffn < self.d_model {
            return Err(Error::config(format!(
                "d_ffn ({}) must be at least d_model ({})",
                self.d_ffn, self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
}

impl RopeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::dim("apply_rope", format!("head dim {} is odd", self.head_dim)));
        }
        if self.base.is_nan() || self.base <= 1.0 {
            return Err(Error::config(format!("rope base {} must exceed 1", self.base)));
        }
        Ok(())
    }

    /// Rotation angle of pair `i` at absolute position `pos`.
    pub fn angle(&self, pos: usize, i: usize) -> f64 {
        pos as f64 * self.base.powf(-2.0 * i as f64 / self.head_dim as f64)
    }
}

// ---------------------------------------------------------------------------
// kernels

pub(crate) fn rms_norm_rows(x: &[f64], w: &[f64], eps: f64, out: &mut [f64]) -> Vec<f64> {
    let d = w.len();
    let mut inv = Vec::with_capacity(x.len() / d);
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        for j in 0..d {
            or[j] = xr[j] * r * w[j];
        }
        inv.push(r);
    }
    inv
}

/// Normalizes every `group`-wide slice of each row to zero mean and unit
/// variance, then scales by `w` (same width as a row).
pub(crate) fn group_norm_rows(x: &[f64], w: &[f64], group: usize, eps: f64, out: &mut [f64]) -> Vec<f64> {
    let mut inv = Vec::with_capacity(x.len() / group);
    let d = w.len();
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        for ((xg, og), wg) in xr.chunks(group).zip(or.chunks_mut(group)).zip(w.chunks(group)) {
            let mean = xg.iter().sum::<f64>() / group as f64;
            let var = xg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group as f64;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..group {
                og[j] = (xg[j] - mean) * r * wg[j];
            }
            inv.push(r);
        }
    }
    inv
}

/// Rotates consecutive pairs of each `head_dim` slice by the position angle.
/// `sign = -1` applies the inverse rotation.
pub(crate) fn rope_rows(x: &mut [f64], row_pos: impl Fn(usize) -> usize, row_width: usize, cfg: &RopeConfig, sign: f64) {
    let hd = cfg.head_dim;
    for (r, row) in x.chunks_mut(row_width).enumerate() {
        let pos = row_pos(r);
        for head in row.chunks_mut(hd) {
            for i in 0..hd / 2 {
                let (s, c) = (sign * cfg.angle(pos, i)).sin_cos();
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// plain functions

/// `x / sqrt(mean(x²) + eps) ⊙ weight` over the last axis.
pub fn rms_norm(x: &Tensor, weight: &Tensor, eps: f64) -> Result<Tensor> {
    if weight.shape() != [x.last_dim()] {
        return Err(Error::dim("rms_norm", format!("{:?} vs weight {:?}", x.shape(), weight.shape())));
    }
    let mut out = Tensor::zeros(x.shape());
    rms_norm_rows(x.data(), weight.data(), eps, out.data_mut());
    out.ensure_finite("rms_norm")?;
    Ok(out)
}

/// Per-(position, head) standardization of `x[L × N_head × d_head]`, scaled
/// by `weight[N_head × d_head]`.
pub fn group_norm_per_head(x: &Tensor, weight: &Tensor, eps: f64) -> Result<Tensor> {
    if x.ndim() != 3 || weight.ndim() != 2 || x.shape()[1..] != *weight.shape() {
        return Err(Error::dim(
            "group_norm_per_head",
            format!("{:?} vs weight {:?}", x.shape(), weight.shape()),
        ));
    }
    let group = x.shape()[2];
    let mut out = Tensor::zeros(x.shape());
    group_norm_rows(x.data(), weight.data(), group, eps, out.data_mut());
    out.ensure_finite("group_norm_per_head")?;
    Ok(out)
}

/// Rotary encoding of `x[L × N × d_head]` with row `l` at `start_pos + l`.
pub fn apply_rope(x: &Tensor, start_pos: usize, cfg: &RopeConfig) -> Result<Tensor> {
    cfg.validate()?;
    if x.ndim() != 3 || x.shape()[2] != cfg.head_dim {
        return Err(Error::dim("apply_rope", format!("{:?} with head dim {}", x.shape(), cfg.head_dim)));
    }
    let mut out = x.clone();
    let width = x.shape()[1] * x.shape()[2];
    rope_rows(out.data_mut(), |r| start_pos + r, width, cfg, 1.0);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FfnWeights {
    pub gate: Tensor,
    pub up: Tensor,
    pub down: Tensor,
}

/// `down(silu(x·gate) ⊙ (x·up))` for `x[L × d_model]`.
pub fn siglu_ffn(x: &Tensor, cfg: &FfnConfig, w: &FfnWeights) -> Result<Tensor> {
    let expect = [
        (&w.gate, [cfg.d_model, cfg.d_ffn]),
        (&w.up, [cfg.d_model, cfg.d_ffn]),
        (&w.down, [cfg.d_ffn, cfg.d_model]),
    ];
    for (t, s) in expect {
        if t.shape() != s {
            return Err(Error::dim("siglu_ffn", format!("weight {:?}, expected {s:?}", t.shape())));
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(w.gate.clone());
    let u = tape.constant(w.up.clone());
    let d = tape.constant(w.down.clone());
    let y = siglu_tape(&mut tape, xv, g, u, d)?;
    Ok(tape.value(y).clone())
}

fn siglu_tape(t: &mut Tape, x: Var, gate: Var, up: Var, down: Var) -> Result<Var> {
    let g = t.matmul(x, gate)?;
    let g = t.silu(g)?;
    let u = t.matmul(x, up)?;
    let h = t.mul(g, u)?;
    t.matmul(h, down)
}

// ---------------------------------------------------------------------------
// tape operations

impl Tape {
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let d = xv.last_dim();
        if wv.shape() != [d] {
            return Err(Error::dim("rms_norm", format!("{:?} vs weight {:?}", xv.shape(), wv.shape())));
        }
        let mut out = Tensor::zeros(xv.shape());
        let inv = rms_norm_rows(xv.data(), wv.data(), eps, out.data_mut());
        self.push(
            "rms_norm",
            out,
            &[x, w],
            Box::new(move |g, p, _| {
                let (x, w) = (p[0].data(), p[1].data());
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; d];
                for (r, &ri) in inv.iter().enumerate() {
                    let xr = &x[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let mut dot = 0.0;
                    for j in 0..d {
                        let xh = xr[j] * ri;
                        gw[j] += gr[j] * xh;
                        dot += gr[j] * w[j] * xh;
                    }
                    dot /= d as f64;
                    for j in 0..d {
                        let xh = xr[j] * ri;
                        gx[r * d + j] = ri * (gr[j] * w[j] - xh * dot);
                    }
                }
                vec![
                    Some(Tensor::new(p[0].shape(), gx).unwrap()),
                    Some(Tensor::new(&[d], gw).unwrap()),
                ]
            }),
        )
    }

    /// Group normalization with `groups` equal slices per row and a
    /// full-width weight.
    pub fn group_norm(&mut self, x: Var, w: Var, groups: usize, eps: f64) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let d = xv.last_dim();
        if wv.shape() != [d] || groups == 0 || d % groups != 0 {
            return Err(Error::dim(
                "group_norm",
                format!("{:?} weight {:?} into {groups} groups", xv.shape(), wv.shape()),
            ));
        }
        let gsz = d / groups;
        let mut out = Tensor::zeros(xv.shape());
        let inv = group_norm_rows(xv.data(), wv.data(), gsz, eps, out.data_mut());
        self.push(
            "group_norm",
            out,
            &[x, w],
            Box::new(move |g, p, _| {
                let (x, w) = (p[0].data(), p[1].data());
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; d];
                let n = gsz as f64;
                for (k, &ri) in inv.iter().enumerate() {
                    let base = k * gsz;
                    let wb = base % d;
                    let xg = &x[base..base + gsz];
                    let gg = &g.data()[base..base + gsz];
                    let mean = xg.iter().sum::<f64>() / n;
                    let mut sum_gh = 0.0;
                    let mut sum_gh_xh = 0.0;
                    for j in 0..gsz {
                        let xh = (xg[j] - mean) * ri;
                        let gh = gg[j] * w[wb + j];
                        gw[wb + j] += gg[j] * xh;
                        sum_gh += gh;
                        sum_gh_xh += gh * xh;
                    }
                    for j in 0..gsz {
                        let xh = (xg[j] - mean) * ri;
                        let gh = gg[j] * w[wb + j];
                        gx[base + j] = ri * (gh - sum_gh / n - xh * sum_gh_xh / n);
                    }
                }
                vec![
                    Some(Tensor::new(p[0].shape(), gx).unwrap()),
                    Some(Tensor::new(&[d], gw).unwrap()),
                ]
            }),
        )
    }

    /// Rotary encoding for `x[B, L, H·head_dim]`; row `l` sits at
    /// `start_pos + l`.
    pub fn rope(&mut self, x: Var, start_pos: usize, cfg: RopeConfig) -> Result<Var> {
        cfg.validate()?;
        let xv = self.value(x);
        if xv.ndim() != 3 || !xv.last_dim().is_multiple_of(cfg.head_dim) {
            return Err(Error::dim("rope", format!("{:?} with head dim {}", xv.shape(), cfg.head_dim)));
        }
        let (len, width) = (xv.shape()[1], xv.shape()[2]);
        let mut out = xv.clone();
        rope_rows(out.data_mut(), |r| start_pos + r % len, width, &cfg, 1.0);
        self.push(
            "rope",
            out,
            &[x],
            Box::new(move |g, _, _| {
                let mut gx = g.clone();
                rope_rows(gx.data_mut(), |r| start_pos + r % len, width, &cfg, -1.0);
                vec![Some(gx)]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// feed-forward block

#[derive(Clone, Debug)]
pub struct FfnBlock {
    pub cfg: FfnConfig,
    pub gate: ParamId,
    pub up: ParamId,
    pub down: ParamId,
}

impl FfnBlock {
    pub fn build(store: &mut ParamStore, prefix: &str, cfg: FfnConfig, std: f64) -> Result<Self> {
        cfg.validate()?;
        let init = Init::Normal { std };
        Ok(FfnBlock {
            cfg,
            gate: store.add(format!("{prefix}.gate"), &[cfg.d_model, cfg.d_ffn], init.clone()),
            up: store.add(format!("{prefix}.up"), &[cfg.d_model, cfg.d_ffn], init.clone()),
            down: store.add(format!("{prefix}.down"), &[cfg.d_ffn, cfg.d_model], init),
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        siglu_tape(tape, x, vars[self.gate], vars[self.up], vars[self.down])
    }

    /// Single-token evaluation.
    pub fn step(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let g = vecmat(x, store.get(self.gate));
        let u = vecmat(x, store.get(self.up));
        let h: Vec<f64> = g.iter().zip(&u).map(|(&g, &u)| silu(g) * u).collect();
        vecmat(&h, store.get(self.down))
    }

    pub fn weights(&self, store: &ParamStore) -> FfnWeights {
        FfnWeights {
            gate: store.get(self.gate).clone(),
            up: store.get(self.up).clone(),
            down: store.get(self.down).clone(),
        }
    }
}
