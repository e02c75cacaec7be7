//! Mamba-2 style selective state-space block.
//!
//! The input projection emits `[z | x | B | C | dt]`. A causal depthwise
//! convolution with SiLU runs over the `x|B|C` channels, then each head
//! evolves `h_t = exp(Δ_t·A)·h_{t-1} + Δ_t·B_t ⊗ x_t` and reads out
//! `y_t = C_t·h_t + D·x_t`. The output is gated by `silu(z)`, RMS-normalized
//! and projected back to the model width.
//!
//! The full-sequence scan has a sequential path and a chunked matrix path
//! that carries state between chunks; both produce the same values.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{rms_norm_rows, NORM_EPS};
use crate::params::{Init, ParamId, ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::{gemm, silu, softplus, vecmat, Tensor};

pub const DEFAULT_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsmConfig {
    pub d_model: usize,
    pub d_ssm: usize,
    pub d_state: usize,
    pub d_head_ssm: usize,
    pub n_conv: usize,
    #[serde(default = "one")]
    pub n_groups: usize,
    #[serde(default = "default_chunk")]
    pub chunk: usize,
}

fn one() -> usize {
    1
}

fn default_chunk() -> usize {
    DEFAULT_CHUNK
}

impl SsmConfig {
    /// Inner width defaults to twice the model width.
    pub fn new(d_model: usize, d_state: usize, d_head_ssm: usize, n_conv: usize) -> Self {
        SsmConfig { d_model, d_ssm: 2 * d_model, d_state, d_head_ssm, n_conv, n_groups: 1, chunk: DEFAULT_CHUNK }
    }

    pub fn n_head(&self) -> usize {
        self.d_ssm / self.d_head_ssm
    }

    /// Channels seen by the convolution: `x`, `B` and `C`.
    pub fn conv_channels(&self) -> usize {
        self.d_ssm + 2 * self.n_groups * self.d_state
    }

    pub fn in_proj_width(&self) -> usize {
        self.d_ssm + self.conv_channels() + self.n_head()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ssm == 0 || self.d_head_ssm == 0 {
            return Err(Error::config("SSM widths must be positive"));
        }
        if !self.d_ssm.is_multiple_of(self.d_head_ssm) {
            return Err(Error::config(format!(
                "d_ssm ({}) is not divisible by the SSM head width ({})",
                self.d_ssm, self.d_head_ssm
            )));
        }
        if self.n_conv < 1 || self.d_state < 1 {
            return Err(Error::config("N_conv and d_state must be at least 1"));
        }
        if self.n_groups == 0 || !self.n_head().is_multiple_of(self.n_groups) {
            return Err(Error::config(format!(
                "{} SSM heads cannot be split into {} groups",
                self.n_head(),
                self.n_groups
            )));
        }
        if self.chunk == 0 {
            return Err(Error::config("chunk must be at least 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// differentiable kernels

/// Dimensions of one selective-scan call.
#[derive(Clone, Copy, Debug)]
struct ScanDims {
    b: usize,
    l: usize,
    h: usize,
    p: usize,
    g: usize,
    n: usize,
}

impl ScanDims {
    fn group(&self, head: usize) -> usize {
        head / (self.h / self.g)
    }
    fn x(&self, bi: usize, t: usize, head: usize) -> usize {
        (bi * self.l + t) * self.h * self.p + head * self.p
    }
    fn bc(&self, bi: usize, t: usize, head: usize) -> usize {
        (bi * self.l + t) * self.g * self.n + self.group(head) * self.n
    }
    fn dt(&self, bi: usize, t: usize, head: usize) -> usize {
        (bi * self.l + t) * self.h + head
    }
}

fn scan_sequential(d: ScanDims, x: &[f64], dt: &[f64], a: &[f64], bm: &[f64], cm: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    let mut st = vec![0.0; d.p * d.n];
    for bi in 0..d.b {
        for hd in 0..d.h {
            st.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..d.l {
                let dtv = dt[d.dt(bi, t, hd)];
                let decay = (dtv * a[hd]).exp();
                let (xo, bo) = (d.x(bi, t, hd), d.bc(bi, t, hd));
                for pi in 0..d.p {
                    let u = dtv * x[xo + pi];
                    let row = &mut st[pi * d.n..(pi + 1) * d.n];
                    let mut acc = 0.0;
                    for ni in 0..d.n {
                        row[ni] = decay * row[ni] + u * bm[bo + ni];
                        acc += cm[bo + ni] * row[ni];
                    }
                    y[xo + pi] = acc;
                }
            }
        }
    }
    y
}

/// Chunked evaluation: inside a chunk the output is a masked, decay-weighted
/// `C·Bᵀ` matrix applied to `Δ·x`, plus the decayed read-out of the state
/// carried in from the previous chunk.
fn scan_chunked(d: ScanDims, q: usize, x: &[f64], dt: &[f64], a: &[f64], bm: &[f64], cm: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    let mut st = vec![0.0; d.p * d.n];
    let mut s = vec![0.0; q];
    let mut gm = vec![0.0; q * q];
    let mut xc = vec![0.0; q * d.p];
    let mut xw = vec![0.0; q * d.p];
    let mut bc = vec![0.0; q * d.n];
    let mut cc = vec![0.0; q * d.n];
    let mut yc = vec![0.0; q * d.p];
    let mut inter = vec![0.0; q * d.p];
    for bi in 0..d.b {
        for hd in 0..d.h {
            st.iter_mut().for_each(|v| *v = 0.0);
            let mut c0 = 0;
            while c0 < d.l {
                let len = q.min(d.l - c0);
                let mut acc = 0.0;
                for tau in 0..len {
                    let t = c0 + tau;
                    acc += dt[d.dt(bi, t, hd)] * a[hd];
                    s[tau] = acc;
                    xc[tau * d.p..(tau + 1) * d.p].copy_from_slice(&x[d.x(bi, t, hd)..][..d.p]);
                    bc[tau * d.n..(tau + 1) * d.n].copy_from_slice(&bm[d.bc(bi, t, hd)..][..d.n]);
                    cc[tau * d.n..(tau + 1) * d.n].copy_from_slice(&cm[d.bc(bi, t, hd)..][..d.n]);
                }
                for t in 0..len {
                    for tau in 0..len {
                        gm[t * len + tau] = if tau <= t {
                            let cb: f64 = (0..d.n).map(|i| cc[t * d.n + i] * bc[tau * d.n + i]).sum();
                            cb * (s[t] - s[tau]).exp() * dt[d.dt(bi, c0 + tau, hd)]
                        } else {
                            0.0
                        };
                    }
                }
                let (gm, xc_, yc_) = (&gm[..len * len], &xc[..len * d.p], &mut yc[..len * d.p]);
                gemm(len, len, d.p, gm, false, xc_, false, yc_, 0.0);
                let inter_ = &mut inter[..len * d.p];
                gemm(len, d.n, d.p, &cc[..len * d.n], false, &st, true, inter_, 0.0);
                for t in 0..len {
                    let e = s[t].exp();
                    let out = &mut y[d.x(bi, c0 + t, hd)..][..d.p];
                    for pi in 0..d.p {
                        out[pi] = yc_[t * d.p + pi] + e * inter_[t * d.p + pi];
                    }
                }
                let last = s[len - 1];
                for tau in 0..len {
                    let w = (last - s[tau]).exp() * dt[d.dt(bi, c0 + tau, hd)];
                    for pi in 0..d.p {
                        xw[tau * d.p + pi] = w * xc[tau * d.p + pi];
                    }
                }
                gemm(d.p, len, d.n, &xw[..len * d.p], true, &bc[..len * d.n], false, &mut st, last.exp());
                c0 += len;
            }
        }
    }
    y
}

/// Gradients by the reverse recurrence
/// `λ_t = C_t ⊗ gy_t + a_{t+1}·λ_{t+1}` over recomputed states.
fn scan_backward(
    d: ScanDims,
    gy: &[f64],
    x: &[f64],
    dt: &[f64],
    a: &[f64],
    bm: &[f64],
    cm: &[f64],
) -> [Vec<f64>; 5] {
    let (mut gx, mut gdt, mut ga) = (vec![0.0; x.len()], vec![0.0; dt.len()], vec![0.0; a.len()]);
    let (mut gb, mut gc) = (vec![0.0; bm.len()], vec![0.0; cm.len()]);
    let pn = d.p * d.n;
    let mut states = vec![0.0; (d.l + 1) * pn];
    let mut lam = vec![0.0; pn];
    for bi in 0..d.b {
        for hd in 0..d.h {
            for t in 0..d.l {
                let dtv = dt[d.dt(bi, t, hd)];
                let decay = (dtv * a[hd]).exp();
                let (xo, bo) = (d.x(bi, t, hd), d.bc(bi, t, hd));
                let (prev, cur) = states.split_at_mut((t + 1) * pn);
                let prev = &prev[t * pn..];
                let cur = &mut cur[..pn];
                for pi in 0..d.p {
                    let u = dtv * x[xo + pi];
                    for ni in 0..d.n {
                        cur[pi * d.n + ni] = decay * prev[pi * d.n + ni] + u * bm[bo + ni];
                    }
                }
            }
            lam.iter_mut().for_each(|v| *v = 0.0);
            for t in (0..d.l).rev() {
                let dti = d.dt(bi, t, hd);
                let dtv = dt[dti];
                let decay = (dtv * a[hd]).exp();
                let (xo, bo) = (d.x(bi, t, hd), d.bc(bi, t, hd));
                let prev = &states[t * pn..(t + 1) * pn];
                let cur = &states[(t + 1) * pn..(t + 2) * pn];
                let mut g_decay = 0.0;
                let mut g_u = 0.0;
                for pi in 0..d.p {
                    let g = gy[xo + pi];
                    let xv = x[xo + pi];
                    let mut gxp = 0.0;
                    for ni in 0..d.n {
                        let k = pi * d.n + ni;
                        gc[bo + ni] += g * cur[k];
                        lam[k] += g * cm[bo + ni];
                        g_decay += lam[k] * prev[k];
                        g_u += lam[k] * bm[bo + ni] * xv;
                        gb[bo + ni] += lam[k] * dtv * xv;
                        gxp += lam[k] * bm[bo + ni];
                    }
                    gx[xo + pi] += gxp * dtv;
                }
                gdt[dti] += g_decay * decay * a[hd] + g_u;
                ga[hd] += g_decay * decay * dtv;
                lam.iter_mut().for_each(|v| *v *= decay);
            }
        }
    }
    [gx, gdt, ga, gb, gc]
}

fn conv_forward(x: &[f64], w: &[f64], bias: &[f64], b: usize, l: usize, c: usize, k: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        for t in 0..l {
            let out = &mut y[(bi * l + t) * c..][..c];
            out.copy_from_slice(bias);
            for i in 0..k {
                let Some(src) = (t + i + 1).checked_sub(k) else { continue };
                let xr = &x[(bi * l + src) * c..][..c];
                for ch in 0..c {
                    out[ch] += w[ch * k + i] * xr[ch];
                }
            }
        }
    }
    y
}

impl Tape {
    /// Causal depthwise convolution of `x[B, L, C]` with kernel `w[C, K]`
    /// and bias `b[C]`; tap `K-1` multiplies the current position.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        if xv.ndim() != 3 || wv.ndim() != 2 || wv.shape()[0] != xv.last_dim() || bv.shape() != [xv.last_dim()] {
            return Err(Error::dim(
                "conv1d_causal",
                format!("x {:?} w {:?} b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let (b, l, c, k) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], wv.shape()[1]);
        let y = conv_forward(xv.data(), wv.data(), bv.data(), b, l, c, k);
        self.push(
            "conv1d_causal",
            Tensor::new(xv.shape(), y)?,
            &[x, w, bias],
            Box::new(move |g, p, _| {
                let (x, w) = (p[0].data(), p[1].data());
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; w.len()];
                let mut gb = vec![0.0; c];
                for bi in 0..b {
                    for t in 0..l {
                        let gr = &g.data()[(bi * l + t) * c..][..c];
                        for ch in 0..c {
                            gb[ch] += gr[ch];
                        }
                        for i in 0..k {
                            let Some(src) = (t + i + 1).checked_sub(k) else { continue };
                            let o = (bi * l + src) * c;
                            for ch in 0..c {
                                gx[o + ch] += w[ch * k + i] * gr[ch];
                                gw[ch * k + i] += x[o + ch] * gr[ch];
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(p[0].shape(), gx).unwrap()),
                    Some(Tensor::new(p[1].shape(), gw).unwrap()),
                    Some(Tensor::new(&[c], gb).unwrap()),
                ]
            }),
        )
    }

    /// Selective scan without the skip term. Shapes: `x[B, L, H·P]`,
    /// `dt[B, L, H]` (positive steps), `a[H]` (negative rates),
    /// `b, c[B, L, G·N]`. `chunk == 1` evaluates sequentially.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(&mut self, x: Var, dt: Var, a: Var, b: Var, c: Var, n_groups: usize, chunk: usize) -> Result<Var> {
        let (xv, dtv, av, bv, cv) = (self.value(x), self.value(dt), self.value(a), self.value(b), self.value(c));
        let bad = || {
            Error::dim(
                "selective_scan",
                format!(
                    "x {:?} dt {:?} a {:?} b {:?} c {:?} groups {n_groups}",
                    xv.shape(),
                    dtv.shape(),
                    av.shape(),
                    bv.shape(),
                    cv.shape()
                ),
            )
        };
        if xv.ndim() != 3 || dtv.ndim() != 3 || av.ndim() != 1 || bv.shape() != cv.shape() || bv.ndim() != 3 {
            return Err(bad());
        }
        let (bs, l) = (xv.shape()[0], xv.shape()[1]);
        let h = av.shape()[0];
        let ok = h > 0
            && n_groups > 0
            && dtv.shape() == [bs, l, h]
            && bv.shape()[..2] == [bs, l]
            && xv.last_dim() % h == 0
            && h % n_groups == 0
            && bv.last_dim() % n_groups == 0;
        if !ok {
            return Err(bad());
        }
        if chunk == 0 {
            return Err(Error::config("chunk must be at least 1"));
        }
        let d = ScanDims { b: bs, l, h, p: xv.last_dim() / h, g: n_groups, n: bv.last_dim() / n_groups };
        let y = if chunk == 1 {
            scan_sequential(d, xv.data(), dtv.data(), av.data(), bv.data(), cv.data())
        } else {
            scan_chunked(d, chunk, xv.data(), dtv.data(), av.data(), bv.data(), cv.data())
        };
        self.push(
            "selective_scan",
            Tensor::new(xv.shape(), y)?,
            &[x, dt, a, b, c],
            Box::new(move |g, p, _| {
                let grads = scan_backward(d, g.data(), p[0].data(), p[1].data(), p[2].data(), p[3].data(), p[4].data());
                grads
                    .into_iter()
                    .zip(p)
                    .map(|(gr, v)| Some(Tensor::new(v.shape(), gr).unwrap()))
                    .collect()
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// parameters

#[derive(Clone, Debug)]
pub struct SsmParams {
    pub in_proj: Tensor,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub a_log: Tensor,
    pub d: Tensor,
    pub dt_bias: Tensor,
    pub norm_w: Tensor,
    pub out_proj: Tensor,
}

impl SsmParams {
    pub fn init(cfg: &SsmConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let block = SsmBlock::build(&mut store, "ssm", *cfg, 0.02, true)?;
        store.materialize(seed);
        Ok(block.params(&store))
    }

    fn check(&self, cfg: &SsmConfig) -> Result<()> {
        let h = cfg.n_head();
        let expect: [(&Tensor, Vec<usize>); 8] = [
            (&self.in_proj, vec![cfg.d_model, cfg.in_proj_width()]),
            (&self.conv_w, vec![cfg.conv_channels(), cfg.n_conv]),
            (&self.conv_b, vec![cfg.conv_channels()]),
            (&self.a_log, vec![h]),
            (&self.d, vec![h]),
            (&self.dt_bias, vec![h]),
            (&self.norm_w, vec![cfg.d_ssm]),
            (&self.out_proj, vec![cfg.d_ssm, cfg.d_model]),
        ];
        for (t, s) in expect {
            if t.shape() != s.as_slice() {
                return Err(Error::dim("ssm", format!("weight {:?}, expected {s:?}", t.shape())));
            }
        }
        Ok(())
    }

    fn view(&self) -> SsmView<'_> {
        SsmView {
            in_proj: &self.in_proj,
            conv_w: &self.conv_w,
            conv_b: &self.conv_b,
            a_log: &self.a_log,
            d: &self.d,
            dt_bias: &self.dt_bias,
        }
    }
}

/// Weights needed by the recurrent core, borrowed from a store or params.
#[derive(Clone, Copy)]
pub(crate) struct SsmView<'a> {
    in_proj: &'a Tensor,
    conv_w: &'a Tensor,
    conv_b: &'a Tensor,
    a_log: &'a Tensor,
    d: &'a Tensor,
    dt_bias: &'a Tensor,
}

// ---------------------------------------------------------------------------
// recurrent state

/// Convolution ring (the last `N_conv` pre-convolution inputs, current one
/// included, zero before the first token) and the per-head memory
/// `h[H × P × N]`. Its size never changes.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState {
    pub conv: VecDeque<Vec<f64>>,
    pub h: Vec<f64>,
    n_conv: usize,
}

impl SsmState {
    pub fn new(cfg: &SsmConfig) -> Self {
        SsmState {
            conv: std::iter::repeat_n(vec![0.0; cfg.conv_channels()], cfg.n_conv).collect(),
            h: vec![0.0; cfg.d_ssm * cfg.d_state],
            n_conv: cfg.n_conv,
        }
    }

    pub fn capacity(cfg: &SsmConfig) -> usize {
        cfg.n_conv * cfg.conv_channels() + cfg.d_ssm * cfg.d_state
    }

    pub fn numel(&self) -> usize {
        self.conv.iter().map(Vec::len).sum::<usize>() + self.h.len()
    }
}

/// Advances the state by one token and returns `(y ⊙ silu(z))` before the
/// output normalization.
pub(crate) fn step_core(cfg: &SsmConfig, w: SsmView<'_>, state: &mut SsmState, x: &[f64]) -> Result<Vec<f64>> {
    let (ds, gn, h, p, n) = (cfg.d_ssm, cfg.n_groups * cfg.d_state, cfg.n_head(), cfg.d_head_ssm, cfg.d_state);
    let proj = vecmat(x, w.in_proj);
    let z = &proj[..ds];
    let cc = cfg.conv_channels();
    state.conv.pop_front();
    state.conv.push_back(proj[ds..ds + cc].to_vec());
    let k = cfg.n_conv;
    let mut xbc = w.conv_b.data().to_vec();
    for (tap, entry) in state.conv.iter().enumerate() {
        for ch in 0..cc {
            xbc[ch] += w.conv_w.data()[ch * k + tap] * entry[ch];
        }
    }
    xbc.iter_mut().for_each(|v| *v = silu(*v));
    let (xs, rest) = xbc.split_at(ds);
    let (bm, cm) = rest.split_at(gn);
    let dt_raw = &proj[ds + cc..];
    let mut y = vec![0.0; ds];
    for (hd, &raw) in dt_raw.iter().enumerate().take(h) {
        let dt = softplus(raw + w.dt_bias.data()[hd]);
        let a = -w.a_log.data()[hd].exp();
        let decay = (dt * a).exp();
        let g = hd / (h / cfg.n_groups);
        let (bg, cg) = (&bm[g * n..(g + 1) * n], &cm[g * n..(g + 1) * n]);
        for pi in 0..p {
            let c = hd * p + pi;
            let row = &mut state.h[c * n..(c + 1) * n];
            let u = dt * xs[c];
            let mut acc = 0.0;
            for ni in 0..n {
                row[ni] = decay * row[ni] + u * bg[ni];
                acc += cg[ni] * row[ni];
            }
            y[c] = (acc + w.d.data()[hd] * xs[c]) * silu(z[c]);
        }
    }
    if !y.iter().chain(&state.h).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("ssm_step"));
    }
    Ok(y)
}

fn finish_step(y: &[f64], norm_w: &Tensor, out_proj: &Tensor) -> Vec<f64> {
    let mut normed = vec![0.0; y.len()];
    rms_norm_rows(y, norm_w.data(), NORM_EPS, &mut normed);
    vecmat(&normed, out_proj)
}

// ---------------------------------------------------------------------------
// plain functions

/// One decoding step of the full block.
pub fn ssm_step(cfg: &SsmConfig, state: &mut SsmState, x: &[f64], params: &SsmParams) -> Result<Vec<f64>> {
    cfg.validate()?;
    params.check(cfg)?;
    if x.len() != cfg.d_model {
        return Err(Error::dim("ssm_step", format!("input width {}, d_model {}", x.len(), cfg.d_model)));
    }
    let y = step_core(cfg, params.view(), state, x)?;
    Ok(finish_step(&y, &params.norm_w, &params.out_proj))
}

/// Full-sequence block output for `x[L × d_model]` from a zero state,
/// evaluated with the given chunk length. `chunk == 1` folds [`ssm_step`].
pub fn ssm_scan(x: &Tensor, cfg: &SsmConfig, params: &SsmParams, chunk: usize) -> Result<Tensor> {
    cfg.validate()?;
    params.check(cfg)?;
    if chunk == 0 {
        return Err(Error::config("chunk must be at least 1"));
    }
    if x.ndim() != 2 || x.last_dim() != cfg.d_model {
        return Err(Error::dim("ssm_scan", format!("input {:?}, d_model {}", x.shape(), cfg.d_model)));
    }
    if chunk == 1 {
        let mut state = SsmState::new(cfg);
        let mut out = Vec::with_capacity(x.numel());
        for t in 0..x.shape()[0] {
            out.extend(ssm_step(cfg, &mut state, x.row(t), params)?);
        }
        return Tensor::new(x.shape(), out);
    }
    let mut t = Tape::new();
    let xv = t.constant(x.reshape(&[1, x.shape()[0], cfg.d_model])?);
    let p = params;
    let ws = [&p.in_proj, &p.conv_w, &p.conv_b, &p.a_log, &p.d, &p.dt_bias, &p.norm_w, &p.out_proj]
        .map(|w| t.constant(w.clone()));
    let vars = SsmVars { in_proj: ws[0], conv_w: ws[1], conv_b: ws[2], a_log: ws[3], d: ws[4], dt_bias: ws[5] };
    let y = forward_core(&mut t, cfg, vars, xv, chunk)?;
    let y = t.rms_norm(y, ws[6], NORM_EPS)?;
    let y = t.matmul(y, ws[7])?;
    t.value(y).reshape(x.shape())
}

/// [`ssm_scan`] at the configured chunk length.
pub fn ssm_forward(x: &Tensor, cfg: &SsmConfig, params: &SsmParams) -> Result<Tensor> {
    ssm_scan(x, cfg, params, cfg.chunk)
}

// ---------------------------------------------------------------------------
// tape forward

#[derive(Clone, Copy)]
struct SsmVars {
    in_proj: Var,
    conv_w: Var,
    conv_b: Var,
    a_log: Var,
    d: Var,
    dt_bias: Var,
}

/// `x[B, L, d_model] → (y ⊙ silu(z))[B, L, d_ssm]`.
fn forward_core(t: &mut Tape, cfg: &SsmConfig, w: SsmVars, x: Var, chunk: usize) -> Result<Var> {
    let (ds, gn, cc) = (cfg.d_ssm, cfg.n_groups * cfg.d_state, cfg.conv_channels());
    let proj = t.matmul(x, w.in_proj)?;
    let z = t.slice_lastdim(proj, 0, ds)?;
    let xbc = t.slice_lastdim(proj, ds, cc)?;
    let dt_raw = t.slice_lastdim(proj, ds + cc, cfg.n_head())?;
    let xbc = t.conv1d_causal(xbc, w.conv_w, w.conv_b)?;
    let xbc = t.silu(xbc)?;
    let xs = t.slice_lastdim(xbc, 0, ds)?;
    let bm = t.slice_lastdim(xbc, ds, gn)?;
    let cm = t.slice_lastdim(xbc, ds + gn, gn)?;
    let dt = t.add_lastdim(dt_raw, w.dt_bias)?;
    let dt = t.softplus(dt)?;
    let a = t.exp(w.a_log)?;
    let a = t.scale(a, -1.0)?;
    let y = t.selective_scan(xs, dt, a, bm, cm, cfg.n_groups, chunk)?;
    let skip = t.mul_groups(xs, w.d)?;
    let y = t.add(y, skip)?;
    let gate = t.silu(z)?;
    t.mul(y, gate)
}

// ---------------------------------------------------------------------------
// block

#[derive(Clone, Debug)]
pub struct SsmBlock {
    pub cfg: SsmConfig,
    pub in_proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub a_log: ParamId,
    pub d: ParamId,
    pub dt_bias: ParamId,
    /// Gated-norm weight and output projection; absent for the SSM branch of
    /// an intra-layer hybrid, which brings its own normalization and
    /// projection.
    pub norm_w: Option<ParamId>,
    pub out_proj: Option<ParamId>,
}

impl SsmBlock {
    pub fn build(store: &mut ParamStore, prefix: &str, cfg: SsmConfig, std: f64, with_output: bool) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.n_head();
        let conv_std = 1.0 / (cfg.n_conv as f64).sqrt();
        Ok(SsmBlock {
            cfg,
            in_proj: store.add(format!("{prefix}.in_proj"), &[cfg.d_model, cfg.in_proj_width()], Init::Normal { std }),
            conv_w: store.add(
                format!("{prefix}.conv_w"),
                &[cfg.conv_channels(), cfg.n_conv],
                Init::Normal { std: conv_std },
            ),
            conv_b: store.add(format!("{prefix}.conv_b"), &[cfg.conv_channels()], Init::Zeros),
            a_log: store.add(format!("{prefix}.a_log"), &[h], Init::ALog { lo: 1.0, hi: 16.0 }),
            d: store.add(format!("{prefix}.d"), &[h], Init::Ones),
            dt_bias: store.add(format!("{prefix}.dt_bias"), &[h], Init::DtBias { dt_min: 1e-3, dt_max: 0.1 }),
            norm_w: with_output.then(|| store.add(format!("{prefix}.norm_w"), &[cfg.d_ssm], Init::Ones)),
            out_proj: with_output
                .then(|| store.add(format!("{prefix}.out_proj"), &[cfg.d_ssm, cfg.d_model], Init::Normal { std })),
        })
    }

    fn vars(&self, v: &ParamVars) -> SsmVars {
        SsmVars {
            in_proj: v[self.in_proj],
            conv_w: v[self.conv_w],
            conv_b: v[self.conv_b],
            a_log: v[self.a_log],
            d: v[self.d],
            dt_bias: v[self.dt_bias],
        }
    }

    pub(crate) fn view<'a>(&self, s: &'a ParamStore) -> SsmView<'a> {
        SsmView {
            in_proj: s.get(self.in_proj),
            conv_w: s.get(self.conv_w),
            conv_b: s.get(self.conv_b),
            a_log: s.get(self.a_log),
            d: s.get(self.d),
            dt_bias: s.get(self.dt_bias),
        }
    }

    /// Gated inner output `[B, L, d_ssm]`, before normalization.
    pub fn forward_core(&self, t: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        forward_core(t, &self.cfg, self.vars(vars), x, self.cfg.chunk)
    }

    pub fn forward(&self, t: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        let (Some(nw), Some(op)) = (self.norm_w, self.out_proj) else {
            return Err(Error::Contract("SSM branch without output projection used as a block".into()));
        };
        let y = self.forward_core(t, vars, x)?;
        let y = t.rms_norm(y, vars[nw], NORM_EPS)?;
        t.matmul(y, vars[op])
    }

    pub fn new_state(&self) -> SsmState {
        SsmState::new(&self.cfg)
    }

    pub fn step_core(&self, store: &ParamStore, state: &mut SsmState, x: &[f64]) -> Result<Vec<f64>> {
        step_core(&self.cfg, self.view(store), state, x)
    }

    pub fn step(&self, store: &ParamStore, state: &mut SsmState, x: &[f64]) -> Result<Vec<f64>> {
        let (Some(nw), Some(op)) = (self.norm_w, self.out_proj) else {
            return Err(Error::Contract("SSM branch without output projection used as a block".into()));
        };
        let y = self.step_core(store, state, x)?;
        Ok(finish_step(&y, store.get(nw), store.get(op)))
    }

    pub fn params(&self, s: &ParamStore) -> SsmParams {
        let out = |id: Option<ParamId>, shape: &[usize]| id.map_or_else(|| Tensor::zeros(shape), |i| s.get(i).clone());
        SsmParams {
            in_proj: s.get(self.in_proj).clone(),
            conv_w: s.get(self.conv_w).clone(),
            conv_b: s.get(self.conv_b).clone(),
            a_log: s.get(self.a_log).clone(),
            d: s.get(self.d).clone(),
            dt_bias: s.get(self.dt_bias).clone(),
            norm_w: out(self.norm_w, &[self.cfg.d_ssm]),
            out_proj: out(self.out_proj, &[self.cfg.d_ssm, self.cfg.d_model]),
        }
    }
}
