//! Intra-layer hybrid block: a reduced attention branch and a reduced SSM
//! branch read the same input in parallel, and their head-wise outputs are
//! normalized, scaled and fused according to a [`FusionSpec`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{attend_cached, project_attend, rotate_at, AttnConfig, KvCache};
use crate::error::{Error, Result};
use crate::nn::{group_norm_rows, NORM_EPS};
use crate::params::{Init, ParamId, ParamStore, ParamVars};
use crate::ssm::{SsmBlock, SsmConfig, SsmState};
use crate::tape::{Tape, Var};
use crate::tensor::{sigmoid, vecmat, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchNorm {
    None,
    Group,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchScalar {
    None,
    /// One learnable scalar per branch, starting at 1.
    Scale,
    /// `sigmoid(g)` per head and branch, `g` starting at 0.
    Gate,
    /// Differential re-parameterized λ on the SSM branch.
    DiffLambda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOp {
    Add,
    Diff,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FusionSpec {
    pub norm: BranchNorm,
    pub scalar: BranchScalar,
    pub fusion: FusionOp,
    pub out_proj: u8,
    /// `(attention share, SSM share)`, normalized by their sum.
    pub ratio: (u32, u32),
}

impl Default for FusionSpec {
    /// Group norm, no scalar, difference, two output projections, 1:1.
    fn default() -> Self {
        FusionSpec { norm: BranchNorm::Group, scalar: BranchScalar::None, fusion: FusionOp::Diff, out_proj: 2, ratio: (1, 1) }
    }
}

impl FusionSpec {
    /// The group-norm / scale / add / single-projection design.
    pub fn hymba() -> Self {
        FusionSpec { norm: BranchNorm::Group, scalar: BranchScalar::Scale, fusion: FusionOp::Add, out_proj: 1, ratio: (1, 1) }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.out_proj, 1 | 2) {
            return Err(Error::config(format!("output projection count must be 1 or 2, got {}", self.out_proj)));
        }
        if self.fusion == FusionOp::Concat && self.out_proj != 1 {
            return Err(Error::config("concat fusion needs a single output projection"));
        }
        if self.ratio.0 == 0 || self.ratio.1 == 0 {
            return Err(Error::config("both dimension-ratio shares must be positive"));
        }
        Ok(())
    }

    pub fn attn_share(&self) -> f64 {
        self.ratio.0 as f64 / (self.ratio.0 + self.ratio.1) as f64
    }

    pub fn ssm_share(&self) -> f64 {
        self.ratio.1 as f64 / (self.ratio.0 + self.ratio.1) as f64
    }

    /// Every legal cell of norm × scalar × fusion × projection count at the
    /// given ratio.
    pub fn all_cells(ratio: (u32, u32)) -> Vec<FusionSpec> {
        let mut out = Vec::new();
        for norm in [BranchNorm::None, BranchNorm::Group] {
            for scalar in [BranchScalar::None, BranchScalar::Scale, BranchScalar::Gate, BranchScalar::DiffLambda] {
                for fusion in [FusionOp::Add, FusionOp::Diff, FusionOp::Concat] {
                    for out_proj in [1, 2] {
                        let spec = FusionSpec { norm, scalar, fusion, out_proj, ratio };
                        if spec.validate().is_ok() {
                            out.push(spec);
                        }
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for FusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let norm = match self.norm {
            BranchNorm::None => "none",
            BranchNorm::Group => "group",
        };
        let scalar = match self.scalar {
            BranchScalar::None => "none",
            BranchScalar::Scale => "scale",
            BranchScalar::Gate => "gate",
            BranchScalar::DiffLambda => "diff_lambda",
        };
        let fusion = match self.fusion {
            FusionOp::Add => "add",
            FusionOp::Diff => "diff",
            FusionOp::Concat => "concat",
        };
        write!(f, "{norm}/{scalar}/{fusion}/{}/{}:{}", self.out_proj, self.ratio.0, self.ratio.1)
    }
}

impl FromStr for FusionSpec {
    type Err = Error;

    /// Parses `norm/scalar/fusion/out[/a:s]`, e.g. `group/none/diff/2`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').map(str::trim).collect();
        if !(4..=5).contains(&parts.len()) {
            return Err(Error::config(format!("fusion spec `{s}` needs norm/scalar/fusion/out[/ratio]")));
        }
        let norm = match parts[0] {
            "none" | "-" => BranchNorm::None,
            "group" => BranchNorm::Group,
            o => return Err(Error::config(format!("unknown norm `{o}`"))),
        };
        let scalar = match parts[1] {
            "none" | "-" => BranchScalar::None,
            "scale" => BranchScalar::Scale,
            "gate" => BranchScalar::Gate,
            "diff_lambda" | "lambda" => BranchScalar::DiffLambda,
            o => return Err(Error::config(format!("unknown scalar `{o}`"))),
        };
        let fusion = match parts[2] {
            "add" => FusionOp::Add,
            "diff" | "sub" => FusionOp::Diff,
            "concat" | "conc" => FusionOp::Concat,
            o => return Err(Error::config(format!("unknown fusion `{o}`"))),
        };
        let out_proj = parts[3].parse().map_err(|_| Error::config(format!("bad projection count `{}`", parts[3])))?;
        let ratio = match parts.get(4) {
            Some(r) => parse_ratio(r)?,
            None => (1, 1),
        };
        let spec = FusionSpec { norm, scalar, fusion, out_proj, ratio };
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses `a:b`.
pub fn parse_ratio(s: &str) -> Result<(u32, u32)> {
    let (a, b) = s.split_once(':').ok_or_else(|| Error::config(format!("ratio `{s}` must look like a:b")))?;
    let p = |v: &str| v.trim().parse::<u32>().map_err(|_| Error::config(format!("bad ratio `{s}`")));
    Ok((p(a)?, p(b)?))
}

/// Initial λ for the differential scalar at 0-based layer `layer`.
pub fn lambda_init(layer: usize) -> f64 {
    0.8 - 0.6 * (-0.3 * layer as f64).exp()
}

/// Branch dimensions derived from the homogeneous blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntraConfig {
    pub d_model: usize,
    /// Attention branch: half the query heads, reduced query/key width,
    /// full value width.
    pub attn: AttnConfig,
    /// SSM branch without its own output projection.
    pub ssm: SsmConfig,
    pub fusion: FusionSpec,
    pub layer: usize,
}

impl IntraConfig {
    pub fn derive(attn: &AttnConfig, ssm: &SsmConfig, fusion: FusionSpec, layer: usize) -> Result<Self> {
        fusion.validate()?;
        if attn.n_head < 2 || !attn.n_head.is_multiple_of(2) {
            return Err(Error::config(format!("intra-hybrid needs an even head count, got {}", attn.n_head)));
        }
        let n_half = attn.n_head / 2;
        let n_kv = attn.n_kv.min(n_half);
        if !n_half.is_multiple_of(n_kv) {
            return Err(Error::config(format!("{n_half} attention-branch heads cannot share {n_kv} K/V heads")));
        }
        // nearest even width so rotary pairs stay whole
        let d_qk = ((fusion.attn_share() * attn.d_head as f64 / 2.0).round() as usize * 2).clamp(2, attn.d_head);
        let heads = ((fusion.ssm_share() * ssm.d_ssm as f64 / ssm.d_head_ssm as f64).round() as usize).max(1);
        let mut ssm_b = SsmConfig { d_ssm: heads * ssm.d_head_ssm, ..*ssm };
        while !ssm_b.n_head().is_multiple_of(ssm_b.n_groups) {
            ssm_b.n_groups -= 1;
        }
        let attn_b = AttnConfig { n_head: n_half, n_kv, d_qk, window: None, sink: None, ..*attn };
        let cfg = IntraConfig { d_model: attn.d_model, attn: attn_b, ssm: ssm_b, fusion, layer };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_half(&self) -> usize {
        self.attn.n_head
    }

    pub fn attn_width(&self) -> usize {
        self.attn.n_head * self.attn.d_head
    }

    pub fn ssm_width(&self) -> usize {
        self.ssm.d_ssm
    }

    /// Width entering a single output projection.
    pub fn fused_width(&self) -> usize {
        match self.fusion.fusion {
            FusionOp::Concat => self.attn_width() + self.ssm_width(),
            _ => self.attn_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.attn.validate()?;
        self.ssm.validate()?;
        if self.attn.d_model != self.d_model || self.ssm.d_model != self.d_model {
            return Err(Error::config("branch model widths differ"));
        }
        if self.fusion.out_proj == 1 && self.fusion.fusion != FusionOp::Concat && self.attn_width() != self.ssm_width() {
            return Err(Error::config(format!(
                "inconsistent branch widths for {:?} with one projection: attention {} vs SSM {}",
                self.fusion.fusion,
                self.attn_width(),
                self.ssm_width()
            )));
        }
        if !self.ssm_width().is_multiple_of(self.n_half()) {
            return Err(Error::config(format!(
                "SSM branch width {} does not split into {} heads",
                self.ssm_width(),
                self.n_half()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum ScalarParams {
    None,
    Scale { a: ParamId, m: ParamId },
    Gate { a: ParamId, m: ParamId },
    Lambda { q1: ParamId, k1: ParamId, q2: ParamId, k2: ParamId },
}

#[derive(Clone, Debug)]
pub enum OutParams {
    One(ParamId),
    Two { a: ParamId, m: ParamId },
}

#[derive(Clone, Debug)]
pub struct IntraBlock {
    pub cfg: IntraConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ssm: SsmBlock,
    pub norm: Option<(ParamId, ParamId)>,
    pub scalar: ScalarParams,
    pub out: OutParams,
}

impl IntraBlock {
    pub fn build(store: &mut ParamStore, prefix: &str, cfg: IntraConfig, std: f64) -> Result<Self> {
        cfg.validate()?;
        let a = &cfg.attn;
        let d = cfg.d_model;
        let w = Init::Normal { std };
        let wq = store.add(format!("{prefix}.attn.wq"), &[d, a.n_head * a.d_qk], w.clone());
        let wk = store.add(format!("{prefix}.attn.wk"), &[d, a.n_kv * a.d_qk], w.clone());
        let wv = store.add(format!("{prefix}.attn.wv"), &[d, a.n_kv * a.d_head], w.clone());
        let ssm = SsmBlock::build(store, &format!("{prefix}.ssm"), cfg.ssm, std, false)?;
        let norm = (cfg.fusion.norm == BranchNorm::Group).then(|| {
            (
                store.add(format!("{prefix}.norm_a"), &[cfg.attn_width()], Init::Ones),
                store.add(format!("{prefix}.norm_m"), &[cfg.ssm_width()], Init::Ones),
            )
        });
        let h = cfg.n_half();
        let scalar = match cfg.fusion.scalar {
            BranchScalar::None => ScalarParams::None,
            BranchScalar::Scale => ScalarParams::Scale {
                a: store.add(format!("{prefix}.scale_a"), &[1], Init::Ones),
                m: store.add(format!("{prefix}.scale_m"), &[1], Init::Ones),
            },
            BranchScalar::Gate => ScalarParams::Gate {
                a: store.add(format!("{prefix}.gate_a"), &[h], Init::Zeros),
                m: store.add(format!("{prefix}.gate_m"), &[h], Init::Zeros),
            },
            BranchScalar::DiffLambda => {
                let init = Init::Normal { std: 0.1 };
                let mut v = |n: &str| store.add(format!("{prefix}.lambda_{n}"), &[a.d_head], init.clone());
                ScalarParams::Lambda { q1: v("q1"), k1: v("k1"), q2: v("q2"), k2: v("k2") }
            }
        };
        let out = match cfg.fusion.out_proj {
            1 => OutParams::One(store.add(format!("{prefix}.wo"), &[cfg.fused_width(), d], w)),
            _ => OutParams::Two {
                a: store.add(format!("{prefix}.wo_a"), &[cfg.attn_width(), d], w.clone()),
                m: store.add(format!("{prefix}.wo_m"), &[cfg.ssm_width(), d], w),
            },
        };
        Ok(IntraBlock { cfg, wq, wk, wv, ssm, norm, scalar, out })
    }

    /// Normalized and scaled branch outputs `(a, m)`, ready for fusion.
    pub fn branches(&self, t: &mut Tape, vars: &ParamVars, x: Var) -> Result<(Var, Var)> {
        let a = project_attend(t, x, vars[self.wq], vars[self.wk], vars[self.wv], &self.cfg.attn)?;
        let m = self.ssm.forward_core(t, vars, x)?;
        let (a, m) = match self.norm {
            Some((na, nm)) => {
                let h = self.cfg.n_half();
                (t.group_norm(a, vars[na], h, NORM_EPS)?, t.group_norm(m, vars[nm], h, NORM_EPS)?)
            }
            None => (a, m),
        };
        match self.scalar {
            ScalarParams::None => Ok((a, m)),
            ScalarParams::Scale { a: sa, m: sm } => Ok((t.mul_groups(a, vars[sa])?, t.mul_groups(m, vars[sm])?)),
            ScalarParams::Gate { a: ga, m: gm } => {
                let ga = t.sigmoid(vars[ga])?;
                let gm = t.sigmoid(vars[gm])?;
                Ok((t.mul_groups(a, ga)?, t.mul_groups(m, gm)?))
            }
            ScalarParams::Lambda { q1, k1, q2, k2 } => {
                let dot = |t: &mut Tape, u: ParamId, v: ParamId| -> Result<Var> {
                    let p = t.mul(vars[u], vars[v])?;
                    let s = t.sum(p)?;
                    t.exp(s)
                };
                let e1 = dot(t, q1, k1)?;
                let e2 = dot(t, q2, k2)?;
                let lam = t.sub(e1, e2)?;
                let lam = t.add_const(lam, lambda_init(self.cfg.layer))?;
                let lam = t.reshape(lam, &[1])?;
                Ok((a, t.mul_groups(m, lam)?))
            }
        }
    }

    pub fn forward(&self, t: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        let (a, m) = self.branches(t, vars, x)?;
        match self.out {
            OutParams::One(wo) => {
                let fused = fuse(t, self.cfg.fusion.fusion, a, m)?;
                t.matmul(fused, vars[wo])
            }
            OutParams::Two { a: oa, m: om } => {
                let pa = t.matmul(a, vars[oa])?;
                let pm = t.matmul(m, vars[om])?;
                fuse(t, self.cfg.fusion.fusion, pa, pm)
            }
        }
    }

    pub fn new_cache(&self) -> IntraCache {
        IntraCache { kv: KvCache::new(&self.cfg.attn), ssm: SsmState::new(&self.cfg.ssm) }
    }

    pub fn step(&self, store: &ParamStore, x: &[f64], pos: usize, cache: &mut IntraCache) -> Result<Vec<f64>> {
        let c = &self.cfg;
        let rope = c.attn.rope();
        let mut q = vecmat(x, store.get(self.wq));
        let mut k = vecmat(x, store.get(self.wk));
        let v = vecmat(x, store.get(self.wv));
        rotate_at(&mut q, pos, &rope);
        rotate_at(&mut k, pos, &rope);
        cache.kv.push(pos, k, v);
        let mut a = attend_cached(&q, &cache.kv, c.attn.shape());
        let mut m = self.ssm.step_core(store, &mut cache.ssm, x)?;
        if let Some((na, nm)) = self.norm {
            let h = c.n_half();
            let src = a.clone();
            group_norm_rows(&src, store.get(na).data(), src.len() / h, NORM_EPS, &mut a);
            let src = m.clone();
            group_norm_rows(&src, store.get(nm).data(), src.len() / h, NORM_EPS, &mut m);
        }
        let scale_heads = |v: &mut [f64], s: &[f64]| {
            let g = v.len() / s.len();
            for (chunk, s) in v.chunks_mut(g).zip(s) {
                chunk.iter_mut().for_each(|x| *x *= s);
            }
        };
        match self.scalar {
            ScalarParams::None => {}
            ScalarParams::Scale { a: sa, m: sm } => {
                scale_heads(&mut a, store.get(sa).data());
                scale_heads(&mut m, store.get(sm).data());
            }
            ScalarParams::Gate { a: ga, m: gm } => {
                let sg = |id: ParamId| store.get(id).data().iter().map(|&g| sigmoid(g)).collect::<Vec<_>>();
                scale_heads(&mut a, &sg(ga));
                scale_heads(&mut m, &sg(gm));
            }
            ScalarParams::Lambda { q1, k1, q2, k2 } => {
                let dot = |u: ParamId, v: ParamId| -> f64 {
                    store.get(u).data().iter().zip(store.get(v).data()).map(|(a, b)| a * b).sum::<f64>().exp()
                };
                let lam = dot(q1, k1) - dot(q2, k2) + lambda_init(c.layer);
                scale_heads(&mut m, &[lam]);
            }
        }
        let combine = |p: Vec<f64>, q: Vec<f64>| -> Vec<f64> {
            match c.fusion.fusion {
                FusionOp::Add => p.iter().zip(&q).map(|(a, b)| a + b).collect(),
                FusionOp::Diff => p.iter().zip(&q).map(|(a, b)| a - b).collect(),
                FusionOp::Concat => p.into_iter().chain(q).collect(),
            }
        };
        Ok(match self.out {
            OutParams::One(wo) => vecmat(&combine(a, m), store.get(wo)),
            OutParams::Two { a: oa, m: om } => combine(vecmat(&a, store.get(oa)), vecmat(&m, store.get(om))),
        })
    }
}

/// Combines two equally laid out tensors (or concatenates them).
pub fn fuse(t: &mut Tape, op: FusionOp, a: Var, m: Var) -> Result<Var> {
    if op != FusionOp::Concat && t.shape(a) != t.shape(m) {
        return Err(Error::dim(
            "fuse",
            format!("inconsistent branch widths: {:?} vs {:?}", t.shape(a), t.shape(m)),
        ));
    }
    match op {
        FusionOp::Add => t.add(a, m),
        FusionOp::Diff => t.sub(a, m),
        FusionOp::Concat => t.concat_lastdim(&[a, m]),
    }
}

#[derive(Clone, Debug)]
pub struct IntraCache {
    pub kv: KvCache,
    pub ssm: SsmState,
}

/// Plain evaluation of an intra block over `x[L × d_model]` using the
/// weights held in `store`.
pub fn intra_hybrid_forward(x: &Tensor, block: &IntraBlock, store: &ParamStore) -> Result<Tensor> {
    if x.ndim() != 2 || x.last_dim() != block.cfg.d_model {
        return Err(Error::dim("intra_hybrid_forward", format!("input {:?}", x.shape())));
    }
    let mut t = Tape::new();
    let vars = store.to_tape(&mut t, false);
    let xv = t.constant(x.reshape(&[1, x.shape()[0], block.cfg.d_model])?);
    let y = block.forward(&mut t, &vars, xv)?;
    t.value(y).reshape(x.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attention_weights;
    use crate::nn::group_norm_per_head;
    use crate::rng::Rng;
    use crate::tape::gradcheck::{check, weighted_sum};
    use crate::tensor::matmul;
    use proptest::prelude::*;

    fn base() -> (AttnConfig, SsmConfig) {
        let attn = AttnConfig { rope_base: 10_000.0, ..AttnConfig::full(8, 4, 2, 4) };
        let ssm = SsmConfig { d_model: 8, d_ssm: 16, d_state: 3, d_head_ssm: 4, n_conv: 3, n_groups: 1, chunk: 3 };
        (attn, ssm)
    }

    fn block(spec: FusionSpec, seed: u64) -> (IntraBlock, ParamStore) {
        let (a, s) = base();
        let cfg = IntraConfig::derive(&a, &s, spec, 2).unwrap();
        let mut store = ParamStore::new();
        let b = IntraBlock::build(&mut store, "mix", cfg, 0.4).unwrap();
        store.materialize(seed);
        // move the scalars away from their neutral starting points
        let mut rng = Rng::new(seed ^ 0xabc);
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.spec(id).name.clone();
            if name.contains("scale") || name.contains("gate") || name.contains("norm_") {
                let noise = rng.normals(store.get(id).numel(), 0.3);
                let v = Tensor::new(store.get(id).shape(), noise).unwrap();
                let v = store.get(id).zip_map(&v, |a, b| a + b).unwrap();
                store.set(id, v).unwrap();
            }
        }
        (b, store)
    }

    #[test]
    fn derived_dimensions() {
        let (a, s) = base();
        let c = IntraConfig::derive(&a, &s, FusionSpec::default(), 0).unwrap();
        assert_eq!((c.attn.n_head, c.attn.n_kv, c.attn.d_qk, c.attn.d_head), (2, 2, 2, 4));
        assert_eq!(c.ssm.d_ssm, 8);
        assert_eq!(c.ssm.d_state, s.d_state);
        assert_eq!(c.ssm.n_conv, s.n_conv);
        let wide = IntraConfig::derive(&a, &s, FusionSpec { ratio: (3, 1), ..FusionSpec::default() }, 0).unwrap();
        assert_eq!((wide.attn.d_qk, wide.ssm.d_ssm), (4, 4));
    }

    #[test]
    fn legal_cells() {
        let cells = FusionSpec::all_cells((1, 1));
        assert_eq!(cells.len(), 40);
        assert!(cells.iter().all(|c| !(c.fusion == FusionOp::Concat && c.out_proj == 2)));
        let bad = FusionSpec { fusion: FusionOp::Concat, out_proj: 2, ..FusionSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        for c in FusionSpec::all_cells((2, 1)) {
            assert_eq!(c.to_string().parse::<FusionSpec>().unwrap(), c);
        }
        assert_eq!("group/none/diff/2".parse::<FusionSpec>().unwrap(), FusionSpec::default());
        assert!("group/none/concat/2".parse::<FusionSpec>().is_err());
    }

    #[test]
    fn mismatched_widths_rejected() {
        let (a, s) = base();
        let s = SsmConfig { d_ssm: 32, ..s };
        let spec = FusionSpec { fusion: FusionOp::Add, out_proj: 1, ..FusionSpec::default() };
        let err = IntraConfig::derive(&a, &s, spec, 0).unwrap_err();
        assert!(err.to_string().contains("inconsistent branch widths"));
        // two projections or concat accept different widths
        assert!(IntraConfig::derive(&a, &s, FusionSpec::default(), 0).is_ok());
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(&[1, 2, 3]));
        let y = t.constant(Tensor::ones(&[1, 2, 4]));
        assert!(fuse(&mut t, FusionOp::Diff, x, y).is_err());
        assert!(fuse(&mut t, FusionOp::Concat, x, y).is_ok());
    }

    #[test]
    fn scale_one_zero_leaves_attention_only() {
        let spec = FusionSpec { norm: BranchNorm::None, scalar: BranchScalar::Scale, fusion: FusionOp::Add, out_proj: 1, ratio: (1, 1) };
        let (b, mut store) = block(spec, 3);
        let ScalarParams::Scale { a, m } = b.scalar else { unreachable!() };
        store.set(a, Tensor::ones(&[1])).unwrap();
        store.set(m, Tensor::zeros(&[1])).unwrap();
        let x = Tensor::randn(&[5, 8], 1.0, &mut Rng::new(4));
        let y = intra_hybrid_forward(&x, &b, &store).unwrap();
        // attention branch alone: probabilities times values, then the projection
        let aw = crate::attention::AttnWeights {
            wq: store.get(b.wq).clone(),
            wk: store.get(b.wk).clone(),
            wv: store.get(b.wv).clone(),
            wo: match b.out {
                OutParams::One(wo) => store.get(wo).clone(),
                _ => unreachable!(),
            },
        };
        let want = crate::attention::causal_attention_forward(&x, &b.cfg.attn, &aw).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn diff_of_identical_branches_is_zero() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::randn(&[1, 3, 8], 1.0, &mut Rng::new(5)));
        let f = fuse(&mut t, FusionOp::Diff, a, a).unwrap();
        assert!(t.value(f).data().iter().all(|v| *v == 0.0));
    }

    /// Composes the default design from independently checked pieces.
    #[test]
    fn default_variant_matches_composed_oracle() {
        let (b, store) = block(FusionSpec::default(), 6);
        let x = Tensor::randn(&[6, 8], 1.0, &mut Rng::new(7));
        let y = intra_hybrid_forward(&x, &b, &store).unwrap();
        let c = &b.cfg;
        let (l, h, dh) = (6, c.n_half(), c.attn.d_head);
        // attention branch before projection
        let aw = crate::attention::AttnWeights {
            wq: store.get(b.wq).clone(),
            wk: store.get(b.wk).clone(),
            wv: store.get(b.wv).clone(),
            wo: Tensor::zeros(&[c.attn_width(), 8]),
        };
        let p = attention_weights(&x, &c.attn, &aw).unwrap();
        let v = matmul(&x, &aw.wv).unwrap();
        let group = h / c.attn.n_kv;
        let a = Tensor::from_fn(&[l, h, dh], |i| {
            let (t, hd, e) = (i / (h * dh), (i / dh) % h, i % dh);
            (0..=t).map(|j| p.data()[(hd * l + t) * l + j] * v.row(j)[(hd / group) * dh + e]).sum()
        });
        // SSM branch before projection, by folding the recurrent step
        let mut st = b.ssm.new_state();
        let m: Vec<f64> = (0..l).flat_map(|t| b.ssm.step_core(&store, &mut st, x.row(t)).unwrap()).collect();
        let mw = c.ssm_width() / h;
        let m = Tensor::new(&[l, h, mw], m).unwrap();
        let (na, nm) = b.norm.unwrap();
        let an = group_norm_per_head(&a, &store.get(na).reshape(&[h, dh]).unwrap(), NORM_EPS).unwrap();
        let mn = group_norm_per_head(&m, &store.get(nm).reshape(&[h, mw]).unwrap(), NORM_EPS).unwrap();
        let OutParams::Two { a: oa, m: om } = b.out else { unreachable!() };
        let pa = matmul(&an.reshape(&[l, h * dh]).unwrap(), store.get(oa)).unwrap();
        let pm = matmul(&mn.reshape(&[l, h * mw]).unwrap(), store.get(om)).unwrap();
        let want = pa.zip_map(&pm, |u, v| u - v).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-10, "{}", y.max_abs_diff(&want));
    }

    #[test]
    fn fused_width_conservation() {
        let (a, s) = base();
        for spec in FusionSpec::all_cells((1, 1)) {
            let c = IntraConfig::derive(&a, &s, spec, 0).unwrap();
            let want = match spec.fusion {
                FusionOp::Concat => 2 * c.n_half() * a.d_head,
                _ => c.n_half() * a.d_head,
            };
            assert_eq!(c.fused_width(), want);
        }
    }

    #[test]
    fn zeroed_ssm_branch_ignores_its_scalars() {
        for scalar in [BranchScalar::Scale, BranchScalar::Gate, BranchScalar::DiffLambda] {
            let spec = FusionSpec { norm: BranchNorm::Group, scalar, fusion: FusionOp::Add, out_proj: 1, ratio: (1, 1) };
            let (b, mut store) = block(spec, 8);
            for id in store.ids().collect::<Vec<_>>() {
                if store.spec(id).name.contains(".ssm.") {
                    let z = Tensor::zeros(store.get(id).shape());
                    store.set(id, z).unwrap();
                }
            }
            let x = Tensor::randn(&[4, 8], 1.0, &mut Rng::new(9));
            let y0 = intra_hybrid_forward(&x, &b, &store).unwrap();
            let targets: Vec<ParamId> = match b.scalar {
                ScalarParams::Scale { m, .. } | ScalarParams::Gate { m, .. } => vec![m],
                ScalarParams::Lambda { q1, k1, q2, k2 } => vec![q1, k1, q2, k2],
                ScalarParams::None => vec![],
            };
            for id in targets {
                let v = store.get(id).map(|v| v * 3.0 + 1.0);
                store.set(id, v).unwrap();
            }
            assert_eq!(intra_hybrid_forward(&x, &b, &store).unwrap(), y0, "{scalar:?}");
        }
    }

    #[test]
    fn group_norm_equalizes_branch_scales() {
        let (b, mut store) = block(FusionSpec::default(), 10);
        let (na, nm) = b.norm.unwrap();
        store.set(na, Tensor::ones(store.get(na).shape())).unwrap();
        store.set(nm, Tensor::ones(store.get(nm).shape())).unwrap();
        let x = Tensor::randn(&[1, 12, 8], 2.0, &mut Rng::new(11));
        let mut t = Tape::new();
        let vars = store.to_tape(&mut t, false);
        let xv = t.constant(x);
        let (a, m) = b.branches(&mut t, &vars, xv).unwrap();
        let ra = project_attend(&mut t, xv, vars[b.wq], vars[b.wk], vars[b.wv], &b.cfg.attn).unwrap();
        let rm = b.ssm.forward_core(&mut t, &vars, xv).unwrap();
        let variance = |g: &[f64]| {
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            g.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / g.len() as f64
        };
        let mut checked = 0;
        for (v, raw) in [(a, ra), (m, rm)] {
            let w = t.value(v).last_dim() / b.cfg.n_half();
            let raw_groups = t.value(raw).data().chunks(w);
            for (g, r) in t.value(v).data().chunks(w).zip(raw_groups) {
                let rv = variance(r);
                let expected = rv / (rv + NORM_EPS);
                assert!((variance(g) - expected).abs() < 1e-9);
                // away from the eps floor every head comes out at unit variance
                if rv > 1e3 * NORM_EPS {
                    assert!((variance(g) - 1.0).abs() < 1e-3);
                    checked += 1;
                }
            }
        }
        assert!(checked > 24, "{checked}");
    }

    #[test]
    fn every_cell_has_correct_gradients() {
        for (i, spec) in FusionSpec::all_cells((1, 1)).into_iter().enumerate() {
            let (b, store) = block(spec, 20 + i as u64);
            let x = Tensor::randn(&[1, 4, 8], 1.0, &mut Rng::new(i as u64));
            let mut inputs = vec![x];
            inputs.extend(store.values().iter().cloned());
            let err = check(&inputs, 1e-3, |t, v| {
                let vars = ParamVars::from_vars(v[1..].to_vec());
                let y = b.forward(t, &vars, v[0]).unwrap();
                weighted_sum(t, y, 12)
            });
            assert!(err < 1e-4, "{spec}: {err}");
        }
    }

    #[test]
    fn cached_steps_match_forward() {
        for spec in [FusionSpec::default(), FusionSpec::hymba(), "none/diff_lambda/concat/1".parse().unwrap()] {
            let (b, store) = block(spec, 30);
            let x = Tensor::randn(&[10, 8], 1.0, &mut Rng::new(31));
            let full = intra_hybrid_forward(&x, &b, &store).unwrap();
            let mut cache = b.new_cache();
            for t in 0..10 {
                let y = b.step(&store, x.row(t), t, &mut cache).unwrap();
                for (u, v) in y.iter().zip(full.row(t)) {
                    assert!((u - v).abs() < 1e-10, "{spec}");
                }
            }
        }
    }

    #[test]
    fn lambda_schedule() {
        assert!((lambda_init(0) - 0.2).abs() < 1e-15);
        assert!(lambda_init(100) < 0.8 && lambda_init(100) > 0.79);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn causal_and_prefix_consistent(seed in 0u64..300, p in 1usize..8) {
            let (b, store) = block(FusionSpec::default(), seed);
            let x = Tensor::randn(&[8, 8], 1.0, &mut Rng::new(seed + 1));
            let mut x2 = x.clone();
            for v in &mut x2.data_mut()[p * 8..] { *v -= 2.0; }
            let y = intra_hybrid_forward(&x, &b, &store).unwrap();
            let y2 = intra_hybrid_forward(&x2, &b, &store).unwrap();
            for t in 0..p {
                prop_assert_eq!(y.row(t), y2.row(t));
            }
            let pre = intra_hybrid_forward(&x.slice_rows(0, p).unwrap(), &b, &store).unwrap();
            prop_assert!(pre.max_abs_diff(&y.slice_rows(0, p).unwrap()) < 1e-10);
        }
    }
}
