//! Self-contained property suites over the public API, runnable outside
//! the test harness (the `verify` command uses them).
//!
//! Under [`Chaos::FlipSign`] every numeric suite negates the value under
//! test before comparing it with its oracle, so a working checker must
//! report failures.

use std::time::Instant;

use crate::attention::{attention_weights, swa_mask, AttnBlock, AttnConfig};
use crate::config::{preset, toy_config, ModelConfig};
use crate::cost::{prose_checks, table2_checks, GoldenCheck};
use crate::decode::{decode_step, DecodeState};
use crate::error::{Error, Result};
use crate::hybrid::{FusionSpec, IntraBlock, IntraConfig};
use crate::layout::{lint_layout, plan_counts, plan_layout, BlockKind, LayoutSpec, LintLevel, Positioning};
use crate::model::Model;
use crate::moe::{balance_simulation, route, MoeBlock, MoeConfig, RouterState};
use crate::params::{ParamStore, ParamVars};
use crate::rng::Rng;
use crate::ssm::{ssm_scan, ssm_step, SsmBlock, SsmConfig, SsmState};
use crate::tape::gradcheck::{check_scaled, weighted_sum};
use crate::tensor::{sigmoid, Tensor};

pub const SUITES: [&str; 7] = ["ssm", "decode", "grad", "mask", "layout", "moe", "cost"];

/// Every (attention, SSM) count pair from the published 1B and 350M tables.
pub const PUBLISHED_PAIRS: [(usize, usize); 12] =
    [(16, 0), (0, 13), (7, 7), (3, 10), (2, 11), (1, 12), (14, 0), (0, 11), (6, 6), (3, 8), (2, 9), (1, 10)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Chaos {
    None,
    FlipSign,
}

impl Chaos {
    fn sign(self) -> f64 {
        match self {
            Chaos::None => 1.0,
            Chaos::FlipSign => -1.0,
        }
    }
}

impl std::str::FromStr for Chaos {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Chaos::None),
            "flip-sign" => Ok(Chaos::FlipSign),
            _ => Err(Error::config(format!("unknown chaos mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    /// Individual properties evaluated.
    pub properties: usize,
    pub failures: Vec<String>,
    /// Largest error metric seen, where the suite has one.
    pub worst: Option<f64>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.properties > 0
    }
}

/// Settings shared by the suites.
#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub chaos: Chaos,
    pub seed: u64,
    /// Random configurations in the scan suite.
    pub ssm_cases: usize,
    /// Decoded positions per model in the decode suite.
    pub decode_steps: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { chaos: Chaos::None, seed: 0, ssm_cases: 200, decode_steps: 128 }
    }
}

struct Acc {
    properties: usize,
    failures: Vec<String>,
    worst: Option<f64>,
}

impl Acc {
    fn new() -> Self {
        Acc { properties: 0, failures: Vec::new(), worst: None }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.properties += 1;
        if !ok {
            self.failures.push(what());
        }
    }

    fn bound(&mut self, err: f64, tol: f64, what: impl FnOnce() -> String) {
        self.worst = Some(self.worst.map_or(err, |w| w.max(err)));
        self.check(err < tol, || format!("{} (error {err:e}, tolerance {tol:e})", what()));
    }
}

pub fn run_suite(name: &str, opts: &VerifyOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut acc = Acc::new();
    let name: &'static str = SUITES
        .iter()
        .find(|s| **s == name)
        .ok_or_else(|| Error::config(format!("unknown suite `{name}` (available: {})", SUITES.join(", "))))?;
    match name {
        "ssm" => ssm_suite(&mut acc, opts)?,
        "decode" => decode_suite(&mut acc, opts)?,
        "grad" => grad_suite(&mut acc, opts)?,
        "mask" => mask_suite(&mut acc, opts)?,
        "layout" => layout_suite(&mut acc)?,
        "moe" => moe_suite(&mut acc, opts)?,
        "cost" => cost_suite(&mut acc, opts)?,
        _ => unreachable!(),
    }
    Ok(SuiteReport {
        name,
        properties: acc.properties,
        failures: acc.failures,
        worst: acc.worst,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_all(opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    SUITES.iter().map(|s| run_suite(s, opts)).collect()
}

/// A random small SSM configuration and sequence length.
pub fn random_ssm_case(rng: &mut Rng) -> (SsmConfig, usize) {
    let d_head_ssm = [1, 2, 4][rng.below(0, 3)];
    let heads = rng.below(1, 5);
    let n_groups = if heads.is_multiple_of(2) && rng.uniform() < 0.5 { 2 } else { 1 };
    let cfg = SsmConfig {
        d_model: rng.below(2, 9),
        d_ssm: d_head_ssm * heads,
        d_state: rng.below(1, 9),
        d_head_ssm,
        n_conv: rng.below(1, 5),
        n_groups,
        chunk: rng.below(1, 65),
    };
    (cfg, rng.below(1, 257))
}

fn ssm_suite(acc: &mut Acc, opts: &VerifyOptions) -> Result<()> {
    let mut rng = Rng::derive(opts.seed, 1);
    for case in 0..opts.ssm_cases {
        let (cfg, len) = random_ssm_case(&mut rng);
        let mut store = ParamStore::new();
        let block = SsmBlock::build(&mut store, "ssm", cfg, 0.5, true)?;
        store.materialize(opts.seed.wrapping_add(case as u64));
        let p = block.params(&store);
        let x = Tensor::randn(&[len, cfg.d_model], 1.0, &mut rng);
        let scan = ssm_scan(&x, &cfg, &p, cfg.chunk)?.map(|v| opts.chaos.sign() * v);
        let mut st = SsmState::new(&cfg);
        let mut err: f64 = 0.0;
        for t in 0..len {
            let y = ssm_step(&cfg, &mut st, x.row(t), &p)?;
            err = y.iter().zip(scan.row(t)).fold(err, |e, (a, b)| e.max((a - b).abs()));
        }
        acc.bound(err, 1e-9, || format!("scan vs step fold, {cfg:?}, L={len}"));
    }
    Ok(())
}

/// Decoding models: every block kind, the default intra-hybrid and MoE.
pub const DECODE_PRESETS: [&str; 6] = ["toy-llama", "toy-swa", "toy-mamba", "toy-inter", "toy-intra", "toy-intra-moe"];

fn decode_suite(acc: &mut Acc, opts: &VerifyOptions) -> Result<()> {
    for name in DECODE_PRESETS {
        let p = preset(name)?;
        let m = Model::new(&p.config, &p.layout, opts.seed)?;
        let mut rng = Rng::derive(opts.seed, 2);
        let ids: Vec<usize> = (0..opts.decode_steps).map(|_| rng.below(0, p.config.vocab)).collect();
        let full = m.logits(&ids, 1, ids.len())?;
        let mut st = DecodeState::new(&m);
        let mut err: f64 = 0.0;
        for (t, &id) in ids.iter().enumerate() {
            let l = decode_step(&m, &mut st, id)?;
            err = l.iter().zip(full.row(t)).fold(err, |e, (a, b)| e.max((opts.chaos.sign() * a - b).abs()));
        }
        acc.bound(err, 1e-8, || format!("{name}: cached vs full logits over {} steps", ids.len()));
    }
    Ok(())
}

fn tiny_intra_parts() -> (AttnConfig, SsmConfig) {
    let attn = AttnConfig { rope_base: 10_000.0, ..AttnConfig::full(8, 4, 2, 4) };
    let ssm = SsmConfig { d_model: 8, d_ssm: 16, d_state: 3, d_head_ssm: 4, n_conv: 3, n_groups: 1, chunk: 3 };
    (attn, ssm)
}

/// Moves per-head scalars and norm weights off their neutral starting
/// values so that every gradient path is exercised.
fn perturb_scalars(store: &mut ParamStore, seed: u64) -> Result<()> {
    let mut rng = Rng::new(seed ^ 0xabc);
    for id in store.ids().collect::<Vec<_>>() {
        let name = &store.spec(id).name;
        if name.contains("scale") || name.contains("gate") || name.contains("norm") {
            let noise = Tensor::randn(store.get(id).shape(), 0.3, &mut rng);
            let v = store.get(id).zip_map(&noise, |a, b| a + b)?;
            store.set(id, v)?;
        }
    }
    Ok(())
}

fn grad_suite(acc: &mut Acc, opts: &VerifyOptions) -> Result<()> {
    let sign = opts.chaos.sign();
    let (a, s) = tiny_intra_parts();
    for (i, spec) in FusionSpec::all_cells((1, 1)).into_iter().enumerate() {
        let cfg = IntraConfig::derive(&a, &s, spec, 2)?;
        let mut store = ParamStore::new();
        let b = IntraBlock::build(&mut store, "mix", cfg, 0.4)?;
        store.materialize(opts.seed.wrapping_add(20 + i as u64));
        perturb_scalars(&mut store, i as u64)?;
        let x = Tensor::randn(&[1, 4, 8], 1.0, &mut Rng::derive(opts.seed, 100 + i as u64));
        let mut inputs = vec![x];
        inputs.extend(store.values().iter().cloned());
        let err = check_scaled(&inputs, 1e-3, sign, |t, v| {
            let vars = ParamVars::from_vars(v[1..].to_vec());
            let y = b.forward(t, &vars, v[0]).expect("intra forward");
            weighted_sum(t, y, 12)
        });
        acc.bound(err, 1e-4, || format!("intra cell {spec}"));
    }
    // the homogeneous blocks, sliding attention and the expert layer
    let x = Tensor::randn(&[2, 5, 8], 1.0, &mut Rng::derive(opts.seed, 3));
    for attn in [a, a.sliding(2, 1)] {
        let mut store = ParamStore::new();
        let b = AttnBlock::build(&mut store, "attn", attn, 0.5)?;
        store.materialize(opts.seed);
        let err = block_gradcheck(&store, &x, sign, |t, vars, x| b.forward(t, vars, x).expect("attention forward"));
        acc.bound(err, 1e-4, || format!("attention block {:?}", attn.mask()));
    }
    let mut store = ParamStore::new();
    let b = SsmBlock::build(&mut store, "ssm", SsmConfig { n_groups: 2, ..s }, 0.5, true)?;
    store.materialize(opts.seed);
    perturb_scalars(&mut store, 7)?;
    let err = block_gradcheck(&store, &x, sign, |t, vars, x| b.forward(t, vars, x).expect("ssm forward"));
    acc.bound(err, 1e-4, || "SSM block".into());
    let mcfg = MoeConfig { d_model: 8, d_expert: 8, n_experts: 4, top_k: 1, shared: 1, bias_update_rate: 1e-3 };
    let mut store = ParamStore::new();
    let b = MoeBlock::build(&mut store, "moe", mcfg, 0.5)?;
    store.materialize(opts.seed);
    let state = RouterState::new(4);
    let err = block_gradcheck(&store, &x, sign, |t, vars, x| b.forward(t, vars, x, &state).expect("moe forward").0);
    acc.bound(err, 1e-4, || "MoE block".into());
    Ok(())
}

fn block_gradcheck(
    store: &ParamStore,
    x: &Tensor,
    sign: f64,
    f: impl Fn(&mut crate::tape::Tape, &ParamVars, crate::tape::Var) -> crate::tape::Var,
) -> f64 {
    let mut inputs = vec![x.clone()];
    inputs.extend(store.values().iter().cloned());
    check_scaled(&inputs, 1e-3, sign, |t, v| {
        let vars = ParamVars::from_vars(v[1..].to_vec());
        let y = f(t, &vars, v[0]);
        weighted_sum(t, y, 5)
    })
}

fn mask_suite(acc: &mut Acc, opts: &VerifyOptions) -> Result<()> {
    let mut rng = Rng::derive(opts.seed, 4);
    // realized attention patterns against the reference visible sets
    for case in 0..24 {
        let len = rng.below(1, 41);
        let (window, sink) = (rng.below(1, len + 2), rng.below(0, 6));
        let cfg = AttnConfig { rope_base: 10_000.0, ..AttnConfig::full(8, 4, 2, 4) }.sliding(window, sink);
        let mut store = ParamStore::new();
        let b = AttnBlock::build(&mut store, "a", cfg, 0.3)?;
        store.materialize(opts.seed.wrapping_add(case));
        let x = Tensor::randn(&[len, 8], 1.0, &mut rng);
        let w = attention_weights(&x, &cfg, &b.weights(&store))?;
        let mut cache = b.new_cache();
        for t in 0..len {
            let want = swa_mask(t, len, window, sink)?;
            b.step(&store, x.row(t), t, &mut cache);
            acc.check(cache.len() == want.len(), || format!("cache holds {} entries at t={t}", cache.len()));
            for h in 0..cfg.n_head {
                let row = &w.data()[(h * len + t) * len..][..len];
                let got: Vec<usize> = (0..len).filter(|&j| row[j] > 0.0).collect();
                acc.check(got == want, || format!("window {window} sink {sink} head {h} query {t}: {got:?} vs {want:?}"));
            }
        }
    }
    // causality under mutation through whole models, every kind
    let cfg = ModelConfig { window: 3, sink: 1, ..toy_config() };
    for kind in BlockKind::ALL {
        for moe in [false, true] {
            let c = ModelConfig { moe, ..cfg.clone() };
            let m = Model::new(&c, &LayoutSpec::uniform(kind, 2), opts.seed)?;
            let ids: Vec<usize> = (0..12).map(|_| rng.below(0, 32)).collect();
            let base = m.logits(&ids, 1, 12)?;
            for j in 0..12 {
                let mut ids2 = ids.clone();
                ids2[j] = (ids2[j] + 1) % 32;
                let y = m.logits(&ids2, 1, 12)?.map(|v| opts.chaos.sign() * v);
                let kept = (0..j).all(|t| y.row(t) == base.row(t));
                acc.check(kept, || format!("{kind} (moe={moe}): token {j} changed an earlier position"));
            }
        }
    }
    Ok(())
}

fn layout_suite(acc: &mut Acc) -> Result<()> {
    let l = plan_layout(13, (1, 12), BlockKind::Attn, Positioning::Middle)?;
    acc.check(l.special_positions() == [6], || format!("1:12 middle at {:?}", l.special_positions()));
    let l = plan_layout(13, (1, 5), BlockKind::Attn, Positioning::Scatter)?;
    acc.check(l.special_positions() == [3, 8], || format!("1:5 scatter at {:?}", l.special_positions()));
    acc.check(lint_layout(&l).is_empty(), || "scatter layout drew lints".into());
    for pos in [Positioning::Front, Positioning::Sandwich] {
        let l = plan_layout(13, (1, 5), BlockKind::Attn, pos)?;
        let warned = lint_layout(&l).iter().any(|w| w.level == LintLevel::Warning);
        acc.check(warned, || format!("{pos:?} placement produced no warning"));
    }
    for (a, m) in PUBLISHED_PAIRS {
        let l = plan_counts(a, m, BlockKind::Attn, BlockKind::Mamba, Positioning::Scatter)?;
        let got = (l.count(BlockKind::Attn), l.count(BlockKind::Mamba));
        acc.check(got == (a, m), || format!("counts {a}+{m} planned as {got:?}"));
    }
    let l = plan_counts(3, 13, BlockKind::Attn, BlockKind::Swa, Positioning::Scatter)?;
    acc.check(l.count(BlockKind::Swa) == 13, || "3 global + 13 local not representable".into());
    Ok(())
}

fn moe_suite(acc: &mut Acc, opts: &VerifyOptions) -> Result<()> {
    let sign = opts.chaos.sign();
    let cfg = MoeConfig { d_model: 16, d_expert: 16, n_experts: 8, top_k: 1, shared: 1, bias_update_rate: 1e-3 };
    let mut rng = Rng::derive(opts.seed, 5);
    let w = Tensor::randn(&[16, 8], 0.3, &mut rng);
    let mut state = RouterState::new(8);
    state.expert_bias = rng.normals(8, 0.1);
    let x = Tensor::randn(&[256, 16], 1.0, &mut rng);
    let routes = route(&x, &w, &state, &cfg)?;
    for (r, route) in routes.iter().enumerate() {
        let scores: Vec<f64> =
            (0..8).map(|e| sigmoid((0..16).map(|i| x.row(r)[i] * w.data()[i * 8 + e]).sum())).collect();
        let mut best = 0;
        for e in 1..8 {
            if scores[e] + state.expert_bias[e] > scores[best] + state.expert_bias[best] {
                best = e;
            }
        }
        let gate = sign * route.gates[0];
        acc.check(route.experts == [best] && (gate - scores[best]).abs() < 1e-12, || {
            format!("token {r}: routed {:?} gate {gate}, oracle {best} gate {}", route.experts, scores[best])
        });
        acc.check(cfg.shared + route.experts.len() == 2, || format!("token {r}: {} active experts", route.experts.len()));
    }
    let (frac, _) = balance_simulation(&cfg, &w, 2000, 256, opts.seed)?;
    let frac = sign * frac;
    acc.check((0.075..=0.175).contains(&frac), || format!("max load fraction {frac} after 2000 steps"));
    Ok(())
}

fn cost_suite(acc: &mut Acc, opts: &VerifyOptions) -> Result<()> {
    let sign = opts.chaos.sign();
    for c in table2_checks()?.into_iter().chain(prose_checks()?) {
        let c = GoldenCheck { got: sign * c.got, ..c };
        acc.check(c.passed(), || format!("{} {}: {} vs {} ± {}", c.preset, c.quantity, c.got, c.expected, c.tol));
    }
    Ok(())
}
