//! Analytic compute, parameter and cache accounting.
//!
//! Parameter counts come from a shape-only instantiation of the model, so
//! they are exact for whatever the block constructors register. Sequence
//! FLOPs and cache sizes use closed forms over the block configurations.
//! Cache sizes assume 2-byte elements.

use std::fmt::Write as _;

use serde::Serialize;

use crate::attention::AttnConfig;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::hybrid::IntraConfig;
use crate::layout::{plan_layout_with_base, BlockKind, BlockSpec, LayoutSpec, Positioning};
use crate::model::{Ffn, Model};
use crate::ssm::SsmConfig;

pub const BYTES_PER_ELEMENT: u64 = 2;
pub const CSV_HEADER: &str = "#hybridlab-csv-v1";

/// Attention-like cache: K at `d_qk` and V at `d_head` per KV head.
fn attn_cache(a: &AttnConfig, l_ctx: u64) -> u64 {
    let visible = match (a.window, a.sink) {
        (Some(w), Some(s)) => l_ctx.min((w + s) as u64),
        _ => l_ctx,
    };
    BYTES_PER_ELEMENT * visible * (a.n_kv * (a.d_qk + a.d_head)) as u64
}

/// Memory state plus an `N_conv`-entry convolution buffer.
fn ssm_cache(s: &SsmConfig) -> u64 {
    BYTES_PER_ELEMENT * (s.d_ssm * s.d_state + s.n_conv * s.conv_channels()) as u64
}

/// Query-key products and value mixing, forward and backward, causal.
fn attn_extra(a: &AttnConfig, l_ctx: u64) -> f64 {
    let width = (a.n_head * (a.d_qk + a.d_head)) as f64;
    let l = l_ctx as f64;
    let full = 6.0 * width * l * (l + 1.0) / 2.0;
    match (a.window, a.sink) {
        (Some(w), Some(s)) => {
            let lw = (w + s) as f64;
            if l <= lw {
                full
            } else {
                6.0 * width * lw * ((lw + 1.0) / 2.0 + (l - lw))
            }
        }
        _ => full,
    }
}

/// Parallel-scan work per sample.
fn ssm_extra(s: &SsmConfig, l_ctx: u64) -> f64 {
    3.0 * l_ctx as f64 * (9.0 * (s.d_ssm * s.d_state) as f64 + 2.0 * s.d_ssm as f64)
}

/// Per-token forward work of the sequence mixing at 0-based position `pos`.
fn attn_step(a: &AttnConfig, pos: u64) -> f64 {
    let visible = match (a.window, a.sink) {
        (Some(w), Some(s)) => (pos + 1).min((w + s) as u64),
        _ => pos + 1,
    };
    2.0 * (a.n_head * (a.d_qk + a.d_head)) as f64 * visible as f64
}

fn ssm_step(s: &SsmConfig) -> f64 {
    9.0 * (s.d_ssm * s.d_state) as f64 + 2.0 * s.d_ssm as f64
}

enum Prim {
    Attn(AttnConfig),
    Ssm(SsmConfig),
    Intra(Box<IntraConfig>),
}

fn prim(spec: &BlockSpec, cfg: &ModelConfig, layer: usize) -> Result<Prim> {
    Ok(match spec.kind {
        BlockKind::Attn => Prim::Attn(cfg.attn()),
        BlockKind::Swa => {
            let (w, s) = spec.window.unwrap_or((cfg.window, cfg.sink));
            Prim::Attn(cfg.swa(w, s))
        }
        BlockKind::Mamba => Prim::Ssm(cfg.ssm()),
        BlockKind::Intra => Prim::Intra(Box::new(cfg.intra(spec.fusion.unwrap_or(cfg.fusion), layer)?)),
    })
}

/// Cache bytes of one block after `l_ctx` tokens.
pub fn block_cache_bytes(spec: &BlockSpec, cfg: &ModelConfig, l_ctx: u64) -> Result<u64> {
    block_cache_bytes_at(spec, cfg, l_ctx, 0)
}

fn block_cache_bytes_at(spec: &BlockSpec, cfg: &ModelConfig, l_ctx: u64, layer: usize) -> Result<u64> {
    Ok(match prim(spec, cfg, layer)? {
        Prim::Attn(a) => attn_cache(&a, l_ctx),
        Prim::Ssm(s) => ssm_cache(&s),
        Prim::Intra(i) => attn_cache(&i.attn, l_ctx) + ssm_cache(&i.ssm),
    })
}

/// Sequence-mixing FLOPs per sample beyond the `6·params·L` term.
pub fn block_extra_flops(spec: &BlockSpec, cfg: &ModelConfig, l_ctx: u64) -> Result<f64> {
    block_extra_flops_at(spec, cfg, l_ctx, 0)
}

fn block_extra_flops_at(spec: &BlockSpec, cfg: &ModelConfig, l_ctx: u64, layer: usize) -> Result<f64> {
    Ok(match prim(spec, cfg, layer)? {
        Prim::Attn(a) => attn_extra(&a, l_ctx),
        Prim::Ssm(s) => ssm_extra(&s, l_ctx),
        Prim::Intra(i) => attn_extra(&i.attn, l_ctx) + ssm_extra(&i.ssm, l_ctx),
    })
}

/// Forward sequence-mixing work for decoding position `pos`.
pub fn block_step_ops(spec: &BlockSpec, cfg: &ModelConfig, pos: u64, layer: usize) -> Result<f64> {
    Ok(match prim(spec, cfg, layer)? {
        Prim::Attn(a) => attn_step(&a, pos),
        Prim::Ssm(s) => ssm_step(&s),
        Prim::Intra(i) => attn_step(&i.attn, pos) + ssm_step(&i.ssm),
    })
}

/// Closed-form mixer parameter counts for the homogeneous primitives. The
/// SSM form leaves out the output projection and the gated norm.
pub fn closed_form_params(kind: BlockKind, cfg: &ModelConfig) -> Option<u64> {
    let d = cfg.d_model as u64;
    match kind {
        BlockKind::Attn | BlockKind::Swa => Some(2 * d * d + 2 * d * (cfg.d_head * cfg.n_kv) as u64),
        BlockKind::Mamba => {
            let (ds, n, h) = (cfg.d_ssm as u64, cfg.d_state as u64, (cfg.d_ssm / cfg.d_head_ssm) as u64);
            Some(d * (2 * ds + 2 * n + h) + n * (cfg.n_conv as u64 + d) + 2 * h)
        }
        BlockKind::Intra => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockCost {
    pub index: usize,
    pub kind: BlockKind,
    /// Mixer weights only.
    pub mixer_params: u64,
    /// Mixer, feed-forward (all experts) and both norms.
    pub layer_params: u64,
    /// As `layer_params` but counting only the experts a token runs.
    pub activated_params: u64,
    pub closed_form_params: Option<u64>,
    pub cache_bytes: u64,
    pub extra_flops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub layout_id: String,
    pub l_ctx: u64,
    pub tokens: f64,
    /// `6·L·activated_params + Σ extra`.
    pub flops_per_sample: f64,
    pub train_flops: f64,
    /// Every weight except the embedding table and the output head.
    pub params_nonemb: u64,
    /// The embedding table.
    pub params_emb: u64,
    pub params_head: u64,
    pub params_total: u64,
    pub activated_params: u64,
    pub cache_bytes: u64,
    pub blocks: Vec<BlockCost>,
}

impl CostReport {
    pub fn cache_mib(&self) -> f64 {
        self.cache_bytes as f64 / (1u64 << 20) as f64
    }
}

/// Full accounting for `layout` at context `l_ctx` and a `tokens` budget.
pub fn cost_report(id: &str, cfg: &ModelConfig, layout: &LayoutSpec, l_ctx: u64, tokens: f64) -> Result<CostReport> {
    let model = Model::shape_only(cfg, layout)?;
    let mut blocks = Vec::with_capacity(layout.depth());
    for (i, (spec, layer)) in layout.blocks.iter().zip(&model.layers).enumerate() {
        let layer_params = model.layer_params(i);
        let inactive = match &layer.ffn {
            Ffn::Moe(m) => m.cfg.total_params() - m.cfg.activated_params(),
            Ffn::Dense(_) => 0,
        };
        blocks.push(BlockCost {
            index: i,
            kind: spec.kind,
            mixer_params: model.mixer_params(i),
            layer_params,
            activated_params: layer_params - inactive,
            closed_form_params: closed_form_params(spec.kind, cfg),
            cache_bytes: block_cache_bytes_at(spec, cfg, l_ctx, i)?,
            extra_flops: block_extra_flops_at(spec, cfg, l_ctx, i)?,
        });
    }
    let shared = model.store.spec(model.final_norm).numel();
    let params_nonemb = model.non_embedding_params();
    let activated = shared + blocks.iter().map(|b| b.activated_params).sum::<u64>();
    let extra: f64 = blocks.iter().map(|b| b.extra_flops).sum();
    let flops_per_sample = 6.0 * l_ctx as f64 * activated as f64 + extra;
    Ok(CostReport {
        layout_id: id.to_string(),
        l_ctx,
        tokens,
        flops_per_sample,
        train_flops: train_flops_total(flops_per_sample, l_ctx, tokens),
        params_nonemb,
        params_emb: model.store.spec(model.embed).numel(),
        params_head: model.store.spec(model.head).numel(),
        params_total: model.param_count(),
        activated_params: activated,
        cache_bytes: blocks.iter().map(|b| b.cache_bytes).sum(),
        blocks,
    })
}

/// Total training FLOPs: one sample per `l_ctx` tokens.
pub fn train_flops_total(flops_per_sample: f64, l_ctx: u64, tokens: f64) -> f64 {
    flops_per_sample * tokens / l_ctx as f64
}

/// Forward work of decoding the token at `pos`, excluding nothing: all
/// weight multiplies (including the output head) plus sequence mixing.
pub fn decode_step_ops(model: &Model, pos: u64) -> Result<f64> {
    let head = model.store.spec(model.head).numel();
    let mut ops = 0.0;
    for (i, spec) in model.layout.blocks.iter().enumerate() {
        let inactive = match &model.layers[i].ffn {
            Ffn::Moe(m) => m.cfg.total_params() - m.cfg.activated_params(),
            Ffn::Dense(_) => 0,
        };
        ops += 2.0 * (model.layer_params(i) - inactive) as f64 + block_step_ops(spec, &model.cfg, pos, i)?;
    }
    Ok(ops + 2.0 * head as f64)
}

/// Total decode state bytes after `len` tokens.
pub fn state_bytes(model: &Model, len: u64) -> Result<u64> {
    let mut total = 0;
    for (i, spec) in model.layout.blocks.iter().enumerate() {
        total += block_cache_bytes_at(spec, &model.cfg, len, i)?;
    }
    Ok(total)
}

/// The layout at `ratio` whose non-embedding parameter count is closest
/// to `target`, over depths `1..=max_depth`. Ties go to the shallower one.
pub fn param_matched_layout(
    cfg: &ModelConfig,
    ratio: (u32, u32),
    special: BlockKind,
    base: BlockKind,
    positioning: Positioning,
    target: u64,
    max_depth: usize,
) -> Result<LayoutSpec> {
    let mut best: Option<(u64, LayoutSpec)> = None;
    for depth in 1..=max_depth {
        let layout = match plan_layout_with_base(depth, ratio, special, base, positioning) {
            Ok(l) => l,
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        let gap = Model::shape_only(cfg, &layout)?.non_embedding_params().abs_diff(target);
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, layout));
        }
    }
    best.map(|(_, l)| l).ok_or_else(|| Error::Degenerate(format!("no depth up to {max_depth} realizes ratio {}:{}", ratio.0, ratio.1)))
}

pub fn csv_columns() -> &'static str {
    "layout_id,L_ctx,flops_per_sample,train_flops,params_nonemb,params_emb,cache_bytes,activated_params"
}

/// CSV with a version comment, a header row and full-precision values.
pub fn to_csv(reports: &[CostReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n{}\n", csv_columns());
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{},{},{},{}",
            r.layout_id,
            r.l_ctx,
            r.flops_per_sample,
            r.train_flops,
            r.params_nonemb,
            r.params_emb,
            r.cache_bytes,
            r.activated_params
        );
    }
    s
}

/// Three significant figures.
pub fn sig3(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    if (-3..6).contains(&mag) {
        let decimals = (2 - mag).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.2e}")
    }
}

/// Human-readable table of the same columns.
pub fn to_table(reports: &[CostReport]) -> String {
    let mut s = format!(
        "{:<18} {:>7} {:>10} {:>10} {:>9} {:>9} {:>10} {:>9}\n",
        "layout", "L_ctx", "FLOPs/smp", "train", "N-emb", "Emb", "cache MiB", "active"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<18} {:>7} {:>10} {:>10} {:>9} {:>9} {:>10} {:>9}",
            r.layout_id,
            r.l_ctx,
            sig3(r.flops_per_sample),
            sig3(r.train_flops),
            sig3(r.params_nonemb as f64),
            sig3(r.params_emb as f64),
            sig3(r.cache_mib()),
            sig3(r.activated_params as f64)
        );
    }
    s
}

/// One reproduced number against its published value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GoldenCheck {
    pub preset: &'static str,
    pub quantity: &'static str,
    pub expected: f64,
    pub got: f64,
    /// Absolute tolerance, or relative when `relative` is set.
    pub tol: f64,
    pub relative: bool,
}

impl GoldenCheck {
    pub fn passed(&self) -> bool {
        let err = (self.got - self.expected).abs();
        if self.relative {
            err <= self.tol * self.expected.abs()
        } else {
            err <= self.tol
        }
    }
}

pub const GOLDEN_CTX: u64 = 8192;
pub const GOLDEN_TOKENS: f64 = 60e9;

/// Cache (MiB) and training FLOPs of the five 1B-scale layouts at an 8K
/// context and 60B tokens.
pub fn table2_checks() -> Result<Vec<GoldenCheck>> {
    const ROWS: [(&str, f64, f64, f64); 5] = [
        ("llama-1b", 256.0, 0.0, 4.5e20),
        ("mamba-1b", 13.4, 0.1, 3.7e20),
        ("swa-1b", 63.0, 1.0, 3.8e20),
        ("inter-1b", 43.0, 1.0, 3.7e20),
        ("intra-1b", 38.0, 2.0, 3.7e20),
    ];
    let mut out = Vec::new();
    for (name, cache, cache_tol, flops) in ROWS {
        let p = crate::config::preset(name)?;
        let r = cost_report(name, &p.config, &p.layout, GOLDEN_CTX, GOLDEN_TOKENS)?;
        out.push(GoldenCheck {
            preset: name,
            quantity: "cache_mib",
            expected: cache,
            got: r.cache_mib(),
            tol: cache_tol,
            relative: false,
        });
        out.push(GoldenCheck {
            preset: name,
            quantity: "train_flops",
            expected: flops,
            got: r.train_flops,
            tol: 0.03,
            relative: true,
        });
    }
    Ok(out)
}

/// The quantitative side remarks about the 1B attention and Mamba models.
pub fn prose_checks() -> Result<Vec<GoldenCheck>> {
    let report = |n: &str| -> Result<CostReport> {
        let p = crate::config::preset(n)?;
        cost_report(n, &p.config, &p.layout, GOLDEN_CTX, GOLDEN_TOKENS)
    };
    let (a, m) = (report("llama-1b")?, report("mamba-1b")?);
    let gap = (a.flops_per_sample - m.flops_per_sample) / a.flops_per_sample;
    let share = m.cache_bytes as f64 / a.cache_bytes as f64;
    Ok(vec![
        GoldenCheck { preset: "llama-1b/mamba-1b", quantity: "flops_gap", expected: 0.175, got: gap, tol: 0.025, relative: false },
        GoldenCheck {
            preset: "llama-1b",
            quantity: "attn_block_params",
            expected: 10_485_760.0,
            got: a.blocks[0].mixer_params as f64,
            tol: 0.0,
            relative: false,
        },
        GoldenCheck {
            preset: "mamba-1b",
            quantity: "mamba_block_params",
            expected: 25.5e6,
            got: m.blocks[0].mixer_params as f64,
            tol: 1.5e6,
            relative: false,
        },
        GoldenCheck { preset: "mamba-1b", quantity: "cache_share", expected: 0.03, got: share, tol: 0.03, relative: false },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::layout::plan_counts;
    use proptest::prelude::*;

    const L: u64 = 8192;
    const TOKENS: f64 = 60e9;

    fn report(name: &str) -> CostReport {
        let p = preset(name).unwrap();
        cost_report(name, &p.config, &p.layout, L, TOKENS).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn llama_cache_is_exact() {
        let r = report("llama-1b");
        assert_eq!(r.cache_bytes, 268_435_456);
        assert_eq!(r.blocks[0].cache_bytes, 16 << 20);
    }

    #[test]
    fn cache_column() {
        let mib = |n: &str| report(n).cache_mib();
        assert!((mib("mamba-1b") - 13.4).abs() < 0.1, "{}", mib("mamba-1b"));
        assert!((mib("swa-1b") - 63.0).abs() < 1.0, "{}", mib("swa-1b"));
        assert!((mib("inter-1b") - 43.0).abs() < 1.0, "{}", mib("inter-1b"));
        assert!((mib("intra-1b") - 38.0).abs() < 2.0, "{}", mib("intra-1b"));
    }

    #[test]
    fn flops_column() {
        for (n, want) in [("llama-1b", 4.5e20), ("mamba-1b", 3.7e20), ("swa-1b", 3.8e20), ("inter-1b", 3.7e20), ("intra-1b", 3.7e20)] {
            let got = report(n).train_flops;
            assert!(rel(got, want) < 0.03, "{n}: {got:e}");
        }
    }

    #[test]
    fn non_embedding_counts() {
        for (n, want) in [("llama-1b", 0.97e9), ("mamba-1b", 0.99e9), ("inter-1b", 0.96e9), ("swa-1b", 0.97e9)] {
            let got = report(n).params_nonemb as f64;
            assert!((got - want).abs() < 0.006e9, "{n}: {got}");
        }
        for (n, want) in [("llama-100m", 0.13e9), ("llama-350m", 0.20e9), ("llama-1b", 0.26e9), ("llama-3b", 0.39e9)] {
            assert!((report(n).params_emb as f64 - want).abs() < 0.006e9, "{n}");
        }
    }

    #[test]
    fn attention_extra_at_1b() {
        let p = preset("llama-1b").unwrap();
        let spec = BlockSpec::new(BlockKind::Attn);
        let total = 16.0 * block_extra_flops(&spec, &p.config, L).unwrap();
        // 12·d_model·L(L+1)/2 per layer
        assert_eq!(total, 16.0 * 12.0 * 2048.0 * 8192.0 * 8193.0 / 2.0);
        assert!(rel(total, 1.32e13) < 0.005);
    }

    #[test]
    fn scan_extra_per_token() {
        let p = preset("mamba-1b").unwrap();
        let e = block_extra_flops(&BlockSpec::new(BlockKind::Mamba), &p.config, 1).unwrap();
        assert_eq!(e, 3.0 * (9.0 * 4096.0 * 128.0 + 2.0 * 4096.0));
        assert!(rel(e, 1.418e7) < 0.001);
    }

    #[test]
    fn swa_with_full_window_equals_attention() {
        let p = preset("llama-1b").unwrap();
        let mut spec = BlockSpec::new(BlockKind::Swa);
        spec.window = Some((8192 - 64, 64));
        let a = block_extra_flops(&BlockSpec::new(BlockKind::Attn), &p.config, L).unwrap();
        assert_eq!(block_extra_flops(&spec, &p.config, L).unwrap(), a);
    }

    #[test]
    fn parameter_matching_recovers_published_depths() {
        let (cfg, _, _) = crate::config::scale_config("1b").unwrap();
        let target = cost_report("llama", &cfg, &preset("llama-1b").unwrap().layout, 8192, 1.0).unwrap().params_nonemb;
        let counts: Vec<(usize, usize)> = [(1, 0), (0, 1), (1, 1), (1, 3), (1, 5), (1, 12)]
            .into_iter()
            .map(|r| {
                let l = param_matched_layout(&cfg, r, BlockKind::Attn, BlockKind::Mamba, Positioning::Scatter, target, 40)
                    .unwrap();
                (l.count(BlockKind::Attn), l.count(BlockKind::Mamba))
            })
            .collect();
        assert_eq!(counts, [(16, 0), (0, 13), (7, 7), (3, 10), (2, 11), (1, 12)]);
    }

    #[test]
    fn golden_tables_pass() {
        let t = table2_checks().unwrap();
        assert_eq!(t.len(), 10);
        assert!(t.iter().all(GoldenCheck::passed), "{t:?}");
        assert!(prose_checks().unwrap().iter().all(GoldenCheck::passed));
        let drifted = GoldenCheck { got: 270.0, ..t[0].clone() };
        assert!(!drifted.passed());
    }

    #[test]
    fn prose_claims() {
        let (a, m) = (report("llama-1b"), report("mamba-1b"));
        let gap = (a.flops_per_sample - m.flops_per_sample) / a.flops_per_sample;
        assert!((0.15..=0.20).contains(&gap), "{gap}");
        assert_eq!(a.blocks[0].mixer_params, 10_485_760);
        assert_eq!(a.blocks[0].closed_form_params, Some(10_485_760));
        assert!((24e6..=27e6).contains(&(m.blocks[0].mixer_params as f64)));
        assert!(m.cache_bytes as f64 <= 0.06 * a.cache_bytes as f64);
        // the closed form omits the output projection, the gated norm and the conv bias
        // 2048·(2·4096 + 2·128 + 32) + 128·(4 + 2048) + 2·32
        assert_eq!(m.blocks[0].closed_form_params, Some(17_629_760));
    }

    #[test]
    fn moe_totals() {
        for (n, total) in [("llama-1b-moe", 3.79e9), ("mamba-1b-moe", 3.28e9), ("inter-1b-moe", 3.25e9), ("intra-1b-moe", 3.27e9)] {
            let r = report(n);
            assert!((r.params_nonemb as f64 - total).abs() < 0.015e9, "{n}: {}", r.params_nonemb);
            let dense = report(n.trim_end_matches("-moe"));
            // one shared plus one routed half-width expert run per token
            let routers = 8 * 2048 * dense.blocks.len() as u64;
            assert_eq!(r.activated_params, dense.activated_params + routers, "{n}");
        }
    }

    #[test]
    fn csv_has_header_and_full_precision() {
        let r = report("llama-1b");
        let csv = to_csv(std::slice::from_ref(&r));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], csv_columns());
        let f: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(f[2].parse::<f64>().unwrap(), r.flops_per_sample);
        assert_eq!(f[6], "268435456");
        assert_eq!(sig3(4.4712e20), "4.47e20");
        assert_eq!(sig3(13.43), "13.4");
    }

    proptest! {
        #[test]
        fn monotone_in_context(l in 1u64..20_000, k in 0usize..4) {
            let p = preset("intra-1b").unwrap();
            let kind = BlockKind::ALL[k];
            let spec = BlockSpec::new(kind);
            let c = &p.config;
            prop_assert!(block_cache_bytes(&spec, c, l).unwrap() <= block_cache_bytes(&spec, c, l + 1).unwrap());
            prop_assert!(block_extra_flops(&spec, c, l).unwrap() < block_extra_flops(&spec, c, l + 1).unwrap());
            if kind == BlockKind::Mamba {
                prop_assert_eq!(block_cache_bytes(&spec, c, 0).unwrap(), block_cache_bytes(&spec, c, l).unwrap());
            }
        }

        #[test]
        fn permuting_blocks_keeps_costs(seed in 0u64..100) {
            let p = preset("intra-1b").unwrap();
            let mut layout = plan_counts(3, 5, BlockKind::Attn, BlockKind::Mamba, Positioning::Scatter).unwrap();
            let base = cost_report("a", &p.config, &layout, 4096, 1e9).unwrap();
            let mut rng = crate::rng::Rng::new(seed);
            for i in (1..layout.blocks.len()).rev() {
                let j = rng.below(0, i + 1);
                layout.blocks.swap(i, j);
            }
            let r = cost_report("a", &p.config, &layout, 4096, 1e9).unwrap();
            prop_assert_eq!(r.cache_bytes, base.cache_bytes);
            prop_assert_eq!(r.params_nonemb, base.params_nonemb);
            prop_assert!((r.flops_per_sample - base.flops_per_sample).abs() <= 1e-9 * base.flops_per_sample);
        }
    }
}
