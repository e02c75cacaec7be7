use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use hybridlab::config::{preset, scale_config};
use hybridlab::cost::{
    cost_report, param_matched_layout, prose_checks, sig3, table2_checks, to_csv, to_table, CostReport, GoldenCheck,
    GOLDEN_CTX, GOLDEN_TOKENS,
};
use hybridlab::hybrid::parse_ratio;
use hybridlab::layout::{BlockKind, LayoutSpec, Positioning};

use crate::config::{resolve, LayoutSection, ModelArgs};
use crate::output::{comment_block, emit, pair, with_meta};

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Args)]
pub struct CostArgs {
    /// Presets to cost; repeat or separate with commas.
    #[arg(long = "preset", value_delimiter = ',')]
    presets: Vec<String>,
    /// TOML run configuration describing one model.
    #[arg(long, conflicts_with = "presets")]
    config: Option<PathBuf>,
    /// Layout file, costed with the widths of `--size`.
    #[arg(long, conflicts_with_all = ["presets", "config"])]
    layout: Option<PathBuf>,
    /// Context lengths; one row per layout and length.
    #[arg(long, value_delimiter = ',', default_value = "8192")]
    ctx: Vec<u64>,
    /// Training token budget.
    #[arg(long, default_value_t = 60e9)]
    tokens: f64,
    /// Reproduce a published table and fail on drift (only `table2`).
    #[arg(long)]
    golden: Option<String>,
    /// Ratios special:base to sweep at matched parameter count.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_missing_value = "1:0,1:1,1:3,1:5,1:12,0:1")]
    sweep: Option<Vec<String>>,
    /// Model size for `--layout` and `--sweep` widths: 100m, 350m, 1b or 3b.
    #[arg(long, default_value = "1b")]
    size: String,
    /// Special block kind in a sweep.
    #[arg(long, default_value = "attn")]
    kind: String,
    /// Base block kind in a sweep.
    #[arg(long, default_value = "mamba")]
    base: String,
    /// Positioning in a sweep.
    #[arg(long, default_value = "scatter")]
    pos: String,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: CostArgs) -> Result<ExitCode> {
    if let Some(g) = &a.golden {
        return golden(g);
    }
    let mut meta = vec![pair("tokens", format!("{:e}", a.tokens))];
    let layouts: Vec<(String, hybridlab::config::ModelConfig, LayoutSpec)> = if let Some(ratios) = &a.sweep {
        meta.push(pair("sweep.size", &a.size));
        meta.push(pair("sweep.kind", &a.kind));
        meta.push(pair("sweep.base", &a.base));
        meta.push(pair("sweep.positioning", &a.pos));
        sweep(&a, ratios)?
    } else if let Some(path) = &a.layout {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let layout: LayoutSpec = text.parse()?;
        let (cfg, _, _) = scale_config(&a.size)?;
        cfg.validate_for(&layout)?;
        meta.push(pair("size", &a.size));
        meta.push(pair("layout", path.display()));
        vec![(path.file_stem().map_or("layout".into(), |s| s.to_string_lossy().into_owned()), cfg, layout)]
    } else if a.config.is_some() {
        let r = resolve(&ModelArgs { config: a.config.clone(), ..Default::default() }, LayoutSection::default(), "llama-1b")?;
        meta.extend(r.meta(false)?);
        vec![(r.preset.clone(), r.model, r.layout)]
    } else {
        if a.presets.is_empty() {
            bail!("give --preset, --config, --layout, --sweep or --golden");
        }
        a.presets
            .iter()
            .map(|n| preset(n).map(|p| (p.name, p.config, p.layout)))
            .collect::<hybridlab::Result<_>>()?
    };
    let mut reports: Vec<CostReport> = Vec::new();
    for (id, cfg, layout) in &layouts {
        for &l in &a.ctx {
            reports.push(cost_report(id, cfg, layout, l, a.tokens)?);
        }
    }
    let text = match a.format {
        Format::Csv => with_meta(&to_csv(&reports), &meta),
        Format::Table => format!("{}{}", comment_block(&meta), to_table(&reports)),
    };
    emit(a.out.as_deref(), &text)?;
    Ok(ExitCode::SUCCESS)
}

/// One layout per ratio, each at the depth whose non-embedding parameter
/// count is closest to the pure-attention model of the same size.
fn sweep(a: &CostArgs, ratios: &[String]) -> Result<Vec<(String, hybridlab::config::ModelConfig, LayoutSpec)>> {
    let (cfg, attn_depth, _) = scale_config(&a.size)?;
    let special: BlockKind = a.kind.parse()?;
    let base: BlockKind = a.base.parse()?;
    let pos: Positioning = a.pos.parse()?;
    let target =
        cost_report("ref", &cfg, &LayoutSpec::uniform(BlockKind::Attn, attn_depth), 1, 1.0)?.params_nonemb;
    let parsed = ratios.iter().map(|r| parse_ratio(r)).collect::<hybridlab::Result<Vec<_>>>()?;
    let layouts = std::thread::scope(|s| {
        let handles: Vec<_> = parsed
            .iter()
            .map(|&r| {
                let cfg = &cfg;
                s.spawn(move || param_matched_layout(cfg, r, special, base, pos, target, 4 * attn_depth))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect::<hybridlab::Result<Vec<_>>>()
    })?;
    Ok(parsed
        .iter()
        .zip(layouts)
        .map(|(r, l)| {
            let id = format!("{}:{}={}+{}", r.0, r.1, l.count(special), l.count(base));
            (id, cfg.clone(), l)
        })
        .collect())
}

fn golden(name: &str) -> Result<ExitCode> {
    if name != "table2" {
        bail!("unknown golden `{name}` (only table2)");
    }
    let mut checks: Vec<GoldenCheck> = table2_checks()?;
    checks.extend(prose_checks()?);
    println!("# L_ctx={GOLDEN_CTX} tokens={GOLDEN_TOKENS:e}");
    println!("{:<17} {:<18} {:>14} {:>14} {:>10}  result", "preset", "quantity", "expected", "got", "tol");
    for c in &checks {
        let tol = if c.relative { format!("{}%", c.tol * 100.0) } else { sig3(c.tol) };
        println!(
            "{:<17} {:<18} {:>14} {:>14} {:>10}  {}",
            c.preset,
            c.quantity,
            sig3(c.expected),
            sig3(c.got),
            tol,
            if c.passed() { "ok" } else { "DRIFT" }
        );
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} of {} checks within tolerance", checks.len() - failed, checks.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
