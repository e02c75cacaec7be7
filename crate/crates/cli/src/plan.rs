use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Args;
use hybridlab::layout::lint_layout;

use crate::config::LayoutSection;
use crate::output::emit;

#[derive(Args)]
pub struct PlanArgs {
    #[arg(long)]
    depth: Option<usize>,
    /// Special to base blocks, e.g. 1:5; 0:1 is all base.
    #[arg(long)]
    ratio: Option<String>,
    /// Exact block counts special:base, instead of depth and ratio.
    #[arg(long, conflicts_with_all = ["depth", "ratio"])]
    counts: Option<String>,
    /// Special block kind.
    #[arg(long, default_value = "attn")]
    kind: String,
    /// Base block kind.
    #[arg(long, default_value = "mamba")]
    base: String,
    /// front, middle, end, cluster, scatter or sandwich.
    #[arg(long, default_value = "scatter")]
    pos: String,
    /// Layout file to write; stdout without one.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: PlanArgs) -> Result<ExitCode> {
    let section = LayoutSection {
        counts: a.counts,
        depth: a.depth,
        ratio: a.ratio,
        special: Some(a.kind),
        base: Some(a.base),
        positioning: Some(a.pos),
        ..Default::default()
    };
    let layout = section.build(None)?;
    emit(a.out.as_deref(), &layout.to_string())?;
    eprintln!("{} layers: {}, special at {:?}", layout.depth(), layout.summary(), layout.special_positions());
    for lint in lint_layout(&layout) {
        eprintln!("{lint}");
    }
    Ok(ExitCode::SUCCESS)
}
