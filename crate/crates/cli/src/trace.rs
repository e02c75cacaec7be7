use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Args;
use hybridlab::decode::{measure_decode, predict_decode, trace_csv};
use hybridlab::harness::checkpoint::load;
use hybridlab::model::Model;

use crate::config::{resolve, LayoutSection, ModelArgs};
use crate::output::{emit, pair, with_meta};

#[derive(Args)]
pub struct TraceArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Prompt tokens decoded before generation.
    #[arg(long, default_value_t = 64)]
    prompt: usize,
    /// Generated tokens.
    #[arg(long, default_value_t = 64)]
    gen: usize,
    /// Run real decode steps and measure the state instead of predicting
    /// it; needs the weights in memory.
    #[arg(long)]
    measure: bool,
    /// Measure a trained checkpoint instead of a fresh model.
    #[arg(long, conflicts_with_all = ["config", "preset", "fusion", "moe", "window", "sink"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: TraceArgs) -> Result<ExitCode> {
    let mut meta = Vec::new();
    let (model, measure) = match &a.checkpoint {
        Some(p) => {
            let (m, extra) = load(p)?;
            meta.extend(extra);
            meta.push(pair("trace.checkpoint", p.display()));
            (m, true)
        }
        None => {
            let r = resolve(&a.model, LayoutSection::default(), "toy-intra")?;
            meta.extend(r.meta(false)?);
            let m = if a.measure { Model::new(&r.model, &r.layout, r.seed)? } else { Model::shape_only(&r.model, &r.layout)? };
            (m, a.measure)
        }
    };
    let rows = if measure { measure_decode(&model, a.prompt, a.gen)? } else { predict_decode(&model, a.prompt, a.gen)? };
    meta.extend([
        pair("trace.prompt", a.prompt),
        pair("trace.gen", a.gen),
        pair("trace.mode", if measure { "measured" } else { "predicted" }),
    ]);
    emit(a.out.as_deref(), &with_meta(&trace_csv(&rows), &meta))?;
    Ok(ExitCode::SUCCESS)
}
