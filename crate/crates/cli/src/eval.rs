use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use hybridlab::cost::CSV_HEADER;
use hybridlab::harness::checkpoint::load;
use hybridlab::harness::data::{load_tokens, Encoding};
use hybridlab::harness::eval::{niah_eval, positionwise_nll};
use hybridlab::harness::train::accuracy;
use hybridlab::harness::{CopyTask, DataSource, NeedleTask};
use hybridlab::model::Model;
use hybridlab::Rng;

use crate::output::{emit, pair, with_meta};

#[derive(Subcommand)]
pub enum EvalCommand {
    /// Needle retrieval accuracy over a grid of depths and lengths.
    Niah(NiahArgs),
    /// Token accuracy on fresh copy-task sequences.
    Copy(CopyArgs),
    /// Mean next-token loss per position bucket of a token file.
    Nll(NllArgs),
}

#[derive(Args)]
pub struct NiahArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Needle depths as fractions of the context.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    depths: Vec<f64>,
    /// Context lengths.
    #[arg(long, value_delimiter = ',', default_value = "32,64")]
    lengths: Vec<usize>,
    /// Needles per cell.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV to write; stdout without one.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CopyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 64)]
    len: usize,
    /// Sequences to score.
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
pub struct NllArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Token file scored as one sequence.
    #[arg(long)]
    data: PathBuf,
    /// ids or bytes.
    #[arg(long, default_value = "ids")]
    encoding: String,
    #[arg(long, default_value_t = 64)]
    bucket: usize,
    /// Training length; later buckets are marked as extrapolated.
    #[arg(long)]
    train_len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn open(path: &Path) -> Result<(Model, Vec<(String, String)>)> {
    let (m, extra) = load(path).with_context(|| format!("loading {}", path.display()))?;
    let mut meta: Vec<(String, String)> = extra.into_iter().collect();
    meta.push(pair("eval.checkpoint", path.display()));
    Ok((m, meta))
}

pub fn run(c: EvalCommand) -> Result<ExitCode> {
    match c {
        EvalCommand::Niah(a) => {
            let (model, mut meta) = open(&a.checkpoint)?;
            let grid = niah_eval(&model, &a.depths, &a.lengths, a.trials, a.seed)?;
            let v = NeedleTask::new(model.cfg.vocab, a.lengths[0], 0.0, 0).token_ranges()?;
            let chance = ((v.values.1 - v.values.0) as f64).powi(-2);
            meta.extend([pair("eval.trials", a.trials), pair("eval.seed", a.seed), pair("eval.chance", chance)]);
            emit(a.out.as_deref(), &grid.to_csv(&meta))?;
            if a.out.is_some() {
                let all = grid.mean_within(usize::MAX).unwrap_or(0.0);
                println!("mean accuracy {all:.4} over {} cells (chance {chance:.2e})", grid.depths.len() * grid.lengths.len());
            }
        }
        EvalCommand::Copy(a) => {
            let (model, _) = open(&a.checkpoint)?;
            let b = CopyTask::new(model.cfg.vocab, a.len)?.next_batch(&mut Rng::new(a.seed), a.n)?;
            let acc = accuracy(&model, &b)?;
            println!("accuracy {acc:.4} (chance {:.4})", 1.0 / (model.cfg.vocab - 2) as f64);
        }
        EvalCommand::Nll(a) => {
            let (model, mut meta) = open(&a.checkpoint)?;
            let enc: Encoding = a.encoding.parse()?;
            let tokens = load_tokens(&a.data, enc, model.cfg.vocab)?;
            let buckets = positionwise_nll(&model, &tokens, a.bucket, a.train_len)?;
            meta.extend([pair("eval.data", a.data.display()), pair("eval.bucket", a.bucket)]);
            let mut csv = format!("{CSV_HEADER}\nstart,mean_nll,extrapolated\n");
            for b in &buckets {
                let _ = writeln!(csv, "{},{:e},{}", b.start, b.mean_nll, b.extrapolated);
            }
            emit(a.out.as_deref(), &with_meta(&csv, &meta))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
