use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Args;
use hybridlab::harness::checkpoint::save;
use hybridlab::harness::data::{load_tokens, Encoding};
use hybridlab::harness::tasks::NeedleSource;
use hybridlab::harness::train::{accuracy, trace_csv, train_with};
use hybridlab::harness::{CopyTask, DataSource, NeedleTask, RandomTokens, TokenStream};
use hybridlab::model::Model;
use hybridlab::Rng;

use crate::config::{resolve, LayoutSection, ModelArgs, TaskSection};
use crate::output::{emit, pair, with_meta};

pub const DEFAULT_PRESET: &str = "toy-intra";

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// copy, needle, random or file.
    #[arg(long)]
    task: Option<String>,
    /// Token file for `--task file`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// ids or bytes.
    #[arg(long)]
    encoding: Option<String>,
    /// Sequence length.
    #[arg(long)]
    len: Option<usize>,
    /// Optimizer steps; 0 saves the initialization.
    #[arg(long)]
    steps: Option<usize>,
    /// Sequences per step.
    #[arg(long)]
    batch: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-step CSV of learning rate, loss and gradient norm.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Progress line every this many steps; 0 for none.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
pub struct ConfigArgs {
    #[command(flatten)]
    model: ModelArgs,
}

pub fn print_config(a: ConfigArgs) -> Result<ExitCode> {
    let r = resolve(&a.model, LayoutSection::default(), DEFAULT_PRESET)?;
    print!("{}", toml::to_string(&r.run_file(true)?)?);
    Ok(ExitCode::SUCCESS)
}

/// The data source a task section names.
pub fn data_source(task: &TaskSection, vocab: usize, seed: u64) -> Result<Box<dyn DataSource>> {
    let len = task.len.context("task length unset")?;
    Ok(match task.kind.as_deref().unwrap_or("copy") {
        "copy" => Box::new(CopyTask::new(vocab, len)?),
        "needle" => {
            let t = NeedleTask::new(vocab, len, 0.0, seed);
            t.token_ranges()?;
            Box::new(NeedleSource(t))
        }
        "random" => Box::new(RandomTokens { vocab, len }),
        "file" => {
            let path = task.data.as_ref().context("--task file needs --data")?;
            let enc: Encoding = task.encoding.as_deref().unwrap_or("ids").parse()?;
            let tokens = load_tokens(path, enc, vocab).with_context(|| format!("loading {}", path.display()))?;
            Box::new(TokenStream::new(tokens, len)?)
        }
        k => bail!("unknown task `{k}` (copy, needle, random or file)"),
    })
}

pub fn run(a: TrainArgs) -> Result<ExitCode> {
    let mut r = resolve(&a.model, LayoutSection::default(), DEFAULT_PRESET)?;
    let t = &mut r.task;
    t.kind = a.task.or(t.kind.take()).or(Some("copy".into()));
    t.len = a.len.or(t.len).or(Some(64));
    t.data = a.data.or(t.data.take());
    t.encoding = a.encoding.or(t.encoding.take());
    if let Some(s) = a.steps {
        r.train.steps = s;
    }
    if let Some(b) = a.batch {
        r.train.batch = b;
    }
    if let Some(lr) = a.lr {
        r.train.peak_lr = lr;
    }
    let meta = r.meta(true)?;
    let mut source = data_source(&r.task, r.model.vocab, r.seed)?;
    let mut model = Model::new(&r.model, &r.layout, r.seed)?;
    eprintln!("{}: {} ({} parameters), seed {}", r.preset, r.layout.summary(), model.param_count(), r.seed);

    let trace = if r.train.steps == 0 {
        Vec::new()
    } else {
        let every = a.log_every;
        train_with(&mut model, source.as_mut(), &r.train, |_, rec| {
            if every > 0 && (rec.step + 1) % every == 0 {
                eprintln!("step {:>6}  lr {:.2e}  loss {:.4}  grad {:.3}", rec.step + 1, rec.lr, rec.loss, rec.grad_norm);
            }
            Ok(())
        })?
    };

    let held_out = source.next_batch(&mut Rng::derive(r.seed, 0x5eed), 64)?;
    let acc = accuracy(&model, &held_out)?;
    println!("held-out accuracy {acc:.4}");
    let mut extra: BTreeMap<String, String> = meta.iter().cloned().collect();
    extra.insert("heldout_accuracy".into(), acc.to_string());
    if let Some(last) = trace.last() {
        extra.insert("final_loss".into(), last.loss.to_string());
    }
    save(&model, &extra, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.trace {
        let mut meta = meta;
        meta.push(pair("heldout_accuracy", acc));
        emit(Some(p), &with_meta(&trace_csv(&trace), &meta))?;
    }
    Ok(ExitCode::SUCCESS)
}
