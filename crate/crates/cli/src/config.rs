//! Run configuration. A preset supplies every value; an optional TOML file
//! overrides parts of it; flags override the file.
//!
//! ```toml
//! preset = "toy-intra"
//! seed = 7
//!
//! [model]            # any ModelConfig field
//! d_model = 48
//!
//! [fusion]           # replaces model.fusion
//! norm = "group"
//! scalar = "none"
//! fusion = "diff"
//! out_proj = 2
//! ratio = [1, 1]
//!
//! [layout]           # file, blocks, counts, or depth + ratio
//! depth = 13
//! ratio = "1:5"
//! special = "attn"
//! base = "mamba"
//! positioning = "scatter"
//!
//! [train]            # any TrainConfig field
//! steps = 600
//!
//! [task]
//! kind = "copy"
//! len = 64
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use hybridlab::config::{preset, ModelConfig};
use hybridlab::harness::TrainConfig;
use hybridlab::hybrid::{parse_ratio, FusionSpec};
use hybridlab::layout::{plan_counts, plan_layout_with_base, BlockKind, BlockSpec, LayoutSpec, Positioning};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<Table>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<LayoutSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<Table>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSection>,
}

impl RunFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Layout keys; `file`, `blocks`, `counts` and `depth` + `ratio` are
/// alternative ways to say the same thing.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub special: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positioning: Option<String>,
}

impl LayoutSection {
    pub fn from_layout(l: &LayoutSpec) -> Self {
        LayoutSection {
            blocks: Some(l.blocks.iter().map(ToString::to_string).collect()),
            ratio: Some(format!("{}:{}", l.ratio.0, l.ratio.1)),
            special: Some(l.special.to_string()),
            base: Some(l.base.to_string()),
            positioning: Some(l.positioning.name().to_string()),
            ..Default::default()
        }
    }

    /// Fields set in `over` win.
    pub fn overlay(self, over: LayoutSection) -> Self {
        LayoutSection {
            file: over.file.or(self.file),
            blocks: over.blocks.or(self.blocks),
            counts: over.counts.or(self.counts),
            depth: over.depth.or(self.depth),
            ratio: over.ratio.or(self.ratio),
            special: over.special.or(self.special),
            base: over.base.or(self.base),
            positioning: over.positioning.or(self.positioning),
        }
    }

    fn defines_layout(&self) -> bool {
        self.file.is_some() || self.blocks.is_some() || self.counts.is_some() || self.depth.is_some()
    }

    /// The layout these keys describe, or `fallback` when they describe
    /// none.
    pub fn build(&self, fallback: Option<&LayoutSpec>) -> Result<LayoutSpec> {
        let sources = [self.file.is_some(), self.blocks.is_some(), self.counts.is_some(), self.depth.is_some()];
        if sources.iter().filter(|s| **s).count() > 1 {
            bail!("layout takes exactly one of file, blocks, counts or depth");
        }
        let special: BlockKind = self.special.as_deref().unwrap_or("attn").parse()?;
        let base: BlockKind = self.base.as_deref().unwrap_or("mamba").parse()?;
        let pos: Positioning = self.positioning.as_deref().unwrap_or("scatter").parse()?;
        if let Some(f) = &self.file {
            let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            return text.parse().with_context(|| format!("parsing {}", f.display()));
        }
        if let Some(blocks) = &self.blocks {
            let blocks = blocks.iter().map(|b| b.parse::<BlockSpec>()).collect::<hybridlab::Result<Vec<_>>>()?;
            if blocks.is_empty() {
                bail!("layout has no blocks");
            }
            let special = match &self.special {
                Some(s) => s.parse()?,
                None => blocks[0].kind,
            };
            let base = match &self.base {
                Some(s) => s.parse()?,
                None => special,
            };
            let ratio = match &self.ratio {
                Some(r) => parse_ratio(r)?,
                None => {
                    let k = blocks.iter().filter(|b| b.kind == special).count() as u32;
                    (k, blocks.len() as u32 - k)
                }
            };
            return Ok(LayoutSpec { blocks, ratio, special, base, positioning: pos });
        }
        if let Some(c) = &self.counts {
            let (a, m) = parse_ratio(c).context("counts look like 2:11")?;
            return Ok(plan_counts(a as usize, m as usize, special, base, pos)?);
        }
        if let Some(depth) = self.depth {
            let ratio = self.ratio.as_deref().context("a layout by depth needs a ratio")?;
            return Ok(plan_layout_with_base(depth, parse_ratio(ratio)?, special, base, pos)?);
        }
        match fallback {
            Some(l) => Ok(l.clone()),
            None => bail!("no layout given: pass --depth with --ratio, --counts, or a layout file"),
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoding: Option<String>,
}

/// Flags that pick and adjust a model.
#[derive(Args, Clone, Debug, Default)]
pub struct ModelArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named model, e.g. toy-intra, inter-1b, llama-1b-moe.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Intra-hybrid fusion as norm/scalar/fusion/out_proj/ratio.
    #[arg(long)]
    pub fusion: Option<String>,
    /// Replace dense feed-forward layers with mixture-of-experts.
    #[arg(long)]
    pub moe: bool,
    /// Sliding-window size.
    #[arg(long)]
    pub window: Option<usize>,
    /// Attention-sink tokens kept by sliding-window layers.
    #[arg(long)]
    pub sink: Option<usize>,
}

/// Everything a command runs with.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub preset: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub layout: LayoutSpec,
    pub train: TrainConfig,
    pub task: TaskSection,
}

fn overlay(base: &mut Table, over: Table) {
    for (k, v) in over {
        base.insert(k, v);
    }
}

pub fn resolve(args: &ModelArgs, layout_flags: LayoutSection, default_preset: &str) -> Result<Resolved> {
    let file = match &args.config {
        Some(p) => RunFile::load(p)?,
        None => RunFile::default(),
    };
    let name = args.preset.clone().or(file.preset).unwrap_or_else(|| default_preset.to_string());
    let p = preset(&name)?;

    let mut model = match Value::try_from(&p.config)? {
        Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    };
    overlay(&mut model, file.model.unwrap_or_default());
    if let Some(f) = file.fusion {
        model.insert("fusion".into(), Value::String(f.to_string()));
    }
    if let Some(f) = &args.fusion {
        let f: FusionSpec = f.parse()?;
        model.insert("fusion".into(), Value::String(f.to_string()));
    }
    if args.moe {
        model.insert("moe".into(), Value::Boolean(true));
    }
    for (key, v) in [("window", args.window), ("sink", args.sink)] {
        if let Some(v) = v {
            model.insert(key.into(), Value::Integer(v as i64));
        }
    }
    let model: ModelConfig = Value::Table(model).try_into().context("in [model]")?;

    let section = file.layout.unwrap_or_default();
    let section = if layout_flags.defines_layout() { layout_flags } else { section.overlay(layout_flags) };
    let layout = section.build(Some(&p.layout))?;
    model.validate_for(&layout)?;

    let seed = args.seed.or(file.seed).unwrap_or(0);
    let mut train = match Value::try_from(TrainConfig::default())? {
        Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    };
    overlay(&mut train, file.train.unwrap_or_default());
    let mut train: TrainConfig = Value::Table(train).try_into().context("in [train]")?;
    train.seed = seed;

    Ok(Resolved { preset: name, seed, model, layout, train, task: file.task.unwrap_or_default() })
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Array(a) => {
            let parts: Vec<String> = a
                .iter()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    v => v.to_string(),
                })
                .collect();
            out.push((prefix.to_string(), parts.join("; ")));
        }
        v => out.push((prefix.to_string(), v.to_string())),
    }
}

impl Resolved {
    /// The configuration as a TOML run file that reproduces it.
    pub fn run_file(&self, with_train: bool) -> Result<RunFile> {
        let table = |v: Value| match v {
            Value::Table(t) => t,
            _ => unreachable!("a struct serializes to a table"),
        };
        let mut train = table(Value::try_from(&self.train)?);
        train.remove("seed");
        Ok(RunFile {
            preset: Some(self.preset.clone()),
            seed: Some(self.seed),
            model: Some(table(Value::try_from(&self.model)?)),
            fusion: None,
            layout: Some(LayoutSection::from_layout(&self.layout)),
            train: with_train.then_some(train),
            task: (with_train && self.task != TaskSection::default()).then(|| self.task.clone()),
        })
    }

    /// Flat `key=value` pairs of [`Resolved::run_file`], for embedding in
    /// outputs.
    pub fn meta(&self, with_train: bool) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        flatten("", &Value::try_from(self.run_file(with_train)?)?, &mut out);
        Ok(out)
    }
}
