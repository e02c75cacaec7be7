//! Layer layouts: which block kind sits at each depth.
//!
//! A layout mixes a *special* kind (attention or intra-hybrid blocks) into a
//! *base* kind (usually Mamba) at a block ratio, placing the special blocks
//! by one of six positioning strategies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::{parse_ratio, FusionSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Attn,
    Swa,
    Mamba,
    Intra,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] = [BlockKind::Attn, BlockKind::Swa, BlockKind::Mamba, BlockKind::Intra];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Attn => "attn",
            BlockKind::Swa => "swa",
            BlockKind::Mamba => "mamba",
            BlockKind::Intra => "intra",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "attn" | "attention" | "transformer" => Ok(BlockKind::Attn),
            "swa" => Ok(BlockKind::Swa),
            "mamba" | "ssm" => Ok(BlockKind::Mamba),
            "intra" | "mix" => Ok(BlockKind::Intra),
            o => Err(Error::config(format!("unknown block kind `{o}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positioning {
    Front,
    Middle,
    End,
    Cluster,
    Scatter,
    Sandwich,
}

impl Positioning {
    pub const ALL: [Positioning; 6] = [
        Positioning::Front,
        Positioning::Middle,
        Positioning::End,
        Positioning::Cluster,
        Positioning::Scatter,
        Positioning::Sandwich,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Positioning::Front => "front",
            Positioning::Middle => "middle",
            Positioning::End => "end",
            Positioning::Cluster => "cluster",
            Positioning::Scatter => "scatter",
            Positioning::Sandwich => "sandwich",
        }
    }
}

impl FromStr for Positioning {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Positioning::ALL
            .into_iter()
            .find(|p| p.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown positioning `{s}`")))
    }
}

/// One layer, with optional overrides of the model-wide settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub fusion: Option<FusionSpec>,
    pub window: Option<(usize, usize)>,
}

impl BlockSpec {
    pub fn new(kind: BlockKind) -> Self {
        BlockSpec { kind, fusion: None, window: None }
    }
}

impl fmt::Display for BlockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(fu) = self.fusion {
            write!(f, " fusion={fu}")?;
        }
        if let Some((w, s)) = self.window {
            write!(f, " window={w} sink={s}")?;
        }
        Ok(())
    }
}

impl FromStr for BlockSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        let kind = words.next().ok_or_else(|| Error::config("empty block line"))?.parse()?;
        let mut spec = BlockSpec::new(kind);
        let (mut window, mut sink) = (None, None);
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(|| Error::config(format!("override `{w}` must be key=value")))?;
            let num = || v.parse::<usize>().map_err(|_| Error::config(format!("bad number in `{w}`")));
            match k {
                "fusion" => spec.fusion = Some(v.parse()?),
                "window" => window = Some(num()?),
                "sink" => sink = Some(num()?),
                o => return Err(Error::config(format!("unknown override `{o}`"))),
            }
        }
        spec.window = match (window, sink) {
            (Some(w), Some(s)) => Some((w, s)),
            (None, None) => None,
            _ => return Err(Error::config("window and sink overrides go together")),
        };
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub blocks: Vec<BlockSpec>,
    /// `(special, base)` block ratio as requested.
    pub ratio: (u32, u32),
    pub special: BlockKind,
    pub base: BlockKind,
    pub positioning: Positioning,
}

impl LayoutSpec {
    /// A layout of one kind only.
    pub fn uniform(kind: BlockKind, depth: usize) -> Self {
        LayoutSpec {
            blocks: vec![BlockSpec::new(kind); depth],
            ratio: (1, 0),
            special: kind,
            base: kind,
            positioning: Positioning::Scatter,
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn count(&self, kind: BlockKind) -> usize {
        self.blocks.iter().filter(|b| b.kind == kind).count()
    }

    pub fn kinds(&self) -> Vec<BlockKind> {
        self.blocks.iter().map(|b| b.kind).collect()
    }

    /// Indices of the special blocks.
    pub fn special_positions(&self) -> Vec<usize> {
        if self.special == self.base {
            return (0..self.depth()).collect();
        }
        (0..self.depth()).filter(|&i| self.blocks[i].kind == self.special).collect()
    }

    /// Short description such as `2 attn + 11 mamba`.
    pub fn summary(&self) -> String {
        let mut parts = Vec::new();
        for k in BlockKind::ALL {
            let n = self.count(k);
            if n > 0 {
                parts.push(format!("{n} {k}"));
            }
        }
        parts.join(" + ")
    }
}

const HEADER: &str = "# hybridlab layout v1";

impl fmt::Display for LayoutSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{HEADER}")?;
        writeln!(f, "depth {}", self.depth())?;
        writeln!(f, "ratio {}:{}", self.ratio.0, self.ratio.1)?;
        writeln!(f, "special {}", self.special)?;
        writeln!(f, "base {}", self.base)?;
        writeln!(f, "positioning {}", self.positioning.name())?;
        for b in &self.blocks {
            writeln!(f, "block {b}")?;
        }
        Ok(())
    }
}

impl FromStr for LayoutSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut depth = None;
        let mut ratio = None;
        let mut special = None;
        let mut base = None;
        let mut positioning = Positioning::Scatter;
        let mut blocks: Vec<BlockSpec> = Vec::new();
        for (i, raw) in s.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |e: Error| Error::Parse { line: i + 1, msg: e.to_string() };
            let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            match key {
                "depth" => {
                    depth = Some(rest.parse::<usize>().map_err(|_| at(Error::config(format!("bad depth `{rest}`"))))?)
                }
                "ratio" => ratio = Some(parse_ratio(rest).map_err(at)?),
                "special" => special = Some(rest.parse().map_err(at)?),
                "base" => base = Some(rest.parse().map_err(at)?),
                "positioning" => positioning = rest.parse().map_err(at)?,
                "block" => blocks.push(rest.parse().map_err(at)?),
                o => return Err(at(Error::config(format!("unknown key `{o}`")))),
            }
        }
        if let Some(d) = depth {
            if d != blocks.len() {
                return Err(Error::Parse { line: 0, msg: format!("depth {d} but {} block lines", blocks.len()) });
            }
        }
        if blocks.is_empty() {
            return Err(Error::Parse { line: 0, msg: "layout has no blocks".into() });
        }
        let special: BlockKind = special.unwrap_or(blocks[0].kind);
        let base = base.unwrap_or(special);
        let ratio = ratio.unwrap_or_else(|| {
            let k = blocks.iter().filter(|b| b.kind == special).count() as u32;
            (k, blocks.len() as u32 - k)
        });
        Ok(LayoutSpec { blocks, ratio, special, base, positioning })
    }
}

fn round_half_up(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

/// Number of special blocks for `depth` layers at ratio `s:m`.
pub fn special_count(depth: usize, ratio: (u32, u32)) -> usize {
    let (s, m) = (ratio.0 as usize, ratio.1 as usize);
    round_half_up(depth * s, s + m)
}

/// Evenly spread positions: the `j`-th of `k` blocks lands on
/// `round((j+1)·depth/(k+1)) − 1`.
fn scatter(depth: usize, k: usize) -> Vec<usize> {
    (0..k).map(|j| round_half_up((j + 1) * depth, k + 1) - 1).collect()
}

fn positions(depth: usize, k: usize, pos: Positioning) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    if k >= depth {
        return (0..depth).collect();
    }
    match pos {
        Positioning::Middle if k == 1 => vec![depth / 2],
        Positioning::Middle | Positioning::Scatter => scatter(depth, k),
        Positioning::Front => {
            let mut p = scatter(depth, k);
            p[0] = 0;
            p
        }
        Positioning::End => {
            let mut p = scatter(depth, k);
            p[k - 1] = depth - 1;
            p
        }
        Positioning::Cluster => {
            let start = (depth - k) / 2;
            (start..start + k).collect()
        }
        Positioning::Sandwich => {
            if k == 1 {
                return vec![0];
            }
            let mut p = vec![0];
            p.extend(scatter(depth - 2, k - 2).into_iter().map(|i| i + 1));
            p.push(depth - 1);
            p
        }
    }
}

/// Builds a layout of `depth` layers at block ratio `special : base`.
pub fn plan_layout(depth: usize, ratio: (u32, u32), special: BlockKind, positioning: Positioning) -> Result<LayoutSpec> {
    plan_layout_with_base(depth, ratio, special, BlockKind::Mamba, positioning)
}

pub fn plan_layout_with_base(
    depth: usize,
    ratio: (u32, u32),
    special: BlockKind,
    base: BlockKind,
    positioning: Positioning,
) -> Result<LayoutSpec> {
    if depth == 0 {
        return Err(Error::config("depth must be at least 1"));
    }
    if ratio == (0, 0) {
        return Err(Error::config("ratio 0:0 has no blocks"));
    }
    let k = special_count(depth, ratio);
    if k == 0 && ratio.0 > 0 {
        return Err(Error::Degenerate(format!(
            "ratio {}:{} at depth {depth} rounds to zero {special} blocks",
            ratio.0, ratio.1
        )));
    }
    if k == depth && ratio.1 > 0 {
        return Err(Error::Degenerate(format!(
            "ratio {}:{} at depth {depth} rounds to zero {base} blocks",
            ratio.0, ratio.1
        )));
    }
    let mut layout = plan_counts(k, depth - k, special, base, positioning)?;
    layout.ratio = ratio;
    Ok(layout)
}

/// Builds a layout from explicit block counts; depth is their sum.
pub fn plan_counts(
    n_special: usize,
    n_base: usize,
    special: BlockKind,
    base: BlockKind,
    positioning: Positioning,
) -> Result<LayoutSpec> {
    let depth = n_special + n_base;
    if depth == 0 {
        return Err(Error::config("layout needs at least one block"));
    }
    let mut blocks = vec![BlockSpec::new(base); depth];
    for p in positions(depth, n_special, positioning) {
        blocks[p] = BlockSpec::new(special);
    }
    Ok(LayoutSpec { blocks, ratio: (n_special as u32, n_base as u32), special, base, positioning })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LintLevel {
    Warning,
    Note,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lint {
    pub level: LintLevel,
    pub message: String,
}

impl fmt::Display for Lint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.level {
            LintLevel::Warning => "warning",
            LintLevel::Note => "note",
        };
        write!(f, "{tag}: {}", self.message)
    }
}

/// Flags layouts known to hurt quality or efficiency.
pub fn lint_layout(layout: &LayoutSpec) -> Vec<Lint> {
    let mut out = Vec::new();
    if layout.special == layout.base {
        return out;
    }
    let pos = layout.special_positions();
    if pos.first() == Some(&0) {
        out.push(Lint {
            level: LintLevel::Warning,
            message: format!("front placement degrades quality: {} block at layer 0", layout.special),
        });
    }
    if layout.positioning == Positioning::Sandwich {
        out.push(Lint {
            level: LintLevel::Warning,
            message: "sandwich placement at both ends degrades quality; scatter across the middle instead".into(),
        });
    }
    if 2 * pos.len() > layout.depth() {
        out.push(Lint {
            level: LintLevel::Note,
            message: format!(
                "{} of {} layers are {}; ratios above 1:1 cost throughput for little quality",
                pos.len(),
                layout.depth(),
                layout.special
            ),
        });
    }
    out
}
