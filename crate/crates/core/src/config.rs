//! Model hyperparameters and named presets.

use serde::{Deserialize, Serialize};

use crate::attention::AttnConfig;
use crate::error::{Error, Result};
use crate::hybrid::{FusionSpec, IntraConfig};
use crate::layout::{plan_counts, BlockKind, LayoutSpec, Positioning};
use crate::moe::MoeConfig;
use crate::nn::{FfnConfig, DEFAULT_ROPE_BASE};
use crate::ssm::{SsmConfig, DEFAULT_CHUNK};

pub const LLAMA_VOCAB: usize = 128_256;

/// Shared widths for every block kind in a model. Attention fields are
/// ignored by SSM-only layouts and vice versa.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_head: usize,
    pub n_kv: usize,
    pub d_head: usize,
    pub d_ssm: usize,
    pub d_head_ssm: usize,
    pub d_state: usize,
    pub n_conv: usize,
    #[serde(default = "one")]
    pub n_groups: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_sink")]
    pub sink: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_chunk")]
    pub chunk: usize,
    #[serde(default, with = "fusion_text")]
    pub fusion: FusionSpec,
    /// Replace every dense FFN with one shared plus top-1 of eight experts.
    #[serde(default)]
    pub moe: bool,
    /// Longest sequence a decoder may reach.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_std")]
    pub init_std: f64,
}

fn one() -> usize {
    1
}
fn default_window() -> usize {
    512
}
fn default_sink() -> usize {
    64
}
fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}
fn default_chunk() -> usize {
    DEFAULT_CHUNK
}
fn default_max_len() -> usize {
    1 << 20
}
fn default_std() -> f64 {
    0.02
}

mod fusion_text {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::hybrid::FusionSpec;

    pub fn serialize<S: Serializer>(f: &FusionSpec, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(f)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<FusionSpec, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl ModelConfig {
    pub fn attn(&self) -> AttnConfig {
        AttnConfig { rope_base: self.rope_base, ..AttnConfig::full(self.d_model, self.n_head, self.n_kv, self.d_head) }
    }

    pub fn swa(&self, window: usize, sink: usize) -> AttnConfig {
        self.attn().sliding(window, sink)
    }

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig {
            d_model: self.d_model,
            d_ssm: self.d_ssm,
            d_state: self.d_state,
            d_head_ssm: self.d_head_ssm,
            n_conv: self.n_conv,
            n_groups: self.n_groups,
            chunk: self.chunk,
        }
    }

    pub fn intra(&self, fusion: FusionSpec, layer: usize) -> Result<IntraConfig> {
        IntraConfig::derive(&self.attn(), &self.ssm(), fusion, layer)
    }

    pub fn ffn(&self) -> FfnConfig {
        FfnConfig { d_model: self.d_model, d_ffn: self.d_ffn }
    }

    pub fn moe_config(&self) -> Option<MoeConfig> {
        self.moe.then(|| MoeConfig::for_dense(self.d_model, self.d_ffn))
    }

    /// Checks the parts that `layout` actually uses.
    pub fn validate_for(&self, layout: &LayoutSpec) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 {
            return Err(Error::config("vocab and d_model must be positive"));
        }
        if self.init_std.is_nan() || self.init_std < 0.0 {
            return Err(Error::config("init_std must be nonnegative"));
        }
        self.ffn().validate()?;
        if let Some(m) = self.moe_config() {
            m.validate()?;
        }
        for (i, b) in layout.blocks.iter().enumerate() {
            match b.kind {
                BlockKind::Attn => self.attn().validate()?,
                BlockKind::Swa => {
                    let (w, s) = b.window.unwrap_or((self.window, self.sink));
                    self.swa(w, s).validate()?
                }
                BlockKind::Mamba => self.ssm().validate()?,
                BlockKind::Intra => {
                    self.intra(b.fusion.unwrap_or(self.fusion), i)?;
                }
            }
        }
        Ok(())
    }
}

/// A named model: widths plus layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: String,
    pub config: ModelConfig,
    pub layout: LayoutSpec,
}

/// `(name, depth, d_model, d_ffn, n_head, n_kv, d_head)`
const LLAMA: [(&str, usize, usize, usize, usize, usize, usize); 4] = [
    ("100m", 8, 1024, 3072, 16, 4, 64),
    ("350m", 14, 1536, 4096, 24, 8, 64),
    ("1b", 16, 2048, 8192, 32, 8, 64),
    ("3b", 28, 3072, 8192, 32, 8, 96),
];

/// `(name, depth, d_ssm, d_head_ssm, d_state)`; N_conv is 4 throughout.
const MAMBA: [(&str, usize, usize, usize, usize); 4] =
    [("100m", 6, 2048, 128, 128), ("350m", 11, 3072, 128, 128), ("1b", 13, 4096, 128, 128), ("3b", 21, 6144, 192, 256)];

pub const PRESET_NAMES: [&str; 16] = [
    "llama-100m", "llama-350m", "llama-1b", "llama-3b", "mamba-100m", "mamba-350m", "mamba-1b", "mamba-3b", "swa-1b",
    "inter-1b", "intra-1b", "toy-llama", "toy-swa", "toy-mamba", "toy-inter", "toy-intra",
];

/// Full-scale widths for one size, attention and SSM parts together.
pub fn scale_config(size: &str) -> Result<(ModelConfig, usize, usize)> {
    let l = LLAMA.iter().find(|r| r.0 == size);
    let m = MAMBA.iter().find(|r| r.0 == size);
    let (Some(l), Some(m)) = (l, m) else {
        return Err(Error::config(format!("unknown model size `{size}`")));
    };
    let cfg = ModelConfig {
        vocab: LLAMA_VOCAB,
        d_model: l.2,
        d_ffn: l.3,
        n_head: l.4,
        n_kv: l.5,
        d_head: l.6,
        d_ssm: m.2,
        d_head_ssm: m.3,
        d_state: m.4,
        n_conv: 4,
        n_groups: 1,
        window: 512,
        sink: 64,
        rope_base: DEFAULT_ROPE_BASE,
        chunk: DEFAULT_CHUNK,
        fusion: FusionSpec::default(),
        moe: false,
        max_len: default_max_len(),
        init_std: 0.02,
    };
    Ok((cfg, l.1, m.1))
}

/// Small widths for desk-scale training and equivalence tests.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab: 32,
        d_model: 32,
        d_ffn: 64,
        n_head: 4,
        n_kv: 2,
        d_head: 8,
        d_ssm: 64,
        d_head_ssm: 16,
        d_state: 8,
        n_conv: 4,
        n_groups: 1,
        window: 16,
        sink: 4,
        rope_base: 10_000.0,
        chunk: 16,
        fusion: FusionSpec::default(),
        moe: false,
        max_len: 4096,
        init_std: 0.1,
    }
}

fn uniform(kind: BlockKind, depth: usize) -> LayoutSpec {
    LayoutSpec::uniform(kind, depth)
}

fn mixed(n_special: usize, n_base: usize, special: BlockKind, base: BlockKind, pos: Positioning) -> Result<LayoutSpec> {
    plan_counts(n_special, n_base, special, base, pos)
}

/// Looks up a preset; any name may carry a `-moe` suffix.
pub fn preset(name: &str) -> Result<Preset> {
    let (base_name, moe) = match name.strip_suffix("-moe") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let (mut config, layout) = if let Some(kind) = base_name.strip_prefix("toy-") {
        let c = toy_config();
        let layout = match kind {
            "llama" => uniform(BlockKind::Attn, 2),
            "swa" => mixed(1, 1, BlockKind::Attn, BlockKind::Swa, Positioning::Middle)?,
            "mamba" => uniform(BlockKind::Mamba, 2),
            "inter" => mixed(1, 1, BlockKind::Attn, BlockKind::Mamba, Positioning::Middle)?,
            "intra" => uniform(BlockKind::Intra, 2),
            _ => return Err(Error::config(format!("unknown preset `{name}`"))),
        };
        (c, layout)
    } else {
        let (family, size) =
            base_name.split_once('-').ok_or_else(|| Error::config(format!("unknown preset `{name}`")))?;
        let (c, l_depth, m_depth) = scale_config(size)?;
        let layout = match (family, size) {
            ("llama", _) => uniform(BlockKind::Attn, l_depth),
            ("mamba", _) => uniform(BlockKind::Mamba, m_depth),
            ("swa", "1b") => mixed(3, 13, BlockKind::Attn, BlockKind::Swa, Positioning::Scatter)?,
            ("inter", "1b") => mixed(2, 11, BlockKind::Attn, BlockKind::Mamba, Positioning::Scatter)?,
            ("intra", "1b") => mixed(2, 11, BlockKind::Intra, BlockKind::Mamba, Positioning::Scatter)?,
            _ => return Err(Error::config(format!("unknown preset `{name}`"))),
        };
        (c, layout)
    };
    config.moe = moe;
    config.validate_for(&layout)?;
    Ok(Preset { name: name.to_string(), config, layout })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_resolves() {
        for n in PRESET_NAMES {
            let p = preset(n).unwrap();
            assert!(p.layout.depth() > 0, "{n}");
            assert!(preset(&format!("{n}-moe")).unwrap().config.moe);
        }
        assert!(preset("llama-7b").is_err());
        assert!(preset("swa-3b").is_err());
    }

    #[test]
    fn published_layout_counts() {
        let p = preset("swa-1b").unwrap();
        assert_eq!((p.layout.count(BlockKind::Attn), p.layout.count(BlockKind::Swa)), (3, 13));
        let p = preset("inter-1b").unwrap();
        assert_eq!(p.layout.special_positions(), [3, 8]);
        let p = preset("intra-1b").unwrap();
        assert_eq!((p.layout.count(BlockKind::Intra), p.layout.count(BlockKind::Mamba)), (2, 11));
        assert_eq!(preset("llama-3b").unwrap().layout.depth(), 28);
        assert_eq!(preset("mamba-350m").unwrap().layout.depth(), 11);
    }

    #[test]
    fn toml_round_trip_with_fusion_text() {
        let c = toy_config();
        let text = toml::to_string(&c).unwrap();
        assert!(text.contains("fusion = \"group/none/diff/2/1:1\""));
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
