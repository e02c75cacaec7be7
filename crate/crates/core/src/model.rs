//! A full language model: token embedding, a stack of pre-norm residual
//! layers (mixer + feed-forward), a final norm and an untied output head.

use crate::attention::AttnBlock;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::hybrid::IntraBlock;
use crate::layout::{BlockKind, BlockSpec, LayoutSpec};
use crate::moe::{update_balance, MoeBlock, RouterState};
use crate::nn::{FfnBlock, NORM_EPS};
use crate::params::{Init, ParamId, ParamStore, ParamVars};
use crate::ssm::SsmBlock;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Mixer {
    /// Full or sliding-window attention, depending on its config.
    Attn(AttnBlock),
    Ssm(SsmBlock),
    Intra(Box<IntraBlock>),
}

#[derive(Clone, Debug)]
pub enum Ffn {
    Dense(FfnBlock),
    Moe(MoeBlock),
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub spec: BlockSpec,
    pub norm1: ParamId,
    pub mixer: Mixer,
    pub norm2: ParamId,
    pub ffn: Ffn,
}

/// Builds the mixer for layer `i` of `spec.kind`.
pub fn build_mixer(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, spec: &BlockSpec, i: usize) -> Result<Mixer> {
    let std = cfg.init_std;
    Ok(match spec.kind {
        BlockKind::Attn => Mixer::Attn(AttnBlock::build(store, prefix, cfg.attn(), std)?),
        BlockKind::Swa => {
            let (w, s) = spec.window.unwrap_or((cfg.window, cfg.sink));
            Mixer::Attn(AttnBlock::build(store, prefix, cfg.swa(w, s), std)?)
        }
        BlockKind::Mamba => Mixer::Ssm(SsmBlock::build(store, prefix, cfg.ssm(), std, true)?),
        BlockKind::Intra => {
            let icfg = cfg.intra(spec.fusion.unwrap_or(cfg.fusion), i)?;
            Mixer::Intra(Box::new(IntraBlock::build(store, prefix, icfg, std)?))
        }
    })
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub layout: LayoutSpec,
    pub store: ParamStore,
    pub embed: ParamId,
    pub layers: Vec<Layer>,
    pub final_norm: ParamId,
    pub head: ParamId,
    /// One router state per MoE layer, indexed by layer.
    pub routers: Vec<Option<RouterState>>,
}

impl Model {
    /// Registers every parameter without allocating values; enough for
    /// parameter accounting at any scale.
    pub fn shape_only(cfg: &ModelConfig, layout: &LayoutSpec) -> Result<Self> {
        cfg.validate_for(layout)?;
        let mut store = ParamStore::new();
        let std = cfg.init_std;
        let embed = store.add("embed", &[cfg.vocab, cfg.d_model], Init::Normal { std: 1.0 });
        let mut layers = Vec::with_capacity(layout.depth());
        let mut routers = Vec::with_capacity(layout.depth());
        for (i, spec) in layout.blocks.iter().enumerate() {
            let p = format!("layers.{i}");
            let norm1 = store.add(format!("{p}.norm1"), &[cfg.d_model], Init::Ones);
            let mixer = build_mixer(&mut store, &format!("{p}.{}", spec.kind), cfg, spec, i)?;
            let norm2 = store.add(format!("{p}.norm2"), &[cfg.d_model], Init::Ones);
            let ffn = match cfg.moe_config() {
                Some(m) => {
                    routers.push(Some(RouterState::new(m.n_experts)));
                    Ffn::Moe(MoeBlock::build(&mut store, &format!("{p}.moe"), m, std)?)
                }
                None => {
                    routers.push(None);
                    Ffn::Dense(FfnBlock::build(&mut store, &format!("{p}.ffn"), cfg.ffn(), std)?)
                }
            };
            layers.push(Layer { spec: *spec, norm1, mixer, norm2, ffn });
        }
        let final_norm = store.add("final_norm", &[cfg.d_model], Init::Ones);
        let head = store.add("head", &[cfg.d_model, cfg.vocab], Init::Normal { std });
        Ok(Model { cfg: cfg.clone(), layout: layout.clone(), store, embed, layers, final_norm, head, routers })
    }

    pub fn new(cfg: &ModelConfig, layout: &LayoutSpec, seed: u64) -> Result<Self> {
        let mut m = Self::shape_only(cfg, layout)?;
        m.store.materialize(seed);
        Ok(m)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> u64 {
        self.store.numel()
    }

    /// Every parameter except the embedding table and the output head.
    pub fn non_embedding_params(&self) -> u64 {
        self.store.numel() - self.store.spec(self.embed).numel() - self.store.spec(self.head).numel()
    }

    pub fn layer_params(&self, i: usize) -> u64 {
        self.store.numel_prefix(&format!("layers.{i}."))
    }

    /// Mixer parameters of layer `i`, excluding norms and feed-forward.
    pub fn mixer_params(&self, i: usize) -> u64 {
        self.store.numel_prefix(&format!("layers.{i}.{}.", self.layers[i].spec.kind))
    }

    /// Logits `[batch, len, vocab]` on `t`, plus per-layer expert loads.
    pub fn forward(
        &self,
        t: &mut Tape,
        vars: &ParamVars,
        ids: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<(Var, Vec<Option<Vec<u64>>>)> {
        if ids.len() != batch * len || len == 0 {
            return Err(Error::dim("model_forward", format!("{} ids for {batch}x{len}", ids.len())));
        }
        if len > self.cfg.max_len {
            return Err(Error::PositionOverflow { pos: len - 1, max: self.cfg.max_len - 1 });
        }
        let mut h = t.embedding(vars[self.embed], ids, &[batch, len])?;
        let mut loads = Vec::with_capacity(self.depth());
        for (layer, router) in self.layers.iter().zip(&self.routers) {
            let x = t.rms_norm(h, vars[layer.norm1], NORM_EPS)?;
            let y = match &layer.mixer {
                Mixer::Attn(b) => b.forward(t, vars, x)?,
                Mixer::Ssm(b) => b.forward(t, vars, x)?,
                Mixer::Intra(b) => b.forward(t, vars, x)?,
            };
            h = t.add(h, y)?;
            let x = t.rms_norm(h, vars[layer.norm2], NORM_EPS)?;
            let y = match (&layer.ffn, router) {
                (Ffn::Dense(f), _) => {
                    loads.push(None);
                    f.forward(t, vars, x)?
                }
                (Ffn::Moe(m), Some(state)) => {
                    let (y, l) = m.forward(t, vars, x, state)?;
                    loads.push(Some(l));
                    y
                }
                (Ffn::Moe(_), None) => return Err(Error::Contract("MoE layer without router state".into())),
            };
            h = t.add(h, y)?;
        }
        let h = t.rms_norm(h, vars[self.final_norm], NORM_EPS)?;
        Ok((t.matmul(h, vars[self.head])?, loads))
    }

    /// Full-sequence logits `[batch, len, vocab]` without gradients.
    pub fn logits(&self, ids: &[usize], batch: usize, len: usize) -> Result<Tensor> {
        let mut t = Tape::new();
        let vars = self.store.to_tape(&mut t, false);
        let (y, _) = self.forward(&mut t, &vars, ids, batch, len)?;
        Ok(t.value(y).clone())
    }

    /// Applies one round of loss-free balancing from the loads of a forward.
    pub fn update_routers(&mut self, loads: &[Option<Vec<u64>>]) -> Result<()> {
        for ((state, l), layer) in self.routers.iter_mut().zip(loads).zip(&self.layers) {
            if let (Some(s), Some(l), Ffn::Moe(m)) = (state, l, &layer.ffn) {
                update_balance(s, l, &m.cfg)?;
            }
        }
        Ok(())
    }
}
