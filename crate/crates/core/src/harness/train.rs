//! A minimal deterministic trainer: AdamW, global-norm clipping and a
//! warmup / stable / cooldown learning-rate schedule.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::tasks::{Batch, DataSource};
use crate::cost::CSV_HEADER;
use crate::decode::argmax;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per step.
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup: f64,
    pub stable: f64,
    pub cooldown: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch: 16,
            peak_lr: 3e-3,
            warmup: 0.25,
            stable: 0.55,
            cooldown: 0.2,
            clip_norm: 1.0,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.warmup, self.stable, self.cooldown];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || fr.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::config("schedule fractions must be in [0, 1] and sum to at most 1"));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::config("steps and batch must be positive"));
        }
        let nonneg = [self.peak_lr, self.clip_norm, self.weight_decay, self.eps];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("learning rate, clip norm, weight decay and eps must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Phase lengths in steps; whatever the fractions leave over follows the
    /// cooldown at zero learning rate.
    pub fn phases(&self) -> (usize, usize, usize) {
        let n = self.steps as f64;
        let w = (self.warmup * n).round() as usize;
        let s = (self.stable * n).round() as usize;
        let c = ((self.cooldown * n).round() as usize).min(self.steps - (w + s).min(self.steps));
        (w.min(self.steps), s.min(self.steps - w.min(self.steps)), c)
    }

    /// Learning rate at `step`: linear up to the peak over the warmup,
    /// flat, then linear down to zero over the cooldown.
    pub fn lr_at(&self, step: usize) -> f64 {
        let (w, s, c) = self.phases();
        if step < w {
            self.peak_lr * (step + 1) as f64 / w as f64
        } else if step < w + s {
            self.peak_lr
        } else if step < w + s + c {
            self.peak_lr * (w + s + c - step) as f64 / (c + 1) as f64
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

pub fn trace_csv(trace: &[StepRecord]) -> String {
    let mut s = format!("{CSV_HEADER}\nstep,lr,loss,grad_norm\n");
    for r in trace {
        let _ = writeln!(s, "{},{:e},{:e},{:e}", r.step, r.lr, r.loss, r.grad_norm);
    }
    s
}

/// Decoupled-weight-decay Adam over a model's parameters. Vectors (norm
/// weights, biases, per-head scalars) are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(model: &Model) -> Self {
        let z: Vec<Tensor> = model.store.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
        AdamW { m: z.clone(), v: z, t: 0 }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), m), v) in model.store.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.ndim() >= 2 { cfg.weight_decay } else { 0.0 };
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let upd = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                *p -= lr * (upd + decay * *p);
            }
        }
    }
}

/// Loss and parameter gradients for one batch; also returns expert loads.
/// Expert load counts per layer; `None` for dense layers.
pub type RouterLoads = Vec<Option<Vec<u64>>>;

pub fn loss_and_grads(model: &Model, b: &Batch) -> Result<(f64, Vec<Tensor>, RouterLoads)> {
    let mut t = Tape::new();
    let vars = model.store.to_tape(&mut t, true);
    let (logits, loads) = model.forward(&mut t, &vars, &b.ids, b.batch, b.len)?;
    let flat = t.reshape(logits, &[b.batch * b.len, model.cfg.vocab])?;
    let loss = t.cross_entropy(flat, &b.targets)?;
    t.backward(loss)?;
    let grads = vars
        .vars()
        .iter()
        .zip(model.store.values())
        .map(|(&v, p)| t.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((t.value(loss).item(), grads, loads))
}

/// Scales `grads` in place to global norm at most `max`; returns the norm
/// before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max && norm > 0.0 {
        let s = max / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// Trains in place and returns the per-step trace. Everything random comes
/// from `cfg.seed`.
pub fn train(model: &mut Model, data: &mut dyn DataSource, cfg: &TrainConfig) -> Result<Vec<StepRecord>> {
    train_with(model, data, cfg, |_, _| Ok(()))
}

/// [`train`] with a callback after every step (for progress output or
/// early evaluation).
pub fn train_with(
    model: &mut Model,
    data: &mut dyn DataSource,
    cfg: &TrainConfig,
    mut after: impl FnMut(&Model, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if !model.store.is_materialized() {
        return Err(Error::Contract("training needs a materialized model".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut opt = AdamW::new(model);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let b = data.next_batch(&mut rng, cfg.batch)?;
        let (loss, mut grads, loads) = loss_and_grads(model, &b).map_err(|e| match e {
            Error::NonFinite(op) => Error::Diverged { step, msg: format!("non-finite value in {op}") },
            e => e,
        })?;
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged { step, msg: format!("loss {loss}, gradient norm {grad_norm}") });
        }
        let lr = cfg.lr_at(step);
        opt.step(model, &grads, lr, cfg);
        model.update_routers(&loads)?;
        let rec = StepRecord { step, lr, loss, grad_norm };
        after(model, &rec)?;
        trace.push(rec);
    }
    Ok(trace)
}

/// Fraction of scored positions whose argmax prediction is right.
pub fn accuracy(model: &Model, b: &Batch) -> Result<f64> {
    let logits = model.logits(&b.ids, b.batch, b.len)?;
    let (mut hit, mut n) = (0usize, 0usize);
    for (r, t) in b.targets.iter().enumerate() {
        if let Some(t) = t {
            n += 1;
            hit += usize::from(argmax(logits.row(r)) == *t);
        }
    }
    if n == 0 {
        return Err(Error::Contract("accuracy on a batch without scored positions".into()));
    }
    Ok(hit as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, toy_config};
    use crate::harness::tasks::{CopyTask, RandomTokens};
    use crate::layout::{BlockKind, LayoutSpec};

    fn toy(name: &str) -> Model {
        let p = preset(name).unwrap();
        Model::new(&p.config, &p.layout, 1).unwrap()
    }

    #[test]
    fn schedule_is_a_trapezoid() {
        let cfg = TrainConfig { steps: 200, peak_lr: 1.0, warmup: 0.25, stable: 0.55, cooldown: 0.2, ..Default::default() };
        assert_eq!(cfg.phases(), (50, 110, 40));
        let lr: Vec<f64> = (0..200).map(|s| cfg.lr_at(s)).collect();
        let d: Vec<f64> = lr.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(d[..49].iter().all(|x| (x - 1.0 / 50.0).abs() < 1e-12));
        assert_eq!(lr[49], 1.0);
        assert!(lr[50..160].iter().all(|&x| x == 1.0));
        assert!(d[160..].iter().all(|x| (x + 1.0 / 41.0).abs() < 1e-12));
        assert!(lr[199] > 0.0);
        let short = TrainConfig { cooldown: 0.1, ..cfg.clone() };
        assert_eq!(short.lr_at(199), 0.0);
        assert!(TrainConfig { warmup: 0.6, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = vec![Tensor::full(&[2], 3.0), Tensor::full(&[1], 4.0)];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 34f64.sqrt()).abs() < 1e-12);
        let after = g.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut m = toy("toy-inter");
        let before = m.store.values().to_vec();
        let cfg = TrainConfig { steps: 5, batch: 2, peak_lr: 0.0, ..Default::default() };
        let tr = train(&mut m, &mut RandomTokens { vocab: 32, len: 16 }, &cfg).unwrap();
        assert_eq!(m.store.values(), before.as_slice());
        assert!(tr.iter().all(|r| r.lr == 0.0));
        // the parameters stayed put, so a rerun sees the same model and data
        let again = train(&mut m, &mut RandomTokens { vocab: 32, len: 16 }, &cfg).unwrap();
        assert_eq!(tr, again);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { steps: 6, batch: 2, peak_lr: 1e-2, ..Default::default() };
        let run = || {
            let mut m = toy("toy-intra-moe");
            let tr = train(&mut m, &mut CopyTask::new(32, 16).unwrap(), &cfg).unwrap();
            (tr, m.store.values().to_vec(), m.routers.clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_falls_on_the_copy_task() {
        let mut m = toy("toy-llama");
        let cfg = TrainConfig { steps: 60, batch: 8, peak_lr: 1e-2, ..Default::default() };
        let tr = train(&mut m, &mut CopyTask::new(32, 16).unwrap(), &cfg).unwrap();
        let head: f64 = tr[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        let tail: f64 = tr[55..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        assert!(tail < head - 0.3, "{head} -> {tail}");
    }

    #[test]
    fn every_parameter_receives_gradient() {
        // dead-parameter detector: any tensor with a path to the loss must
        // get a nonzero gradient on random data
        let cfg = toy_config();
        for kind in BlockKind::ALL {
            for moe in [false, true] {
                let c = crate::config::ModelConfig { moe, ..cfg.clone() };
                let m = Model::new(&c, &LayoutSpec::uniform(kind, 2), 4).unwrap();
                let b = RandomTokens { vocab: 32, len: 12 }.next_batch(&mut Rng::new(3), 4).unwrap();
                let (_, grads, _) = loss_and_grads(&m, &b).unwrap();
                for (spec, g) in m.store.specs().iter().zip(&grads) {
                    // only routed experts that saw tokens can have gradient
                    if spec.name.contains(".expert") && g.max_abs() == 0.0 {
                        continue;
                    }
                    assert!(g.max_abs() > 0.0, "{kind} moe={moe}: {} has zero gradient", spec.name);
                }
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = toy("toy-llama");
        let id = m.store.id("head").unwrap();
        m.store.get_mut(id).data_mut()[0] = f64::NAN;
        let cfg = TrainConfig { steps: 3, batch: 1, ..Default::default() };
        let err = train(&mut m, &mut RandomTokens { vocab: 32, len: 8 }, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    }
}
