//! Mixture-of-experts feed-forward layer: shared experts plus token-choice
//! top-k routing with loss-free balancing.
//!
//! Router scores are `sigmoid(x·W_r)`. A per-expert bias, kept outside the
//! parameter store and never differentiated, is added to the scores for
//! selection only; the gate applied to an expert's output is the raw score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{siglu_ffn, FfnBlock, FfnConfig, FfnWeights};
use crate::params::{Init, ParamId, ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::{matmul, sigmoid, vecmat, Tensor};

pub const DEFAULT_BIAS_RATE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub d_model: usize,
    /// Hidden width of every expert, shared and routed.
    pub d_expert: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub shared: usize,
    pub bias_update_rate: f64,
}

impl MoeConfig {
    /// One shared plus top-1 of eight, each expert sized so the activated
    /// hidden width equals the dense layer's `d_ffn`.
    pub fn for_dense(d_model: usize, d_ffn: usize) -> Self {
        MoeConfig {
            d_model,
            d_expert: d_ffn / 2,
            n_experts: 8,
            top_k: 1,
            shared: 1,
            bias_update_rate: DEFAULT_BIAS_RATE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::config(format!(
                "top_k ({}) must lie in 1..={} routed experts",
                self.top_k, self.n_experts
            )));
        }
        if !(self.bias_update_rate >= 0.0 && self.bias_update_rate.is_finite()) {
            return Err(Error::config(format!("bias update rate {} must be nonnegative", self.bias_update_rate)));
        }
        self.expert().validate()
    }

    pub fn expert(&self) -> FfnConfig {
        FfnConfig { d_model: self.d_model, d_ffn: self.d_expert }
    }

    pub fn expert_params(&self) -> u64 {
        3 * (self.d_model * self.d_expert) as u64
    }

    /// Router plus every expert.
    pub fn total_params(&self) -> u64 {
        (self.d_model * self.n_experts) as u64 + (self.shared + self.n_experts) as u64 * self.expert_params()
    }

    /// Router plus the experts one token actually runs.
    pub fn activated_params(&self) -> u64 {
        (self.d_model * self.n_experts) as u64 + (self.shared + self.top_k) as u64 * self.expert_params()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    pub expert_bias: Vec<f64>,
    pub load_counts: Vec<u64>,
}

impl RouterState {
    pub fn new(n_experts: usize) -> Self {
        RouterState { expert_bias: vec![0.0; n_experts], load_counts: vec![0; n_experts] }
    }
}

/// Selected experts for one token, in selection order, with their gates.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub experts: Vec<usize>,
    pub gates: Vec<f64>,
}

/// Indices of the `k` largest `biased` values; ties go to the lower index.
fn top_k(biased: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..biased.len()).collect();
    order.sort_by(|&a, &b| biased[b].total_cmp(&biased[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn route_scores(scores: &[f64], state: &RouterState, cfg: &MoeConfig) -> Route {
    let biased: Vec<f64> = scores.iter().zip(&state.expert_bias).map(|(s, b)| s + b).collect();
    let experts = top_k(&biased, cfg.top_k);
    let gates = experts.iter().map(|&e| scores[e]).collect();
    Route { experts, gates }
}

fn check_router(tokens: &Tensor, router: &Tensor, state: &RouterState, cfg: &MoeConfig) -> Result<()> {
    if router.shape() != [cfg.d_model, cfg.n_experts] || tokens.last_dim() != cfg.d_model {
        return Err(Error::dim(
            "route",
            format!("tokens {:?}, router {:?}, config {}x{}", tokens.shape(), router.shape(), cfg.d_model, cfg.n_experts),
        ));
    }
    if state.expert_bias.len() != cfg.n_experts {
        return Err(Error::dim("route", format!("{} biases for {} experts", state.expert_bias.len(), cfg.n_experts)));
    }
    Ok(())
}

/// Routes every row of `tokens[.., d_model]`.
pub fn route(tokens: &Tensor, router: &Tensor, state: &RouterState, cfg: &MoeConfig) -> Result<Vec<Route>> {
    check_router(tokens, router, state, cfg)?;
    let scores = matmul(tokens, router)?.map(sigmoid);
    Ok((0..scores.rows()).map(|r| route_scores(scores.row(r), state, cfg)).collect())
}

/// Tokens per expert for a set of routes.
pub fn loads(routes: &[Route], n_experts: usize) -> Vec<u64> {
    let mut out = vec![0; n_experts];
    for r in routes {
        for &e in &r.experts {
            out[e] += 1;
        }
    }
    out
}

/// `shared(x) + Σ gate·expert(x)` per token, dispatching token by token.
pub fn moe_forward(
    x: &Tensor,
    experts: &[FfnWeights],
    shared: &[FfnWeights],
    router: &Tensor,
    state: &RouterState,
    cfg: &MoeConfig,
) -> Result<Tensor> {
    if experts.len() != cfg.n_experts || shared.len() != cfg.shared {
        return Err(Error::dim(
            "moe_forward",
            format!("{} routed / {} shared experts for config {} / {}", experts.len(), shared.len(), cfg.n_experts, cfg.shared),
        ));
    }
    let routes = route(x, router, state, cfg)?;
    let d = cfg.d_model;
    let ecfg = cfg.expert();
    let mut out = Tensor::zeros(x.shape());
    for (r, route) in routes.iter().enumerate() {
        let row = Tensor::new(&[1, d], x.row(r).to_vec())?;
        let dst = &mut out.data_mut()[r * d..(r + 1) * d];
        for w in shared {
            let y = siglu_ffn(&row, &ecfg, w)?;
            dst.iter_mut().zip(y.data()).for_each(|(o, v)| *o += v);
        }
        for (&e, &g) in route.experts.iter().zip(&route.gates) {
            let y = siglu_ffn(&row, &ecfg, &experts[e])?;
            dst.iter_mut().zip(y.data()).for_each(|(o, v)| *o += g * v);
        }
    }
    Ok(out)
}

/// `bias_e += rate·sign(mean_load − load_e)`; also accumulates the counts.
pub fn update_balance(state: &mut RouterState, batch_loads: &[u64], cfg: &MoeConfig) -> Result<()> {
    if cfg.bias_update_rate < 0.0 || !cfg.bias_update_rate.is_finite() {
        return Err(Error::config(format!("bias update rate {} must be nonnegative", cfg.bias_update_rate)));
    }
    if batch_loads.len() != state.expert_bias.len() {
        return Err(Error::dim("update_balance", format!("{} loads for {} experts", batch_loads.len(), state.expert_bias.len())));
    }
    let mean = batch_loads.iter().sum::<u64>() as f64 / batch_loads.len() as f64;
    for ((b, &l), c) in state.expert_bias.iter_mut().zip(batch_loads).zip(&mut state.load_counts) {
        let diff = mean - l as f64;
        // sign(0) = 0, so perfectly balanced experts keep their bias
        if diff != 0.0 {
            *b += cfg.bias_update_rate * diff.signum();
        }
        *c += l;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct MoeBlock {
    pub cfg: MoeConfig,
    pub router: ParamId,
    pub shared: Vec<FfnBlock>,
    pub experts: Vec<FfnBlock>,
}

impl MoeBlock {
    pub fn build(store: &mut ParamStore, prefix: &str, cfg: MoeConfig, std: f64) -> Result<Self> {
        cfg.validate()?;
        let router = store.add(format!("{prefix}.router"), &[cfg.d_model, cfg.n_experts], Init::Normal { std });
        let shared = (0..cfg.shared)
            .map(|i| FfnBlock::build(store, &format!("{prefix}.shared{i}"), cfg.expert(), std))
            .collect::<Result<_>>()?;
        let experts = (0..cfg.n_experts)
            .map(|e| FfnBlock::build(store, &format!("{prefix}.expert{e}"), cfg.expert(), std))
            .collect::<Result<_>>()?;
        Ok(MoeBlock { cfg, router, shared, experts })
    }

    /// Returns the output and the per-expert token loads of this call.
    pub fn forward(&self, t: &mut Tape, vars: &ParamVars, x: Var, state: &RouterState) -> Result<(Var, Vec<u64>)> {
        let shape = t.shape(x).to_vec();
        let d = self.cfg.d_model;
        let n = t.value(x).numel() / d;
        let x2 = t.reshape(x, &[n, d])?;
        let logits = t.matmul(x2, vars[self.router])?;
        let scores = t.sigmoid(logits)?;
        let routes: Vec<Route> =
            (0..n).map(|r| route_scores(t.value(scores).row(r), state, &self.cfg)).collect();

        let mut out: Option<Var> = None;
        let mut acc = |t: &mut Tape, y: Var| -> Result<()> {
            out = Some(match out {
                Some(o) => t.add(o, y)?,
                None => y,
            });
            Ok(())
        };
        for f in &self.shared {
            let y = f.forward(t, vars, x2)?;
            acc(t, y)?;
        }
        for (e, f) in self.experts.iter().enumerate() {
            let idx: Vec<usize> = (0..n).filter(|&r| routes[r].experts.contains(&e)).collect();
            if idx.is_empty() {
                continue;
            }
            let xe = t.gather_rows(x2, &idx)?;
            let ye = f.forward(t, vars, xe)?;
            let col = t.slice_lastdim(scores, e, 1)?;
            let gate = t.gather_rows(col, &idx)?;
            let ye = t.mul_rows(ye, gate)?;
            let ye = t.scatter_rows(ye, &idx, n)?;
            acc(t, ye)?;
        }
        let out = out.expect("at least one expert runs");
        Ok((t.reshape(out, &shape)?, loads(&routes, self.cfg.n_experts)))
    }

    /// Single-token evaluation; also returns the chosen route.
    pub fn step(&self, store: &ParamStore, x: &[f64], state: &RouterState) -> (Vec<f64>, Route) {
        let scores: Vec<f64> = vecmat(x, store.get(self.router)).into_iter().map(sigmoid).collect();
        let route = route_scores(&scores, state, &self.cfg);
        let mut out = vec![0.0; self.cfg.d_model];
        for f in &self.shared {
            out.iter_mut().zip(f.step(store, x)).for_each(|(o, v)| *o += v);
        }
        for (&e, &g) in route.experts.iter().zip(&route.gates) {
            out.iter_mut().zip(self.experts[e].step(store, x)).for_each(|(o, v)| *o += g * v);
        }
        (out, route)
    }

    pub fn expert_weights(&self, store: &ParamStore) -> (Vec<FfnWeights>, Vec<FfnWeights>) {
        (
            self.experts.iter().map(|f| f.weights(store)).collect(),
            self.shared.iter().map(|f| f.weights(store)).collect(),
        )
    }
}

/// Runs the balancing loop on fresh standard-normal tokens each step and
/// returns the max load fraction of a final held-out batch.
pub fn balance_simulation(cfg: &MoeConfig, router: &Tensor, steps: usize, batch: usize, seed: u64) -> Result<(f64, RouterState)> {
    let mut rng = crate::rng::Rng::new(seed);
    let mut state = RouterState::new(cfg.n_experts);
    for _ in 0..steps {
        let x = Tensor::randn(&[batch, cfg.d_model], 1.0, &mut rng);
        let routes = route(&x, router, &state, cfg)?;
        update_balance(&mut state, &loads(&routes, cfg.n_experts), cfg)?;
    }
    let eval = 8 * batch;
    let x = Tensor::randn(&[eval, cfg.d_model], 1.0, &mut rng);
    let l = loads(&route(&x, router, &state, cfg)?, cfg.n_experts);
    let max = *l.iter().max().unwrap() as f64 / (eval * cfg.top_k) as f64;
    Ok((max, state))
}
