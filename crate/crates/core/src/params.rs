//! Named parameter storage.
//!
//! Blocks register their weights here at construction time and keep only the
//! returned [`ParamId`]s. A store can stay shape-only (enough for parameter
//! accounting at full configuration scale) or be materialized from a seed.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Normal { std: f64 },
    Zeros,
    Ones,
    Const(f64),
    /// `log(uniform(lo, hi))`, the SSM decay-rate parameterization.
    ALog { lo: f64, hi: f64 },
    /// Inverse softplus of a log-uniform step in `[dt_min, dt_max]`.
    DtBias { dt_min: f64, dt_max: f64 },
}

impl Init {
    fn sample(&self, n: usize, rng: &mut Rng) -> Vec<f64> {
        match *self {
            Init::Normal { std } => rng.normals(n, std),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::ALog { lo, hi } => (0..n).map(|_| rng.uniform_in(lo, hi).ln()).collect(),
            Init::DtBias { dt_min, dt_max } => (0..n)
                .map(|_| {
                    let dt = rng.uniform_in(dt_min.ln(), dt_max.ln()).exp();
                    dt + (-(-dt).exp_m1()).ln()
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        assert!(self.values.is_empty(), "cannot register parameters after materialization");
        self.specs.push(ParamSpec { name: name.into(), shape: shape.to_vec(), init });
        ParamId(self.specs.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    /// Total scalar count; valid for shape-only stores.
    pub fn numel(&self) -> u64 {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn numel_prefix(&self, prefix: &str) -> u64 {
        self.specs.iter().filter(|s| s.name.starts_with(prefix)).map(ParamSpec::numel).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn is_materialized(&self) -> bool {
        !self.specs.is_empty() && self.values.len() == self.specs.len()
    }

    /// Draws every parameter from its initializer. Each parameter uses its
    /// own stream of the seed, so values depend only on (seed, position).
    pub fn materialize(&mut self, seed: u64) {
        self.values = self
            .specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = Rng::derive(seed, i as u64);
                let n = s.shape.iter().product();
                Tensor::new(&s.shape, s.init.sample(n, &mut rng)).expect("spec shape")
            })
            .collect();
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let spec = &self.specs[id.0];
        if value.shape() != spec.shape.as_slice() {
            return Err(Error::dim(
                "param_set",
                format!("{}: expected {:?}, got {:?}", spec.name, spec.shape, value.shape()),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn to_tape(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        ParamVars(self.values.iter().map(|v| tape.leaf(v.clone(), requires_grad)).collect())
    }
}

/// Tape handles for a store's parameters, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for ParamVars {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
