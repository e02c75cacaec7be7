//! Hybrid attention / state-space language model toolkit: numerical kernels
//! with reverse-mode gradients, block constructors for attention, Mamba-2,
//! inter- and intra-layer hybrids and mixture-of-experts, a layout planner,
//! an analytic cost model, a stateful decoder and a small training harness.

pub mod attention;
pub mod config;
pub mod cost;
pub mod decode;
pub mod error;
pub mod harness;
pub mod hybrid;
pub mod layout;
pub mod model;
pub mod moe;
pub mod nn;
pub mod params;
pub mod rng;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use params::{Init, ParamId, ParamStore, ParamVars};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::{Precision, Tensor};
