//! Desk-scale training and evaluation.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod tasks;
pub mod train;

pub use tasks::{Batch, CopyTask, DataSource, NeedleTask, RandomTokens, TokenStream};
pub use train::{train, TrainConfig};
