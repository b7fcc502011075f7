//! Temporal knowledge-graph link prediction with per-entity adaptive memory.

pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod evaluator;
pub mod memory;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use config::Config;
pub use data::{Quadruple, Split, TkgDataset};
pub use engine::{step, ReprMode, StepOptions, StreamState};
pub use error::{Error, Result};
pub use evaluator::{evaluate, filtered_rank, EvalContext, RankReport};
pub use memory::MemoryBank;
pub use model::Model;
pub use tensor::Tensor;
pub use trainer::{fit, Trainer};
