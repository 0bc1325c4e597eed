//! Single-pass aspect sentiment classification over a shared depth
//! substrate: encoder, depth-ordered aggregation, per-aspect selective
//! readout, training, probes and cost benchmarking.

pub mod acbs;
pub mod controls;
pub mod corpus;
pub mod costbench;
pub mod dora;
pub mod encoder;
pub mod error;
pub mod model;
pub mod numerics;
pub mod objectives;

pub use acbs::{AspectQuery, DepthMask, Label, SelectionTrace, Span};
pub use corpus::{Example, Sentence, Vocab};
pub use dora::{DepthSubstrate, LayerOrder};
pub use encoder::HiddenStack;
pub use error::{DabsError, Result};
pub use model::{Ablation, Component, DabsModel, ModelConfig};
pub use objectives::{EvalReport, LossWeights, TrainConfig};
