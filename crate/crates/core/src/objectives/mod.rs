//! Training objective, optimizer, training loop, metrics and the paired
//! significance test.

pub mod loss;
pub mod metrics;
pub mod optim;
pub mod train;

pub use loss::{cross_entropy, instance_loss, sum_scalars, reg_gate_entropy, reg_span_mask, reg_sparsity, total_loss, LossWeights, MaskPenalty};
pub use metrics::{evaluate, paired_t_test, EvalReport, PairedTest};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use train::{batch_gradients, evaluate_model, make_batches, train, write_metric_log, EpochLog, Evaluation, TrainConfig, TrainOutcome};
