//! Search loop: configuration, bilevel steps, evaluation, run history and
//! checkpoints.

mod bilevel;
mod checkpoint;
mod config;
mod eval;
mod history;
mod matrix;
mod trainer;

pub use bilevel::{
    arch_gradient, arch_step, bbn_loss_grad, weight_step, ArchGradient, ComponentLrs, Objective,
    OptimConfig, StepBatch,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, open_checkpoint, save_checkpoint,
    Checkpoint,
};
pub use config::{
    content_hash, mode_controlled_keys, mu_grid, parse_grid, parse_kv, ArchOrder, Branches,
    ContinuationKind, DataConfig, DataSourceKind, Mode, TrainConfig, DEFAULTS,
};
pub use eval::{evaluate, evaluate_logits, head_logits, EvalReport};
pub use history::{EpochRecord, InitialEval, RunHistory};
pub use matrix::{
    matrix_csv, matrix_table, mean_std, method_label, reference_accuracy, summarize, CellResult,
    ExperimentMatrix, MatrixRow, TABLE_MODES,
};
pub use trainer::{
    derive_seed, init_model, prepare_data, probe_batch, train, Datasets, EpochPlan, Trainer,
};
