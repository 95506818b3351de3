//! End-to-end training: gradient tape, parameter store, Adam and the loop.

pub mod forward;
pub mod params;
pub mod tape;
pub mod trainer;

pub use forward::record_hod;
pub use params::{adam_step, AdamConfig, Gradients, OptimizerState, Param, ParamStore};
pub use tape::{Loss, Tape, TapeAgg, Value, Var};
pub use trainer::{
    evaluate, fd_grads, graph_loss, load_checkpoint, loss_and_grads, normalized_mae, save_checkpoint, target, target_std, train,
    Checkpoint, EpochRecord, GradMode, History, TrainConfig, MAX_FD_PARAMS,
};
