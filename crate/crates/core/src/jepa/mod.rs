//! Joint-embedding predictive training.
//!
//! A context encoder sees only the visible patches, a predictor fills in
//! embeddings for the masked ones, and a target encoder (an exponential
//! moving average of the context encoder, never differentiated) supplies the
//! regression targets over the full patch grid.

mod model;
mod optim;
mod schedule;
mod train;

pub use model::{
    ema_update, ema_update_in_place, forward_context, forward_target, jepa_loss, predict_masked, JepaModel,
    Trainable,
};
pub use optim::{adamw_step, adamw_update, decays, OptimizerConfig};
pub use schedule::{lr_schedule, tau_schedule};
pub use train::{example_gradients, train_step, StepMetrics, TrainState};
