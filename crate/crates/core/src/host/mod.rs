//! A small character-level language model built around the HiCI layer, with
//! AdamW training and sliding-window perplexity.

mod eval;
mod model;
mod train;
pub mod vocab;

pub use eval::{eval_ppl, eval_ppl_batched, plan_windows, window_nlls, Perplexity, Window};
pub use model::{
    block_forward, block_gradient_check, check_window, is_hici_group, lm_forward, AttentionMode,
    BlockBackbone, BlockParams, HostConfig, HostForward, HostModel, HostParams, OptimConfig,
    EMBED_INIT_STD,
};
pub use train::{
    batch_offsets, loss_and_grads, lr_factor, moving_average, train, train_from, train_step,
    StepLog, TrainState,
};
