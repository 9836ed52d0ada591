//! Dense networks, losses and optimizers.

mod loss;
mod mlp;
mod optim;
mod params;

pub use loss::{
    cce_from_logits, cce_loss, cce_loss_indices, entropy_from_logits, entropy_loss, kl_from_logits,
    kl_loss, log_clamped, one_hot, softmax, SoftLabels, KL_FLOOR,
};
pub use mlp::{Dense, ForwardTrace, MlpParams, MlpVars};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{MetaParams, MetaVars, ParamSet};
