//! Minimal differentiable building blocks: a matrix-valued reverse-mode
//! tape, MLP / GRU layers, a clamped Gaussian output head, AdamW and a
//! finite-difference gradient checker.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use error::{DiffnetError, Result};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use nn::{
    gru_step, mlp_forward, Activation, GaussianHead, GruCell, Linear, Mlp, MlpConfig, LOGVAR_MAX,
    LOGVAR_MIN,
};
pub use optim::{adam_step, clip_grad_norm, AdamHyper, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{Bound, Grads, Tape, Var};

/// `ln(2π)`.
pub const LN_2PI: f64 = tape::LN_2PI;
