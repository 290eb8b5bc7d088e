//! ARROW: damped low-rank preconditioning of each gradient by the inverse of
//! `alpha I + beta C_t`, where `C_t` is the second moment of a rolling
//! window of recent gradients. The inverse is applied through the Woodbury
//! identity so only d x k and k x k quantities are formed.

mod config;
mod optimizer;
mod window;

pub use config::{scope_filter, AlphaDecay, ArrowConfig, Selector, Warmup};
pub use optimizer::{sgd_delta, step, warmup_step, Arrow, ArrowCheckpoint, GroupRecord, GroupState, RmsState};
pub use window::{
    direct_apply, eigen_rescale_check, relative_error, woodbury_apply, EigenScale, GradientWindow,
    WindowRecord,
};
