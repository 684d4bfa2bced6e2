//! Loss evaluation, gradients, Adam and the fitting schedule.

pub mod adam;
pub mod fit;
pub mod grad;
pub mod loss;
pub mod params;

pub use adam::{adam_step, AdamState};
pub use fit::{fit, fit_from, FitResult, HistoryRow};
pub use grad::{compute_gradients, gradcheck, GradcheckReport};
pub use loss::{
    canonical_bindings, loss_rigidity, loss_track, reg_basis_acceleration, reg_radius,
    reg_track_acceleration, total_loss, Batch, Binding, LossBreakdown, Problem, RigidGraph,
};
pub use params::{ParamKey, ParamLayout, ParamStore, TreeState};
