//! Parameter registry, Adam, learning-rate schedules, densification and the
//! finite-difference gradient checker.

mod densify;
mod gradcheck;
pub mod layout;
mod schedule;
mod store;

pub use densify::{densify_and_prune, reset_opacity, DensifyConfig, DensifyOutcome, DensifyStats};
pub use gradcheck::{
    finite_diff_check, relative_error, GradCheckEntry, GradCheckOptions, GradCheckReport,
};
pub use layout::CloudLayout;
pub use schedule::LrSchedule;
pub use store::{adam_step, AdamState, ParamGroup, ParameterStore};
