//! Reverse-mode differentiation on a tape, finite-difference gradient
//! checks, and the recorded model forward pass.

mod check;
mod model;
mod tape;

pub use check::{
    grad_check, grad_check_at, gradient_rel_error, sample_coords, Coord, CoordCheck, Differentiable, GradCheckOptions,
    GradCheckReport,
};
pub use model::{
    cross_entropy, model_loss, model_loss_and_grad, scored_logits, tape_forward, tape_loss, ModelGraph,
    ModelObjective, Target,
};
pub use tape::{Gradients, Tape, Var};
