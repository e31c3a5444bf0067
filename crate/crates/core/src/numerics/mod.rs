//! Dense linear algebra, fully-connected networks with manual
//! backpropagation, gradient norms and a finite-difference oracle.
//!
//! Everything here is a pure function of its inputs and works in `f64`.

mod gradcheck;
mod matrix;
mod mlp;
mod params;

pub use gradcheck::{finite_diff_grad, DEFAULT_STEP};
pub use matrix::Matrix;
pub use mlp::{backward, backward_with_input, forward, Activation, MlpSpec};
pub use params::{
    restricted_norm, Gradient, Layout, ParamVector, Segment, SegmentKind, TailMarker,
};
