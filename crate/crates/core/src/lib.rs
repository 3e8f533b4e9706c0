//! Knowledge flow: training a student network with help from frozen teacher
//! networks until the student no longer needs them.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`kernels`], [`optim`], [`gradcheck`]: dense
//!   f64 tensors with define-by-run reverse-mode differentiation and Adam.
//! * [`network`], [`params`], [`model_io`]: layered nets with pre/post
//!   activation taps and the `KFLOW1` model container.
//! * [`flow`]: teacher couplings (`Q` transforms, trust weights `p_w`), the
//!   dependence and KL losses, the λ₁ ramp, `θ_old` tracking and detachment.
//! * [`data`], [`supervised`]: datasets and the classification trainers
//!   (knowledge flow, scratch, fine-tune, distillation).
//! * [`rl`]: gridworlds and the advantage actor-critic trainer.
//! * [`metrics`]: the run metrics CSV.

// `!(x > 0.0)` is the deliberate way to reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model_io;
pub mod network;
pub mod optim;
pub mod par;
pub mod params;
pub mod rl;
pub mod supervised;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use network::{Activation, NetworkSpec};
pub use params::ParamStore;
pub use tensor::Tensor;
