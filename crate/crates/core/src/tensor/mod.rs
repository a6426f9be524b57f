//! Dense tensors, a recording tape for reverse-mode differentiation, and
//! the multiply-accumulate counter the cost model checks against.

mod gradcheck;
pub mod kernels;
mod params;
mod rng;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use gradcheck::{grad_check, relative_error, EntryCheck, GradCheckReport, Sample};
pub use params::{Gradients, ParamId, ParamStore};
pub(crate) use params::hex;
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
