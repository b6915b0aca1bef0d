//! Dense f64 tensors, a reverse-mode computation record, central-difference
//! gradient checking and the Adam updater.

mod adam;
mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{check_gradients, relative_error, GradCheckReport, ParamCheck, DEFAULT_STEP};
pub use graph::{Gradients, Graph, Padding, Var, ZeroSlice, L1_EPS, LAYER_NORM_EPS};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{Shape, Tensor};
