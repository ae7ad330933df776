//! Dense arrays, reverse-mode differentiation and parameter storage.

mod array;
mod gradcheck;
mod graph;
mod init;
mod nn;
mod params;

pub use array::{NdArray, Real};
pub use gradcheck::{grad_check, relative_error, CoordCheck, Coords, GradCheckReport};
pub use graph::{Activation, Gradients, Graph, Var, BCE_EPS};
pub use init::{trunc_normal, Init};
pub use nn::{mhsa, MhsaParams};
pub use params::{Bound, ParamTree, FORMAT_VERSION};
