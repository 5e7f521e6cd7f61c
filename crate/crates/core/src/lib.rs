pub mod aggregate;
pub mod autodiff;
pub mod corrvol;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamStore, ParamVars};
pub use tensor::{Scalar, Tensor};
