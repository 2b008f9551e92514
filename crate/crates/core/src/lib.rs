mod gemm;

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod convert;
pub mod data;
pub mod error;
pub mod gate;
pub mod model;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{BnMode, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use network::{build_network, NetworkSpec, UnitKind, UnitSpec, Variant};
pub use params::ParamStore;
pub use tensor::{DType, Scalar, Shape, Tensor};
