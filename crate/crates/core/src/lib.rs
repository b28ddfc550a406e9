pub mod attention;
pub mod bench;
pub mod blocks;
pub mod cli;
pub mod complexity;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, VariantSpec};
pub use tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
