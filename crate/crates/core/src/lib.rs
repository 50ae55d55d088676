pub mod baselines;
pub mod error;
pub mod experiment;
pub mod features;
pub mod graph;
pub mod infer;
pub mod junction_tree;
pub mod learn;
pub mod linalg;
pub mod model;
pub mod tensor;

pub use error::{PbpError, Result};
pub use tensor::{Mode, ModeLabel, NamedTensor};
