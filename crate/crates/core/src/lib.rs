pub mod error;
pub mod graph;
pub mod scalar;
pub mod tensor;
