pub mod ops;
pub mod params;
pub mod tensor;

pub use params::{AdamConfig, Affine, GruCell, ParamId, ParamStore, TensorRecord};
pub use tensor::Tensor;
