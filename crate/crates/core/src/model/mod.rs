//! Toy decoder-only transformer: configuration, weights and their file
//! format, the memory-augmented forward pass, and strided bank construction.

mod config;
mod forward;
mod io;
mod memories;
pub(crate) mod ops;
mod weights;

pub use config::{ModelConfig, PositionEncoding};
pub use forward::{ForwardTrace, KvCache, LayerKv, Model};
pub use io::{WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use memories::{extra_windows, window_plan, CacheWindow};
pub use weights::{tensor_layout, LayerWeights, Weights};

#[cfg(test)]
mod tests;
