//! External memories: per-layer, per-head key/value banks, exact cosine
//! top-k retrieval, special-token pruning, and the bank file format.

mod bank;
mod io;
mod retrieval;

pub use bank::{MemoryBank, RotationState};
pub use io::{BANK_MAGIC, BANK_VERSION};
pub use retrieval::{
    cosine_scores, MemoryQuery, PositionMode, RetrievalConfig, RetrievalResult, DEFAULT_SIM_THRESHOLD, NORM_EPSILON,
};

pub(crate) use io::{read_f32s, read_u32, to_u32, write_f32s, write_u32};
