//! Dense-array math, reverse-mode differentiation, optimization, and the
//! seeded RNG scheme shared by every learned component.

pub mod array;
pub mod checkpoint;
pub mod init;
pub mod normalize;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;

pub use array::{matmul, matmul_nt, matmul_tn, DenseArray};
pub use normalize::NormStats;
pub use optim::{AdamW, EmaShadow};
pub use params::{ParamId, ParamStore};
pub use rng::RngStreams;
pub use tape::{Gradients, NodeId, Tape};
