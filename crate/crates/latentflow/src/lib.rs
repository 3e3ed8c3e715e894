//! Trajectory-level latent action learning for a planar manipulation arm.
//!
//! The crate trains a small variational sequence model that compresses
//! action trajectories into a latent trajectory, then trains a consistency
//! flow-matching model in that latent space so a full action plan can be
//! generated in a single network evaluation and decoded under execution-time
//! context. A scripted simulation environment, smoothness/latency metrics,
//! and a two-stage training/evaluation harness complete the loop.

pub mod config;
pub mod error;
pub mod geometry;
pub mod flow;
pub mod harness;
pub mod latent;
pub mod metrics;
pub mod simenv;
pub mod numerics;

pub use error::{Error, Result};
