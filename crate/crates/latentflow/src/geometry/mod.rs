//! Geometry-aware scene conditioning: cropping, farthest point sampling,
//! neighborhood grouping, dual-branch encoding, and FiLM modulation.

pub mod cloud;
pub mod scene_enc;

pub use cloud::{crop_workspace, fps, group_neighborhoods, CropBox, PointCloud};
pub use scene_enc::{film_hierarchical, film_single, FilmConditioner, SceneEncoder};
