//! Inverse rendering of parametric 3D faces.
//!
//! The crate fits a linear morphable face model, SH lighting and a
//! weak-perspective pose to an image (`fitting`), recovers per-pixel depth
//! detail (`refine`), extracts and blends fine albedo (`albedo`), and builds
//! labeled synthetic datasets from the results (`synthesis`, `transfer`).
//! `loss` holds deterministic evaluators for the training losses and depth
//! metrics, and `io` the on-disk formats.

pub mod albedo;
pub mod camera;
pub mod error;
pub mod fitting;
pub mod image;
pub mod io;
pub mod lighting;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod refine;
pub mod synthesis;
pub mod synthetic;
pub mod transfer;

pub use error::{Error, Result};
