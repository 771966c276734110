//! Appearance-based gaze estimation toolkit.
//!
//! Turns RGB face frames into camera-centered gaze points (cm) with a
//! four-branch convolutional regressor (two eyes, face, face grid).

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod explain;
pub mod geometry;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod predict;
pub mod prep;
pub mod rng;
pub mod synthgen;
pub mod train;

pub use error::{GazeError, Result};
