//! Q-space conditioned multi-modal translation for diffusion-weighted image
//! synthesis, with an analytic tensor phantom for reproducible experiments.

pub mod analysis;
pub mod container;
pub mod error;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod qspace;
pub mod training;

pub use error::{Error, Result};
