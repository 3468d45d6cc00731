//! Flux-transport toolkit for caustic design.
//!
//! Renders the illumination a point-emitter set casts through a refractive
//! lens onto an image plane by transporting per-triangle flux, fits emitter
//! models to extended light sources from reference caustic images, and
//! optimizes freeform lens back surfaces so their caustic matches a target.

pub mod autodiff;
pub mod error;
pub mod fluxrender;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod objectives;
pub mod optics;
pub mod oracle;
pub mod solver;
pub mod sourcemodel;

pub use error::{Error, Result};
