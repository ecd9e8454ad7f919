//! Three-dimensional nonhydrostatic compressible atmosphere solver on a Cartesian
//! grid with cut-cell terrain, small-cell merging and a block-structured,
//! subcycled cube mesh.
//!
//! Pipeline: [`grid`] builds the cube tree, [`terrain`] computes cut-cell
//! geometry on it, [`merge`] stabilizes small cells, [`state`] holds the base
//! state and prognostic fields, [`dynamics`] evaluates finite-volume tendencies,
//! [`boundary`] diagnoses surface and merged-face velocities, [`timeint`]
//! advances the tree in time and [`harness`] wires scenarios, diagnostics and
//! output together.

pub mod boundary;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod harness;
pub mod merge;
pub mod state;
pub mod terrain;
pub mod timeint;

pub use error::{Error, Result};
