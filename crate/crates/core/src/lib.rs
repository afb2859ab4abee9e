//! Tracking of root cortex nuclei in 3D time-lapse point clouds.
//!
//! The pipeline searches a projection plane per frame with a genetic
//! algorithm, clusters the charted nuclei into eight cell files, matches files
//! across frames by polar angle, and links individual nuclei (including
//! divisions) into lineage trees.

pub mod baselines;
pub mod clustering;
pub mod error;
pub mod evaluation;
pub mod ga;
pub mod io;
pub mod lineage;
pub mod lines;
pub mod model;
pub mod pipeline;
pub mod synth;

pub use error::{Error, ReconciliationError, Result};
pub use model::{Axis, Dataset, FrameCloud, NucleusId, NucleusRecord, Phase, PlaneBasis, ProjectionPlane, Vec2, Vec3};
