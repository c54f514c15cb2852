//! Geometry, language and data substrate for language-conditioned 6D assembly pose
//! estimation on parametric block scenes.

pub mod geomfeat;
pub mod geometry;
pub mod instruction;
pub mod metrics;
pub mod parallel;
pub mod scene;
