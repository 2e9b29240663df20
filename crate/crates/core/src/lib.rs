//! Camera-controlled novel-view video generation at desk scale.

pub mod tensor;
pub mod geometry;
pub mod video;
pub mod renderer;
pub mod scenegen;
pub mod pose_recovery;
pub mod model;
pub mod conditioning;
pub mod eval;
pub mod training;
mod parallel;
