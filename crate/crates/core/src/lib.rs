//! Hierarchical perception and intent-to-trajectory planning on a synthetic
//! 2D driving world.

pub mod bev;
pub mod cli;
pub mod eval;
pub mod geom;
pub mod model;
pub mod perception;
pub mod planner;
pub mod scene;
pub mod tensor;
pub mod training;
