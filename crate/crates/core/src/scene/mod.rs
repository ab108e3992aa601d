//! Synthetic driving scenes: types, scripted worlds, datasets and the
//! `.scenes` file format.

mod dataset;
mod io;
pub mod path;
mod types;
mod world;

pub use dataset::{build_dataset, default_mix, DatasetError};
pub use io::{decode_scenes, encode_scene, encode_scenes, read_scenes, write_scenes, SceneIoError};
pub use types::*;
pub use world::{view_rect, Actor, World, EGO_LENGTH, EGO_START_S, EGO_WIDTH, LANE_WIDTH};

/// Deterministic expert scene for `(seed, kind)`.
pub fn generate_scene(seed: u64, kind: ScenarioKind) -> Scene {
    World::new(seed, kind).expert_scene()
}
