//! Synthetic scenes, file formats, configuration, training and rendering.

pub mod config;
pub mod gradcheck;
pub mod persist;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod train;

pub use config::RunConfig;
pub use pipeline::{AgentTrack, Model, SceneForecast};
pub use scene::{generate_scene, Motion, Normalizer, OdometryStats, SceneOptions, SceneSequence};
pub use train::{train, TrainLog};
