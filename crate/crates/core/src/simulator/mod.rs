//! Synthetic scenarios and the end-to-end episode runner.

mod config;
mod episode;
mod model;
mod scene;

pub use config::{parse_encoder, EncoderLayer, ScenarioConfig, MAX_AGENTS};
pub use episode::{run_episode, run_episode_with, DumpedPacket, EpisodeReport, RunOptions, TransferStat};
pub use model::{encoder_forward, init_params, param_layout};
pub use scene::{
    agent_layout, gen_scenario, ground_truth, labelled_objects, perimeter_samples, point_count, rasterize_bev,
    visible_samples, FrameObject, SceneFrame, FAR_ID, HIDDEN_ID, OCCLUDER_ID, TRANSIENT_ID,
};
