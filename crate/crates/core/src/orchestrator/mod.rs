//! Experiment driver: configuration, rollouts, distribution sampling, the
//! training loops and the files a run leaves behind.

mod analysis;
mod config;
mod rollout;
mod rundir;
mod sampling;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use analysis::{
    centroids, closest_pair, export_mds, labels_present, last_steps, mds_svg, mean_std_curve, projection_fraction,
    representation_points, reward_svg, write_mds_csv, Curve, LabeledPoint, MdsMode,
};
pub use config::{Algorithm, EncoderMode, EncoderSettings, ExperimentConfig, LoopSettings, RlSettings};
pub use rollout::{rollout, Actor, EpisodeJob, EpisodeRecord, PolicySample};
pub use rundir::{
    default_mds, load_learner, load_run, output_root, read_config, save_learner, write_run, write_trials, SavedRun, RUN_FILES,
};
pub use sampling::{monotone_cells, sample_distributions, write_heatmap_csv, DistributionStore};
pub use train::{evaluate, train, train_trials, train_with, Evaluation, Learner, TrainOutput};

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("unknown key {key:?}; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Rl(#[from] crate::rl::RlError),
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    #[error(transparent)]
    Dist(#[from] crate::distmath::DistError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OrchestratorError>;

/// Independent random streams derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Sampling,
    Collection,
    Learning,
    Evaluation,
    Export,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

#[cfg(test)]
mod tests;
