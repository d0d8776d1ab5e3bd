//! DQN and PPO learners whose networks take the opponent representation as
//! an extra input after their first layer.

pub mod dqn;
pub mod ppo;

use std::io::{Read, Write};

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderError;
use crate::nn::{dense, Activation, LayerSpec, Network, NnError, SeqBatch};

pub use dqn::{
    dqn_act, dqn_update, huber, td_targets, DqnBatch, DqnLearner, EpsilonSchedule, ReplayBuffer, ReplayEntry,
};
pub use ppo::{
    gae, gaussian_log_prob, ppo_update, squash, squash_log_det, GaussianHead, PpoConfig, PpoLearner, PpoStats,
    RolloutBatch, RolloutStep, Trajectory,
};

#[derive(Debug, Error)]
pub enum RlError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("non-finite {0}; halting")]
    NonFinite(&'static str),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("shape: {0}")]
    Shape(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, RlError>;

/// A network split after its first layer, where the representation is
/// concatenated onto the first layer's output.
#[derive(Clone, Debug)]
pub struct ConditionedNet {
    first: Network,
    rest: Network,
    rep_dim: usize,
}

impl ConditionedNet {
    pub fn new(first: LayerSpec, rest: Vec<LayerSpec>, rep_dim: usize, seed: u64) -> Result<Self> {
        let first = Network::new(vec![first], seed)?;
        let rest = Network::new(rest, seed.wrapping_add(1))?;
        if rest.input_dim() != first.output_dim() + rep_dim {
            return Err(RlError::Shape(format!(
                "rest expects {} inputs, first layer gives {} plus {rep_dim}",
                rest.input_dim(),
                first.output_dim()
            )));
        }
        Ok(Self { first, rest, rep_dim })
    }

    /// Reassembles a network from its two saved halves.
    pub fn from_networks(first: Network, rest: Network) -> Result<Self> {
        let rep_dim = rest.input_dim().checked_sub(first.output_dim()).ok_or_else(|| {
            RlError::Shape(format!("rest takes {} inputs, fewer than the first layer's {}", rest.input_dim(), first.output_dim()))
        })?;
        Ok(Self { first, rest, rep_dim })
    }

    /// Q-network: four fully connected layers of `hidden` relu units.
    pub fn q_network(obs_dim: usize, rep_dim: usize, hidden: usize, actions: usize, seed: u64) -> Result<Self> {
        Self::new(
            dense(obs_dim, hidden, Activation::Relu),
            vec![
                dense(hidden + rep_dim, hidden, Activation::Relu),
                dense(hidden, hidden, Activation::Relu),
                dense(hidden, actions, Activation::Identity),
            ],
            rep_dim,
            seed,
        )
    }

    /// Policy or value network: tanh layers of 32, 64 and 32 units and a
    /// linear output.
    pub fn tanh_mlp(obs_dim: usize, rep_dim: usize, outputs: usize, seed: u64) -> Result<Self> {
        Self::new(
            dense(obs_dim, 32, Activation::Tanh),
            vec![
                dense(32 + rep_dim, 64, Activation::Tanh),
                dense(64, 32, Activation::Tanh),
                dense(32, outputs, Activation::Identity),
            ],
            rep_dim,
            seed,
        )
    }

    pub fn obs_dim(&self) -> usize {
        self.first.input_dim()
    }

    pub fn rep_dim(&self) -> usize {
        self.rep_dim
    }

    pub fn output_dim(&self) -> usize {
        self.rest.output_dim()
    }

    pub fn networks(&self) -> [&Network; 2] {
        [&self.first, &self.rest]
    }

    pub fn networks_mut(&mut self) -> [&mut Network; 2] {
        [&mut self.first, &mut self.rest]
    }

    pub fn zero_grad(&mut self) {
        self.first.zero_grad();
        self.rest.zero_grad();
    }

    pub fn copy_params_from(&mut self, other: &ConditionedNet) -> Result<()> {
        self.first.copy_params_from(&other.first)?;
        self.rest.copy_params_from(&other.rest)?;
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        self.first.fingerprint() ^ self.rest.fingerprint().rotate_left(29)
    }

    fn check(&self, obs: &Array2<f64>, rep: &Array2<f64>) -> Result<()> {
        if rep.ncols() != self.rep_dim || rep.nrows() != obs.nrows() {
            return Err(RlError::Shape(format!(
                "representation block {:?} for {} observations of a {}-dim input",
                rep.dim(),
                obs.nrows(),
                self.rep_dim
            )));
        }
        Ok(())
    }

    /// Taped forward pass on `[batch, obs_dim]` observations and
    /// `[batch, rep_dim]` representations.
    pub fn forward(&mut self, obs: &Array2<f64>, rep: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(obs, rep)?;
        let h = self.first.forward_batch(obs)?;
        let z = concatenate![Axis(1), h, rep.view()];
        Ok(self.rest.forward_batch(&z)?)
    }

    pub fn predict(&self, obs: &Array2<f64>, rep: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(obs, rep)?;
        let h = self.first.predict_batch(obs)?;
        let z = concatenate![Axis(1), h, rep.view()];
        Ok(self.rest.predict_batch(&z)?)
    }

    /// Accumulates parameter gradients and returns the gradient with
    /// respect to the representation input.
    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Result<Array2<f64>> {
        let gz = self.rest.backward(&SeqBatch::single(grad_out.clone()))?.into_data();
        let width = self.first.output_dim();
        let gh = gz.slice(s![.., ..width]).to_owned();
        self.first.backward(&SeqBatch::single(gh))?;
        Ok(gz.slice(s![.., width..]).to_owned())
    }
}

/// Supplies representations for a minibatch of learner samples and
/// receives the loss gradient with respect to them. The default provider
/// replays the stored representations and discards the gradient, which
/// keeps RL gradients out of the encoder.
pub trait RepresentationProvider {
    fn representations(&mut self, sample_ids: &[usize], stored: &Array2<f64>) -> Result<Array2<f64>>;
    fn backward(&mut self, grad: &Array2<f64>) -> Result<()>;
}

pub struct StoredRepresentations;

impl RepresentationProvider for StoredRepresentations {
    fn representations(&mut self, _ids: &[usize], stored: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(stored.clone())
    }

    fn backward(&mut self, _grad: &Array2<f64>) -> Result<()> {
        Ok(())
    }
}

/// One line of the training metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub step: u64,
    pub episodes: u64,
    pub train_reward: f64,
    pub test_reward: Option<f64>,
    /// Mean of the most recent tests.
    pub test_reward_avg: Option<f64>,
    pub rl_loss: Option<f64>,
    pub encoder_loss: Option<f64>,
    pub epsilon: Option<f64>,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for r in rd.deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}
