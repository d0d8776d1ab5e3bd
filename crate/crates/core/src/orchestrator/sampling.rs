use std::io::Write;

use ndarray::Array2;
use rand::Rng;

use super::rollout::{rollout, Actor, EpisodeJob};
use super::{OrchestratorError, Result};
use crate::distmath::{
    build_distance_matrix, build_frequency_table, DistanceMode, PolicyDistanceMatrix, PolicyDistribution,
    ProjectionSet, SampleSet,
};
use crate::encoder::Encoder;
use crate::envs::EnvConfig;

/// One joint-action distribution per training policy, in training order.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionStore {
    pub labels: Vec<String>,
    pub distributions: Vec<PolicyDistribution>,
}

impl DistributionStore {
    /// Number of joint-action samples behind each distribution.
    pub fn totals(&self) -> Vec<u64> {
        self.distributions
            .iter()
            .map(|d| match d {
                PolicyDistribution::Table(t) => t.total(),
                PolicyDistribution::Samples(s) => s.len() as u64,
            })
            .collect()
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.distributions.first(), Some(PolicyDistribution::Table(_)))
    }

    /// Symmetric KL for tables, sliced Wasserstein over `projections`
    /// random directions for sample sets.
    pub fn distance_matrix(&self, projections: usize, projection_seed: u64) -> Result<PolicyDistanceMatrix> {
        let mode = match self.distributions.first() {
            Some(PolicyDistribution::Samples(s)) => {
                DistanceMode::SlicedWasserstein(ProjectionSet::random(s.dimension(), projections, projection_seed))
            }
            _ => DistanceMode::SymmetricKl,
        };
        Ok(build_distance_matrix(&self.labels, &self.distributions, &mode)?)
    }

    /// Raw joint-action frequencies (no smoothing) per label, ego action by
    /// opponent joint action.
    pub fn heatmaps(&self) -> Result<Vec<(String, Array2<f64>)>> {
        self.labels
            .iter()
            .zip(&self.distributions)
            .map(|(l, d)| match d {
                PolicyDistribution::Table(t) => {
                    let total = t.total() as f64;
                    let cols = t.sizes().num_opponent_cells();
                    let m = Array2::from_shape_vec(
                        (t.sizes().ego, cols),
                        t.counts().iter().map(|&c| c as f64 / total).collect(),
                    )
                    .expect("cells are ego x opponent");
                    Ok((l.clone(), m))
                }
                PolicyDistribution::Samples(_) => {
                    Err(OrchestratorError::Config("heatmaps need a discrete action space".into()))
                }
            })
            .collect()
    }
}

/// Plays `num_sample` episodes against every training policy with a fixed
/// ego behavior and pools all (ego action, opponent action) pairs per
/// policy. Episode seeds come from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn sample_distributions<R: Rng + ?Sized>(
    env: &EnvConfig,
    num_sample: usize,
    smoothing: f64,
    actor: Actor<'_>,
    encoder: Option<&Encoder>,
    rep_dim: usize,
    workers: usize,
    rng: &mut R,
) -> Result<DistributionStore> {
    let policies = env.training_policies();
    if policies.is_empty() || num_sample == 0 {
        return Err(OrchestratorError::Config("distribution sampling needs policies and episodes".into()));
    }
    let mut labels = Vec::new();
    let mut distributions = Vec::new();
    for (k, opponent) in policies.into_iter().enumerate() {
        let jobs: Vec<EpisodeJob> =
            (0..num_sample).map(|i| EpisodeJob { episode_id: i as u64, label: k, opponent, seed: rng.random() }).collect();
        let episodes = rollout(env, &jobs, actor, encoder, rep_dim, workers)?;
        let samples: Vec<_> = episodes.iter().flat_map(|e| e.steps.iter().map(move |s| s.joint_action(k))).collect();
        let dist = match env.discrete_sizes() {
            Some(sizes) => PolicyDistribution::Table(build_frequency_table(&samples, &sizes, smoothing)?),
            None => {
                let mut set = SampleSet::new(env.joint_action_dim());
                for s in &samples {
                    set.push_sample(s, &[None, None])?;
                }
                PolicyDistribution::Samples(set)
            }
        };
        labels.push(opponent.name());
        distributions.push(dist);
    }
    Ok(DistributionStore { labels, distributions })
}

/// Heatmap CSV: header `ego\opp,<opponent actions>` then one row per ego action.
pub fn write_heatmap_csv<W: Write>(m: &Array2<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["ego\\opp".to_string()];
    header.extend((0..m.ncols()).map(|c| c.to_string()));
    w.write_record(&header)?;
    for (e, row) in m.rows().into_iter().enumerate() {
        let mut rec = vec![e.to_string()];
        rec.extend(row.iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Counts cells with a non-zero opponent action whose frequency reaches
/// `min_freq` in at least one matrix, and how many of those change
/// monotonically across the matrices in order. Returns `(monotone, eligible)`.
pub fn monotone_cells(maps: &[Array2<f64>], min_freq: f64) -> (usize, usize) {
    let Some(first) = maps.first() else {
        return (0, 0);
    };
    let (mut ok, mut n) = (0, 0);
    for e in 0..first.nrows() {
        for o in 1..first.ncols() {
            let v: Vec<f64> = maps.iter().map(|m| m[[e, o]]).collect();
            if v.iter().all(|x| *x < min_freq) {
                continue;
            }
            n += 1;
            if v.windows(2).all(|w| w[1] >= w[0]) || v.windows(2).all(|w| w[1] <= w[0]) {
                ok += 1;
            }
        }
    }
    (ok, n)
}
