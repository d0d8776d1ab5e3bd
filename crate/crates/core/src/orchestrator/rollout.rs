use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::Result;
use crate::distmath::Action;
use crate::encoder::{Encoder, ObservationHistory};
use crate::envs::{EnvConfig, Episode, OpponentPolicy, StepRecord, PUSH_NUM_ACTIONS};
use crate::rl::{ConditionedNet, PpoLearner};

/// How the ego agent picks actions during a rollout.
#[derive(Clone, Copy, Debug)]
pub enum Actor<'a> {
    /// Uniform over the discrete actions, or uniform over the force disk.
    Random,
    Dqn { q: &'a ConditionedNet, epsilon: f64 },
    /// Samples from the Gaussian policy when `stochastic`, else plays the
    /// squashed mean.
    Ppo { learner: &'a PpoLearner, stochastic: bool },
}

/// One episode to play.
#[derive(Clone, Debug)]
pub struct EpisodeJob {
    pub episode_id: u64,
    /// Index into the training policies; test opponents use the count of
    /// training policies.
    pub label: usize,
    pub opponent: OpponentPolicy,
    pub seed: u64,
}

/// Data the PPO learner needs for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample {
    pub raw: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    pub label: usize,
    pub opponent: OpponentPolicy,
    pub steps: Vec<StepRecord>,
    /// `reps[k]` is the representation the agent saw at step `k`, computed
    /// from observations `0..k`; the last entry follows the final observation.
    pub reps: Vec<Vec<f64>>,
    /// Filled for stochastic PPO actors only.
    pub samples: Vec<PolicySample>,
    pub history: ObservationHistory,
}

impl EpisodeRecord {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Plays every job to the horizon. Episodes in one chunk advance in
/// lockstep so network calls are batched; chunks run on up to `workers`
/// threads. Each episode draws its actions from its own RNG seeded by the
/// job, so results do not depend on how jobs are chunked.
pub fn rollout(
    env: &EnvConfig,
    jobs: &[EpisodeJob],
    actor: Actor<'_>,
    encoder: Option<&Encoder>,
    rep_dim: usize,
    workers: usize,
) -> Result<Vec<EpisodeRecord>> {
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    if workers <= 1 {
        return rollout_lockstep(env, jobs, actor, encoder, rep_dim);
    }
    let chunk = jobs.len().div_ceil(workers);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| super::OrchestratorError::Config(e.to_string()))?;
    let parts: Vec<Result<Vec<EpisodeRecord>>> =
        pool.install(|| jobs.par_chunks(chunk).map(|c| rollout_lockstep(env, c, actor, encoder, rep_dim)).collect());
    let mut out = Vec::with_capacity(jobs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn action_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    rng
}

fn random_action<R: Rng + ?Sized>(env: &EnvConfig, rng: &mut R) -> Action {
    match env {
        EnvConfig::Push(_) => Action::Discrete(rng.random_range(0..PUSH_NUM_ACTIONS)),
        EnvConfig::Keep(c) => {
            let r = c.max_ego_force * rng.random::<f64>().sqrt();
            let th = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            Action::Continuous(vec![r * th.cos(), r * th.sin()])
        }
    }
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn rollout_lockstep(
    env: &EnvConfig,
    jobs: &[EpisodeJob],
    actor: Actor<'_>,
    encoder: Option<&Encoder>,
    rep_dim: usize,
) -> Result<Vec<EpisodeRecord>> {
    let b = jobs.len();
    let obs_dim = env.obs_dim();
    let mut episodes = jobs.iter().map(|j| Episode::new(env, j.opponent, j.seed)).collect::<std::result::Result<Vec<_>, _>>()?;
    let mut rngs: Vec<ChaCha8Rng> = jobs.iter().map(|j| action_rng(j.seed)).collect();
    let mut records: Vec<EpisodeRecord> = jobs
        .iter()
        .map(|j| EpisodeRecord {
            episode_id: j.episode_id,
            label: j.label,
            opponent: j.opponent,
            steps: Vec::with_capacity(env.horizon()),
            reps: Vec::with_capacity(env.horizon() + 1),
            samples: Vec::new(),
            history: ObservationHistory::new(j.episode_id, j.label, obs_dim),
        })
        .collect();
    let mut state = encoder.map(|e| e.start(b));
    let current = |state: &Option<crate::encoder::EncoderState>| -> Result<Array2<f64>> {
        match (encoder, state) {
            (Some(e), Some(s)) => Ok(e.current(s)?),
            _ => Ok(Array2::zeros((b, rep_dim))),
        }
    };
    while !episodes[0].is_done() {
        let mut obs = Array2::zeros((b, obs_dim));
        for (i, ep) in episodes.iter().enumerate() {
            obs.row_mut(i).assign(&ndarray::ArrayView1::from(ep.observation()));
        }
        let reps = current(&state)?;
        let actions: Vec<Action> = match actor {
            Actor::Random => rngs.iter_mut().map(|r| random_action(env, r)).collect(),
            Actor::Dqn { q, epsilon } => {
                let values = q.predict(&obs, &reps)?;
                rngs.iter_mut()
                    .enumerate()
                    .map(|(i, r)| {
                        if r.random::<f64>() < epsilon {
                            Action::Discrete(r.random_range(0..values.ncols()))
                        } else {
                            Action::Discrete(argmax(values.row(i)))
                        }
                    })
                    .collect()
            }
            Actor::Ppo { learner, stochastic: false } => {
                learner.act_mean(&obs, &reps)?.into_iter().map(Action::Continuous).collect()
            }
            Actor::Ppo { learner, stochastic: true } => {
                let mean = learner.policy.predict(&obs, &reps)?;
                let value = learner.value.predict(&obs, &reps)?;
                let mut acts = Vec::with_capacity(b);
                for (i, r) in rngs.iter_mut().enumerate() {
                    let (raw, a, log_prob) = learner.head.sample(&mean.row(i).to_vec(), r);
                    records[i].samples.push(PolicySample { raw, log_prob, value: value[[i, 0]] });
                    acts.push(Action::Continuous(a));
                }
                acts
            }
        };
        for (i, (ep, a)) in episodes.iter_mut().zip(&actions).enumerate() {
            let step = ep.step(a)?;
            let rec = &mut records[i];
            rec.history.push(&step.observation, step.opp_action.clone())?;
            rec.reps.push(reps.row(i).to_vec());
            rec.steps.push(step);
        }
        if let (Some(e), Some(s)) = (encoder, state.as_mut()) {
            e.advance(s, &obs)?;
        }
    }
    let last = current(&state)?;
    for (i, rec) in records.iter_mut().enumerate() {
        rec.reps.push(last.row(i).to_vec());
    }
    Ok(records)
}
