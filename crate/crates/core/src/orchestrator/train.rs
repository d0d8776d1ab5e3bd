use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{Algorithm, EncoderMode, ExperimentConfig};
use super::rollout::{rollout, Actor, EpisodeJob, EpisodeRecord};
use super::sampling::{sample_distributions, DistributionStore};
use super::{stream, OrchestratorError, Result, Stream};
use crate::distmath::PolicyDistanceMatrix;
use crate::encoder::{
    action_prediction_step, embed_step, triplet_step, ActionPredictor, EmbedBatch, Encoder, EncoderOptimizer,
    EncoderSpec, ObservationHistory, RepresentationRow, TripletBatch, REPRESENTATION_DIM,
};
use crate::envs::{EnvConfig, EnvKind, PolicySet, KEEP_ACTION_DIM, PUSH_NUM_ACTIONS};
use crate::rl::{
    ConditionedNet, DqnBatch, DqnLearner, EpsilonSchedule, GaussianHead, MetricsRow, PpoLearner,
    ReplayBuffer, ReplayEntry, RepresentationProvider, RolloutBatch, RolloutStep, StoredRepresentations, Trajectory,
};

/// The ego agent's networks.
#[derive(Clone, Debug)]
pub enum Learner {
    Dqn(DqnLearner),
    Ppo(PpoLearner),
}

impl Learner {
    /// Deterministic behavior used in tests: greedy Q or the policy mean.
    pub fn greedy(&self) -> Actor<'_> {
        match self {
            Learner::Dqn(l) => Actor::Dqn { q: &l.q, epsilon: 0.0 },
            Learner::Ppo(l) => Actor::Ppo { learner: l, stochastic: false },
        }
    }

    /// Current behavior with exploration pinned at `epsilon` (DQN) or the
    /// current Gaussian (PPO).
    pub fn exploring(&self, epsilon: f64) -> Actor<'_> {
        match self {
            Learner::Dqn(l) => Actor::Dqn { q: &l.q, epsilon },
            Learner::Ppo(l) => Actor::Ppo { learner: l, stochastic: true },
        }
    }

    pub fn fingerprint(&self) -> u64 {
        match self {
            Learner::Dqn(l) => l.q.fingerprint(),
            Learner::Ppo(l) => l.fingerprint(),
        }
    }
}

/// Result of a test evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub mean_reward: f64,
    pub episode_rewards: Vec<f64>,
    pub episodes: Vec<EpisodeRecord>,
}

/// Plays `episodes` test episodes without exploration. Push tests against
/// the held-out threshold; Keep draws a fresh random opponent per episode.
/// The agent sees only its own observations.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<R: Rng + ?Sized>(
    env: &EnvConfig,
    actor: Actor<'_>,
    encoder: Option<&Encoder>,
    episodes: usize,
    first_id: u64,
    workers: usize,
    rng: &mut R,
) -> Result<Evaluation> {
    let test_label = env.training_policies().len();
    let jobs: Vec<EpisodeJob> = (0..episodes)
        .map(|i| EpisodeJob {
            episode_id: first_id + i as u64,
            label: test_label,
            opponent: env.sample_opponent(PolicySet::Test, rng),
            seed: rng.random(),
        })
        .collect();
    let records = rollout(env, &jobs, actor, encoder, REPRESENTATION_DIM, workers)?;
    let episode_rewards: Vec<f64> = records.iter().map(|r| r.total_reward()).collect();
    let mean_reward = mean(&episode_rewards).unwrap_or(0.0);
    Ok(Evaluation { mean_reward, episode_rewards, episodes: records })
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub config: ExperimentConfig,
    pub metrics: Vec<MetricsRow>,
    pub learner: Learner,
    pub encoder: Option<Encoder>,
    /// Store and distance matrix of the most recent sampling round.
    pub store: Option<DistributionStore>,
    pub distances: Option<PolicyDistanceMatrix>,
    /// Number of times the distance matrix was rebuilt after the initial one.
    pub rebuilds: usize,
    /// Mean reward of every test, in order.
    pub test_rewards: Vec<f64>,
    pub representations: Vec<RepresentationRow>,
    pub total_steps: u64,
}

impl TrainOutput {
    /// Moving average over the last `test_window` tests.
    pub fn final_test_average(&self) -> Option<f64> {
        let w = self.config.run.test_window.max(1);
        let tail = &self.test_rewards[self.test_rewards.len().saturating_sub(w)..];
        mean(tail)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Encoder, its optimizer and, for action prediction, the predictor head.
struct EncoderTrainer {
    encoder: Encoder,
    opt: EncoderOptimizer,
    /// Separate Adam state for RL gradients flowing into the encoder.
    rl_opt: EncoderOptimizer,
    predictor: Option<ActionPredictor>,
    margin: f64,
}

impl EncoderTrainer {
    fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Option<Self>> {
        if !cfg.mode.has_encoder() {
            return Ok(None);
        }
        let e = &cfg.encoder;
        let spec = match cfg.kind() {
            EnvKind::Push => EncoderSpec::lstm(cfg.env.obs_dim(), e.hidden, e.layers, REPRESENTATION_DIM),
            EnvKind::Keep => EncoderSpec::gru(cfg.env.obs_dim(), e.hidden, REPRESENTATION_DIM),
        };
        let encoder = Encoder::new(spec, seed)?;
        let predictor = match (cfg.mode, cfg.kind()) {
            (EncoderMode::ActPred, EnvKind::Push) => {
                Some(ActionPredictor::categorical(REPRESENTATION_DIM, vec![PUSH_NUM_ACTIONS], seed ^ 0x5eed)?)
            }
            (EncoderMode::ActPred, EnvKind::Keep) => {
                Some(ActionPredictor::gaussian(REPRESENTATION_DIM, KEEP_ACTION_DIM, seed ^ 0x5eed)?)
            }
            _ => None,
        };
        let clip = (e.clip > 0.0).then_some(e.clip);
        Ok(Some(Self {
            encoder,
            opt: EncoderOptimizer::new(e.lr, clip),
            rl_opt: EncoderOptimizer::new(e.lr, clip),
            predictor,
            margin: e.margin,
        }))
    }

    /// One encoder update on a set of distinct histories.
    fn step<R: Rng + ?Sized>(
        &mut self,
        mode: EncoderMode,
        histories: Vec<Arc<ObservationHistory>>,
        distances: Option<&PolicyDistanceMatrix>,
        rng: &mut R,
    ) -> Result<Option<f64>> {
        match mode {
            EncoderMode::MprNoRs | EncoderMode::MprRs => {
                if histories.len() < 2 {
                    return Ok(None);
                }
                let d = distances.ok_or_else(|| OrchestratorError::Config("metric embedding without distances".into()))?;
                let batch = EmbedBatch::all_pairs(histories, d)?;
                Ok(Some(embed_step(&batch, &mut self.encoder, &mut self.opt)?))
            }
            EncoderMode::Triplet => match triplets_over(histories, self.margin, rng) {
                Some(batch) => Ok(Some(triplet_step(&batch, &mut self.encoder, &mut self.opt)?)),
                None => Ok(None),
            },
            EncoderMode::ActPred => {
                let refs: Vec<&ObservationHistory> = histories.iter().map(|h| h.as_ref()).collect();
                let predictor = self.predictor.as_mut().expect("action prediction has a predictor");
                Ok(Some(action_prediction_step(&refs, &mut self.encoder, predictor, &mut self.opt)?))
            }
            EncoderMode::None => Ok(None),
        }
    }
}

/// One triplet per anchor: a positive with the same label (another history
/// when there is one) and a negative with a different label. Anchors whose
/// label is the only one present are skipped.
fn triplets_over<R: Rng + ?Sized>(histories: Vec<Arc<ObservationHistory>>, margin: f64, rng: &mut R) -> Option<TripletBatch> {
    let mut triplets = Vec::new();
    for a in 0..histories.len() {
        let same: Vec<usize> =
            (0..histories.len()).filter(|&k| k != a && histories[k].label == histories[a].label).collect();
        let other: Vec<usize> = (0..histories.len()).filter(|&k| histories[k].label != histories[a].label).collect();
        if other.is_empty() {
            continue;
        }
        let p = if same.is_empty() { a } else { same[rng.random_range(0..same.len())] };
        let n = other[rng.random_range(0..other.len())];
        triplets.push([a, p, n]);
    }
    (!triplets.is_empty()).then_some(TripletBatch { histories, triplets, margin })
}

fn dedup(histories: impl IntoIterator<Item = Arc<ObservationHistory>>) -> Vec<Arc<ObservationHistory>> {
    let mut seen = std::collections::HashSet::new();
    histories.into_iter().filter(|h| seen.insert(h.episode_id)).collect()
}

/// Feeds RL minibatches with representations recomputed by the encoder and
/// applies the RL gradient to the encoder right away.
struct EncoderGradients<'a> {
    trainer: &'a mut EncoderTrainer,
    histories: Vec<Arc<ObservationHistory>>,
    /// Prefix-matrix row of every learner sample.
    rows: Vec<usize>,
    taped_rows: Vec<usize>,
    prefix_rows: usize,
}

impl<'a> EncoderGradients<'a> {
    /// `samples` lists `(history index, step)` per learner sample.
    fn new(trainer: &'a mut EncoderTrainer, histories: Vec<Arc<ObservationHistory>>, samples: &[(usize, usize)]) -> Self {
        let b = histories.len();
        let rows = samples.iter().map(|&(j, t)| t * b + j).collect();
        Self { trainer, histories, rows, taped_rows: Vec::new(), prefix_rows: 0 }
    }
}

impl RepresentationProvider for EncoderGradients<'_> {
    fn representations(&mut self, ids: &[usize], _stored: &Array2<f64>) -> crate::rl::Result<Array2<f64>> {
        let refs: Vec<&ObservationHistory> = self.histories.iter().map(|h| h.as_ref()).collect();
        self.trainer.encoder.zero_grad();
        let all = self.trainer.encoder.forward_prefixes(&refs)?;
        self.prefix_rows = all.nrows();
        self.taped_rows = ids.iter().map(|&i| self.rows[i]).collect();
        Ok(all.select(Axis(0), &self.taped_rows))
    }

    fn backward(&mut self, grad: &Array2<f64>) -> crate::rl::Result<()> {
        let mut full = Array2::zeros((self.prefix_rows, grad.ncols()));
        for (k, &r) in self.taped_rows.iter().enumerate() {
            let mut dst = full.row_mut(r);
            dst += &grad.row(k);
        }
        self.trainer.encoder.backward_prefixes(&full)?;
        self.trainer.rl_opt.apply(&mut self.trainer.encoder.networks_mut())?;
        Ok(())
    }
}

/// Shared state of both training loops.
struct Run<'c> {
    cfg: &'c ExperimentConfig,
    trainer: Option<EncoderTrainer>,
    store: Option<DistributionStore>,
    distances: Option<PolicyDistanceMatrix>,
    rebuilds: usize,
    sample_rng: ChaCha8Rng,
    collect_rng: ChaCha8Rng,
    learn_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    next_episode: u64,
    test_rewards: Vec<f64>,
    metrics: Vec<MetricsRow>,
}

impl<'c> Run<'c> {
    fn new(cfg: &'c ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.run.seed;
        let mut init = stream(seed, Stream::Init);
        let trainer = EncoderTrainer::new(cfg, init.random())?;
        Ok(Self {
            cfg,
            trainer,
            store: None,
            distances: None,
            rebuilds: 0,
            sample_rng: stream(seed, Stream::Sampling),
            collect_rng: stream(seed, Stream::Collection),
            learn_rng: stream(seed, Stream::Learning),
            eval_rng: stream(seed, Stream::Evaluation),
            next_episode: 0,
            test_rewards: Vec::new(),
            metrics: Vec::new(),
        })
    }

    fn encoder(&self) -> Option<&Encoder> {
        self.trainer.as_ref().map(|t| &t.encoder)
    }

    fn resample(&mut self, actor: Actor<'_>) -> Result<()> {
        let store = sample_distributions(
            &self.cfg.env,
            self.cfg.run.num_sample,
            self.cfg.encoder.smoothing,
            actor,
            self.trainer.as_ref().map(|t| &t.encoder),
            REPRESENTATION_DIM,
            self.cfg.run.workers,
            &mut self.sample_rng,
        )?;
        let projection_seed = self.sample_rng.random();
        let raw = store.distance_matrix(self.cfg.encoder.projections, projection_seed)?;
        let e = &self.cfg.encoder;
        self.distances = Some(if (e.distance_scale, e.distance_offset) == (1.0, 0.0) {
            raw
        } else {
            raw.rescaled(e.distance_scale, e.distance_offset)
        });
        self.store = Some(store);
        Ok(())
    }

    fn collect(&mut self, actor: Actor<'_>) -> Result<Vec<EpisodeRecord>> {
        let policies = self.cfg.env.training_policies();
        let jobs: Vec<EpisodeJob> = (0..self.cfg.run.num_collect)
            .map(|i| {
                let label = self.collect_rng.random_range(0..policies.len());
                EpisodeJob {
                    episode_id: self.next_episode + i as u64,
                    label,
                    opponent: policies[label],
                    seed: self.collect_rng.random(),
                }
            })
            .collect();
        self.next_episode += jobs.len() as u64;
        rollout(&self.cfg.env, &jobs, actor, self.encoder(), REPRESENTATION_DIM, self.cfg.run.workers)
    }

    fn test(&mut self, actor: Actor<'_>) -> Result<(f64, f64)> {
        let first = 1 << 40 | self.test_rewards.len() as u64 * self.cfg.run.test_episodes as u64;
        let encoder = self.trainer.as_ref().map(|t| &t.encoder);
        let eval = evaluate(
            &self.cfg.env,
            actor,
            encoder,
            self.cfg.run.test_episodes,
            first,
            self.cfg.run.workers,
            &mut self.eval_rng,
        )?;
        self.test_rewards.push(eval.mean_reward);
        let w = self.cfg.run.test_window.max(1);
        let avg = mean(&self.test_rewards[self.test_rewards.len().saturating_sub(w)..]).unwrap_or(0.0);
        Ok((eval.mean_reward, avg))
    }

    fn encoder_updates(
        &mut self,
        first: Vec<Arc<ObservationHistory>>,
        mut draw: impl FnMut(&mut ChaCha8Rng) -> Vec<Arc<ObservationHistory>>,
    ) -> Result<Option<f64>> {
        let mode = self.cfg.mode;
        let Some(trainer) = self.trainer.as_mut() else {
            return Ok(None);
        };
        let mut losses = Vec::new();
        for u in 0..self.cfg.encoder.updates {
            let histories = if u == 0 { first.clone() } else { draw(&mut self.learn_rng) };
            if let Some(l) = trainer.step(mode, dedup(histories), self.distances.as_ref(), &mut self.learn_rng)? {
                losses.push(l);
            }
        }
        Ok(mean(&losses))
    }

    /// Representation rows for export: every prefix length of up to
    /// `export_episodes` histories per training label drawn from `pool`,
    /// plus the same number of test episodes.
    fn export(&mut self, learner: &Learner, pool: &[Arc<ObservationHistory>]) -> Result<Vec<RepresentationRow>> {
        let Some(encoder) = self.encoder() else {
            return Ok(Vec::new());
        };
        let mut rng = stream(self.cfg.run.seed, Stream::Export);
        let names: Vec<String> = self.cfg.env.training_policies().iter().map(|p| p.name()).collect();
        let mut rows = Vec::new();
        for (k, name) in names.iter().enumerate() {
            let mine: Vec<&Arc<ObservationHistory>> = pool.iter().filter(|h| h.label == k).collect();
            let n = mine.len().min(self.cfg.run.export_episodes);
            let mut picked: Vec<usize> = sample_indices(&mut rng, mine.len(), n).into_vec();
            picked.sort_unstable();
            for i in picked {
                let h = mine[i];
                let reps = encoder.predict_prefixes(&[h.as_ref()])?;
                for t in 1..=h.len() {
                    rows.push(RepresentationRow {
                        episode_id: h.episode_id,
                        label: name.clone(),
                        t,
                        values: reps.row(t).to_vec(),
                    });
                }
            }
        }
        let eval = evaluate(&self.cfg.env, learner.greedy(), Some(encoder), self.cfg.run.export_episodes, 1 << 50, self.cfg.run.workers, &mut rng)?;
        let test_name = match self.cfg.kind() {
            EnvKind::Push => self.cfg.env.sample_opponent(PolicySet::Test, &mut rng).name(),
            EnvKind::Keep => "test".to_string(),
        };
        for ep in &eval.episodes {
            for t in 1..ep.reps.len() {
                rows.push(RepresentationRow { episode_id: ep.episode_id, label: test_name.clone(), t, values: ep.reps[t].clone() });
            }
        }
        Ok(rows)
    }

    fn finish(mut self, learner: Learner, pool: &[Arc<ObservationHistory>], total_steps: u64) -> Result<TrainOutput> {
        let representations = self.export(&learner, pool)?;
        Ok(TrainOutput {
            config: self.cfg.clone(),
            metrics: self.metrics,
            learner,
            encoder: self.trainer.map(|t| t.encoder),
            store: self.store,
            distances: self.distances,
            rebuilds: self.rebuilds,
            test_rewards: self.test_rewards,
            representations,
            total_steps,
        })
    }
}

/// Runs the joint training loop for the configured environment, calling
/// `progress` after every iteration.
pub fn train_with(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&MetricsRow)) -> Result<TrainOutput> {
    match cfg.algorithm {
        Algorithm::Dqn => train_dqn(cfg, progress),
        Algorithm::Ppo => train_ppo(cfg, progress),
    }
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    train_with(cfg, &mut |_| {})
}

/// Runs `cfg.run.trials` trials; trial `k` uses master seed `seed + k`.
pub fn train_trials(cfg: &ExperimentConfig, progress: &mut dyn FnMut(usize, &MetricsRow)) -> Result<Vec<TrainOutput>> {
    (0..cfg.run.trials.max(1))
        .map(|k| {
            let mut c = cfg.clone();
            c.run.seed = cfg.run.seed.wrapping_add(k as u64);
            train_with(&c, &mut |m| progress(k, m))
        })
        .collect()
}

fn train_dqn(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&MetricsRow)) -> Result<TrainOutput> {
    let mut run = Run::new(cfg)?;
    let mut init = stream(cfg.run.seed, Stream::Init);
    let _encoder_seed: u64 = init.random();
    let q = ConditionedNet::q_network(cfg.env.obs_dim(), REPRESENTATION_DIM, cfg.rl.hidden, PUSH_NUM_ACTIONS, init.random())?;
    let mut learner = DqnLearner::new(q, cfg.rl.lr, cfg.rl.gamma, cfg.rl.target_sync);
    let mut replay = ReplayBuffer::new(cfg.rl.replay_capacity);
    let total = cfg.total_steps();
    let eps = EpsilonSchedule::over_fraction(cfg.rl.eps_start, cfg.rl.eps_end, cfg.rl.eps_fraction, total);
    if cfg.mode.uses_distances() {
        run.resample(Actor::Random)?;
    }
    let period = cfg.resample_period();
    let mut steps = 0u64;
    let mut next_test = cfg.run.test_every;
    for it in 1..=cfg.run.iterations {
        let epsilon = eps.value(steps);
        let episodes = run.collect(Actor::Dqn { q: &learner.q, epsilon })?;
        let train_reward = mean(&episodes.iter().map(|e| e.total_reward()).collect::<Vec<_>>()).unwrap_or(0.0);
        for ep in episodes {
            steps += ep.steps.len() as u64;
            let entries = replay_entries(&ep)?;
            replay.push_episode(Arc::new(ep.history), entries);
        }

        let mut rl_losses = Vec::new();
        let mut encoder_loss = None;
        if steps >= cfg.rl.learning_starts && replay.len() >= cfg.rl.batch {
            let mut shared = Vec::new();
            for u in 0..cfg.rl.updates_per_iteration {
                let idx = replay.sample_indices(cfg.rl.batch, &mut run.learn_rng)?;
                let entries: Vec<&ReplayEntry> = idx.iter().map(|&i| replay.entry(i)).collect();
                let batch = DqnBatch::from_entries(&entries)?;
                let last = u + 1 == cfg.rl.updates_per_iteration;
                let loss = match (cfg.mode, run.trainer.as_mut()) {
                    (EncoderMode::ActPred, Some(trainer)) if last => {
                        let (histories, samples) = batch_histories(&entries, &replay)?;
                        learner.update_with(&batch, &mut EncoderGradients::new(trainer, histories, &samples))?
                    }
                    _ => learner.update(&batch)?,
                };
                rl_losses.push(loss);
                if last {
                    shared = entries.iter().map(|e| replay.history(e.episode_id).cloned()).collect::<Option<Vec<_>>>().ok_or(
                        OrchestratorError::Config("replay entry without a stored history".into()),
                    )?;
                }
            }
            let batch_size = cfg.encoder.batch;
            encoder_loss = run.encoder_updates(
                shared,
                |rng| {
                    let idx = replay.sample_indices(batch_size, rng).unwrap_or_default();
                    idx.iter().filter_map(|&i| replay.history(replay.entry(i).episode_id).cloned()).collect()
                },
            )?;
        }

        if let Some(p) = period {
            if it % p == 0 {
                run.resample(Actor::Dqn { q: &learner.q, epsilon })?;
                run.rebuilds += 1;
            }
        }

        let (mut test_reward, mut test_avg) = (None, None);
        if cfg.run.test_every > 0 && steps >= next_test {
            let (r, a) = run.test(Actor::Dqn { q: &learner.q, epsilon: 0.0 })?;
            test_reward = Some(r);
            test_avg = Some(a);
            while next_test <= steps {
                next_test += cfg.run.test_every;
            }
        }
        let row = MetricsRow {
            iteration: it as u64,
            step: steps,
            episodes: run.next_episode,
            train_reward,
            test_reward,
            test_reward_avg: test_avg,
            rl_loss: mean(&rl_losses),
            encoder_loss,
            epsilon: Some(epsilon),
        };
        progress(&row);
        run.metrics.push(row);
    }
    let pool = replay.histories();
    run.finish(Learner::Dqn(learner), &pool, steps)
}

/// Replay entries of one episode; the last step's next representation is
/// the one after the final observation.
fn replay_entries(ep: &EpisodeRecord) -> Result<Vec<ReplayEntry>> {
    ep.steps
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let action = match s.ego_action {
                crate::distmath::Action::Discrete(a) => a,
                _ => return Err(OrchestratorError::Config("DQN needs a discrete action space".into())),
            };
            Ok(ReplayEntry {
                observation: s.observation.clone(),
                representation: ep.reps[k].clone(),
                action,
                reward: s.reward,
                next_observation: s.next_observation.clone(),
                next_representation: ep.reps[k + 1].clone(),
                done: s.done,
                episode_id: ep.episode_id,
                step: k,
                label: ep.label,
            })
        })
        .collect()
}

/// Distinct histories behind a batch and each entry's `(history, step)`.
fn batch_histories(entries: &[&ReplayEntry], replay: &ReplayBuffer) -> Result<(Vec<Arc<ObservationHistory>>, Vec<(usize, usize)>)> {
    let mut index = HashMap::new();
    let mut histories = Vec::new();
    let mut samples = Vec::with_capacity(entries.len());
    for e in entries {
        let j = match index.get(&e.episode_id) {
            Some(&j) => j,
            None => {
                let h = replay
                    .history(e.episode_id)
                    .ok_or(OrchestratorError::Config("replay entry without a stored history".into()))?;
                histories.push(h.clone());
                index.insert(e.episode_id, histories.len() - 1);
                histories.len() - 1
            }
        };
        samples.push((j, e.step));
    }
    Ok((histories, samples))
}

fn train_ppo(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&MetricsRow)) -> Result<TrainOutput> {
    let mut run = Run::new(cfg)?;
    let mut init = stream(cfg.run.seed, Stream::Init);
    let _encoder_seed: u64 = init.random();
    let EnvConfig::Keep(keep) = &cfg.env else {
        return Err(OrchestratorError::Config("PPO runs on the continuous environment".into()));
    };
    let obs = cfg.env.obs_dim();
    let policy = ConditionedNet::tanh_mlp(obs, REPRESENTATION_DIM, KEEP_ACTION_DIM, init.random())?;
    let value = ConditionedNet::tanh_mlp(obs, REPRESENTATION_DIM, 1, init.random())?;
    let ppo_cfg = cfg.ppo_config();
    let head = GaussianHead::new(KEEP_ACTION_DIM, cfg.rl.init_log_std, keep.max_ego_force);
    let mut learner = PpoLearner::new(policy, value, head, cfg.rl.lr, ppo_cfg);
    let mut buffer: VecDeque<Arc<ObservationHistory>> = VecDeque::new();
    if cfg.mode.uses_distances() {
        run.resample(Actor::Random)?;
    }
    let period = cfg.resample_period();
    let mut steps = 0u64;
    for it in 1..=cfg.run.iterations {
        let episodes = run.collect(Actor::Ppo { learner: &learner, stochastic: true })?;
        let train_reward = mean(&episodes.iter().map(|e| e.total_reward()).collect::<Vec<_>>()).unwrap_or(0.0);
        let mut trajectories = Vec::with_capacity(episodes.len());
        let mut histories = Vec::with_capacity(episodes.len());
        for ep in episodes {
            steps += ep.steps.len() as u64;
            let steps_out = ep
                .steps
                .iter()
                .zip(&ep.samples)
                .enumerate()
                .map(|(k, (s, p))| RolloutStep {
                    observation: s.observation.clone(),
                    representation: ep.reps[k].clone(),
                    raw_action: p.raw.clone(),
                    log_prob: p.log_prob,
                    reward: cfg.rl.reward_scale * s.reward,
                    value: p.value,
                    done: s.done,
                })
                .collect();
            trajectories.push(Trajectory { episode_id: ep.episode_id, label: ep.label, steps: steps_out });
            histories.push(Arc::new(ep.history));
        }
        let batch = RolloutBatch::from_trajectories(&trajectories, cfg.rl.gamma, cfg.rl.lambda)?;
        let stats = match (cfg.mode, run.trainer.as_mut()) {
            (EncoderMode::ActPred, Some(trainer)) => {
                let samples: Vec<(usize, usize)> =
                    trajectories.iter().enumerate().flat_map(|(j, t)| (0..t.steps.len()).map(move |k| (j, k))).collect();
                let mut provider = EncoderGradients::new(trainer, histories.clone(), &samples);
                learner.update(&batch, &mut provider, &mut run.learn_rng)?
            }
            _ => learner.update(&batch, &mut StoredRepresentations, &mut run.learn_rng)?,
        };
        for h in histories {
            buffer.push_back(h);
            if buffer.len() > cfg.encoder.buffer.max(1) {
                buffer.pop_front();
            }
        }
        let n = cfg.encoder.batch;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Arc<ObservationHistory>> {
            let k = n.min(buffer.len());
            sample_indices(rng, buffer.len(), k).into_iter().map(|i| buffer[i].clone()).collect()
        };
        let first = draw(&mut run.learn_rng);
        let encoder_loss = run.encoder_updates(first, draw)?;

        if let Some(p) = period {
            if it % p == 0 {
                run.resample(Actor::Ppo { learner: &learner, stochastic: true })?;
                run.rebuilds += 1;
            }
        }

        let (r, a) = run.test(Actor::Ppo { learner: &learner, stochastic: false })?;
        let row = MetricsRow {
            iteration: it as u64,
            step: steps,
            episodes: run.next_episode,
            train_reward,
            test_reward: Some(r),
            test_reward_avg: Some(a),
            rl_loss: Some(stats.policy_loss + cfg.rl.value_coef * stats.value_loss),
            encoder_loss,
            epsilon: None,
        };
        progress(&row);
        run.metrics.push(row);
    }
    let pool: Vec<_> = buffer.into_iter().collect();
    run.finish(Learner::Ppo(learner), &pool, steps)
}
