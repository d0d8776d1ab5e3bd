use std::fmt;
use std::str::FromStr;

use super::{OrchestratorError, Result};
use crate::envs::{EnvConfig, EnvKind};
use crate::rl::PpoConfig;

/// How the opponent encoder is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderMode {
    /// Metric embedding with distances sampled once before training.
    MprNoRs,
    /// Metric embedding with distances re-sampled every `resample_period` iterations.
    MprRs,
    Triplet,
    /// Opponent-action prediction with RL gradients flowing into the encoder.
    ActPred,
    /// No encoder; the representation input is all zeros.
    None,
}

impl EncoderMode {
    pub const ALL: [EncoderMode; 5] =
        [EncoderMode::MprNoRs, EncoderMode::MprRs, EncoderMode::Triplet, EncoderMode::ActPred, EncoderMode::None];

    pub fn name(self) -> &'static str {
        match self {
            EncoderMode::MprNoRs => "mpr-nors",
            EncoderMode::MprRs => "mpr-rs",
            EncoderMode::Triplet => "triplet",
            EncoderMode::ActPred => "actpred",
            EncoderMode::None => "none",
        }
    }

    pub fn uses_distances(self) -> bool {
        matches!(self, EncoderMode::MprNoRs | EncoderMode::MprRs)
    }

    pub fn has_encoder(self) -> bool {
        self != EncoderMode::None
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderMode {
    type Err = OrchestratorError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| OrchestratorError::Config(format!("unknown encoder mode {s:?} (mpr-nors, mpr-rs, triplet, actpred, none)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Dqn,
    Ppo,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dqn => "dqn",
            Algorithm::Ppo => "ppo",
        }
    }
}

impl FromStr for Algorithm {
    type Err = OrchestratorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dqn" => Ok(Algorithm::Dqn),
            "ppo" => Ok(Algorithm::Ppo),
            _ => Err(OrchestratorError::Config(format!("unknown algorithm {s:?} (dqn, ppo)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlSettings {
    pub hidden: usize,
    pub lr: f64,
    pub gamma: f64,
    pub batch: usize,
    pub replay_capacity: usize,
    pub target_sync: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_fraction: f64,
    pub updates_per_iteration: usize,
    /// Environment steps collected before the first DQN update.
    pub learning_starts: u64,
    pub clip: f64,
    pub repeats: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Zero disables clipping.
    pub max_grad_norm: f64,
    pub lambda: f64,
    pub init_log_std: f64,
    /// PPO learns from `reward_scale * r`; reported rewards are unscaled.
    pub reward_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSettings {
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    /// Histories per encoder update.
    pub batch: usize,
    pub updates: usize,
    /// History buffer size in episodes (PPO only; DQN shares the replay buffer).
    pub buffer: usize,
    pub smoothing: f64,
    pub projections: usize,
    pub margin: f64,
    /// Zero disables clipping.
    pub clip: f64,
    /// Distance targets become `distance_scale * d + distance_offset`.
    pub distance_scale: f64,
    pub distance_offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopSettings {
    pub iterations: usize,
    pub num_sample: usize,
    pub num_collect: usize,
    /// Zero selects `iterations / 10`.
    pub resample_period: usize,
    pub seed: u64,
    pub trials: usize,
    /// Test cadence in environment steps (DQN); PPO tests after every collection.
    pub test_every: u64,
    pub test_episodes: usize,
    pub test_window: usize,
    /// Episodes per label written to representations.csv.
    pub export_episodes: usize,
    pub workers: usize,
}

/// Every setting of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub algorithm: Algorithm,
    pub mode: EncoderMode,
    pub rl: RlSettings,
    pub encoder: EncoderSettings,
    pub run: LoopSettings,
}

impl ExperimentConfig {
    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            clip: self.rl.clip,
            repeats: self.rl.repeats,
            minibatch: self.rl.minibatch,
            entropy_coef: self.rl.entropy_coef,
            value_coef: self.rl.value_coef,
            max_grad_norm: (self.rl.max_grad_norm > 0.0).then_some(self.rl.max_grad_norm),
            gamma: self.rl.gamma,
            lambda: self.rl.lambda,
            normalize_advantages: true,
        }
    }

    pub fn default_for(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Push => Self {
                env: EnvConfig::default_for(kind),
                algorithm: Algorithm::Dqn,
                mode: EncoderMode::MprNoRs,
                rl: RlSettings {
                    hidden: 128,
                    lr: 1e-3,
                    gamma: 0.99,
                    batch: 64,
                    replay_capacity: 100_000,
                    target_sync: 500,
                    eps_start: 1.0,
                    eps_end: 0.05,
                    eps_fraction: 0.2,
                    updates_per_iteration: 12,
                    learning_starts: 1000,
                    clip: 0.2,
                    repeats: 80,
                    minibatch: 1024,
                    entropy_coef: 0.01,
                    value_coef: 0.5,
                    max_grad_norm: 10.0,
                    lambda: 0.95,
                    init_log_std: 0.0,
                    reward_scale: 1.0,
                },
                encoder: EncoderSettings {
                    hidden: 64,
                    layers: 2,
                    lr: 1e-3,
                    batch: 64,
                    updates: 1,
                    buffer: 1000,
                    smoothing: 1.0,
                    projections: 100,
                    margin: 1.0,
                    clip: 10.0,
                    distance_scale: 1.0,
                    distance_offset: 0.0,
                },
                run: LoopSettings {
                    iterations: 2000,
                    num_sample: 200,
                    num_collect: 1,
                    resample_period: 0,
                    seed: 0,
                    trials: 5,
                    test_every: 1000,
                    test_episodes: 10,
                    test_window: 20,
                    export_episodes: 20,
                    workers: 1,
                },
            },
            EnvKind::Keep => Self {
                env: EnvConfig::default_for(kind),
                algorithm: Algorithm::Ppo,
                mode: EncoderMode::MprRs,
                rl: RlSettings {
                    hidden: 32,
                    lr: 3e-4,
                    gamma: 0.99,
                    batch: 64,
                    replay_capacity: 100_000,
                    target_sync: 500,
                    eps_start: 1.0,
                    eps_end: 0.05,
                    eps_fraction: 0.2,
                    updates_per_iteration: 1,
                    learning_starts: 0,
                    clip: 0.2,
                    repeats: 80,
                    minibatch: 1024,
                    entropy_coef: 0.01,
                    value_coef: 0.5,
                    max_grad_norm: 10.0,
                    lambda: 0.95,
                    init_log_std: -0.5,
                    reward_scale: 1.0,
                },
                encoder: EncoderSettings {
                    hidden: 32,
                    layers: 1,
                    lr: 3e-4,
                    batch: 20,
                    updates: 15,
                    buffer: 1280,
                    smoothing: 1.0,
                    projections: 100,
                    margin: 1.0,
                    clip: 10.0,
                    distance_scale: 1.0,
                    distance_offset: 0.0,
                },
                run: LoopSettings {
                    iterations: 150,
                    num_sample: 50,
                    num_collect: 64,
                    resample_period: 0,
                    seed: 0,
                    trials: 5,
                    test_every: 0,
                    test_episodes: 20,
                    test_window: 20,
                    export_episodes: 20,
                    workers: 1,
                },
            },
        }
    }

    pub fn kind(&self) -> EnvKind {
        self.env.kind()
    }

    /// Effective re-sampling period, `None` unless the mode re-samples.
    pub fn resample_period(&self) -> Option<usize> {
        (self.mode == EncoderMode::MprRs).then(|| {
            if self.run.resample_period > 0 {
                self.run.resample_period
            } else {
                (self.run.iterations / 10).max(1)
            }
        })
    }

    /// Total environment steps of the run.
    pub fn total_steps(&self) -> u64 {
        (self.run.iterations * self.run.num_collect * self.env.horizon()) as u64
    }

    /// Parses `key = value` lines on top of the defaults for the environment
    /// named by `env.name` (Push when absent). `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let kind = match pairs.iter().rev().find(|(k, _)| k == "env.name") {
            Some((_, v)) => parse_env(v)?,
            None => EnvKind::Push,
        };
        let mut cfg = Self::default_for(kind);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Parses `key=value` overrides, then the file text, so that an
    /// `env.name` override also selects the defaults.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| OrchestratorError::Config(format!("override {o:?} is not key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let joined: String = pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        Self::parse(&joined)
    }

    /// Valid keys for this configuration's environment.
    pub fn keys(&self) -> Vec<&'static str> {
        self.entries().into_iter().map(|(k, _)| k).collect()
    }

    /// The full configuration as `key = value` text; parsing it gives back
    /// an identical configuration.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e: Vec<(&'static str, String)> = vec![("env.name", self.kind().name().to_string())];
        match &self.env {
            EnvConfig::Push(c) => {
                e.push(("env.horizon", c.horizon.to_string()));
                e.push(("env.arena", c.arena.to_string()));
                e.push(("env.damping", c.damping.to_string()));
                e.push(("env.stop_radius", c.defender_stop_radius.to_string()));
            }
            EnvConfig::Keep(c) => {
                e.push(("env.horizon", c.horizon.to_string()));
                e.push(("env.damping", c.damping.to_string()));
                e.push(("env.max_force", c.max_ego_force.to_string()));
                e.push(("env.test_angle_min", c.test_angle.0.to_string()));
                e.push(("env.test_angle_max", c.test_angle.1.to_string()));
                e.push(("env.test_distance_min", c.test_distance.0.to_string()));
                e.push(("env.test_distance_max", c.test_distance.1.to_string()));
                e.push(("env.test_force_min", c.test_force.0.to_string()));
                e.push(("env.test_force_max", c.test_force.1.to_string()));
            }
        }
        let r = &self.rl;
        e.extend([
            ("rl.algorithm", self.algorithm.name().to_string()),
            ("rl.lr", r.lr.to_string()),
            ("rl.gamma", r.gamma.to_string()),
        ]);
        match self.algorithm {
            Algorithm::Dqn => e.extend([
                ("rl.hidden", r.hidden.to_string()),
                ("rl.batch", r.batch.to_string()),
                ("rl.replay_capacity", r.replay_capacity.to_string()),
                ("rl.target_sync", r.target_sync.to_string()),
                ("rl.eps_start", r.eps_start.to_string()),
                ("rl.eps_end", r.eps_end.to_string()),
                ("rl.eps_fraction", r.eps_fraction.to_string()),
                ("rl.updates_per_iteration", r.updates_per_iteration.to_string()),
                ("rl.learning_starts", r.learning_starts.to_string()),
            ]),
            Algorithm::Ppo => e.extend([
                ("rl.clip", r.clip.to_string()),
                ("rl.repeats", r.repeats.to_string()),
                ("rl.minibatch", r.minibatch.to_string()),
                ("rl.entropy_coef", r.entropy_coef.to_string()),
                ("rl.value_coef", r.value_coef.to_string()),
                ("rl.max_grad_norm", r.max_grad_norm.to_string()),
                ("rl.lambda", r.lambda.to_string()),
                ("rl.init_log_std", r.init_log_std.to_string()),
                ("rl.reward_scale", r.reward_scale.to_string()),
            ]),
        }
        let c = &self.encoder;
        e.extend([
            ("encoder.mode", self.mode.name().to_string()),
            ("encoder.hidden", c.hidden.to_string()),
            ("encoder.layers", c.layers.to_string()),
            ("encoder.lr", c.lr.to_string()),
            ("encoder.batch", c.batch.to_string()),
            ("encoder.updates", c.updates.to_string()),
            ("encoder.buffer", c.buffer.to_string()),
            ("encoder.smoothing", c.smoothing.to_string()),
            ("encoder.projections", c.projections.to_string()),
            ("encoder.margin", c.margin.to_string()),
            ("encoder.distance_scale", c.distance_scale.to_string()),
            ("encoder.distance_offset", c.distance_offset.to_string()),
            ("encoder.clip", c.clip.to_string()),
        ]);
        let o = &self.run;
        e.extend([
            ("orchestrator.iterations", o.iterations.to_string()),
            ("orchestrator.num_sample", o.num_sample.to_string()),
            ("orchestrator.num_collect", o.num_collect.to_string()),
            ("orchestrator.resample_period", o.resample_period.to_string()),
            ("orchestrator.seed", o.seed.to_string()),
            ("orchestrator.trials", o.trials.to_string()),
            ("orchestrator.test_every", o.test_every.to_string()),
            ("orchestrator.test_episodes", o.test_episodes.to_string()),
            ("orchestrator.test_window", o.test_window.to_string()),
            ("orchestrator.export_episodes", o.export_episodes.to_string()),
            ("orchestrator.workers", o.workers.to_string()),
        ]);
        e
    }

    /// Sets one key. A key without a section prefix names the unique key
    /// ending in it (`seed` for `orchestrator.seed`). Unknown keys are
    /// rejected with the list of valid ones.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !key.contains('.') {
            let matches: Vec<&str> = self.keys().into_iter().filter(|k| k.rsplit('.').next() == Some(key)).collect();
            if let [full] = matches.as_slice() {
                return self.set(full, value);
            }
        }
        if !self.keys().contains(&key) {
            return Err(OrchestratorError::UnknownKey { key: key.to_string(), valid: self.keys().join(", ") });
        }
        let v = value;
        match (key, &mut self.env) {
            ("env.name", _) => {
                if parse_env(v)? != self.kind() {
                    return Err(OrchestratorError::Config("env.name must come before other keys to switch environments".into()));
                }
            }
            ("env.horizon", EnvConfig::Push(c)) => c.horizon = num(key, v)?,
            ("env.horizon", EnvConfig::Keep(c)) => c.horizon = num(key, v)?,
            ("env.arena", EnvConfig::Push(c)) => c.arena = num(key, v)?,
            ("env.damping", EnvConfig::Push(c)) => c.damping = num(key, v)?,
            ("env.damping", EnvConfig::Keep(c)) => c.damping = num(key, v)?,
            ("env.stop_radius", EnvConfig::Push(c)) => c.defender_stop_radius = num(key, v)?,
            ("env.max_force", EnvConfig::Keep(c)) => c.max_ego_force = num(key, v)?,
            ("env.test_angle_min", EnvConfig::Keep(c)) => c.test_angle.0 = num(key, v)?,
            ("env.test_angle_max", EnvConfig::Keep(c)) => c.test_angle.1 = num(key, v)?,
            ("env.test_distance_min", EnvConfig::Keep(c)) => c.test_distance.0 = num(key, v)?,
            ("env.test_distance_max", EnvConfig::Keep(c)) => c.test_distance.1 = num(key, v)?,
            ("env.test_force_min", EnvConfig::Keep(c)) => c.test_force.0 = num(key, v)?,
            ("env.test_force_max", EnvConfig::Keep(c)) => c.test_force.1 = num(key, v)?,
            ("rl.algorithm", _) => {
                let a: Algorithm = v.parse()?;
                let expected = match self.kind() {
                    EnvKind::Push => Algorithm::Dqn,
                    EnvKind::Keep => Algorithm::Ppo,
                };
                if a != expected {
                    return Err(OrchestratorError::Config(format!(
                        "{} runs with {}; {} is not supported there",
                        self.kind().name(),
                        expected.name(),
                        a.name()
                    )));
                }
                self.algorithm = a;
            }
            ("rl.hidden", _) => self.rl.hidden = num(key, v)?,
            ("rl.lr", _) => self.rl.lr = num(key, v)?,
            ("rl.gamma", _) => self.rl.gamma = num(key, v)?,
            ("rl.batch", _) => self.rl.batch = num(key, v)?,
            ("rl.replay_capacity", _) => self.rl.replay_capacity = num(key, v)?,
            ("rl.target_sync", _) => self.rl.target_sync = num(key, v)?,
            ("rl.eps_start", _) => self.rl.eps_start = num(key, v)?,
            ("rl.eps_end", _) => self.rl.eps_end = num(key, v)?,
            ("rl.eps_fraction", _) => self.rl.eps_fraction = num(key, v)?,
            ("rl.updates_per_iteration", _) => self.rl.updates_per_iteration = num(key, v)?,
            ("rl.learning_starts", _) => self.rl.learning_starts = num(key, v)?,
            ("rl.clip", _) => self.rl.clip = num(key, v)?,
            ("rl.repeats", _) => self.rl.repeats = num(key, v)?,
            ("rl.minibatch", _) => self.rl.minibatch = num(key, v)?,
            ("rl.entropy_coef", _) => self.rl.entropy_coef = num(key, v)?,
            ("rl.value_coef", _) => self.rl.value_coef = num(key, v)?,
            ("rl.max_grad_norm", _) => self.rl.max_grad_norm = num(key, v)?,
            ("rl.lambda", _) => self.rl.lambda = num(key, v)?,
            ("rl.init_log_std", _) => self.rl.init_log_std = num(key, v)?,
            ("rl.reward_scale", _) => self.rl.reward_scale = num(key, v)?,
            ("encoder.mode", _) => self.mode = v.parse()?,
            ("encoder.hidden", _) => self.encoder.hidden = num(key, v)?,
            ("encoder.layers", _) => self.encoder.layers = num(key, v)?,
            ("encoder.lr", _) => self.encoder.lr = num(key, v)?,
            ("encoder.batch", _) => self.encoder.batch = num(key, v)?,
            ("encoder.updates", _) => self.encoder.updates = num(key, v)?,
            ("encoder.buffer", _) => self.encoder.buffer = num(key, v)?,
            ("encoder.smoothing", _) => self.encoder.smoothing = num(key, v)?,
            ("encoder.projections", _) => self.encoder.projections = num(key, v)?,
            ("encoder.margin", _) => self.encoder.margin = num(key, v)?,
            ("encoder.distance_scale", _) => self.encoder.distance_scale = num(key, v)?,
            ("encoder.distance_offset", _) => self.encoder.distance_offset = num(key, v)?,
            ("encoder.clip", _) => self.encoder.clip = num(key, v)?,
            ("orchestrator.iterations", _) => self.run.iterations = num(key, v)?,
            ("orchestrator.num_sample", _) => self.run.num_sample = num(key, v)?,
            ("orchestrator.num_collect", _) => self.run.num_collect = num(key, v)?,
            ("orchestrator.resample_period", _) => self.run.resample_period = num(key, v)?,
            ("orchestrator.seed", _) => self.run.seed = num(key, v)?,
            ("orchestrator.trials", _) => self.run.trials = num(key, v)?,
            ("orchestrator.test_every", _) => self.run.test_every = num(key, v)?,
            ("orchestrator.test_episodes", _) => self.run.test_episodes = num(key, v)?,
            ("orchestrator.test_window", _) => self.run.test_window = num(key, v)?,
            ("orchestrator.export_episodes", _) => self.run.export_episodes = num(key, v)?,
            ("orchestrator.workers", _) => self.run.workers = num(key, v)?,
            _ => unreachable!("key list and setter disagree on {key}"),
        }
        Ok(())
    }

    /// Checks ranges that the training loop relies on.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.to_string()));
        if self.run.iterations == 0 || self.run.num_collect == 0 {
            return bad("orchestrator.iterations and orchestrator.num_collect must be positive");
        }
        if self.env.horizon() == 0 {
            return bad("env.horizon must be positive");
        }
        if self.mode.uses_distances() && self.run.num_sample == 0 {
            return bad("orchestrator.num_sample must be positive for metric embedding");
        }
        if self.mode != EncoderMode::MprRs && self.run.resample_period != 0 {
            return bad("orchestrator.resample_period is only meaningful with encoder.mode = mpr-rs");
        }
        if !(0.0..=1.0).contains(&self.rl.eps_start) || !(0.0..=1.0).contains(&self.rl.eps_end) {
            return bad("epsilon values must lie in [0, 1]");
        }
        if self.rl.batch == 0 || self.rl.minibatch == 0 || self.encoder.batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.mode.has_encoder() && (self.encoder.hidden == 0 || self.encoder.layers == 0) {
            return bad("encoder.hidden and encoder.layers must be positive");
        }
        if self.kind() == EnvKind::Keep && self.encoder.layers != 1 {
            return bad("the Keep encoder is a single GRU layer");
        }
        if self.mode == EncoderMode::MprRs && self.run.resample_period > self.run.iterations {
            return bad("orchestrator.resample_period exceeds orchestrator.iterations");
        }
        if !(self.rl.reward_scale.is_finite() && self.rl.reward_scale > 0.0) {
            return bad("rl.reward_scale must be positive");
        }
        let e = &self.encoder;
        if !(e.distance_scale.is_finite() && e.distance_scale > 0.0 && e.distance_offset.is_finite() && e.distance_offset >= 0.0) {
            return bad("encoder.distance_scale must be positive and encoder.distance_offset non-negative");
        }
        if self.run.workers == 0 {
            return bad("orchestrator.workers must be at least 1");
        }
        Ok(())
    }
}

fn parse_env(v: &str) -> Result<EnvKind> {
    EnvKind::parse(v).ok_or_else(|| OrchestratorError::Config(format!("unknown environment {v:?} (push, keep)")))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e| OrchestratorError::Config(format!("{key} = {v:?}: {e}")))
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| OrchestratorError::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
