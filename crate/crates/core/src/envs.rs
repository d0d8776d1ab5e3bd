//! The `Push` and `Keep` environments and their rule-based opponents.
//!
//! `Push` is a two-agent particle scenario: the ego attacker tries to touch a
//! landmark fixed at the origin while a threshold defender either guards the
//! landmark or chases the attacker. `Keep` is a single ball that the ego agent
//! holds near the origin while an opponent pulls it toward a target point.
//!
//! Both environments are pure functions of `(seed, action sequence,
//! opponent)`: the `*_reset` / `*_step` functions take state by reference and
//! return the successor.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distmath::{Action, ActionSpaceSizes, JointActionSample};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid action {0}")]
    InvalidAction(String),
    #[error("action does not match the environment")]
    WrongActionKind,
    #[error("opponent policy does not match the environment")]
    WrongOpponent,
    #[error("episode already finished after {0} steps")]
    Finished(usize),
    #[error("trace: {0}")]
    Trace(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;

pub type Vec2 = [f64; 2];

fn norm(v: Vec2) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

/// Unit force directions for the five discrete particle actions:
/// none, +x, -x, +y, -y.
pub const PUSH_DIRECTIONS: [Vec2; 5] = [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];

pub const PUSH_NUM_ACTIONS: usize = 5;
pub const PUSH_OBS_DIM: usize = 6;
pub const KEEP_OBS_DIM: usize = 4;
pub const KEEP_ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyConfig {
    pub mass: f64,
    pub radius: f64,
    pub accel: f64,
    pub max_speed: f64,
}

/// Physical constants of `Push`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushConfig {
    pub attacker: BodyConfig,
    pub defender: BodyConfig,
    pub damping: f64,
    pub dt: f64,
    /// Initial positions are uniform in `[-arena, arena]^2`.
    pub arena: f64,
    /// Attacker-to-landmark distance that counts as touching.
    pub touch_radius: f64,
    /// The defender idles (action 0) when this close to its goal point.
    pub defender_stop_radius: f64,
    pub contact_force: f64,
    pub contact_margin: f64,
    pub touch_reward: f64,
    pub collision_penalty: f64,
    pub horizon: usize,
}

impl Default for PushConfig {
    fn default() -> Self {
        Self {
            attacker: BodyConfig { mass: 1.0, radius: 0.05, accel: 4.0, max_speed: 1.3 },
            defender: BodyConfig { mass: 2.0, radius: 0.15, accel: 3.0, max_speed: 1.0 },
            damping: 0.25,
            dt: 0.1,
            arena: 0.5,
            touch_radius: 0.1,
            defender_stop_radius: 0.05,
            contact_force: 100.0,
            contact_margin: 1e-3,
            touch_reward: 2.0,
            collision_penalty: 2.0,
            horizon: 50,
        }
    }
}

/// Physical constants of `Keep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeepConfig {
    pub ball_mass: f64,
    pub damping: f64,
    pub dt: f64,
    /// The ego force vector is clamped to this radius.
    pub max_ego_force: f64,
    /// Initial ball position is uniform in `[-init_spread, init_spread]^2`.
    pub init_spread: f64,
    pub horizon: usize,
    /// Ranges used to draw unseen test opponents.
    pub test_angle: (f64, f64),
    pub test_distance: (f64, f64),
    pub test_force: (f64, f64),
}

impl Default for KeepConfig {
    fn default() -> Self {
        Self {
            ball_mass: 1.0,
            damping: 0.25,
            dt: 0.1,
            max_ego_force: 2.0,
            init_spread: 0.1,
            horizon: 100,
            test_angle: (-180.0, 180.0),
            test_distance: (0.0, 1.0),
            test_force: (0.2, 1.7),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushState {
    pub attacker_pos: Vec2,
    pub attacker_vel: Vec2,
    pub defender_pos: Vec2,
    pub defender_vel: Vec2,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeepState {
    pub ball_pos: Vec2,
    pub ball_vel: Vec2,
    pub step: usize,
}

/// Defender that guards the landmark until the attacker comes within
/// `threshold` of it, then chases the attacker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushDefenderPolicy {
    pub threshold: f64,
}

impl PushDefenderPolicy {
    pub fn goal(&self, state: &PushState) -> Vec2 {
        if norm(state.attacker_pos) > self.threshold {
            [0.0, 0.0]
        } else {
            state.attacker_pos
        }
    }

    /// Discrete action moving toward the goal along its dominant axis.
    pub fn act(&self, state: &PushState, stop_radius: f64) -> usize {
        let to_goal = sub(self.goal(state), state.defender_pos);
        if norm(to_goal) < stop_radius {
            0
        } else if to_goal[0].abs() >= to_goal[1].abs() {
            if to_goal[0] > 0.0 {
                1
            } else {
                2
            }
        } else if to_goal[1] > 0.0 {
            3
        } else {
            4
        }
    }
}

/// Opponent that pulls the ball toward the polar point `(angle, distance)`
/// with a constant force magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeepOpponentPolicy {
    /// Degrees, counter-clockwise from the x axis.
    pub angle: f64,
    pub distance: f64,
    pub force: f64,
}

impl KeepOpponentPolicy {
    pub fn new(angle: f64, distance: f64, force: f64) -> Self {
        Self { angle, distance, force }
    }

    pub fn target(&self) -> Vec2 {
        let a = self.angle * PI / 180.0;
        [self.distance * a.cos(), self.distance * a.sin()]
    }

    pub fn act(&self, state: &KeepState) -> Vec2 {
        let to = sub(self.target(), state.ball_pos);
        let n = norm(to);
        if n < 1e-12 {
            [0.0, 0.0]
        } else {
            [self.force * to[0] / n, self.force * to[1] / n]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OpponentPolicy {
    Push(PushDefenderPolicy),
    Keep(KeepOpponentPolicy),
}

impl OpponentPolicy {
    pub fn name(&self) -> String {
        match self {
            OpponentPolicy::Push(p) => format!("d={}", p.threshold),
            OpponentPolicy::Keep(k) => format!("({:.1},{:.1},{:.1})", k.angle, k.distance, k.force),
        }
    }
}

/// One environment transition as seen by the ego agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Ego observation the action was chosen from.
    pub observation: Vec<f64>,
    pub next_observation: Vec<f64>,
    pub ego_action: Action,
    pub opp_action: Vec<Action>,
    pub reward: f64,
    pub done: bool,
    /// The ego action was outside its bounds and was clamped.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

impl StepRecord {
    pub fn joint_action(&self, label: usize) -> JointActionSample {
        JointActionSample { ego_action: self.ego_action.clone(), opp_action: self.opp_action.clone(), policy_label: label }
    }
}

pub fn push_observation(state: &PushState) -> Vec<f64> {
    let to_target = sub([0.0, 0.0], state.attacker_pos);
    let to_defender = sub(state.defender_pos, state.attacker_pos);
    vec![to_target[0], to_target[1], to_defender[0], to_defender[1], state.attacker_vel[0], state.attacker_vel[1]]
}

pub fn push_reset(cfg: &PushConfig, seed: u64) -> (PushState, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = cfg.arena;
    let mut p = || [rng.random_range(-a..a), rng.random_range(-a..a)];
    let state = PushState {
        attacker_pos: p(),
        attacker_vel: [0.0, 0.0],
        defender_pos: p(),
        defender_vel: [0.0, 0.0],
        step: 0,
    };
    let obs = push_observation(&state);
    (state, obs)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn integrate(pos: &mut Vec2, vel: &mut Vec2, force: Vec2, body: &BodyConfig, damping: f64, dt: f64) {
    for k in 0..2 {
        vel[k] = vel[k] * (1.0 - damping) + force[k] / body.mass * dt;
    }
    let speed = norm(*vel);
    if speed > body.max_speed {
        vel[0] *= body.max_speed / speed;
        vel[1] *= body.max_speed / speed;
    }
    for k in 0..2 {
        pos[k] += vel[k] * dt;
    }
}

pub fn push_step(
    cfg: &PushConfig,
    state: &PushState,
    ego_action: usize,
    defender: &PushDefenderPolicy,
) -> Result<(PushState, StepRecord)> {
    if ego_action >= PUSH_NUM_ACTIONS {
        return Err(EnvError::InvalidAction(format!("push action {ego_action} not in 0..{PUSH_NUM_ACTIONS}")));
    }
    if state.step >= cfg.horizon {
        return Err(EnvError::Finished(state.step));
    }
    let observation = push_observation(state);
    let opp_action = defender.act(state, cfg.defender_stop_radius);

    let mut f_att = PUSH_DIRECTIONS[ego_action].map(|v| v * cfg.attacker.accel);
    let mut f_def = PUSH_DIRECTIONS[opp_action].map(|v| v * cfg.defender.accel);

    // Soft contact between the two agents.
    let delta = sub(state.attacker_pos, state.defender_pos);
    let dist = norm(delta);
    let dist_min = cfg.attacker.radius + cfg.defender.radius;
    if dist > 1e-12 {
        let k = cfg.contact_margin;
        let penetration = softplus(-(dist - dist_min) / k) * k;
        let scale = cfg.contact_force * penetration / dist;
        for i in 0..2 {
            f_att[i] += scale * delta[i];
            f_def[i] -= scale * delta[i];
        }
    }

    let mut next = state.clone();
    integrate(&mut next.attacker_pos, &mut next.attacker_vel, f_att, &cfg.attacker, cfg.damping, cfg.dt);
    integrate(&mut next.defender_pos, &mut next.defender_vel, f_def, &cfg.defender, cfg.damping, cfg.dt);
    next.step += 1;

    let reward = push_reward(cfg, &next);
    let record = StepRecord {
        observation,
        next_observation: push_observation(&next),
        ego_action: Action::Discrete(ego_action),
        opp_action: vec![Action::Discrete(opp_action)],
        reward,
        done: next.step >= cfg.horizon,
        clamped: false,
    };
    Ok((next, record))
}

/// `-dist(attacker, landmark) + touch bonus - collision penalty`.
pub fn push_reward(cfg: &PushConfig, state: &PushState) -> f64 {
    let d = norm(state.attacker_pos);
    let mut r = -d;
    if d < cfg.touch_radius {
        r += cfg.touch_reward;
    }
    if norm(sub(state.attacker_pos, state.defender_pos)) < cfg.attacker.radius + cfg.defender.radius {
        r -= cfg.collision_penalty;
    }
    r
}

pub fn keep_observation(state: &KeepState) -> Vec<f64> {
    vec![state.ball_pos[0], state.ball_pos[1], state.ball_vel[0], state.ball_vel[1]]
}

pub fn keep_reset(cfg: &KeepConfig, seed: u64) -> (KeepState, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.init_spread;
    let ball_pos = if s > 0.0 { [rng.random_range(-s..s), rng.random_range(-s..s)] } else { [0.0, 0.0] };
    let state = KeepState { ball_pos, ball_vel: [0.0, 0.0], step: 0 };
    let obs = keep_observation(&state);
    (state, obs)
}

pub fn keep_step(
    cfg: &KeepConfig,
    state: &KeepState,
    ego_force: Vec2,
    opponent: &KeepOpponentPolicy,
) -> Result<(KeepState, StepRecord)> {
    if !(ego_force[0].is_finite() && ego_force[1].is_finite()) {
        return Err(EnvError::InvalidAction("non-finite keep force".into()));
    }
    if state.step >= cfg.horizon {
        return Err(EnvError::Finished(state.step));
    }
    let observation = keep_observation(state);
    let magnitude = norm(ego_force);
    let (ego, clamped) = if magnitude > cfg.max_ego_force {
        let s = cfg.max_ego_force / magnitude;
        ([ego_force[0] * s, ego_force[1] * s], true)
    } else {
        (ego_force, false)
    };
    let opp = opponent.act(state);
    let mut next = state.clone();
    for k in 0..2 {
        next.ball_vel[k] = state.ball_vel[k] * (1.0 - cfg.damping) + (ego[k] + opp[k]) / cfg.ball_mass * cfg.dt;
        next.ball_pos[k] = state.ball_pos[k] + next.ball_vel[k] * cfg.dt;
    }
    next.step += 1;
    let record = StepRecord {
        observation,
        next_observation: keep_observation(&next),
        ego_action: Action::Continuous(ego.to_vec()),
        opp_action: vec![Action::Continuous(opp.to_vec())],
        reward: -norm(next.ball_pos),
        done: next.step >= cfg.horizon,
        clamped,
    };
    Ok((next, record))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Push,
    Keep,
}

impl EnvKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "push" => Some(EnvKind::Push),
            "keep" => Some(EnvKind::Keep),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Push => "push",
            EnvKind::Keep => "keep",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicySet {
    Training,
    Test,
}

pub const PUSH_TRAIN_THRESHOLDS: [f64; 4] = [0.1, 0.3, 0.75, 1.0];
pub const PUSH_TEST_THRESHOLD: f64 = 0.5;
pub const KEEP_TRAIN_POLICIES: [(f64, f64, f64); 4] =
    [(45.0, 1.0, 0.5), (170.0, 2.0, 1.0), (-90.0, 1.5, 0.7), (0.0, 1.0, 0.3)];

/// Either environment's configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvConfig {
    Push(PushConfig),
    Keep(KeepConfig),
}

impl EnvConfig {
    pub fn default_for(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Push => EnvConfig::Push(PushConfig::default()),
            EnvKind::Keep => EnvConfig::Keep(KeepConfig::default()),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            EnvConfig::Push(_) => EnvKind::Push,
            EnvConfig::Keep(_) => EnvKind::Keep,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            EnvConfig::Push(c) => c.horizon,
            EnvConfig::Keep(c) => c.horizon,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            EnvConfig::Push(_) => PUSH_OBS_DIM,
            EnvConfig::Keep(_) => KEEP_OBS_DIM,
        }
    }

    /// Discrete joint-action cardinalities, `None` for continuous spaces.
    pub fn discrete_sizes(&self) -> Option<ActionSpaceSizes> {
        match self {
            EnvConfig::Push(_) => Some(ActionSpaceSizes::new(PUSH_NUM_ACTIONS, vec![PUSH_NUM_ACTIONS])),
            EnvConfig::Keep(_) => None,
        }
    }

    /// Dimension of a concatenated continuous joint action.
    pub fn joint_action_dim(&self) -> usize {
        match self {
            EnvConfig::Push(_) => 2 * PUSH_NUM_ACTIONS,
            EnvConfig::Keep(_) => 2 * KEEP_ACTION_DIM,
        }
    }

    pub fn training_policies(&self) -> Vec<OpponentPolicy> {
        match self {
            EnvConfig::Push(_) => PUSH_TRAIN_THRESHOLDS
                .iter()
                .map(|&threshold| OpponentPolicy::Push(PushDefenderPolicy { threshold }))
                .collect(),
            EnvConfig::Keep(_) => KEEP_TRAIN_POLICIES
                .iter()
                .map(|&(a, d, f)| OpponentPolicy::Keep(KeepOpponentPolicy::new(a, d, f)))
                .collect(),
        }
    }

    /// Draws one opponent policy from the training or test distribution.
    pub fn sample_opponent<R: Rng + ?Sized>(&self, set: PolicySet, rng: &mut R) -> OpponentPolicy {
        match (self, set) {
            (_, PolicySet::Training) => {
                let all = self.training_policies();
                all[rng.random_range(0..all.len())]
            }
            (EnvConfig::Push(_), PolicySet::Test) => {
                OpponentPolicy::Push(PushDefenderPolicy { threshold: PUSH_TEST_THRESHOLD })
            }
            (EnvConfig::Keep(c), PolicySet::Test) => {
                let draw = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
                let angle = draw(rng, c.test_angle);
                let distance = draw(rng, c.test_distance);
                let force = draw(rng, c.test_force);
                OpponentPolicy::Keep(KeepOpponentPolicy::new(angle, distance, force))
            }
        }
    }
}

/// Free-function form of [`EnvConfig::sample_opponent`].
pub fn sample_opponent_policy<R: Rng + ?Sized>(set: PolicySet, env: &EnvConfig, rng: &mut R) -> OpponentPolicy {
    env.sample_opponent(set, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvState {
    Push(PushState),
    Keep(KeepState),
}

/// A running episode. The opponent is fixed when the episode is created and
/// cannot change until it ends.
#[derive(Clone, Debug)]
pub struct Episode {
    config: EnvConfig,
    opponent: OpponentPolicy,
    state: EnvState,
    observation: Vec<f64>,
}

impl Episode {
    pub fn new(config: &EnvConfig, opponent: OpponentPolicy, seed: u64) -> Result<Self> {
        let (state, observation) = match (config, &opponent) {
            (EnvConfig::Push(c), OpponentPolicy::Push(_)) => {
                let (s, o) = push_reset(c, seed);
                (EnvState::Push(s), o)
            }
            (EnvConfig::Keep(c), OpponentPolicy::Keep(_)) => {
                let (s, o) = keep_reset(c, seed);
                (EnvState::Keep(s), o)
            }
            _ => return Err(EnvError::WrongOpponent),
        };
        Ok(Self { config: config.clone(), opponent, state, observation })
    }

    pub fn observation(&self) -> &[f64] {
        &self.observation
    }

    pub fn opponent(&self) -> &OpponentPolicy {
        &self.opponent
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn step_count(&self) -> usize {
        match &self.state {
            EnvState::Push(s) => s.step,
            EnvState::Keep(s) => s.step,
        }
    }

    pub fn is_done(&self) -> bool {
        self.step_count() >= self.config.horizon()
    }

    pub fn step(&mut self, action: &Action) -> Result<StepRecord> {
        let (state, record) = match (&self.config, &self.state, &self.opponent, action) {
            (EnvConfig::Push(c), EnvState::Push(s), OpponentPolicy::Push(p), Action::Discrete(a)) => {
                let (n, r) = push_step(c, s, *a, p)?;
                (EnvState::Push(n), r)
            }
            (EnvConfig::Keep(c), EnvState::Keep(s), OpponentPolicy::Keep(p), Action::Continuous(f)) => {
                if f.len() != KEEP_ACTION_DIM {
                    return Err(EnvError::InvalidAction(format!("keep force needs 2 components, got {}", f.len())));
                }
                let (n, r) = keep_step(c, s, [f[0], f[1]], p)?;
                (EnvState::Keep(n), r)
            }
            _ => return Err(EnvError::WrongActionKind),
        };
        self.state = state;
        self.observation.clone_from(&record.next_observation);
        Ok(record)
    }
}

/// Header line of an episode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub env: EnvKind,
    pub seed: u64,
    pub opponent: OpponentPolicy,
    pub label: usize,
}

/// Writes a trace: the header as one JSON line, then one line per step.
pub fn write_trace<W: Write>(mut out: W, header: &TraceHeader, steps: &[StepRecord]) -> Result<()> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for s in steps {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<(TraceHeader, Vec<StepRecord>)> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| EnvError::Trace("empty trace".into()))??;
    let header: TraceHeader = serde_json::from_str(&first)?;
    let mut steps = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        steps.push(serde_json::from_str(&line)?);
    }
    Ok((header, steps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn push_state(attacker: Vec2, defender: Vec2) -> PushState {
        PushState { attacker_pos: attacker, attacker_vel: [0.0, 0.0], defender_pos: defender, defender_vel: [0.0, 0.0], step: 0 }
    }

    fn defender_force_dir(cfg: &PushConfig, s: &PushState, d: f64) -> Vec2 {
        let a = PushDefenderPolicy { threshold: d }.act(s, cfg.defender_stop_radius);
        PUSH_DIRECTIONS[a]
    }

    fn dot(a: Vec2, b: Vec2) -> f64 {
        a[0] * b[0] + a[1] * b[1]
    }

    #[test]
    fn push_reset_properties() {
        let cfg = PushConfig::default();
        for seed in 0..20 {
            let (s, obs) = push_reset(&cfg, seed);
            // landmark at the origin: the first two observation entries point at it
            assert_eq!(obs[0], -s.attacker_pos[0]);
            assert_eq!(obs[1], -s.attacker_pos[1]);
            assert_eq!(obs.len(), PUSH_OBS_DIM);
            assert!(s.attacker_pos.iter().chain(&s.defender_pos).all(|v| v.abs() <= cfg.arena));
            assert_eq!(push_reset(&cfg, seed), (s, obs));
        }
    }

    #[test]
    fn push_observation_hides_defender_velocity() {
        let mut s = push_state([0.3, 0.2], [0.5, -0.5]);
        s.attacker_vel = [0.1, -0.2];
        s.defender_vel = [0.7, 0.9];
        assert_eq!(push_observation(&s), vec![-0.3, -0.2, 0.2, -0.7, 0.1, -0.2]);
    }

    #[test]
    fn defender_guards_then_chases() {
        let cfg = PushConfig::default();
        // attacker at distance 0.8 > 0.5: move toward the landmark
        let s = push_state([0.8, 0.0], [0.3, 0.6]);
        let f = defender_force_dir(&cfg, &s, 0.5);
        assert!(dot(f, sub([0.0, 0.0], s.defender_pos)) > 0.0);
        // attacker at distance 0.3 < 0.5: move toward the attacker
        let s = push_state([0.0, -0.3], [0.6, -0.2]);
        let f = defender_force_dir(&cfg, &s, 0.5);
        assert!(dot(f, sub(s.attacker_pos, s.defender_pos)) > 0.0);
    }

    #[test]
    fn threshold_only_switches_defender_goal() {
        let cfg = PushConfig::default();
        let s = push_state([0.4, 0.1], [-0.5, 0.7]);
        let below = push_step(&cfg, &s, 2, &PushDefenderPolicy { threshold: 0.3 }).unwrap();
        let below2 = push_step(&cfg, &s, 2, &PushDefenderPolicy { threshold: 0.35 }).unwrap();
        let above = push_step(&cfg, &s, 2, &PushDefenderPolicy { threshold: 0.5 }).unwrap();
        // same side of the attacker's distance: identical transition
        assert_eq!(below, below2);
        // attacker motion does not depend on the defender's goal in this step
        assert_eq!(below.0.attacker_pos, above.0.attacker_pos);
        assert_ne!(below.1.opp_action, above.1.opp_action);
    }

    #[test]
    fn touching_the_landmark_pays_two() {
        let cfg = PushConfig::default();
        let s = push_state([0.02, 0.0], [0.9, 0.9]);
        let (next, rec) = push_step(&cfg, &s, 0, &PushDefenderPolicy { threshold: 0.1 }).unwrap();
        let eps = norm(next.attacker_pos);
        assert!(eps < cfg.touch_radius);
        assert!((rec.reward - (-eps + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn collision_costs_two() {
        let cfg = PushConfig::default();
        let s = push_state([0.5, 0.5], [0.6, 0.5]);
        let r = push_reward(&cfg, &s);
        assert!((r - (-norm(s.attacker_pos) - 2.0)).abs() < 1e-12);
        // the contact force pushes overlapping agents apart
        let (next, _) = push_step(&cfg, &s, 0, &PushDefenderPolicy { threshold: 0.1 }).unwrap();
        assert!(next.attacker_pos[0] < 0.5 && next.defender_pos[0] > 0.6);
    }

    #[test]
    fn push_rejects_bad_action() {
        let cfg = PushConfig::default();
        let (s, _) = push_reset(&cfg, 0);
        assert!(matches!(
            push_step(&cfg, &s, 5, &PushDefenderPolicy { threshold: 0.5 }),
            Err(EnvError::InvalidAction(_))
        ));
    }

    #[test]
    fn keep_reset_properties() {
        let cfg = KeepConfig::default();
        let (s, obs) = keep_reset(&cfg, 5);
        assert_eq!(obs.len(), KEEP_OBS_DIM);
        assert_eq!(keep_reset(&cfg, 5), (s.clone(), obs));
        let (_, rec) = keep_step(&cfg, &s, [0.0, 0.0], &KeepOpponentPolicy::new(0.0, 1.0, 0.3)).unwrap();
        assert!(rec.reward > -0.2);
    }

    #[test]
    fn keep_reward_is_negative_distance() {
        let cfg = KeepConfig { damping: 1.0, ..KeepConfig::default() };
        // full damping and zero net force: the ball stays at (0.3, 0.4)
        let s = KeepState { ball_pos: [0.3, 0.4], ball_vel: [0.0, 0.0], step: 0 };
        let opp = KeepOpponentPolicy::new(0.0, 0.0, 0.0);
        let (_, rec) = keep_step(&cfg, &s, [0.0, 0.0], &opp).unwrap();
        assert!((rec.reward + 0.5).abs() < 1e-12);
    }

    #[test]
    fn keep_opponent_geometry_and_cancellation() {
        let cfg = KeepConfig::default();
        let opp = KeepOpponentPolicy::new(0.0, 1.0, 0.3);
        let s = KeepState { ball_pos: [0.0, 0.0], ball_vel: [0.0, 0.0], step: 0 };
        let f = opp.act(&s);
        assert!((f[0] - 0.3).abs() < 1e-15 && f[1].abs() < 1e-15);
        let (next, rec) = keep_step(&cfg, &s, [-0.3, 0.0], &opp).unwrap();
        assert_eq!(next.ball_pos, [0.0, 0.0]);
        assert_eq!(next.ball_vel, [0.0, 0.0]);
        assert!(!rec.clamped);
    }

    #[test]
    fn keep_clamps_large_force() {
        let cfg = KeepConfig::default();
        let (s, _) = keep_reset(&cfg, 1);
        let (_, rec) = keep_step(&cfg, &s, [3.0, 4.0], &KeepOpponentPolicy::new(0.0, 1.0, 0.3)).unwrap();
        assert!(rec.clamped);
        match &rec.ego_action {
            Action::Continuous(v) => assert!((norm([v[0], v[1]]) - 2.0).abs() < 1e-12),
            _ => panic!("continuous action expected"),
        }
    }

    #[test]
    fn opponent_sampling_sets() {
        let push = EnvConfig::default_for(EnvKind::Push);
        let keep = EnvConfig::default_for(EnvKind::Keep);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_opponent_policy(PolicySet::Test, &push, &mut rng),
            OpponentPolicy::Push(PushDefenderPolicy { threshold: 0.5 })
        );
        let train = keep.training_policies();
        for _ in 0..100 {
            let p = sample_opponent_policy(PolicySet::Training, &keep, &mut rng);
            assert!(train.contains(&p));
        }
        for _ in 0..10_000 {
            let OpponentPolicy::Keep(k) = sample_opponent_policy(PolicySet::Test, &keep, &mut rng) else {
                panic!("keep opponent expected")
            };
            assert!((-180.0..180.0).contains(&k.angle));
            assert!((0.0..1.0).contains(&k.distance));
            assert!((0.2..1.7).contains(&k.force));
        }
    }

    #[test]
    fn episodes_are_deterministic_and_bounded() {
        for kind in [EnvKind::Push, EnvKind::Keep] {
            let cfg = EnvConfig::default_for(kind);
            let opp = cfg.training_policies()[1];
            let run = || {
                let mut ep = Episode::new(&cfg, opp, 42).unwrap();
                let mut recs = Vec::new();
                let mut k = 0usize;
                while !ep.is_done() {
                    let a = match kind {
                        EnvKind::Push => Action::Discrete(k % 5),
                        EnvKind::Keep => Action::Continuous(vec![(k as f64).sin(), (k as f64).cos()]),
                    };
                    recs.push(ep.step(&a).unwrap());
                    k += 1;
                }
                assert!(ep.step(&recs[0].ego_action).is_err());
                recs
            };
            let a = run();
            assert_eq!(a, run());
            assert_eq!(a.len(), cfg.horizon());
            assert!(a.last().unwrap().done);
            if kind == EnvKind::Keep {
                assert!(a.iter().all(|r| r.reward <= 0.0));
            }
        }
    }

    #[test]
    fn trace_round_trip() {
        let cfg = EnvConfig::default_for(EnvKind::Push);
        let opp = cfg.training_policies()[0];
        let mut ep = Episode::new(&cfg, opp, 3).unwrap();
        let recs: Vec<_> = (0..5).map(|k| ep.step(&Action::Discrete(k % 5)).unwrap()).collect();
        let header = TraceHeader { env: EnvKind::Push, seed: 3, opponent: opp, label: 0 };
        let mut buf = Vec::new();
        write_trace(&mut buf, &header, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 6);
        let (h, r) = read_trace(&buf[..]).unwrap();
        assert_eq!(h, header);
        assert_eq!(r, recs);
    }
}
