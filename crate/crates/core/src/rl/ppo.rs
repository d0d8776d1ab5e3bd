use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{ConditionedNet, RepresentationProvider, Result, RlError};
use crate::nn::{grad_norm, Adam, Tensor};

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Radial squash of a pre-activation `u` into the disk of radius `bound`:
/// `bound * tanh(|u|) * u / |u|`.
pub fn squash(u: &[f64], bound: f64) -> Vec<f64> {
    let r = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = if r < 1e-12 { bound } else { bound * r.tanh() / r };
    u.iter().map(|v| v * scale).collect()
}

/// `log |det d squash / du|` at `u`.
pub fn squash_log_det(u: &[f64], bound: f64) -> f64 {
    let d = u.len() as f64;
    let r = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    // log(1 - tanh(r)^2) = 2 (ln 2 - r - softplus(-2r))
    let radial = bound.ln() + 2.0 * (std::f64::consts::LN_2 - r - softplus(-2.0 * r));
    let ratio = if r < 1e-6 { 1.0 - r * r / 3.0 } else { r.tanh() / r };
    radial + (d - 1.0) * (bound * ratio).ln()
}

/// Diagonal Gaussian log-density.
pub fn gaussian_log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    u.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - half_log_2pi
        })
        .sum()
}

/// Gaussian policy over a pre-squash action with a learnable,
/// state-independent log standard deviation. The policy network supplies
/// the mean.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub log_std: Tensor,
    pub bound: f64,
}

impl GaussianHead {
    pub fn new(dim: usize, init_log_std: f64, bound: f64) -> Self {
        Self { log_std: Tensor::from_vec(&[dim], vec![init_log_std; dim]).expect("1-D"), bound }
    }

    pub fn dim(&self) -> usize {
        self.log_std.len()
    }

    /// Draws `(u, squash(u), log N(u))`.
    pub fn sample<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> (Vec<f64>, Vec<f64>, f64) {
        let u: Vec<f64> = mean
            .iter()
            .zip(self.log_std.data())
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = gaussian_log_prob(&u, mean, self.log_std.data());
        let a = squash(&u, self.bound);
        (u, a, lp)
    }

    /// Density of the pre-squash sample `u`; this is what the PPO ratio uses.
    pub fn raw_log_prob(&self, mean: &[f64], u: &[f64]) -> f64 {
        gaussian_log_prob(u, mean, self.log_std.data())
    }

    /// Density of the squashed action `squash(u)`.
    pub fn log_prob(&self, mean: &[f64], u: &[f64]) -> f64 {
        self.raw_log_prob(mean, u) - squash_log_det(u, self.bound)
    }

    pub fn mean_action(&self, mean: &[f64]) -> Vec<f64> {
        squash(mean, self.bound)
    }

    /// Entropy of the pre-squash Gaussian.
    pub fn entropy(&self) -> f64 {
        let c = 0.5 * (2.0 * PI * std::f64::consts::E).ln();
        self.log_std.data().iter().map(|ls| ls + c).sum()
    }
}

/// Generalized advantage estimation over one trajectory. Returns
/// `(advantages, returns)`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_v * live - values[t];
        acc = delta + gamma * lambda * live * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutStep {
    pub observation: Vec<f64>,
    pub representation: Vec<f64>,
    /// Pre-squash action.
    pub raw_action: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub episode_id: u64,
    pub label: usize,
    pub steps: Vec<RolloutStep>,
}

/// Flattened rollout samples with advantages and returns.
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub observations: Array2<f64>,
    pub representations: Array2<f64>,
    pub raw_actions: Array2<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub episode_ids: Vec<u64>,
    /// Step index of each sample within its episode.
    pub steps: Vec<usize>,
}

impl RolloutBatch {
    pub fn from_trajectories(trajectories: &[Trajectory], gamma: f64, lambda: f64) -> Result<Self> {
        let total: usize = trajectories.iter().map(|t| t.steps.len()).sum();
        let first = trajectories.iter().flat_map(|t| t.steps.first()).next().ok_or(RlError::Empty("rollout"))?;
        let (od, rd, ad) = (first.observation.len(), first.representation.len(), first.raw_action.len());
        let mut b = Self {
            observations: Array2::zeros((total, od)),
            representations: Array2::zeros((total, rd)),
            raw_actions: Array2::zeros((total, ad)),
            log_probs: Vec::with_capacity(total),
            values: Vec::with_capacity(total),
            advantages: Vec::with_capacity(total),
            returns: Vec::with_capacity(total),
            episode_ids: Vec::with_capacity(total),
            steps: Vec::with_capacity(total),
        };
        let mut row = 0;
        for tr in trajectories {
            let r: Vec<f64> = tr.steps.iter().map(|s| s.reward).collect();
            let v: Vec<f64> = tr.steps.iter().map(|s| s.value).collect();
            let d: Vec<bool> = tr.steps.iter().map(|s| s.done).collect();
            let (adv, ret) = gae(&r, &v, &d, 0.0, gamma, lambda);
            for (k, s) in tr.steps.iter().enumerate() {
                if s.observation.len() != od || s.representation.len() != rd || s.raw_action.len() != ad {
                    return Err(RlError::Shape("ragged rollout step".into()));
                }
                b.observations.row_mut(row).assign(&Array1::from(s.observation.clone()));
                b.representations.row_mut(row).assign(&Array1::from(s.representation.clone()));
                b.raw_actions.row_mut(row).assign(&Array1::from(s.raw_action.clone()));
                b.log_probs.push(s.log_prob);
                b.values.push(s.value);
                b.advantages.push(adv[k]);
                b.returns.push(ret[k]);
                b.episode_ids.push(tr.episode_id);
                b.steps.push(k);
                row += 1;
            }
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
    pub clip: f64,
    /// Number of minibatch gradient steps per update.
    pub repeats: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: Option<f64>,
    pub gamma: f64,
    pub lambda: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            repeats: 80,
            minibatch: 1024,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: Some(10.0),
            gamma: 0.99,
            lambda: 0.95,
            normalize_advantages: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Mean ratio on the first minibatch, before any parameter change.
    pub first_ratio: f64,
}

/// One action drawn by the learner for one running episode.
#[derive(Clone, Debug, PartialEq)]
pub struct ActSample {
    pub raw: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct PpoLearner {
    pub policy: ConditionedNet,
    pub value: ConditionedNet,
    pub head: GaussianHead,
    pub adam: Adam,
    pub config: PpoConfig,
}

impl PpoLearner {
    pub fn new(policy: ConditionedNet, value: ConditionedNet, head: GaussianHead, learning_rate: f64, config: PpoConfig) -> Self {
        Self { policy, value, head, adam: Adam::new(learning_rate), config }
    }

    pub fn fingerprint(&self) -> u64 {
        let ls = self.head.log_std.data().iter().fold(0u64, |h, v| h.rotate_left(7) ^ v.to_bits());
        self.policy.fingerprint() ^ self.value.fingerprint().rotate_left(11) ^ ls
    }

    /// Samples one action per row of `obs` / `reps`.
    pub fn act<R: Rng + ?Sized>(&self, obs: &Array2<f64>, reps: &Array2<f64>, rng: &mut R) -> Result<Vec<ActSample>> {
        let mean = self.policy.predict(obs, reps)?;
        let value = self.value.predict(obs, reps)?;
        Ok((0..obs.nrows())
            .map(|i| {
                let m = mean.row(i).to_vec();
                let (raw, action, log_prob) = self.head.sample(&m, rng);
                ActSample { raw, action, log_prob, value: value[[i, 0]] }
            })
            .collect())
    }

    /// Deterministic actions: the squashed mean.
    pub fn act_mean(&self, obs: &Array2<f64>, reps: &Array2<f64>) -> Result<Vec<Vec<f64>>> {
        let mean = self.policy.predict(obs, reps)?;
        Ok(mean.rows().into_iter().map(|m| self.head.mean_action(&m.to_vec())).collect())
    }

    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &RolloutBatch,
        reps: &mut dyn RepresentationProvider,
        rng: &mut R,
    ) -> Result<PpoStats> {
        ppo_update(self, batch, reps, rng)
    }
}

/// Clipped-surrogate PPO: `repeats` gradient steps, each on a fresh random
/// minibatch drawn without replacement from the rollout.
pub fn ppo_update<R: Rng + ?Sized>(
    learner: &mut PpoLearner,
    batch: &RolloutBatch,
    reps: &mut dyn RepresentationProvider,
    rng: &mut R,
) -> Result<PpoStats> {
    if batch.is_empty() {
        return Err(RlError::Empty("rollout"));
    }
    let cfg = learner.config.clone();
    let d = learner.head.dim();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut stats = PpoStats::default();
    for rep_i in 0..cfg.repeats {
        order.shuffle(rng);
        let ids = &order[..cfg.minibatch.min(batch.len())];
        let m = ids.len() as f64;
        let obs = batch.observations.select(Axis(0), ids);
        let stored = batch.representations.select(Axis(0), ids);
        let raw = batch.raw_actions.select(Axis(0), ids);
        let mut adv: Vec<f64> = ids.iter().map(|&i| batch.advantages[i]).collect();
        if cfg.normalize_advantages && adv.len() > 1 {
            let mu = adv.iter().sum::<f64>() / m;
            let sd = (adv.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / m).sqrt();
            adv.iter_mut().for_each(|a| *a = (*a - mu) / (sd + 1e-8));
        }

        let rep = reps.representations(ids, &stored)?;
        learner.policy.zero_grad();
        learner.value.zero_grad();
        let mean = learner.policy.forward(&obs, &rep)?;
        let value = learner.value.forward(&obs, &rep)?;
        let log_std = learner.head.log_std.data().to_vec();
        let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();

        let mut g_mean = Array2::zeros(mean.raw_dim());
        let mut g_log_std = vec![0.0; d];
        let mut g_value = Array2::zeros(value.raw_dim());
        let (mut pl, mut vl, mut kl, mut clipped, mut ratio_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (r, &i) in ids.iter().enumerate() {
            let u = raw.row(r);
            let mu = mean.row(r);
            let lp = gaussian_log_prob(u.as_slice().expect("row"), &mu.to_vec(), &log_std);
            let ratio = (lp - batch.log_probs[i]).exp();
            if !ratio.is_finite() {
                return Err(RlError::NonFinite("ppo ratio"));
            }
            ratio_sum += ratio;
            let a = adv[r];
            let s1 = ratio * a;
            let s2 = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a;
            pl -= s1.min(s2);
            kl += batch.log_probs[i] - lp;
            if (ratio - 1.0).abs() > cfg.clip {
                clipped += 1.0;
            }
            let dl_dlp = if s1 <= s2 { -a * ratio } else { 0.0 };
            for k in 0..d {
                let e = u[k] - mu[k];
                g_mean[[r, k]] = dl_dlp * e * inv_var[k] / m;
                g_log_std[k] += dl_dlp * (e * e * inv_var[k] - 1.0) / m;
            }
            let err = value[[r, 0]] - batch.returns[i];
            vl += err * err;
            g_value[[r, 0]] = cfg.value_coef * 2.0 * err / m;
        }
        for g in g_log_std.iter_mut() {
            *g -= cfg.entropy_coef;
        }
        if rep_i == 0 {
            stats.first_ratio = ratio_sum / m;
        }
        stats.policy_loss = pl / m;
        stats.value_loss = vl / m;
        stats.approx_kl = kl / m;
        stats.clip_fraction = clipped / m;
        stats.entropy = learner.head.entropy();
        if !(stats.policy_loss.is_finite() && stats.value_loss.is_finite()) {
            return Err(RlError::NonFinite("ppo loss"));
        }

        let gr_p = learner.policy.backward(&g_mean)?;
        let gr_v = learner.value.backward(&g_value)?;
        reps.backward(&(gr_p + gr_v))?;

        let mut g_ls = Tensor::from_vec(&[d], g_log_std)?;
        if let Some(max) = cfg.max_grad_norm {
            let nets = [learner.policy.networks(), learner.value.networks()].concat();
            let n_nets = grad_norm(&nets);
            let ls_sq: f64 = g_ls.data().iter().map(|v| v * v).sum();
            let total = (n_nets * n_nets + ls_sq).sqrt();
            if total > max {
                let s = max / total;
                for net in learner.policy.networks_mut().into_iter().chain(learner.value.networks_mut()) {
                    net.grads_mut().iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
                }
                g_ls.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        let [p0, p1] = learner.policy.networks_mut();
        let [v0, v1] = learner.value.networks_mut();
        learner.adam.step_with(&mut [p0, p1, v0, v1], &mut [(&mut learner.head.log_std, &g_ls)])?;
    }
    Ok(stats)
}
