use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use super::{ConditionedNet, RepresentationProvider, Result, RlError, StoredRepresentations};
use crate::encoder::ObservationHistory;
use crate::nn::Adam;

/// One transition, stored with the representations the agent acted on.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayEntry {
    pub observation: Vec<f64>,
    pub representation: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_observation: Vec<f64>,
    pub next_representation: Vec<f64>,
    pub done: bool,
    pub episode_id: u64,
    /// Step index within the episode.
    pub step: usize,
    pub label: usize,
}

/// FIFO transition store that also keeps the full observation history of
/// every episode with at least one transition still in the buffer.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<ReplayEntry>,
    histories: HashMap<u64, Arc<ObservationHistory>>,
    order: VecDeque<u64>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), entries: VecDeque::new(), histories: HashMap::new(), order: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push_episode(&mut self, history: Arc<ObservationHistory>, entries: Vec<ReplayEntry>) {
        let id = history.episode_id;
        if entries.is_empty() {
            return;
        }
        self.histories.insert(id, history);
        self.order.push_back(id);
        self.entries.extend(entries);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        let front = self.entries.front().map(|e| e.episode_id);
        while let Some(&old) = self.order.front() {
            if Some(old) == front {
                break;
            }
            self.order.pop_front();
            self.histories.remove(&old);
        }
    }

    pub fn entry(&self, i: usize) -> &ReplayEntry {
        &self.entries[i]
    }

    pub fn history(&self, episode_id: u64) -> Option<&Arc<ObservationHistory>> {
        self.histories.get(&episode_id)
    }

    /// Histories in insertion order.
    pub fn histories(&self) -> Vec<Arc<ObservationHistory>> {
        self.order.iter().map(|id| self.histories[id].clone()).collect()
    }

    /// Uniform indices, with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(RlError::Empty("replay buffer"));
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.entries.len())).collect())
    }
}

/// Linear decay from `start` to `end` over `decay_steps`, then constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    /// Decays over the first `fraction` of `total_steps`.
    pub fn over_fraction(start: f64, end: f64, fraction: f64, total_steps: u64) -> Self {
        Self { start, end, decay_steps: ((total_steps as f64) * fraction).round() as u64 }
    }

    pub fn value(&self, step: u64) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        self.start + (self.end - self.start) * step as f64 / self.decay_steps as f64
    }
}

fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Epsilon-greedy action; ties go to the lowest index.
pub fn dqn_act<R: Rng + ?Sized>(
    observation: &[f64],
    representation: &[f64],
    q: &ConditionedNet,
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    let explore = rng.random::<f64>() < epsilon;
    if explore {
        return Ok(rng.random_range(0..q.output_dim()));
    }
    let obs = Array2::from_shape_vec((1, observation.len()), observation.to_vec()).expect("row");
    let rep = Array2::from_shape_vec((1, representation.len()), representation.to_vec()).expect("row");
    let values = q.predict(&obs, &rep)?;
    Ok(argmax(values.row(0).iter().copied()))
}

/// Huber loss with unit threshold and its derivative.
pub fn huber(x: f64) -> (f64, f64) {
    if x.abs() <= 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// A minibatch of transitions in matrix form.
#[derive(Clone, Debug)]
pub struct DqnBatch {
    pub observations: Array2<f64>,
    pub representations: Array2<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_observations: Array2<f64>,
    pub next_representations: Array2<f64>,
    pub dones: Vec<bool>,
}

impl DqnBatch {
    pub fn from_entries(entries: &[&ReplayEntry]) -> Result<Self> {
        let first = entries.first().ok_or(RlError::Empty("dqn batch"))?;
        let (n, od, rd) = (entries.len(), first.observation.len(), first.representation.len());
        let mat = |f: &dyn Fn(&ReplayEntry) -> &Vec<f64>, d: usize| -> Result<Array2<f64>> {
            let mut m = Array2::zeros((n, d));
            for (i, e) in entries.iter().enumerate() {
                let v = f(e);
                if v.len() != d {
                    return Err(RlError::Shape(format!("entry {i} has {} values, expected {d}", v.len())));
                }
                m.row_mut(i).assign(&ndarray::ArrayView1::from(v.as_slice()));
            }
            Ok(m)
        };
        Ok(Self {
            observations: mat(&|e| &e.observation, od)?,
            representations: mat(&|e| &e.representation, rd)?,
            actions: entries.iter().map(|e| e.action).collect(),
            rewards: entries.iter().map(|e| e.reward).collect(),
            next_observations: mat(&|e| &e.next_observation, od)?,
            next_representations: mat(&|e| &e.next_representation, rd)?,
            dones: entries.iter().map(|e| e.done).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// `r + gamma * max_a' Q_target(o', rep', a')`, without bootstrap at `done`.
pub fn td_targets(target: &ConditionedNet, batch: &DqnBatch, gamma: f64) -> Result<Vec<f64>> {
    let next = target.predict(&batch.next_observations, &batch.next_representations)?;
    Ok((0..batch.len())
        .map(|i| {
            if batch.dones[i] {
                batch.rewards[i]
            } else {
                let m = next.row(i).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                batch.rewards[i] + gamma * m
            }
        })
        .collect())
}

/// Mean Huber TD loss with gradients accumulated into `q`; returns the
/// loss and its gradient with respect to `representations`.
pub fn dqn_loss_backward(
    q: &mut ConditionedNet,
    observations: &Array2<f64>,
    representations: &Array2<f64>,
    actions: &[usize],
    targets: &[f64],
) -> Result<(f64, Array2<f64>)> {
    let values = q.forward(observations, representations)?;
    let n = actions.len() as f64;
    let mut grad = Array2::zeros(values.raw_dim());
    let mut loss = 0.0;
    for (i, (&a, &t)) in actions.iter().zip(targets).enumerate() {
        if a >= values.ncols() {
            return Err(RlError::Shape(format!("action {a} with {} outputs", values.ncols())));
        }
        let (l, d) = huber(values[[i, a]] - t);
        loss += l;
        grad[[i, a]] = d / n;
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(RlError::NonFinite("dqn loss"));
    }
    let grad_rep = q.backward(&grad)?;
    Ok((loss, grad_rep))
}

/// One Adam step on the Q-network only. The representations in the batch
/// are inputs; nothing flows back to the encoder.
pub fn dqn_update(
    batch: &DqnBatch,
    q: &mut ConditionedNet,
    target: &ConditionedNet,
    gamma: f64,
    adam: &mut Adam,
) -> Result<f64> {
    let targets = td_targets(target, batch, gamma)?;
    q.zero_grad();
    let (loss, _) = dqn_loss_backward(q, &batch.observations, &batch.representations, &batch.actions, &targets)?;
    adam.step(&mut q.networks_mut())?;
    Ok(loss)
}

/// Q-network, target network and optimizer with periodic hard target sync.
#[derive(Clone, Debug)]
pub struct DqnLearner {
    pub q: ConditionedNet,
    pub target: ConditionedNet,
    pub adam: Adam,
    pub gamma: f64,
    pub target_sync: u64,
    updates: u64,
    syncs: u64,
}

impl DqnLearner {
    pub fn new(q: ConditionedNet, learning_rate: f64, gamma: f64, target_sync: u64) -> Self {
        let target = q.clone();
        Self { q, target, adam: Adam::new(learning_rate), gamma, target_sync: target_sync.max(1), updates: 0, syncs: 0 }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn syncs(&self) -> u64 {
        self.syncs
    }

    pub fn update(&mut self, batch: &DqnBatch) -> Result<f64> {
        self.update_with(batch, &mut StoredRepresentations)
    }

    /// Update where the current-state representations come from `reps`,
    /// which also receives their gradient. Targets use the stored
    /// next-state representations.
    pub fn update_with(&mut self, batch: &DqnBatch, reps: &mut dyn RepresentationProvider) -> Result<f64> {
        let targets = td_targets(&self.target, batch, self.gamma)?;
        let ids: Vec<usize> = (0..batch.len()).collect();
        let rep = reps.representations(&ids, &batch.representations)?;
        self.q.zero_grad();
        let (loss, grad_rep) = dqn_loss_backward(&mut self.q, &batch.observations, &rep, &batch.actions, &targets)?;
        self.adam.step(&mut self.q.networks_mut())?;
        reps.backward(&grad_rep)?;
        self.updates += 1;
        if self.updates % self.target_sync == 0 {
            self.target.copy_params_from(&self.q)?;
            self.syncs += 1;
        }
        Ok(loss)
    }
}
