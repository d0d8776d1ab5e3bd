//! Recurrent encoder from observation histories to policy representations,
//! and the losses it can be trained with: the metric embedding loss, a
//! triplet loss and opponent-action prediction.

use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distmath::{Action, PolicyDistanceMatrix};
use crate::nn::{self, clip_grad_norm, dense, Activation, Adam, LayerSpec, Network, NnError, RecurrentState, SeqBatch};

pub const REPRESENTATION_DIM: usize = 32;
pub const DEFAULT_TRIPLET_MARGIN: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("observation has {got} values, expected {expected}")]
    ObservationDim { expected: usize, got: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("no distance entry for labels ({0}, {1})")]
    MissingDistance(usize, usize),
    #[error("label contract violated: {0}")]
    Labels(String),
    #[error("opponent action does not fit the prediction head: {0}")]
    ActionKind(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Observations of one episode, in time order, with the label of the
/// opponent policy that produced it. Opponent actions are kept alongside
/// for the action-prediction baseline; the encoder itself never reads them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationHistory {
    pub episode_id: u64,
    pub label: usize,
    obs_dim: usize,
    data: Vec<f64>,
    opponent_actions: Vec<Vec<Action>>,
}

impl ObservationHistory {
    pub fn new(episode_id: u64, label: usize, obs_dim: usize) -> Self {
        Self { episode_id, label, obs_dim, data: Vec::new(), opponent_actions: Vec::new() }
    }

    pub fn from_observations(episode_id: u64, label: usize, obs_dim: usize, obs: &[Vec<f64>]) -> Result<Self> {
        let mut h = Self::new(episode_id, label, obs_dim);
        for o in obs {
            h.push(o, Vec::new())?;
        }
        Ok(h)
    }

    /// Appends the observation seen at one step and the opponent actions
    /// taken at that step (may be empty when unknown).
    pub fn push(&mut self, observation: &[f64], opponent_action: Vec<Action>) -> Result<()> {
        if observation.len() != self.obs_dim {
            return Err(EncoderError::ObservationDim { expected: self.obs_dim, got: observation.len() });
        }
        self.data.extend_from_slice(observation);
        self.opponent_actions.push(opponent_action);
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.obs_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn observation(&self, t: usize) -> &[f64] {
        &self.data[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn opponent_action(&self, t: usize) -> &[Action] {
        &self.opponent_actions[t]
    }

    /// The first `len` observations.
    pub fn prefix(&self, len: usize) -> Self {
        Self {
            episode_id: self.episode_id,
            label: self.label,
            obs_dim: self.obs_dim,
            data: self.data[..len * self.obs_dim].to_vec(),
            opponent_actions: self.opponent_actions[..len].to_vec(),
        }
    }
}

/// Layer layout of an encoder: a recurrent trunk followed by an embedding
/// head producing the representation.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub recurrent: Vec<LayerSpec>,
    pub head: Vec<LayerSpec>,
}

impl EncoderSpec {
    /// Stacked LSTM trunk with a linear embedding layer.
    pub fn lstm(obs_dim: usize, hidden: usize, layers: usize, rep_dim: usize) -> Self {
        let mut recurrent = Vec::new();
        for i in 0..layers {
            recurrent.push(LayerSpec::Lstm { input: if i == 0 { obs_dim } else { hidden }, hidden });
        }
        Self { recurrent, head: vec![dense(hidden, rep_dim, Activation::Identity)] }
    }

    /// Single GRU layer with a tanh embedding layer.
    pub fn gru(obs_dim: usize, hidden: usize, rep_dim: usize) -> Self {
        Self {
            recurrent: vec![LayerSpec::Gru { input: obs_dim, hidden }],
            head: vec![dense(hidden, rep_dim, Activation::Tanh)],
        }
    }
}

/// Incremental encoding state for a batch of running episodes.
#[derive(Clone, Debug)]
pub struct EncoderState {
    state: RecurrentState,
    batch: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    recurrent: Network,
    head: Network,
    /// Layout of the last taped prefix pass: (steps, batch).
    taped: Option<(usize, usize)>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        let recurrent = Network::new(spec.recurrent, seed)?;
        let head = Network::new(spec.head, seed.wrapping_add(0x9e37_79b9))?;
        Self::from_networks(recurrent, head)
    }

    pub fn from_networks(recurrent: Network, head: Network) -> Result<Self> {
        if recurrent.output_dim() != head.input_dim() {
            return Err(NnError::Shape(format!(
                "trunk emits {} features, head expects {}",
                recurrent.output_dim(),
                head.input_dim()
            ))
            .into());
        }
        Ok(Self { recurrent, head, taped: None })
    }

    pub fn obs_dim(&self) -> usize {
        self.recurrent.input_dim()
    }

    pub fn rep_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn recurrent(&self) -> &Network {
        &self.recurrent
    }

    pub fn head(&self) -> &Network {
        &self.head
    }

    pub fn networks_mut(&mut self) -> [&mut Network; 2] {
        [&mut self.recurrent, &mut self.head]
    }

    pub fn zero_grad(&mut self) {
        self.recurrent.zero_grad();
        self.head.zero_grad();
    }

    pub fn num_parameters(&self) -> usize {
        self.recurrent.num_parameters() + self.head.num_parameters()
    }

    pub fn fingerprint(&self) -> u64 {
        self.recurrent.fingerprint() ^ self.head.fingerprint().rotate_left(17)
    }

    /// Representation after consuming the whole history. The empty history
    /// maps to the head applied to the zero recurrent state.
    pub fn encode(&self, history: &ObservationHistory) -> Result<Vec<f64>> {
        self.check_dim(history)?;
        let hidden = if history.is_empty() {
            Array2::zeros((1, self.recurrent.output_dim()))
        } else {
            let x = Array2::from_shape_vec((history.len(), self.obs_dim()), history.data.clone())
                .expect("history length is a multiple of obs_dim");
            let (out, _) = self.recurrent.predict(&SeqBatch::new(history.len(), 1, x)?, None)?;
            out.last_step().to_owned()
        };
        Ok(self.head.predict_batch(&hidden)?.row(0).to_vec())
    }

    pub fn start(&self, batch: usize) -> EncoderState {
        EncoderState { state: self.recurrent.zero_state(batch), batch }
    }

    /// Feeds one observation per running episode (`[batch, obs_dim]`).
    pub fn advance(&self, state: &mut EncoderState, observations: &Array2<f64>) -> Result<()> {
        if observations.nrows() != state.batch {
            return Err(NnError::Shape(format!("{} observations for {} episodes", observations.nrows(), state.batch)).into());
        }
        let (_, next) = self.recurrent.predict(&SeqBatch::single(observations.clone()), Some(&state.state))?;
        state.state = next;
        Ok(())
    }

    /// Current representations, `[batch, rep_dim]`.
    pub fn current(&self, state: &EncoderState) -> Result<Array2<f64>> {
        let h = state.state.top_hidden().cloned().unwrap_or_else(|| Array2::zeros((state.batch, self.recurrent.output_dim())));
        Ok(self.head.predict_batch(&h)?)
    }

    fn check_dim(&self, history: &ObservationHistory) -> Result<()> {
        if history.obs_dim() != self.obs_dim() {
            return Err(EncoderError::ObservationDim { expected: self.obs_dim(), got: history.obs_dim() });
        }
        Ok(())
    }

    fn pack(&self, histories: &[&ObservationHistory]) -> Result<SeqBatch> {
        let steps = histories.iter().map(|h| h.len()).max().unwrap_or(0).max(1);
        let b = histories.len();
        let d = self.obs_dim();
        let mut x = Array2::zeros((steps * b, d));
        for (j, h) in histories.iter().enumerate() {
            self.check_dim(h)?;
            for t in 0..h.len() {
                x.row_mut(t * b + j).assign(&ndarray::ArrayView1::from(h.observation(t)));
            }
        }
        Ok(SeqBatch::new(steps, b, x)?)
    }

    fn head_input(&self, hidden: &SeqBatch) -> Array2<f64> {
        let (b, hdim) = (hidden.batch(), hidden.features());
        let mut z = Array2::zeros(((hidden.steps() + 1) * b, hdim));
        z.slice_mut(s![b.., ..]).assign(hidden.data());
        z
    }

    /// Representations of every prefix of every history, recorded for
    /// [`Encoder::backward_prefixes`]. Row `t * batch + j` holds the
    /// representation of the first `t` observations of history `j`, for
    /// `t` in `0..=max_len`. Rows past a history's end are padding.
    pub fn forward_prefixes(&mut self, histories: &[&ObservationHistory]) -> Result<Array2<f64>> {
        if histories.is_empty() {
            return Err(EncoderError::Empty("history batch"));
        }
        let x = self.pack(histories)?;
        let (hidden, _) = self.recurrent.forward(&x, None)?;
        let reps = self.head.forward_batch(&self.head_input(&hidden))?;
        self.taped = Some((x.steps(), x.batch()));
        Ok(reps)
    }

    /// Untaped [`Encoder::forward_prefixes`].
    pub fn predict_prefixes(&self, histories: &[&ObservationHistory]) -> Result<Array2<f64>> {
        if histories.is_empty() {
            return Err(EncoderError::Empty("history batch"));
        }
        let x = self.pack(histories)?;
        let (hidden, _) = self.recurrent.predict(&x, None)?;
        Ok(self.head.predict_batch(&self.head_input(&hidden))?)
    }

    /// Accumulates parameter gradients given the loss gradient with respect
    /// to the rows returned by the last [`Encoder::forward_prefixes`].
    pub fn backward_prefixes(&mut self, grad: &Array2<f64>) -> Result<()> {
        let (steps, b) = self.taped.take().ok_or(NnError::NoForward)?;
        let gz = self.head.backward(&SeqBatch::single(grad.clone()))?;
        // the t = 0 rows come from the constant zero state
        let gh = gz.data().slice(s![b.., ..]).to_owned();
        self.recurrent.backward(&SeqBatch::new(steps, b, gh)?)?;
        Ok(())
    }

    /// Full-history representations, taped.
    pub fn forward_final(&mut self, histories: &[&ObservationHistory]) -> Result<(Array2<f64>, Vec<usize>)> {
        let all = self.forward_prefixes(histories)?;
        let rows = final_rows(histories);
        Ok((all.select(Axis(0), &rows), rows))
    }

    pub fn predict_final(&self, histories: &[&ObservationHistory]) -> Result<Array2<f64>> {
        let all = self.predict_prefixes(histories)?;
        Ok(all.select(Axis(0), &final_rows(histories)))
    }

    /// Backward for [`Encoder::forward_final`]: scatters the per-history
    /// gradient back into prefix rows.
    pub fn backward_final(&mut self, rows: &[usize], grad: &Array2<f64>) -> Result<()> {
        let (steps, b) = self.taped.ok_or(NnError::NoForward)?;
        let mut full = Array2::zeros(((steps + 1) * b, self.rep_dim()));
        for (k, &r) in rows.iter().enumerate() {
            let mut dst = full.row_mut(r);
            dst += &grad.row(k);
        }
        self.backward_prefixes(&full)
    }
}

fn final_rows(histories: &[&ObservationHistory]) -> Vec<usize> {
    let b = histories.len();
    histories.iter().enumerate().map(|(j, h)| h.len() * b + j).collect()
}

/// Gradient-step settings shared by the encoder trainers.
#[derive(Clone, Debug)]
pub struct EncoderOptimizer {
    pub adam: Adam,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl EncoderOptimizer {
    pub fn new(learning_rate: f64, clip: Option<f64>) -> Self {
        Self { adam: Adam::new(learning_rate), clip }
    }

    pub fn apply(&mut self, nets: &mut [&mut Network]) -> Result<()> {
        if let Some(c) = self.clip {
            clip_grad_norm(nets, c);
        }
        self.adam.step(nets)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbedPair {
    pub i: usize,
    pub j: usize,
    pub target: f64,
}

/// Pairs of histories with the policy distance their representations
/// should reproduce. Pairs index into `histories`, so each history is
/// encoded once however many pairs use it.
#[derive(Clone, Debug)]
pub struct EmbedBatch {
    pub histories: Vec<Arc<ObservationHistory>>,
    pub pairs: Vec<EmbedPair>,
}

impl EmbedBatch {
    pub fn history_refs(&self) -> Vec<&ObservationHistory> {
        self.histories.iter().map(|h| h.as_ref()).collect()
    }

    /// Every unordered pair of the given histories.
    pub fn all_pairs(histories: Vec<Arc<ObservationHistory>>, distances: &PolicyDistanceMatrix) -> Result<Self> {
        let mut pairs = Vec::new();
        for i in 0..histories.len() {
            for j in i + 1..histories.len() {
                pairs.push(EmbedPair { i, j, target: lookup(distances, histories[i].label, histories[j].label)? });
            }
        }
        Ok(Self { histories, pairs })
    }
}

fn lookup(d: &PolicyDistanceMatrix, a: usize, b: usize) -> Result<f64> {
    d.get(a, b).ok_or(EncoderError::MissingDistance(a, b))
}

/// Draws `batch_size` pairs uniformly with replacement from the buffer.
pub fn sample_embed_batch<R: Rng + ?Sized>(
    buffer: &[Arc<ObservationHistory>],
    distances: &PolicyDistanceMatrix,
    batch_size: usize,
    rng: &mut R,
) -> Result<EmbedBatch> {
    if buffer.is_empty() {
        return Err(EncoderError::Empty("history buffer"));
    }
    let mut histories = Vec::with_capacity(2 * batch_size);
    let mut pairs = Vec::with_capacity(batch_size);
    for k in 0..batch_size {
        let a = buffer[rng.random_range(0..buffer.len())].clone();
        let b = buffer[rng.random_range(0..buffer.len())].clone();
        let target = lookup(distances, a.label, b.label)?;
        histories.push(a);
        histories.push(b);
        pairs.push(EmbedPair { i: 2 * k, j: 2 * k + 1, target });
    }
    Ok(EmbedBatch { histories, pairs })
}

/// Mean over pairs of `(||r_i - r_j|| - target)^2`, with its gradient with
/// respect to the representation rows.
pub fn embed_loss_from_reps(reps: ArrayView2<f64>, pairs: &[EmbedPair]) -> Result<(f64, Array2<f64>)> {
    if pairs.is_empty() {
        return Err(EncoderError::Empty("pair batch"));
    }
    let mut grad = Array2::zeros(reps.raw_dim());
    let mut loss = 0.0;
    let n = pairs.len() as f64;
    for p in pairs {
        let delta = &reps.row(p.i) - &reps.row(p.j);
        let dist = delta.dot(&delta).sqrt();
        let err = dist - p.target;
        loss += err * err;
        // at dist = 0 the norm is not differentiable; take the zero subgradient
        if dist > 1e-12 {
            let g = &delta * (2.0 * err / (n * dist));
            let mut gi = grad.row_mut(p.i);
            gi += &g;
            let mut gj = grad.row_mut(p.j);
            gj -= &g;
        }
    }
    Ok((loss / n, grad))
}

pub fn embed_loss(batch: &EmbedBatch, encoder: &Encoder) -> Result<f64> {
    let reps = encoder.predict_final(&batch.history_refs())?;
    Ok(embed_loss_from_reps(reps.view(), &batch.pairs)?.0)
}

/// Accumulates the embedding-loss gradient into the encoder and returns the loss.
pub fn embed_loss_backward(batch: &EmbedBatch, encoder: &mut Encoder) -> Result<f64> {
    let (reps, rows) = encoder.forward_final(&batch.history_refs())?;
    let (loss, grad) = embed_loss_from_reps(reps.view(), &batch.pairs)?;
    encoder.backward_final(&rows, &grad)?;
    Ok(loss)
}

/// One optimizer step on the embedding loss.
pub fn embed_step(batch: &EmbedBatch, encoder: &mut Encoder, opt: &mut EncoderOptimizer) -> Result<f64> {
    encoder.zero_grad();
    let loss = embed_loss_backward(batch, encoder)?;
    opt.apply(&mut encoder.networks_mut())?;
    Ok(loss)
}

/// `max(0, ||a - p||^2 - ||a - n||^2 + margin)` and its gradients for
/// `(a, p, n)`.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> (f64, [Vec<f64>; 3]) {
    let dap: f64 = a.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum();
    let dan: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum();
    let v = dap - dan + margin;
    if v <= 0.0 {
        let z = vec![0.0; a.len()];
        return (0.0, [z.clone(), z.clone(), z]);
    }
    let ga = p.iter().zip(n).map(|(y, z)| 2.0 * (z - y)).collect();
    let gp = a.iter().zip(p).map(|(x, y)| 2.0 * (y - x)).collect();
    let gn = a.iter().zip(n).map(|(x, z)| 2.0 * (x - z)).collect();
    (v, [ga, gp, gn])
}

/// Anchor/positive/negative index triples into `histories`.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub histories: Vec<Arc<ObservationHistory>>,
    pub triplets: Vec<[usize; 3]>,
    pub margin: f64,
}

impl TripletBatch {
    pub fn validate(&self) -> Result<()> {
        for t in &self.triplets {
            let [a, p, n] = t.map(|k| self.histories[k].label);
            if a != p || a == n {
                return Err(EncoderError::Labels(format!("triplet labels ({a}, {p}, {n})")));
            }
        }
        Ok(())
    }
}

/// Draws anchors uniformly, then a positive with the anchor's label and a
/// negative with any other label.
pub fn sample_triplet_batch<R: Rng + ?Sized>(
    buffer: &[Arc<ObservationHistory>],
    batch_size: usize,
    margin: f64,
    rng: &mut R,
) -> Result<TripletBatch> {
    if buffer.is_empty() {
        return Err(EncoderError::Empty("history buffer"));
    }
    let mut histories = Vec::new();
    let mut triplets = Vec::new();
    let mut tries = 0;
    while triplets.len() < batch_size {
        tries += 1;
        if tries > 100 * batch_size.max(1) {
            return Err(EncoderError::Labels("buffer needs two labels with at least one history each".into()));
        }
        let a = &buffer[rng.random_range(0..buffer.len())];
        let same: Vec<_> = buffer.iter().filter(|h| h.label == a.label).collect();
        let other: Vec<_> = buffer.iter().filter(|h| h.label != a.label).collect();
        if other.is_empty() {
            continue;
        }
        let p = same[rng.random_range(0..same.len())];
        let n = other[rng.random_range(0..other.len())];
        let base = histories.len();
        histories.extend([a.clone(), p.clone(), n.clone()]);
        triplets.push([base, base + 1, base + 2]);
    }
    Ok(TripletBatch { histories, triplets, margin })
}

pub fn triplet_loss_from_reps(reps: ArrayView2<f64>, triplets: &[[usize; 3]], margin: f64) -> Result<(f64, Array2<f64>)> {
    if triplets.is_empty() {
        return Err(EncoderError::Empty("triplet batch"));
    }
    let n = triplets.len() as f64;
    let mut grad = Array2::zeros(reps.raw_dim());
    let mut loss = 0.0;
    for t in triplets {
        let rows = t.map(|k| reps.row(k).to_vec());
        let (l, g) = triplet_loss(&rows[0], &rows[1], &rows[2], margin);
        loss += l;
        for (k, gk) in t.iter().zip(g.iter()) {
            for (dst, v) in grad.row_mut(*k).iter_mut().zip(gk) {
                *dst += v / n;
            }
        }
    }
    Ok((loss / n, grad))
}

pub fn triplet_step(batch: &TripletBatch, encoder: &mut Encoder, opt: &mut EncoderOptimizer) -> Result<f64> {
    batch.validate()?;
    encoder.zero_grad();
    let refs: Vec<&ObservationHistory> = batch.histories.iter().map(|h| h.as_ref()).collect();
    let (reps, rows) = encoder.forward_final(&refs)?;
    let (loss, grad) = triplet_loss_from_reps(reps.view(), &batch.triplets, batch.margin)?;
    encoder.backward_final(&rows, &grad)?;
    opt.apply(&mut encoder.networks_mut())?;
    Ok(loss)
}

/// Mean softmax cross-entropy of `logits` rows against class targets and
/// its gradient.
pub fn cross_entropy(logits: ArrayView2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    if targets.len() != logits.nrows() || targets.is_empty() {
        return Err(EncoderError::Empty("prediction targets"));
    }
    let n = targets.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        let row = logits.row(r);
        if y >= row.len() {
            return Err(EncoderError::ActionKind(format!("class {y} out of {} classes", row.len())));
        }
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[y];
        for (k, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = ((row[k] - m).exp() / z - if k == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

pub const LOG_STD_RANGE: (f64, f64) = (-5.0, 2.0);

/// Mean diagonal-Gaussian negative log-likelihood. `out` rows hold the
/// means followed by the log standard deviations.
pub fn gaussian_nll(out: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let d = targets.ncols();
    if out.ncols() != 2 * d || out.nrows() != targets.nrows() || targets.nrows() == 0 {
        return Err(EncoderError::ActionKind(format!("head emits {} values for {d}-dim targets", out.ncols())));
    }
    let n = targets.nrows() as f64;
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut grad = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    for r in 0..targets.nrows() {
        for k in 0..d {
            let mu = out[[r, k]];
            let raw = out[[r, d + k]];
            let ls = raw.clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1);
            let inv_var = (-2.0 * ls).exp();
            let e = targets[[r, k]] - mu;
            loss += 0.5 * e * e * inv_var + ls + half_log_2pi;
            grad[[r, k]] = -e * inv_var / n;
            if raw > LOG_STD_RANGE.0 && raw < LOG_STD_RANGE.1 {
                grad[[r, d + k]] = (1.0 - e * e * inv_var) / n;
            }
        }
    }
    Ok((loss / n, grad))
}

/// Output distribution of an opponent-action predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictionKind {
    /// Softmax over the opponents' joint discrete action index.
    Categorical { classes: usize },
    /// Diagonal Gaussian over the concatenated continuous opponent actions.
    Gaussian { dim: usize },
}

/// Opponent-action prediction head on top of the representation.
#[derive(Clone, Debug)]
pub struct ActionPredictor {
    pub kind: PredictionKind,
    pub net: Network,
    /// Opponent action cardinalities, for joint indexing in the categorical case.
    pub opponent_sizes: Vec<usize>,
}

impl ActionPredictor {
    pub fn categorical(rep_dim: usize, opponent_sizes: Vec<usize>, seed: u64) -> Result<Self> {
        let classes = opponent_sizes.iter().product();
        let net = Network::new(vec![dense(rep_dim, classes, Activation::Identity)], seed)?;
        Ok(Self { kind: PredictionKind::Categorical { classes }, net, opponent_sizes })
    }

    pub fn gaussian(rep_dim: usize, dim: usize, seed: u64) -> Result<Self> {
        let net = Network::new(vec![dense(rep_dim, 2 * dim, Activation::Identity)], seed)?;
        Ok(Self { kind: PredictionKind::Gaussian { dim }, net, opponent_sizes: Vec::new() })
    }

    fn class_of(&self, actions: &[Action]) -> Result<usize> {
        if actions.len() != self.opponent_sizes.len() {
            return Err(EncoderError::ActionKind(format!("{} opponent actions", actions.len())));
        }
        let mut idx = 0;
        for (a, &n) in actions.iter().zip(&self.opponent_sizes) {
            match a {
                Action::Discrete(k) if *k < n => idx = idx * n + k,
                other => return Err(EncoderError::ActionKind(format!("{other:?} in a categorical head"))),
            }
        }
        Ok(idx)
    }

    fn vector_of(actions: &[Action], dim: usize) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(dim);
        for a in actions {
            match a {
                Action::Continuous(x) => v.extend_from_slice(x),
                Action::Discrete(_) => return Err(EncoderError::ActionKind("discrete action in a Gaussian head".into())),
            }
        }
        if v.len() != dim {
            return Err(EncoderError::ActionKind(format!("{} action components, head expects {dim}", v.len())));
        }
        Ok(v)
    }

    /// Loss on prediction inputs `reps` (one row per target) and the
    /// gradient with respect to `reps`. Accumulates head gradients.
    pub fn loss_backward(&mut self, reps: &Array2<f64>, targets: &[&[Action]]) -> Result<(f64, Array2<f64>)> {
        let out = self.net.forward_batch(reps)?;
        let (loss, g) = self.loss_from_output(out.view(), targets)?;
        let gin = self.net.backward(&SeqBatch::single(g))?;
        Ok((loss, gin.into_data()))
    }

    pub fn loss(&self, reps: &Array2<f64>, targets: &[&[Action]]) -> Result<f64> {
        let out = self.net.predict_batch(reps)?;
        Ok(self.loss_from_output(out.view(), targets)?.0)
    }

    fn loss_from_output(&self, out: ArrayView2<f64>, targets: &[&[Action]]) -> Result<(f64, Array2<f64>)> {
        match self.kind {
            PredictionKind::Categorical { .. } => {
                let ys = targets.iter().map(|a| self.class_of(a)).collect::<Result<Vec<_>>>()?;
                cross_entropy(out, &ys)
            }
            PredictionKind::Gaussian { dim } => {
                let mut t = Array2::zeros((targets.len(), dim));
                for (r, a) in targets.iter().enumerate() {
                    t.row_mut(r).assign(&ndarray::Array1::from(Self::vector_of(a, dim)?));
                }
                gaussian_nll(out, t.view())
            }
        }
    }
}

/// Rows of a prefix-representation matrix used for action prediction: the
/// representation after observing `o_0..o_t` predicts the opponent action
/// taken at step `t`.
pub fn prediction_rows<'a>(histories: &[&'a ObservationHistory]) -> (Vec<usize>, Vec<&'a [Action]>) {
    let b = histories.len();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (j, h) in histories.iter().enumerate() {
        for t in 0..h.len() {
            if h.opponent_action(t).is_empty() {
                continue;
            }
            rows.push((t + 1) * b + j);
            targets.push(h.opponent_action(t));
        }
    }
    (rows, targets)
}

/// Mean per-step action-prediction loss over a batch of histories. Returns
/// the loss and the gradient with respect to the prefix representations of
/// the last [`Encoder::forward_prefixes`] call that produced `prefix_reps`.
pub fn action_prediction_loss_backward(
    histories: &[&ObservationHistory],
    prefix_reps: &Array2<f64>,
    predictor: &mut ActionPredictor,
) -> Result<(f64, Array2<f64>)> {
    let (rows, targets) = prediction_rows(histories);
    if rows.is_empty() {
        return Err(EncoderError::Empty("opponent actions"));
    }
    let inputs = prefix_reps.select(Axis(0), &rows);
    let (loss, g) = predictor.loss_backward(&inputs, &targets)?;
    let mut grad = Array2::zeros(prefix_reps.raw_dim());
    for (k, &r) in rows.iter().enumerate() {
        let mut dst = grad.row_mut(r);
        dst += &g.row(k);
    }
    Ok((loss, grad))
}

pub fn action_prediction_loss(
    histories: &[&ObservationHistory],
    encoder: &Encoder,
    predictor: &ActionPredictor,
) -> Result<f64> {
    let reps = encoder.predict_prefixes(histories)?;
    let (rows, targets) = prediction_rows(histories);
    if rows.is_empty() {
        return Err(EncoderError::Empty("opponent actions"));
    }
    predictor.loss(&reps.select(Axis(0), &rows), &targets)
}

/// One optimizer step of encoder and predictor on the prediction loss alone.
pub fn action_prediction_step(
    histories: &[&ObservationHistory],
    encoder: &mut Encoder,
    predictor: &mut ActionPredictor,
    opt: &mut EncoderOptimizer,
) -> Result<f64> {
    encoder.zero_grad();
    predictor.net.zero_grad();
    let reps = encoder.forward_prefixes(histories)?;
    let (loss, grad) = action_prediction_loss_backward(histories, &reps, predictor)?;
    encoder.backward_prefixes(&grad)?;
    let [r, h] = encoder.networks_mut();
    opt.apply(&mut [r, h, &mut predictor.net])?;
    Ok(loss)
}

/// One exported representation.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationRow {
    pub episode_id: u64,
    pub label: String,
    pub t: usize,
    pub values: Vec<f64>,
}

pub fn write_representations_csv<W: Write>(rows: &[RepresentationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = rows.first().map_or(REPRESENTATION_DIM, |r| r.values.len());
    let mut header = vec!["episode".to_string(), "label".to_string(), "t".to_string()];
    header.extend((0..dim).map(|k| format!("r{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.episode_id.to_string(), r.label.clone(), r.t.to_string()];
        rec.extend(r.values.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_representations_csv<R: Read>(input: R) -> Result<Vec<RepresentationRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() < 4 {
            return Err(EncoderError::Parse(format!("representation row with {} fields", rec.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| EncoderError::Parse(format!("{s:?}: {e}")));
        rows.push(RepresentationRow {
            episode_id: rec[0].trim().parse().map_err(|e| EncoderError::Parse(format!("episode: {e}")))?,
            label: rec[1].to_string(),
            t: rec[2].trim().parse().map_err(|e| EncoderError::Parse(format!("t: {e}")))?,
            values: rec.iter().skip(3).map(num).collect::<Result<Vec<_>>>()?,
        });
    }
    Ok(rows)
}

/// Saves both encoder networks with the nn checkpoint format, trunk first.
pub fn save_encoder<W: Write>(encoder: &Encoder, step: u64, mut out: W) -> Result<()> {
    nn::checkpoint::save(&encoder.recurrent, step, &mut out)?;
    nn::checkpoint::save(&encoder.head, step, &mut out)?;
    Ok(())
}
