//! Empirical joint-action distributions and the distances between them.
//!
//! Discrete environments summarise each opponent policy by a [`FrequencyTable`]
//! over `(ego action, opponent joint action)` cells and compare tables with the
//! symmetric KL divergence. Continuous environments keep the raw samples in a
//! [`SampleSet`] and compare them with a Monte-Carlo sliced Wasserstein
//! distance. [`classical_mds`] turns any distance matrix into low-dimensional
//! coordinates for inspection.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of random directions used by the sliced Wasserstein estimate.
pub const DEFAULT_PROJECTIONS: usize = 100;

/// Default additive pseudo-count for frequency tables (Laplace smoothing).
pub const DEFAULT_SMOOTHING: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("empty sample list")]
    Empty,
    #[error("action index {index} out of range for a space of size {size}")]
    ActionOutOfRange { index: usize, size: usize },
    #[error("sample mixes discrete and continuous actions where {expected} was expected")]
    ActionKind { expected: &'static str },
    #[error("expected {expected} opponents, sample has {found}")]
    OpponentCount { expected: usize, found: usize },
    #[error("smoothing must be a finite non-negative number, got {0}")]
    BadSmoothing(f64),
    #[error("non-finite action component")]
    NonFinite,
    #[error("frequency tables are defined over different cell sets")]
    CellMismatch,
    #[error("cell {cell} has zero probability in one table but not the other; build tables with smoothing > 0")]
    ZeroCell { cell: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("projection set is empty")]
    NoProjections,
    #[error("need at least two labelled distributions, got {0}")]
    TooFewLabels(usize),
    #[error("label count {labels} does not match distribution count {distributions}")]
    LabelCount { labels: usize, distributions: usize },
    #[error("distributions mix discrete tables and continuous sample sets")]
    MixedKinds,
    #[error("distance mode does not match distribution kind: {0}")]
    ModeMismatch(&'static str),
    #[error("distance matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("output dimension must be at least 1")]
    ZeroOutputDim,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DistError>;

/// A single agent action: an index into a discrete space or a real vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    fn discrete(&self) -> Result<usize> {
        match self {
            Action::Discrete(i) => Ok(*i),
            Action::Continuous(_) => Err(DistError::ActionKind { expected: "a discrete action" }),
        }
    }
}

/// One `(ego action, opponent joint action)` pair observed while playing
/// against the opponent policy `policy_label`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointActionSample {
    pub ego_action: Action,
    pub opp_action: Vec<Action>,
    pub policy_label: usize,
}

/// Cardinalities of the ego action space and each opponent's action space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpaceSizes {
    pub ego: usize,
    pub opponents: Vec<usize>,
}

impl ActionSpaceSizes {
    pub fn new(ego: usize, opponents: Vec<usize>) -> Self {
        Self { ego, opponents }
    }

    pub fn num_cells(&self) -> usize {
        self.ego * self.num_opponent_cells()
    }

    pub fn num_opponent_cells(&self) -> usize {
        self.opponents.iter().product()
    }

    /// Row-major cell index over `(ego, opp_1, ..., opp_N)`.
    pub fn cell_index(&self, ego: usize, opponents: &[usize]) -> Result<usize> {
        if ego >= self.ego {
            return Err(DistError::ActionOutOfRange { index: ego, size: self.ego });
        }
        if opponents.len() != self.opponents.len() {
            return Err(DistError::OpponentCount {
                expected: self.opponents.len(),
                found: opponents.len(),
            });
        }
        let mut index = ego;
        for (&a, &size) in opponents.iter().zip(&self.opponents) {
            if a >= size {
                return Err(DistError::ActionOutOfRange { index: a, size });
            }
            index = index * size + a;
        }
        Ok(index)
    }
}

/// Smoothed empirical distribution over discrete joint-action cells.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyTable {
    sizes: ActionSpaceSizes,
    counts: Vec<u64>,
    total: u64,
    smoothing: f64,
}

impl FrequencyTable {
    pub fn sizes(&self) -> &ActionSpaceSizes {
        &self.sizes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn num_cells(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, ego: usize, opponents: &[usize]) -> Result<u64> {
        Ok(self.counts[self.sizes.cell_index(ego, opponents)?])
    }

    /// `(count(c) + s) / (total + s * cells)`.
    pub fn cell_probability(&self, cell: usize) -> f64 {
        let denom = self.total as f64 + self.smoothing * self.counts.len() as f64;
        (self.counts[cell] as f64 + self.smoothing) / denom
    }

    pub fn probability(&self, ego: usize, opponents: &[usize]) -> Result<f64> {
        Ok(self.cell_probability(self.sizes.cell_index(ego, opponents)?))
    }

    pub fn probabilities(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|c| self.cell_probability(c)).collect()
    }

    /// Adds more samples, keeping the smoothing constant.
    pub fn extend(&mut self, samples: &[JointActionSample]) -> Result<()> {
        let mut opps = Vec::with_capacity(self.sizes.opponents.len());
        let mut cells = Vec::with_capacity(samples.len());
        for s in samples {
            let ego = s.ego_action.discrete()?;
            opps.clear();
            for a in &s.opp_action {
                opps.push(a.discrete()?);
            }
            cells.push(self.sizes.cell_index(ego, &opps)?);
        }
        for c in cells {
            self.counts[c] += 1;
            self.total += 1;
        }
        Ok(())
    }

    /// Probability matrix with one row per ego action and one column per
    /// opponent joint action.
    pub fn probability_matrix(&self) -> Array2<f64> {
        let cols = self.sizes.num_opponent_cells();
        Array2::from_shape_vec((self.sizes.ego, cols), self.probabilities())
            .expect("cell count matches ego x opponent cells")
    }

    /// Heatmap CSV: header `ego\opp,<opponent joint actions>` then one row per
    /// ego action holding the cell probabilities.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let cols = self.sizes.num_opponent_cells();
        let mut header = vec!["ego\\opp".to_string()];
        header.extend((0..cols).map(|c| c.to_string()));
        w.write_record(&header)?;
        let m = self.probability_matrix();
        for (ego, row) in m.rows().into_iter().enumerate() {
            let mut rec = vec![ego.to_string()];
            rec.extend(row.iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Counts every sample into a table over `sizes`.
pub fn build_frequency_table(
    samples: &[JointActionSample],
    sizes: &ActionSpaceSizes,
    smoothing: f64,
) -> Result<FrequencyTable> {
    if samples.is_empty() {
        return Err(DistError::Empty);
    }
    if !(smoothing.is_finite() && smoothing >= 0.0) {
        return Err(DistError::BadSmoothing(smoothing));
    }
    let mut table = FrequencyTable {
        sizes: sizes.clone(),
        counts: vec![0; sizes.num_cells()],
        total: 0,
        smoothing,
    };
    table.extend(samples)?;
    Ok(table)
}

/// `KL(p||q) + KL(q||p)` in nats.
pub fn symmetric_kl(p: &FrequencyTable, q: &FrequencyTable) -> Result<f64> {
    if p.sizes != q.sizes {
        return Err(DistError::CellMismatch);
    }
    let mut sum = 0.0;
    for cell in 0..p.num_cells() {
        let (a, b) = (p.cell_probability(cell), q.cell_probability(cell));
        match (a > 0.0, b > 0.0) {
            (true, true) => sum += (a - b) * (a / b).ln(),
            (false, false) => {}
            _ => return Err(DistError::ZeroCell { cell }),
        }
    }
    // (a-b)ln(a/b) is non-negative termwise; clamp only rounding noise.
    Ok(sum.max(0.0))
}

/// Exact 1-D Wasserstein-1 distance between two empirical distributions.
pub fn wasserstein_1d(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(DistError::Empty);
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    Ok(wasserstein_1d_sorted(&xs, &ys))
}

/// Integrates `|F_x(t) - F_y(t)|` over the merged support of two sorted inputs.
pub(crate) fn wasserstein_1d_sorted(xs: &[f64], ys: &[f64]) -> f64 {
    let (n, m) = (xs.len(), ys.len());
    if n == m {
        return xs.iter().zip(ys).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    }
    let (nf, mf) = (n as f64, m as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = xs[0].min(ys[0]);
    let mut total = 0.0;
    while i < n || j < m {
        let next = match (xs.get(i), ys.get(j)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / nf - j as f64 / mf).abs() * (next - prev);
        while i < n && xs[i] <= next {
            i += 1;
        }
        while j < m && ys[j] <= next {
            j += 1;
        }
        prev = next;
    }
    total
}

/// A set of real-valued joint-action samples of a fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    dimension: usize,
    data: Vec<f64>,
}

impl SampleSet {
    pub fn new(dimension: usize) -> Self {
        Self { dimension, data: Vec::new() }
    }

    pub fn from_points(dimension: usize, points: &[Vec<f64>]) -> Result<Self> {
        let mut set = Self::new(dimension);
        for p in points {
            set.push(p)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, point: &[f64]) -> Result<()> {
        if point.len() != self.dimension {
            return Err(DistError::DimensionMismatch(self.dimension, point.len()));
        }
        if point.iter().any(|v| !v.is_finite()) {
            return Err(DistError::NonFinite);
        }
        self.data.extend_from_slice(point);
        Ok(())
    }

    /// Concatenates the ego action and every opponent action into one point.
    /// Discrete components are one-hot encoded using `sizes`.
    pub fn push_sample(&mut self, sample: &JointActionSample, sizes: &[Option<usize>]) -> Result<()> {
        let mut point = Vec::with_capacity(self.dimension);
        let actions = std::iter::once(&sample.ego_action).chain(&sample.opp_action);
        for (k, a) in actions.enumerate() {
            match a {
                Action::Continuous(v) => point.extend_from_slice(v),
                Action::Discrete(i) => {
                    let size = sizes.get(k).copied().flatten().ok_or(DistError::ActionKind {
                        expected: "a continuous action",
                    })?;
                    if *i >= size {
                        return Err(DistError::ActionOutOfRange { index: *i, size });
                    }
                    point.extend((0..size).map(|c| if c == *i { 1.0 } else { 0.0 }));
                }
            }
        }
        self.push(&point)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dimension.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dimension.max(1))
    }

    /// Sorted projections `sigma^T x` for every point.
    fn sorted_projection(&self, direction: &[f64]) -> Vec<f64> {
        let mut proj: Vec<f64> = self
            .points()
            .map(|p| p.iter().zip(direction).map(|(a, b)| a * b).sum())
            .collect();
        proj.sort_by(f64::total_cmp);
        proj
    }
}

/// Random unit directions on the sphere, drawn by normalising standard
/// Gaussian vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    dimension: usize,
    directions: Vec<Vec<f64>>,
    seed: u64,
}

impl ProjectionSet {
    pub fn random(dimension: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut directions = Vec::with_capacity(count);
        while directions.len() < count {
            let v: Vec<f64> = (0..dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                directions.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        Self { dimension, directions, seed }
    }

    /// Explicit directions; each is normalised to unit length.
    pub fn from_directions(dimension: usize, directions: Vec<Vec<f64>>) -> Result<Self> {
        let mut out = Vec::with_capacity(directions.len());
        for d in directions {
            if d.len() != dimension {
                return Err(DistError::DimensionMismatch(dimension, d.len()));
            }
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(DistError::NonFinite);
            }
            out.push(d.into_iter().map(|x| x / norm).collect());
        }
        Ok(Self { dimension, directions: out, seed: 0 })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

fn check_sw_inputs(x: &SampleSet, y: &SampleSet, projections: &ProjectionSet) -> Result<()> {
    if x.dimension != y.dimension {
        return Err(DistError::DimensionMismatch(x.dimension, y.dimension));
    }
    if projections.dimension != x.dimension {
        return Err(DistError::DimensionMismatch(x.dimension, projections.dimension));
    }
    if projections.is_empty() {
        return Err(DistError::NoProjections);
    }
    if x.is_empty() || y.is_empty() {
        return Err(DistError::Empty);
    }
    Ok(())
}

/// Mean 1-D Wasserstein distance over the projections in `projections`.
pub fn sliced_wasserstein(x: &SampleSet, y: &SampleSet, projections: &ProjectionSet) -> Result<f64> {
    check_sw_inputs(x, y, projections)?;
    let total: f64 = projections
        .directions
        .iter()
        .map(|d| wasserstein_1d_sorted(&x.sorted_projection(d), &y.sorted_projection(d)))
        .sum();
    Ok(total / projections.len() as f64)
}

/// Symmetric matrix of pairwise policy distances with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDistanceMatrix {
    labels: Vec<String>,
    values: Array2<f64>,
}

impl PolicyDistanceMatrix {
    /// Wraps `values`, symmetrising and zeroing the diagonal.
    pub fn new(labels: Vec<String>, values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c {
            return Err(DistError::NotSquare(r, c));
        }
        if labels.len() != r {
            return Err(DistError::LabelCount { labels: labels.len(), distributions: r });
        }
        let mut values = values;
        for i in 0..r {
            values[[i, i]] = 0.0;
            for j in (i + 1)..r {
                let v = 0.5 * (values[[i, j]] + values[[j, i]]);
                values[[i, j]] = v;
                values[[j, i]] = v;
            }
        }
        Ok(Self { labels, values })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values.get([i, j]).copied()
    }

    /// Returns `a * d + b` for every off-diagonal entry.
    pub fn rescaled(&self, scale: f64, offset: f64) -> Self {
        let mut values = self.values.mapv(|v| scale * v + offset);
        for i in 0..self.len() {
            values[[i, i]] = 0.0;
        }
        Self { labels: self.labels.clone(), values }
    }

    /// Header `label,<labels>` then one row per label.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["label".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for (i, label) in self.labels.iter().enumerate() {
            let mut rec = vec![label.clone()];
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let labels: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
        let n = labels.len();
        let mut values = Array2::zeros((n, n));
        let mut rows = 0;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if i >= n || rec.len() != n + 1 {
                return Err(DistError::NotSquare(i + 1, rec.len().saturating_sub(1)));
            }
            for j in 0..n {
                values[[i, j]] = rec[j + 1].trim().parse().map_err(|_| DistError::NonFinite)?;
            }
            rows += 1;
        }
        if rows != n {
            return Err(DistError::NotSquare(rows, n));
        }
        Self::new(labels, values)
    }
}

/// The empirical distribution collected against one opponent policy.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyDistribution {
    Table(FrequencyTable),
    Samples(SampleSet),
}

/// Which policy distance to evaluate.
#[derive(Clone, Debug, PartialEq)]
pub enum DistanceMode {
    SymmetricKl,
    SlicedWasserstein(ProjectionSet),
}

/// Pairwise distances between every labelled distribution. Cells are
/// computed in parallel on the current rayon pool.
pub fn build_distance_matrix(
    labels: &[String],
    distributions: &[PolicyDistribution],
    mode: &DistanceMode,
) -> Result<PolicyDistanceMatrix> {
    let n = distributions.len();
    if labels.len() != n {
        return Err(DistError::LabelCount { labels: labels.len(), distributions: n });
    }
    if n < 2 {
        return Err(DistError::TooFewLabels(n));
    }
    let discrete = distributions.iter().filter(|d| matches!(d, PolicyDistribution::Table(_))).count();
    if discrete != 0 && discrete != n {
        return Err(DistError::MixedKinds);
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let cells: Vec<f64> = match mode {
        DistanceMode::SymmetricKl => {
            let tables: Vec<&FrequencyTable> = distributions
                .iter()
                .map(|d| match d {
                    PolicyDistribution::Table(t) => Ok(t),
                    PolicyDistribution::Samples(_) => {
                        Err(DistError::ModeMismatch("symmetric KL needs frequency tables"))
                    }
                })
                .collect::<Result<_>>()?;
            pairs
                .par_iter()
                .map(|&(i, j)| symmetric_kl(tables[i], tables[j]))
                .collect::<Result<_>>()?
        }
        DistanceMode::SlicedWasserstein(projections) => {
            let sets: Vec<&SampleSet> = distributions
                .iter()
                .map(|d| match d {
                    PolicyDistribution::Samples(s) => Ok(s),
                    PolicyDistribution::Table(_) => {
                        Err(DistError::ModeMismatch("sliced Wasserstein needs sample sets"))
                    }
                })
                .collect::<Result<_>>()?;
            for s in &sets {
                check_sw_inputs(s, sets[0], projections)?;
            }
            // Project and sort each set once per direction.
            let sorted: Vec<Vec<Vec<f64>>> = sets
                .par_iter()
                .map(|s| projections.directions.iter().map(|d| s.sorted_projection(d)).collect())
                .collect();
            pairs
                .par_iter()
                .map(|&(i, j)| {
                    let total: f64 = sorted[i]
                        .iter()
                        .zip(&sorted[j])
                        .map(|(a, b)| wasserstein_1d_sorted(a, b))
                        .sum();
                    total / projections.len() as f64
                })
                .collect()
        }
    };
    let mut values = Array2::zeros((n, n));
    for (&(i, j), v) in pairs.iter().zip(cells) {
        values[[i, j]] = v;
        values[[j, i]] = v;
    }
    PolicyDistanceMatrix::new(labels.to_vec(), values)
}

/// Result of classical multidimensional scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct MdsEmbedding {
    /// One row per input item.
    pub points: Vec<Vec<f64>>,
    /// Eigenvalues of the double-centred Gram matrix, largest first.
    pub eigenvalues: Vec<f64>,
    /// `sum |negative eigenvalues| / sum |eigenvalues|`; large values mean the
    /// input is far from Euclidean.
    pub negative_mass: f64,
}

impl MdsEmbedding {
    /// Threshold above which [`MdsEmbedding::is_non_euclidean`] reports.
    pub const NEGATIVE_MASS_WARNING: f64 = 0.1;

    pub fn is_non_euclidean(&self) -> bool {
        self.negative_mass > Self::NEGATIVE_MASS_WARNING
    }
}

/// Classical (Torgerson) MDS: double-centre the squared distances and keep the
/// top `out_dim` eigenpairs. Output coordinates are centred at the origin.
pub fn classical_mds(distances: ArrayView2<f64>, out_dim: usize) -> Result<MdsEmbedding> {
    let (n, c) = distances.dim();
    if n != c {
        return Err(DistError::NotSquare(n, c));
    }
    if out_dim == 0 {
        return Err(DistError::ZeroOutputDim);
    }
    if n == 0 {
        return Err(DistError::Empty);
    }
    let sq = DMatrix::from_fn(n, n, |i, j| {
        let d = 0.5 * (distances[[i, j]] + distances[[j, i]]);
        d * d
    });
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let gram = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand));

    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let abs_total: f64 = eigenvalues.iter().map(|v| v.abs()).sum();
    let negative: f64 = eigenvalues.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    let negative_mass = if abs_total > 0.0 { negative / abs_total } else { 0.0 };

    let mut points = vec![vec![0.0; out_dim]; n];
    for (k, &idx) in order.iter().take(out_dim).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if lambda <= 1e-12 * abs_total.max(1.0) {
            continue;
        }
        let v = eig.eigenvectors.column(idx);
        // Fix the sign so the largest-magnitude component is positive.
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let scale = lambda.sqrt() * sign;
        for (i, p) in points.iter_mut().enumerate() {
            p[k] = v[i] * scale;
        }
    }
    Ok(MdsEmbedding { points, eigenvalues, negative_mass })
}

/// Euclidean distance between two equal-length vectors.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pairwise Euclidean distance matrix over `points`.
pub fn pairwise_distances(points: &[Vec<f64>]) -> Array2<f64> {
    let n = points.len();
    Array2::from_shape_fn((n, n), |(i, j)| euclidean(&points[i], &points[j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn disc(ego: usize, opp: usize) -> JointActionSample {
        JointActionSample {
            ego_action: Action::Discrete(ego),
            opp_action: vec![Action::Discrete(opp)],
            policy_label: 0,
        }
    }

    #[test]
    fn counting_without_smoothing() {
        let sizes = ActionSpaceSizes::new(5, vec![5]);
        let samples = vec![disc(0, 0), disc(0, 0), disc(1, 2), disc(1, 2)];
        let t = build_frequency_table(&samples, &sizes, 0.0).unwrap();
        assert_eq!(t.probability(0, &[0]).unwrap(), 0.5);
        assert_eq!(t.probability(1, &[2]).unwrap(), 0.5);
        let others: f64 = t.probabilities().iter().sum::<f64>() - 1.0;
        assert!(others.abs() < 1e-12);
        assert_eq!(t.probabilities().iter().filter(|p| **p > 0.0).count(), 2);
    }

    #[test]
    fn laplace_smoothing_arithmetic() {
        let sizes = ActionSpaceSizes::new(2, vec![2]);
        let t = build_frequency_table(&[disc(0, 0), disc(0, 1)], &sizes, 1.0).unwrap();
        assert!((t.probability(0, &[0]).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert!((t.probability(0, &[1]).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert!((t.probability(1, &[0]).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert!((t.probability(1, &[1]).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn table_errors() {
        let sizes = ActionSpaceSizes::new(2, vec![2]);
        assert!(matches!(build_frequency_table(&[], &sizes, 1.0), Err(DistError::Empty)));
        assert!(matches!(
            build_frequency_table(&[disc(2, 0)], &sizes, 1.0),
            Err(DistError::ActionOutOfRange { index: 2, size: 2 })
        ));
        assert!(matches!(
            build_frequency_table(&[disc(0, 0)], &sizes, -1.0),
            Err(DistError::BadSmoothing(_))
        ));
    }

    #[test]
    fn row_major_cells() {
        let sizes = ActionSpaceSizes::new(2, vec![3, 4]);
        assert_eq!(sizes.cell_index(1, &[2, 3]).unwrap(), 23);
        assert_eq!(sizes.cell_index(0, &[1, 0]).unwrap(), 4);
        assert_eq!(sizes.num_cells(), 24);
    }

    fn table_from_probs(sizes: ActionSpaceSizes, counts: Vec<u64>) -> FrequencyTable {
        let total = counts.iter().sum();
        FrequencyTable { sizes, counts, total, smoothing: 0.0 }
    }

    #[test]
    fn symmetric_kl_known_value() {
        let sizes = ActionSpaceSizes::new(1, vec![2]);
        let p = table_from_probs(sizes.clone(), vec![2, 2]);
        let q = table_from_probs(sizes, vec![1, 3]);
        // 0.5 ln2 + 0.5 ln(2/3) + 0.25 ln(1/2) + 0.75 ln(3/2)
        let expected = 0.5 * (2.0f64).ln() + 0.5 * (2.0f64 / 3.0).ln() + 0.25 * (0.5f64).ln()
            + 0.75 * (1.5f64).ln();
        let got = symmetric_kl(&p, &q).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.27465).abs() < 1e-5);
        assert_eq!(symmetric_kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_kl_rejects_zero_cells_and_mismatch() {
        let sizes = ActionSpaceSizes::new(1, vec![2]);
        let p = table_from_probs(sizes.clone(), vec![2, 0]);
        let q = table_from_probs(sizes, vec![1, 1]);
        assert!(matches!(symmetric_kl(&p, &q), Err(DistError::ZeroCell { cell: 1 })));
        let r = table_from_probs(ActionSpaceSizes::new(2, vec![1]), vec![1, 1]);
        assert!(matches!(symmetric_kl(&q, &r), Err(DistError::CellMismatch)));
    }

    #[test]
    fn wasserstein_1d_cases() {
        assert_eq!(wasserstein_1d(&[0.3, 0.1, 2.0], &[2.0, 0.1, 0.3]).unwrap(), 0.0);
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.5, 1.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!((wasserstein_1d(&[0.0], &[-3.25]).unwrap() - 3.25).abs() < 1e-15);
        assert!(matches!(wasserstein_1d(&[], &[1.0]), Err(DistError::Empty)));
    }

    #[test]
    fn wasserstein_1d_unequal_sizes_matches_replication() {
        // Replicating each point lcm/len times gives equal-size sets whose
        // distance is the mean absolute difference of sorted values.
        let x = [0.0, 1.0, 5.0];
        let y = [2.0, -1.0];
        let mut xr: Vec<f64> = x.iter().flat_map(|v| [*v, *v]).collect();
        let mut yr: Vec<f64> = y.iter().flat_map(|v| [*v, *v, *v]).collect();
        xr.sort_by(f64::total_cmp);
        yr.sort_by(f64::total_cmp);
        let oracle: f64 = xr.iter().zip(&yr).map(|(a, b)| (a - b).abs()).sum::<f64>() / 6.0;
        assert!((wasserstein_1d(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn projections_are_unit() {
        let p = ProjectionSet::random(5, 50, 7);
        for d in p.directions() {
            let n: f64 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(p, ProjectionSet::random(5, 50, 7));
    }

    #[test]
    fn sliced_wasserstein_errors() {
        let a = SampleSet::from_points(2, &[vec![0.0, 1.0]]).unwrap();
        let b = SampleSet::from_points(3, &[vec![0.0, 1.0, 2.0]]).unwrap();
        let p = ProjectionSet::random(2, 3, 1);
        assert!(matches!(sliced_wasserstein(&a, &b, &p), Err(DistError::DimensionMismatch(2, 3))));
        assert!(SampleSet::new(2).push(&[1.0]).is_err());
        let empty = ProjectionSet::random(2, 0, 1);
        assert!(matches!(sliced_wasserstein(&a, &a, &empty), Err(DistError::NoProjections)));
    }

    #[test]
    fn one_hot_for_discrete_components() {
        let mut set = SampleSet::new(4);
        let s = JointActionSample {
            ego_action: Action::Discrete(1),
            opp_action: vec![Action::Continuous(vec![0.5, -0.5])],
            policy_label: 0,
        };
        set.push_sample(&s, &[Some(2), None]).unwrap();
        assert_eq!(set.point(0), &[0.0, 1.0, 0.5, -0.5]);
    }

    #[test]
    fn distance_matrix_kinds() {
        let sizes = ActionSpaceSizes::new(2, vec![2]);
        let t = build_frequency_table(&[disc(0, 0), disc(1, 1)], &sizes, 1.0).unwrap();
        let labels = vec!["a".to_string(), "b".to_string()];
        let same = vec![PolicyDistribution::Table(t.clone()), PolicyDistribution::Table(t.clone())];
        let m = build_distance_matrix(&labels, &same, &DistanceMode::SymmetricKl).unwrap();
        assert_eq!(m.values(), &Array2::<f64>::zeros((2, 2)));

        let s = SampleSet::from_points(1, &[vec![0.0]]).unwrap();
        let mixed = vec![PolicyDistribution::Table(t), PolicyDistribution::Samples(s)];
        assert!(matches!(
            build_distance_matrix(&labels, &mixed, &DistanceMode::SymmetricKl),
            Err(DistError::MixedKinds)
        ));
        assert!(matches!(
            build_distance_matrix(&labels[..1], &same[..1], &DistanceMode::SymmetricKl),
            Err(DistError::TooFewLabels(1))
        ));
        assert!(matches!(
            build_distance_matrix(
                &labels,
                &same,
                &DistanceMode::SlicedWasserstein(ProjectionSet::random(1, 2, 0))
            ),
            Err(DistError::ModeMismatch(_))
        ));
    }

    #[test]
    fn distance_matrix_csv_round_trip() {
        let m = PolicyDistanceMatrix::new(
            vec!["d=0.1".into(), "d=0.3".into()],
            array![[0.0, 0.125], [0.125, 0.0]],
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("label,d=0.1,d=0.3\n"));
        assert_eq!(PolicyDistanceMatrix::read_csv(&buf[..]).unwrap(), m);
    }

    #[test]
    fn mds_collinear_three_points() {
        let d = array![[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]];
        let e = classical_mds(d.view(), 2).unwrap();
        let rec = pairwise_distances(&e.points);
        for i in 0..3 {
            for j in 0..3 {
                assert!((rec[[i, j]] - d[[i, j]]).abs() < 1e-9);
            }
        }
        // middle point sits between the others on the leading axis
        let x: Vec<f64> = e.points.iter().map(|p| p[0]).collect();
        assert!((x[0] - x[1]) * (x[2] - x[1]) < 0.0);
        assert!(e.points.iter().all(|p| p[1].abs() < 1e-9));
        let centroid: f64 = x.iter().sum();
        assert!(centroid.abs() < 1e-9);
    }

    #[test]
    fn mds_zero_matrix() {
        let e = classical_mds(Array2::<f64>::zeros((4, 4)).view(), 2).unwrap();
        assert!(e.points.iter().flatten().all(|v| *v == 0.0));
        assert!(!e.is_non_euclidean());
    }

    #[test]
    fn mds_reports_non_euclidean_input() {
        // Violates the triangle inequality badly.
        let d = array![[0.0, 1.0, 10.0], [1.0, 0.0, 1.0], [10.0, 1.0, 0.0]];
        let e = classical_mds(d.view(), 2).unwrap();
        assert!(e.is_non_euclidean());
    }
}
