use std::hash::{Hash, Hasher};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative expressed through the output `y`.
    fn backprop(self, grad: &mut Array2<f64>, y: &Array2<f64>) {
        match self {
            Activation::Relu => grad.zip_mut_with(y, |g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_mut_with(y, |g, &y| *g *= 1.0 - y * y),
            Activation::Identity => {}
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One layer of a [`Network`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { input: usize, output: usize, activation: Activation },
    Lstm { input: usize, hidden: usize },
    Gru { input: usize, hidden: usize },
}

impl LayerSpec {
    pub fn input_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, .. } | LayerSpec::Lstm { input, .. } | LayerSpec::Gru { input, .. } => input,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { output, .. } => output,
            LayerSpec::Lstm { hidden, .. } | LayerSpec::Gru { hidden, .. } => hidden,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        !matches!(self, LayerSpec::Dense { .. })
    }

    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { input, output, .. } => {
                vec![("weight", vec![input, output]), ("bias", vec![output])]
            }
            LayerSpec::Lstm { input, hidden } => vec![
                ("w_x", vec![input, 4 * hidden]),
                ("w_h", vec![hidden, 4 * hidden]),
                ("bias", vec![4 * hidden]),
            ],
            LayerSpec::Gru { input, hidden } => vec![
                ("w_x", vec![input, 3 * hidden]),
                ("b_x", vec![3 * hidden]),
                ("w_h", vec![hidden, 3 * hidden]),
                ("b_h", vec![3 * hidden]),
            ],
        }
    }
}

/// A batch of sequences stored time-major: row `t * batch + b` holds step
/// `t` of sequence `b`. Feed-forward use is the `steps == 1` case.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    steps: usize,
    batch: usize,
    data: Array2<f64>,
}

impl SeqBatch {
    pub fn new(steps: usize, batch: usize, data: Array2<f64>) -> Result<Self> {
        if data.nrows() != steps * batch {
            return Err(NnError::Shape(format!(
                "{} rows cannot hold {steps} steps x {batch} sequences",
                data.nrows()
            )));
        }
        Ok(Self { steps, batch, data })
    }

    pub fn single(data: Array2<f64>) -> Self {
        Self { steps: 1, batch: data.nrows(), data }
    }

    pub fn zeros(steps: usize, batch: usize, features: usize) -> Self {
        Self { steps, batch, data: Array2::zeros((steps * batch, features)) }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn features(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn step(&self, t: usize) -> ArrayView2<'_, f64> {
        self.data.slice(s![t * self.batch..(t + 1) * self.batch, ..])
    }

    pub fn last_step(&self) -> ArrayView2<'_, f64> {
        self.step(self.steps - 1)
    }
}

/// Hidden state of every recurrent layer (dense layers hold `None`).
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    layers: Vec<LayerState>,
}

#[derive(Clone, Debug, PartialEq)]
enum LayerState {
    None,
    Lstm { h: Array2<f64>, c: Array2<f64> },
    Gru { h: Array2<f64> },
}

impl RecurrentState {
    pub fn zeros(specs: &[LayerSpec], batch: usize) -> Self {
        let layers = specs
            .iter()
            .map(|s| match *s {
                LayerSpec::Dense { .. } => LayerState::None,
                LayerSpec::Lstm { hidden, .. } => LayerState::Lstm {
                    h: Array2::zeros((batch, hidden)),
                    c: Array2::zeros((batch, hidden)),
                },
                LayerSpec::Gru { hidden, .. } => LayerState::Gru { h: Array2::zeros((batch, hidden)) },
            })
            .collect();
        Self { layers }
    }

    /// Hidden output of the last recurrent layer, if any.
    pub fn top_hidden(&self) -> Option<&Array2<f64>> {
        self.layers.iter().rev().find_map(|l| match l {
            LayerState::Lstm { h, .. } | LayerState::Gru { h } => Some(h),
            LayerState::None => None,
        })
    }

    fn batch(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            LayerState::Lstm { h, .. } | LayerState::Gru { h } => Some(h.nrows()),
            LayerState::None => None,
        })
    }
}

enum LayerTape {
    Dense { input: Array2<f64>, output: Array2<f64> },
    Lstm { input: Array2<f64>, h_prev: Array2<f64>, c_prev: Array2<f64>, gates: Array2<f64>, tanh_c: Array2<f64> },
    Gru { input: Array2<f64>, h_prev: Array2<f64>, gates: Array2<f64>, hn: Array2<f64> },
}

struct Tape {
    steps: usize,
    batch: usize,
    layers: Vec<LayerTape>,
}

/// Stack of dense and recurrent layers with reverse-mode gradients.
pub struct Network {
    specs: Vec<LayerSpec>,
    names: Vec<String>,
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
    offsets: Vec<usize>,
    seed: u64,
    tape: Option<Tape>,
}

impl Clone for Network {
    /// Clones parameters and gradients; the recorded forward pass is not copied.
    fn clone(&self) -> Self {
        Self {
            specs: self.specs.clone(),
            names: self.names.clone(),
            params: self.params.clone(),
            grads: self.grads.clone(),
            offsets: self.offsets.clone(),
            seed: self.seed,
            tape: None,
        }
    }
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("specs", &self.specs)
            .field("seed", &self.seed)
            .field("num_params", &self.num_parameters())
            .finish()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_bias(x: &mut Array2<f64>, bias: &[f64]) {
    for mut row in x.rows_mut() {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

fn accumulate_colsum(grad: &mut Tensor, m: &Array2<f64>) {
    let sums = m.sum_axis(Axis(0));
    grad.data_mut().iter_mut().zip(sums.iter()).for_each(|(g, s)| *g += s);
}

fn accumulate_matmul_tn(grad: &mut Tensor, a: &Array2<f64>, b: &Array2<f64>) {
    let mut g = grad.matrix_mut();
    ndarray::linalg::general_mat_mul(1.0, &a.t(), b, 1.0, &mut g);
}

impl Network {
    /// Builds a network with seeded uniform initialisation: dense layers draw
    /// from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, recurrent layers from
    /// `U(-1/sqrt(hidden), 1/sqrt(hidden))`.
    pub fn new(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(NnError::Shape("network needs at least one layer".into()));
        }
        for w in specs.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(NnError::Shape(format!(
                    "layer output {} does not feed layer input {}",
                    w[0].output_dim(),
                    w[1].input_dim()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut offsets = Vec::with_capacity(specs.len() + 1);
        for (li, spec) in specs.iter().enumerate() {
            offsets.push(params.len());
            let bound = match *spec {
                LayerSpec::Dense { input, .. } => 1.0 / (input.max(1) as f64).sqrt(),
                LayerSpec::Lstm { hidden, .. } | LayerSpec::Gru { hidden, .. } => 1.0 / (hidden as f64).sqrt(),
            };
            for (name, shape) in spec.param_shapes() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                names.push(format!("l{li}.{name}"));
                params.push(Tensor::from_vec(&shape, data)?);
            }
        }
        offsets.push(params.len());
        let grads = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self { specs, names, params, grads, offsets, seed, tape: None })
    }

    pub(crate) fn from_parts(specs: Vec<LayerSpec>, seed: u64, params: Vec<Tensor>) -> Result<Self> {
        let mut net = Self::new(specs, seed)?;
        if params.len() != net.params.len() {
            return Err(NnError::Shape("parameter count does not match layers".into()));
        }
        for (dst, src) in net.params.iter_mut().zip(params) {
            if dst.shape() != src.shape() {
                return Err(NnError::Shape(format!("parameter shape {:?} vs {:?}", src.shape(), dst.shape())));
            }
            *dst = src;
        }
        Ok(net)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.specs.last().expect("non-empty").output_dim()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn params_and_grads(&mut self) -> (&mut [Tensor], &[Tensor]) {
        (&mut self.params, &self.grads)
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn zero_state(&self, batch: usize) -> RecurrentState {
        RecurrentState::zeros(&self.specs, batch)
    }

    /// Copies parameter values from a network with the same layout.
    pub fn copy_params_from(&mut self, other: &Network) -> Result<()> {
        if self.specs != other.specs {
            return Err(NnError::Shape("networks have different layouts".into()));
        }
        self.params.clone_from(&other.params);
        Ok(())
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in &self.params {
            p.shape().hash(&mut h);
            for v in p.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn check_input(&self, input: &SeqBatch, state: Option<&RecurrentState>) -> Result<()> {
        if input.features() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "input has {} features, network expects {}",
                input.features(),
                self.input_dim()
            )));
        }
        if let Some(st) = state {
            if st.layers.len() != self.specs.len() {
                return Err(NnError::Shape("recurrent state belongs to another network".into()));
            }
            if let Some(b) = st.batch() {
                if b != input.batch() {
                    return Err(NnError::Shape(format!("state batch {b} vs input batch {}", input.batch())));
                }
            }
        }
        Ok(())
    }

    /// Forward pass that records activations for [`Network::backward`].
    pub fn forward(&mut self, input: &SeqBatch, state: Option<&RecurrentState>) -> Result<(SeqBatch, RecurrentState)> {
        self.check_input(input, state)?;
        let mut tapes = Vec::with_capacity(self.specs.len());
        let out = self.run(input, state, Some(&mut tapes))?;
        self.tape = Some(Tape { steps: input.steps(), batch: input.batch(), layers: tapes });
        Ok(out)
    }

    /// Forward pass without recording; safe to call on a shared snapshot.
    pub fn predict(&self, input: &SeqBatch, state: Option<&RecurrentState>) -> Result<(SeqBatch, RecurrentState)> {
        self.check_input(input, state)?;
        self.run(input, state, None)
    }

    /// Feed-forward convenience: one step, no recurrent state.
    pub fn predict_batch(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.predict(&SeqBatch::single(input.clone()), None)?.0.into_data())
    }

    pub fn forward_batch(&mut self, input: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(&SeqBatch::single(input.clone()), None)?.0.into_data())
    }

    fn run(
        &self,
        input: &SeqBatch,
        state: Option<&RecurrentState>,
        mut tapes: Option<&mut Vec<LayerTape>>,
    ) -> Result<(SeqBatch, RecurrentState)> {
        let (steps, batch) = (input.steps(), input.batch());
        let mut x = input.data().clone();
        let mut new_state = Vec::with_capacity(self.specs.len());
        for (li, spec) in self.specs.iter().enumerate() {
            let p = &self.params[self.offsets[li]..self.offsets[li + 1]];
            let init = state.map(|s| &s.layers[li]);
            match *spec {
                LayerSpec::Dense { activation, .. } => {
                    let mut y = x.dot(&p[0].matrix());
                    add_bias(&mut y, p[1].data());
                    activation.apply(&mut y);
                    if let Some(t) = tapes.as_deref_mut() {
                        t.push(LayerTape::Dense { input: x, output: y.clone() });
                    }
                    x = y;
                    new_state.push(LayerState::None);
                }
                LayerSpec::Lstm { hidden, .. } => {
                    let (h0, c0) = match init {
                        Some(LayerState::Lstm { h, c }) => (h.clone(), c.clone()),
                        _ => (Array2::zeros((batch, hidden)), Array2::zeros((batch, hidden))),
                    };
                    let (y, h, c, tape) = lstm_forward(&x, steps, batch, hidden, p, h0, c0, tapes.is_some());
                    if let (Some(t), Some(tape)) = (tapes.as_deref_mut(), tape) {
                        t.push(tape);
                    }
                    x = y;
                    new_state.push(LayerState::Lstm { h, c });
                }
                LayerSpec::Gru { hidden, .. } => {
                    let h0 = match init {
                        Some(LayerState::Gru { h }) => h.clone(),
                        _ => Array2::zeros((batch, hidden)),
                    };
                    let (y, h, tape) = gru_forward(&x, steps, batch, hidden, p, h0, tapes.is_some());
                    if let (Some(t), Some(tape)) = (tapes.as_deref_mut(), tape) {
                        t.push(tape);
                    }
                    x = y;
                    new_state.push(LayerState::Gru { h });
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("forward output"));
        }
        Ok((SeqBatch { steps, batch, data: x }, RecurrentState { layers: new_state }))
    }

    /// Back-propagates `grad_output` (same layout as the last forward output)
    /// through the recorded pass. Parameter gradients accumulate into
    /// [`Network::grads`]; the gradient with respect to the input is returned.
    pub fn backward(&mut self, grad_output: &SeqBatch) -> Result<SeqBatch> {
        let tape = self.tape.take().ok_or(NnError::NoForward)?;
        if grad_output.steps() != tape.steps
            || grad_output.batch() != tape.batch
            || grad_output.features() != self.output_dim()
        {
            return Err(NnError::Shape("gradient does not match the recorded output".into()));
        }
        let (steps, batch) = (tape.steps, tape.batch);
        let mut g = grad_output.data().clone();
        for (li, layer) in tape.layers.into_iter().enumerate().rev() {
            let range = self.offsets[li]..self.offsets[li + 1];
            let params = &self.params[range.clone()];
            let grads = &mut self.grads[range];
            g = match (self.specs[li], layer) {
                (LayerSpec::Dense { activation, .. }, LayerTape::Dense { input, output }) => {
                    activation.backprop(&mut g, &output);
                    accumulate_matmul_tn(&mut grads[0], &input, &g);
                    accumulate_colsum(&mut grads[1], &g);
                    g.dot(&params[0].matrix().t())
                }
                (LayerSpec::Lstm { hidden, .. }, tape) => lstm_backward(&g, steps, batch, hidden, params, grads, tape),
                (LayerSpec::Gru { hidden, .. }, tape) => gru_backward(&g, steps, batch, hidden, params, grads, tape),
                _ => unreachable!("tape layout follows specs"),
            };
        }
        Ok(SeqBatch { steps, batch, data: g })
    }
}

#[allow(clippy::too_many_arguments)]
fn lstm_forward(
    x: &Array2<f64>,
    steps: usize,
    batch: usize,
    hidden: usize,
    p: &[Tensor],
    mut h: Array2<f64>,
    mut c: Array2<f64>,
    record: bool,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, Option<LayerTape>) {
    let (w_x, w_h, bias) = (p[0].matrix(), p[1].matrix(), p[2].data());
    let mut xw = x.dot(&w_x);
    add_bias(&mut xw, bias);
    let rows = steps * batch;
    let mut out = Array2::zeros((rows, hidden));
    let (mut h_prev, mut c_prev, mut gates_all, mut tanh_all) = if record {
        (
            Array2::zeros((rows, hidden)),
            Array2::zeros((rows, hidden)),
            Array2::zeros((rows, 4 * hidden)),
            Array2::zeros((rows, hidden)),
        )
    } else {
        (Array2::zeros((0, 0)), Array2::zeros((0, 0)), Array2::zeros((0, 0)), Array2::zeros((0, 0)))
    };
    for t in 0..steps {
        let r0 = t * batch;
        let mut gates = xw.slice(s![r0..r0 + batch, ..]).to_owned();
        ndarray::linalg::general_mat_mul(1.0, &h, &w_h, 1.0, &mut gates);
        if record {
            h_prev.slice_mut(s![r0..r0 + batch, ..]).assign(&h);
            c_prev.slice_mut(s![r0..r0 + batch, ..]).assign(&c);
        }
        for b in 0..batch {
            let mut grow = gates.row_mut(b);
            let gr = grow.as_slice_mut().expect("owned rows are contiguous");
            for k in 0..hidden {
                let i = sigmoid(gr[k]);
                let f = sigmoid(gr[hidden + k]);
                let g = gr[2 * hidden + k].tanh();
                let o = sigmoid(gr[3 * hidden + k]);
                gr[k] = i;
                gr[hidden + k] = f;
                gr[2 * hidden + k] = g;
                gr[3 * hidden + k] = o;
                let cn = f * c[[b, k]] + i * g;
                let tc = cn.tanh();
                c[[b, k]] = cn;
                h[[b, k]] = o * tc;
                if record {
                    tanh_all[[r0 + b, k]] = tc;
                }
            }
        }
        out.slice_mut(s![r0..r0 + batch, ..]).assign(&h);
        if record {
            gates_all.slice_mut(s![r0..r0 + batch, ..]).assign(&gates);
        }
    }
    let tape = record.then(|| LayerTape::Lstm {
        input: x.clone(),
        h_prev,
        c_prev,
        gates: gates_all,
        tanh_c: tanh_all,
    });
    (out, h, c, tape)
}

fn lstm_backward(
    grad_out: &Array2<f64>,
    steps: usize,
    batch: usize,
    hidden: usize,
    params: &[Tensor],
    grads: &mut [Tensor],
    tape: LayerTape,
) -> Array2<f64> {
    let LayerTape::Lstm { input, h_prev, c_prev, gates, tanh_c } = tape else {
        unreachable!("lstm layer recorded a non-lstm tape")
    };
    let w_h = params[1].matrix();
    let rows = steps * batch;
    let mut dgates = Array2::zeros((rows, 4 * hidden));
    let mut dh_next: Array2<f64> = Array2::zeros((batch, hidden));
    let mut dc_next: Array2<f64> = Array2::zeros((batch, hidden));
    for t in (0..steps).rev() {
        let r0 = t * batch;
        for b in 0..batch {
            let r = r0 + b;
            for k in 0..hidden {
                let i = gates[[r, k]];
                let f = gates[[r, hidden + k]];
                let g = gates[[r, 2 * hidden + k]];
                let o = gates[[r, 3 * hidden + k]];
                let tc = tanh_c[[r, k]];
                let dh = grad_out[[r, k]] + dh_next[[b, k]];
                let d_o = dh * tc;
                let dc = dc_next[[b, k]] + dh * o * (1.0 - tc * tc);
                dgates[[r, k]] = dc * g * i * (1.0 - i);
                dgates[[r, hidden + k]] = dc * c_prev[[r, k]] * f * (1.0 - f);
                dgates[[r, 2 * hidden + k]] = dc * i * (1.0 - g * g);
                dgates[[r, 3 * hidden + k]] = d_o * o * (1.0 - o);
                dc_next[[b, k]] = dc * f;
            }
        }
        dh_next = dgates.slice(s![r0..r0 + batch, ..]).dot(&w_h.t());
    }
    accumulate_matmul_tn(&mut grads[0], &input, &dgates);
    accumulate_matmul_tn(&mut grads[1], &h_prev, &dgates);
    accumulate_colsum(&mut grads[2], &dgates);
    dgates.dot(&params[0].matrix().t())
}

fn gru_forward(
    x: &Array2<f64>,
    steps: usize,
    batch: usize,
    hidden: usize,
    p: &[Tensor],
    mut h: Array2<f64>,
    record: bool,
) -> (Array2<f64>, Array2<f64>, Option<LayerTape>) {
    let (w_x, b_x, w_h, b_h) = (p[0].matrix(), p[1].data(), p[2].matrix(), p[3].data());
    let mut xw = x.dot(&w_x);
    add_bias(&mut xw, b_x);
    let rows = steps * batch;
    let mut out = Array2::zeros((rows, hidden));
    let (mut h_prev, mut gates_all, mut hn_all) = if record {
        (Array2::zeros((rows, hidden)), Array2::zeros((rows, 3 * hidden)), Array2::zeros((rows, hidden)))
    } else {
        (Array2::zeros((0, 0)), Array2::zeros((0, 0)), Array2::zeros((0, 0)))
    };
    for t in 0..steps {
        let r0 = t * batch;
        let mut hw = h.dot(&w_h);
        add_bias(&mut hw, b_h);
        if record {
            h_prev.slice_mut(s![r0..r0 + batch, ..]).assign(&h);
        }
        for b in 0..batch {
            let r = r0 + b;
            for k in 0..hidden {
                let rg = sigmoid(xw[[r, k]] + hw[[b, k]]);
                let z = sigmoid(xw[[r, hidden + k]] + hw[[b, hidden + k]]);
                let hn = hw[[b, 2 * hidden + k]];
                let n = (xw[[r, 2 * hidden + k]] + rg * hn).tanh();
                let hnew = (1.0 - z) * n + z * h[[b, k]];
                h[[b, k]] = hnew;
                if record {
                    gates_all[[r, k]] = rg;
                    gates_all[[r, hidden + k]] = z;
                    gates_all[[r, 2 * hidden + k]] = n;
                    hn_all[[r, k]] = hn;
                }
            }
        }
        out.slice_mut(s![r0..r0 + batch, ..]).assign(&h);
    }
    let tape = record.then(|| LayerTape::Gru { input: x.clone(), h_prev, gates: gates_all, hn: hn_all });
    (out, h, tape)
}

fn gru_backward(
    grad_out: &Array2<f64>,
    steps: usize,
    batch: usize,
    hidden: usize,
    params: &[Tensor],
    grads: &mut [Tensor],
    tape: LayerTape,
) -> Array2<f64> {
    let LayerTape::Gru { input, h_prev, gates, hn } = tape else {
        unreachable!("gru layer recorded a non-gru tape")
    };
    let w_h = params[2].matrix();
    let rows = steps * batch;
    let mut dx_gates = Array2::zeros((rows, 3 * hidden));
    let mut dh_gates = Array2::zeros((rows, 3 * hidden));
    let mut dh_next: Array2<f64> = Array2::zeros((batch, hidden));
    for t in (0..steps).rev() {
        let r0 = t * batch;
        let mut direct = Array2::zeros((batch, hidden));
        for b in 0..batch {
            let r = r0 + b;
            for k in 0..hidden {
                let rg = gates[[r, k]];
                let z = gates[[r, hidden + k]];
                let n = gates[[r, 2 * hidden + k]];
                let dh = grad_out[[r, k]] + dh_next[[b, k]];
                let dn_pre = dh * (1.0 - z) * (1.0 - n * n);
                let dz_pre = dh * (h_prev[[r, k]] - n) * z * (1.0 - z);
                let dr_pre = dn_pre * hn[[r, k]] * rg * (1.0 - rg);
                dx_gates[[r, k]] = dr_pre;
                dx_gates[[r, hidden + k]] = dz_pre;
                dx_gates[[r, 2 * hidden + k]] = dn_pre;
                dh_gates[[r, k]] = dr_pre;
                dh_gates[[r, hidden + k]] = dz_pre;
                dh_gates[[r, 2 * hidden + k]] = dn_pre * rg;
                direct[[b, k]] = dh * z;
            }
        }
        dh_next = direct + dh_gates.slice(s![r0..r0 + batch, ..]).dot(&w_h.t());
    }
    accumulate_matmul_tn(&mut grads[0], &input, &dx_gates);
    accumulate_colsum(&mut grads[1], &dx_gates);
    accumulate_matmul_tn(&mut grads[2], &h_prev, &dh_gates);
    accumulate_colsum(&mut grads[3], &dh_gates);
    dx_gates.dot(&params[0].matrix().t())
}

/// Global L2 norm of the gradients of several networks.
pub fn grad_norm(nets: &[&Network]) -> f64 {
    nets.iter()
        .flat_map(|n| n.grads.iter())
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their joint norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(nets: &mut [&mut Network], max_norm: f64) -> f64 {
    let norm = grad_norm(&nets.iter().map(|n| &**n).collect::<Vec<_>>());
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for n in nets.iter_mut() {
            for g in n.grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}

/// Column vector helper used by callers that build single-row inputs.
pub fn row(values: &[f64]) -> Array2<f64> {
    Array1::from(values.to_vec()).insert_axis(Axis(0))
}
