use super::{Network, NnError, Result, Tensor};

/// Adam optimiser over the parameters of one or more networks. Moment
/// buffers follow the parameter order of the networks passed to
/// [`Adam::step`], which must stay the same between calls.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients currently stored in `nets`.
    /// Fails without touching any parameter if a gradient is not finite.
    pub fn step(&mut self, nets: &mut [&mut Network]) -> Result<()> {
        self.step_with(nets, &mut [])
    }

    /// Like [`Adam::step`], with extra free-standing `(parameter, gradient)`
    /// tensors updated after the network parameters.
    pub fn step_with(&mut self, nets: &mut [&mut Network], extra: &mut [(&mut Tensor, &Tensor)]) -> Result<()> {
        let mut params: Vec<&mut Tensor> = Vec::new();
        let mut grads: Vec<&Tensor> = Vec::new();
        for n in nets.iter_mut() {
            let (p, g) = n.params_and_grads();
            params.extend(p.iter_mut());
            grads.extend(g.iter());
        }
        for (p, g) in extra.iter_mut() {
            params.push(&mut **p);
            grads.push(&**g);
        }
        self.step_tensors(&mut params, &grads)
    }

    /// Core update over parallel lists of parameters and gradients.
    pub fn step_tensors(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NnError::Shape(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFinite("gradient"));
        }
        if self.first.is_empty() {
            for p in params.iter() {
                self.first.push(Tensor::zeros(p.shape()));
                self.second.push(Tensor::zeros(p.shape()));
            }
        }
        if self.first.len() != params.len() {
            return Err(NnError::Shape(format!("optimiser tracks {} tensors, got {}", self.first.len(), params.len())));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(NnError::Shape(format!(
                    "moment shape {:?} vs parameter {:?} and gradient {:?}",
                    m.shape(),
                    p.shape(),
                    g.shape()
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
