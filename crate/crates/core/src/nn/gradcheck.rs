//! Central finite-difference gradients, used as an independent check of
//! [`Network::backward`](super::Network::backward).

use super::{Network, Tensor};

/// Below this magnitude an entry is compared by absolute rather than
/// relative error.
pub const ABS_FLOOR: f64 = 1e-6;

/// Numerical gradient of `loss` with respect to every parameter of `net`,
/// perturbing one entry at a time by `±h`.
pub fn numerical_grads<F>(net: &mut Network, h: f64, mut loss: F) -> Vec<Tensor>
where
    F: FnMut(&Network) -> f64,
{
    let mut out: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for pi in 0..out.len() {
        for k in 0..out[pi].len() {
            let orig = net.params()[pi].data()[k];
            net.params_mut()[pi].data_mut()[k] = orig + h;
            let plus = loss(net);
            net.params_mut()[pi].data_mut()[k] = orig - h;
            let minus = loss(net);
            net.params_mut()[pi].data_mut()[k] = orig;
            out[pi].data_mut()[k] = (plus - minus) / (2.0 * h);
        }
    }
    out
}

/// `|a - n| / max(|a| + |n|, ABS_FLOOR)` for one pair of values.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(ABS_FLOOR)
}

/// Largest entry-wise [`relative_error`] across all tensors.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
