//! Analytic gradients against central differences for a small recurrent
//! network, then the full built-in self-test.

use mprlab::nn::gradcheck::{max_relative_error, numerical_grads};
use mprlab::nn::{dense, Activation, LayerSpec, Network, SeqBatch};
use mprlab::selftest;
use ndarray::Array2;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (steps, batch) = (5, 2);
    let mut net = Network::new(vec![LayerSpec::Lstm { input: 3, hidden: 6 }, dense(6, 2, Activation::Tanh)], 1)?;
    let x = SeqBatch::new(steps, batch, Array2::from_shape_fn((steps * batch, 3), |(r, c)| ((r * 3 + c) as f64).sin()))?;
    let w = Array2::from_shape_fn((steps * batch, 2), |(r, c)| ((r + 2 * c) as f64).cos());

    // Loss = sum(w * y), so dL/dy = w.
    net.forward(&x, None)?;
    net.zero_grad();
    net.backward(&SeqBatch::new(steps, batch, w.clone())?)?;
    let analytic = net.grads().to_vec();
    let numeric = numerical_grads(&mut net, 1e-5, |n| n.predict(&x, None).map(|(y, _)| (y.data() * &w).sum()).unwrap_or(f64::NAN));
    println!("lstm + dense, {} parameters: max relative error {:.2e}", net.num_parameters(), max_relative_error(&analytic, &numeric));

    for c in selftest::run_all() {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(())
}
