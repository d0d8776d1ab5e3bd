//! Saves a network to the text checkpoint format, reloads it and checks the
//! outputs are bit-identical. Also reloads a trained run if one is given.
//!
//!     cargo run --example checkpoints [run_dir]

use std::path::Path;

use mprlab::nn::{checkpoint, dense, Activation, LayerSpec, Network, SeqBatch};
use mprlab::orchestrator::load_run;
use ndarray::Array2;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let net = Network::new(vec![LayerSpec::Gru { input: 4, hidden: 8 }, dense(8, 3, Activation::Identity)], 9)?;
    let mut buf = Vec::new();
    checkpoint::save(&net, 1234, &mut buf)?;
    let back = checkpoint::load(buf.as_slice())?;
    let x = SeqBatch::new(3, 1, Array2::from_shape_fn((3, 4), |(r, c)| (r as f64 - c as f64) * 0.3))?;
    let (a, _) = net.predict(&x, None)?;
    let (b, _) = back.network.predict(&x, None)?;
    let same = a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits());
    println!("{} bytes, step {}, outputs bit-identical: {same}", buf.len(), back.step);
    println!("{}", String::from_utf8_lossy(&buf).lines().take(3).collect::<Vec<_>>().join("\n"));

    if let Some(dir) = std::env::args().nth(1) {
        let run = load_run(Path::new(&dir))?;
        println!("loaded {} run, mode {}, encoder present: {}", run.config.kind().name(), run.config.mode, run.encoder.is_some());
    }
    Ok(())
}
