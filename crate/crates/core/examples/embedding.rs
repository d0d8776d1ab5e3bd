//! Metric embedding on synthetic data: three policies emit distinguishable
//! observation streams, and the encoder learns representations whose
//! distances match a given policy distance matrix.

use std::sync::Arc;

use mprlab::distmath::PolicyDistanceMatrix;
use mprlab::encoder::{embed_loss, embed_step, EmbedBatch, Encoder, EncoderOptimizer, EncoderSpec, ObservationHistory};
use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let targets = array![[0.0, 1.0, 2.0], [1.0, 0.0, 1.5], [2.0, 1.5, 0.0]];
    let d = PolicyDistanceMatrix::new(vec!["a".into(), "b".into(), "c".into()], targets.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut histories = Vec::new();
    for label in 0..3 {
        for e in 0..4 {
            let mut h = ObservationHistory::new((4 * label + e) as u64, label, 2);
            for t in 0..6 {
                let o = [label as f64 - 1.0 + 0.02 * rng.random_range(-1.0..1.0), (t as f64 * 0.5).sin()];
                h.push(&o, vec![])?;
            }
            histories.push(Arc::new(h));
        }
    }
    let batch = EmbedBatch::all_pairs(histories, &d)?;
    let mut enc = Encoder::new(EncoderSpec::lstm(2, 16, 1, 8), 1)?;
    let mut opt = EncoderOptimizer::new(3e-3, Some(10.0));
    for step in 0..=400 {
        if step % 100 == 0 {
            println!("step {step:>3}: embedding loss {:.5}", embed_loss(&batch, &enc)?);
        }
        embed_step(&batch, &mut enc, &mut opt)?;
    }
    let reps = enc.predict_final(&batch.history_refs())?;
    // Histories are grouped by label, four each.
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let dist = (&reps.row(4 * i) - &reps.row(4 * j)).mapv(|v| v * v).sum().sqrt();
        println!("labels {i},{j}: learned {dist:.3}, target {:.3}", targets[[i, j]]);
    }
    Ok(())
}
