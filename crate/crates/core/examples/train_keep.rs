//! Trains a PPO keeper on Keep with resampled policy distances and shows
//! which training opponents end up closest in representation space.
//!
//!     cargo run --release --example train_keep [iterations] [mode]

use mprlab::envs::EnvKind;
use mprlab::orchestrator::{centroids, closest_pair, output_root, representation_points, train_with, write_run, ExperimentConfig, MdsMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig::default_for(EnvKind::Keep);
    cfg.run.iterations = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);
    if let Some(mode) = args.next() {
        cfg.mode = mode.parse()?;
    }
    cfg.validate()?;
    let out = train_with(&cfg, &mut |m| {
        println!("iteration {:>4}  train {:+8.3}  test {:+8.3}", m.iteration, m.train_reward, m.test_reward.unwrap_or(f64::NAN));
    })?;
    if let Some(d) = &out.distances {
        println!("policy distances (sliced Wasserstein):");
        d.write_csv(std::io::stdout())?;
    }
    let points: Vec<_> = representation_points(&out.representations, MdsMode::EpisodeMean).into_iter().filter(|p| p.label != "test").collect();
    if let Some((a, b, dist)) = closest_pair(&centroids(&points)) {
        println!("closest training opponents in representation space: {a} and {b} ({dist:.3})");
    }
    let dir = write_run(&out, &output_root(None), &format!("keep-{}-seed{}", cfg.mode, cfg.run.seed))?;
    println!("run written to {}", dir.display());
    Ok(())
}
