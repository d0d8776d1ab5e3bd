//! Trains a DQN attacker on Push with a metric-learned opponent
//! representation and writes a run directory.
//!
//!     cargo run --release --example train_push [iterations] [mode]
//!
//! The default configuration runs 2000 iterations; a few hundred already
//! show the learning curve. `mode` is one of none, mpr-rs, mpr-nors,
//! triplet, actpred.

use mprlab::envs::EnvKind;
use mprlab::orchestrator::{output_root, train_with, write_run, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig::default_for(EnvKind::Push);
    cfg.run.iterations = args.next().map(|s| s.parse()).transpose()?.unwrap_or(300);
    if let Some(mode) = args.next() {
        cfg.mode = mode.parse()?;
    }
    cfg.validate()?;
    let out = train_with(&cfg, &mut |m| {
        if let Some(avg) = m.test_reward_avg.filter(|_| m.iteration % 100 == 0) {
            println!("iteration {:>5}  epsilon {:.2}  test average {avg:+.3}", m.iteration, m.epsilon.unwrap_or(0.0));
        }
    })?;
    let dir = write_run(&out, &output_root(None), &format!("push-{}-seed{}", cfg.mode, cfg.run.seed))?;
    println!("final test average {:+.3}; run written to {}", out.final_test_average().unwrap_or(f64::NAN), dir.display());
    Ok(())
}
