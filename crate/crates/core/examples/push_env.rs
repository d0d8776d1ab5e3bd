//! One Push episode against each training defender with a random attacker,
//! and a JSONL trace of the last one.
//!
//!     cargo run --example push_env [trace.jsonl]

use std::fs::File;

use mprlab::distmath::Action;
use mprlab::envs::{write_trace, EnvConfig, EnvKind, Episode, TraceHeader, PUSH_NUM_ACTIONS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = EnvConfig::default_for(EnvKind::Push);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut last = None;
    for (label, opponent) in cfg.training_policies().into_iter().enumerate() {
        let seed = rng.random();
        let mut ep = Episode::new(&cfg, opponent, seed)?;
        let mut steps = Vec::new();
        while !ep.is_done() {
            steps.push(ep.step(&Action::Discrete(rng.random_range(0..PUSH_NUM_ACTIONS)))?);
        }
        let total: f64 = steps.iter().map(|s| s.reward).sum();
        let moving = steps.iter().filter(|s| s.opp_action != [Action::Discrete(0)]).count();
        println!("{:>7}: reward {total:+8.3}, defender moved on {moving}/{} steps", opponent.name(), steps.len());
        last = Some((TraceHeader { env: EnvKind::Push, seed, opponent, label }, steps));
    }
    if let (Some(path), Some((header, steps))) = (std::env::args().nth(1), last) {
        write_trace(File::create(&path)?, &header, &steps)?;
        println!("trace written to {path}");
    }
    Ok(())
}
