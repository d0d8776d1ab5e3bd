//! Joint-action heatmaps of the Push defenders against a random attacker,
//! written as CSV, with the count of cells that change monotonically with
//! the defender threshold.
//!
//!     cargo run --release --example push_heatmap [out_dir]

use std::fs::{self, File};
use std::path::PathBuf;

use mprlab::envs::EnvKind;
use mprlab::orchestrator::{monotone_cells, sample_distributions, stream, write_heatmap_csv, Actor, ExperimentConfig, Stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "heatmaps".into()));
    let cfg = ExperimentConfig::default_for(EnvKind::Push);
    let mut rng = stream(0, Stream::Sampling);
    let store = sample_distributions(&cfg.env, 200, cfg.encoder.smoothing, Actor::Random, None, 0, cfg.run.workers, &mut rng)?;
    let maps = store.heatmaps()?;
    fs::create_dir_all(&out)?;
    for (label, m) in &maps {
        write_heatmap_csv(m, File::create(out.join(format!("heatmap_{label}.csv")))?)?;
        let moving: f64 = m.columns().into_iter().skip(1).map(|c| c.sum()).sum();
        println!("{label:>6}: defender moves on {:.1}% of steps", 100.0 * moving);
    }
    let only: Vec<_> = maps.into_iter().map(|(_, m)| m).collect();
    let (ok, n) = monotone_cells(&only, 0.01);
    println!("{ok} of {n} cells monotone in the threshold; CSVs in {}", out.display());
    Ok(())
}
