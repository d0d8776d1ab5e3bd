//! Distances between opponent policies from sampled joint actions.
//!
//! Push opponents are compared with symmetric KL over smoothed joint-action
//! tables, Keep opponents with sliced Wasserstein over force samples. The
//! ego acts uniformly at random.
//!
//!     cargo run --example policy_distances [episodes]

use mprlab::envs::EnvKind;
use mprlab::orchestrator::{sample_distributions, stream, Actor, ExperimentConfig, Stream};
use rand::Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let episodes: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(50);
    for kind in [EnvKind::Push, EnvKind::Keep] {
        let cfg = ExperimentConfig::default_for(kind);
        let mut rng = stream(0, Stream::Sampling);
        let store = sample_distributions(&cfg.env, episodes, cfg.encoder.smoothing, Actor::Random, None, 0, 1, &mut rng)?;
        let d = store.distance_matrix(cfg.encoder.projections, rng.random())?;
        println!("# {} ({episodes} episodes per policy)", kind.name());
        d.write_csv(std::io::stdout())?;
    }
    Ok(())
}
