//! Keep episodes: a do-nothing ego and a simple proportional controller
//! against each training opponent.

use mprlab::distmath::Action;
use mprlab::envs::{EnvConfig, EnvKind, Episode, EnvState};

fn episode(cfg: &EnvConfig, opponent: mprlab::envs::OpponentPolicy, gain: f64) -> Result<f64, mprlab::envs::EnvError> {
    let mut ep = Episode::new(cfg, opponent, 11)?;
    let mut total = 0.0;
    while !ep.is_done() {
        let EnvState::Keep(s) = ep.state() else { unreachable!() };
        let force = vec![-gain * s.ball_pos[0] - 0.5 * gain * s.ball_vel[0], -gain * s.ball_pos[1] - 0.5 * gain * s.ball_vel[1]];
        total += ep.step(&Action::Continuous(force))?.reward;
    }
    Ok(total)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = EnvConfig::default_for(EnvKind::Keep);
    println!("{:>16} {:>10} {:>10}", "opponent", "idle", "pd gain 5");
    for opponent in cfg.training_policies() {
        println!("{:>16} {:>10.3} {:>10.3}", opponent.name(), episode(&cfg, opponent, 0.0)?, episode(&cfg, opponent, 5.0)?);
    }
    Ok(())
}
