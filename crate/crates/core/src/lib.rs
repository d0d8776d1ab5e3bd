pub mod distmath;
pub mod encoder;
pub mod envs;
pub mod nn;
pub mod rl;
pub mod selftest;
pub mod orchestrator;
