use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::analysis::{export_mds, mds_svg, mean_std_curve, reward_svg, write_mds_csv, Curve, MdsMode};
use super::config::{Algorithm, ExperimentConfig};
use super::train::{Learner, TrainOutput};
use super::{OrchestratorError, Result};
use crate::encoder::{save_encoder, Encoder, write_representations_csv};
use crate::envs::EnvKind;
use crate::nn::{checkpoint, Tensor};
use crate::rl::{write_metrics_csv, ConditionedNet, DqnLearner, GaussianHead, PpoLearner};

/// Files every run directory contains.
pub const RUN_FILES: [&str; 4] = ["metrics.csv", "config.cfg", "seed.txt", "rewards.svg"];

/// `explicit`, else `$MPRLAB_OUT`, else `runs`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("MPRLAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// MDS settings used for run exports: per step over the last 10 steps for
/// Push, episode means for Keep.
pub fn default_mds(kind: EnvKind) -> (MdsMode, Option<usize>) {
    match kind {
        EnvKind::Push => (MdsMode::PerStep, Some(10)),
        EnvKind::Keep => (MdsMode::EpisodeMean, None),
    }
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::parse(&fs::read_to_string(path)?)
}

/// Saves the learner's networks into one checkpoint file. PPO appends a
/// `head` line with the action bound and log standard deviations.
pub fn save_learner<W: Write>(learner: &Learner, step: u64, mut out: W) -> Result<()> {
    match learner {
        Learner::Dqn(l) => {
            for n in l.q.networks() {
                checkpoint::save(n, step, &mut out)?;
            }
        }
        Learner::Ppo(l) => {
            for n in l.policy.networks().into_iter().chain(l.value.networks()) {
                checkpoint::save(n, step, &mut out)?;
            }
            let vals: Vec<String> = l.head.log_std.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect();
            writeln!(out, "head {:016x} {}", l.head.bound.to_bits(), vals.join(" "))?;
        }
    }
    Ok(())
}

fn conditioned<R: BufRead>(input: &mut R) -> Result<ConditionedNet> {
    let first = checkpoint::load(&mut *input)?.network;
    let rest = checkpoint::load(&mut *input)?.network;
    Ok(ConditionedNet::from_networks(first, rest)?)
}

fn hex(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|_| OrchestratorError::Config(format!("bad hex value {s:?}")))
}

/// Inverse of [`save_learner`]; optimiser settings come from `cfg`.
pub fn load_learner<R: BufRead>(cfg: &ExperimentConfig, mut input: R) -> Result<Learner> {
    match cfg.algorithm {
        Algorithm::Dqn => {
            let q = conditioned(&mut input)?;
            Ok(Learner::Dqn(DqnLearner::new(q, cfg.rl.lr, cfg.rl.gamma, cfg.rl.target_sync)))
        }
        Algorithm::Ppo => {
            let policy = conditioned(&mut input)?;
            let value = conditioned(&mut input)?;
            let mut line = String::new();
            input.read_line(&mut line)?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let ["head", bound, vals @ ..] = parts.as_slice() else {
                return Err(OrchestratorError::Config("checkpoint lacks the policy head line".into()));
            };
            let bound = hex(bound)?;
            let log_std: Vec<f64> = vals.iter().map(|v| hex(v)).collect::<Result<_>>()?;
            let mut head = GaussianHead::new(log_std.len(), 0.0, bound);
            head.log_std = Tensor::from_vec(&[log_std.len()], log_std)?;
            Ok(Learner::Ppo(PpoLearner::new(policy, value, head, cfg.rl.lr, cfg.ppo_config())))
        }
    }
}

fn create<P: AsRef<Path>>(path: P) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn test_curve(out: &TrainOutput) -> Vec<(f64, f64)> {
    out.metrics.iter().filter_map(|m| m.test_reward.map(|r| (m.step as f64, r))).collect()
}

fn write_contents(out: &TrainOutput, dir: &Path) -> Result<()> {
    let cfg = &out.config;
    write_metrics_csv(&out.metrics, create(dir.join("metrics.csv"))?)?;
    fs::write(dir.join("config.cfg"), cfg.to_text())?;
    fs::write(dir.join("seed.txt"), format!("{}\n", cfg.run.seed))?;
    if let Some(d) = &out.distances {
        d.write_csv(create(dir.join("distances.csv"))?)?;
    }
    if let Some(store) = out.store.as_ref().filter(|s| s.is_discrete()) {
        for (label, m) in store.heatmaps()? {
            super::sampling::write_heatmap_csv(&m, create(dir.join(format!("heatmap_{label}.csv")))?)?;
        }
    }
    if !out.representations.is_empty() {
        write_representations_csv(&out.representations, create(dir.join("representations.csv"))?)?;
        let (mode, last) = default_mds(cfg.env.kind());
        if let Ok((points, _)) = export_mds(&out.representations, mode, last) {
            write_mds_csv(&points, create(dir.join("mds.csv"))?)?;
            fs::write(dir.join("mds.svg"), mds_svg(&points, &format!("{} {}", cfg.env.kind().name(), cfg.mode)))?;
        }
    }
    let curve = Curve { label: cfg.mode.to_string(), ..mean_std_curve(&cfg.mode.to_string(), &[test_curve(out)]) };
    fs::write(dir.join("rewards.svg"), reward_svg(&[curve], "test reward", "environment steps"))?;
    let ck = dir.join("checkpoints");
    fs::create_dir_all(&ck)?;
    let mut agent = create(ck.join("agent.ckpt"))?;
    save_learner(&out.learner, out.total_steps, &mut agent)?;
    agent.flush()?;
    if let Some(enc) = &out.encoder {
        let mut f = create(ck.join("encoder.ckpt"))?;
        save_encoder(enc, out.total_steps, &mut f)?;
        f.flush()?;
    }
    Ok(())
}

/// A free directory name under `root`: `name`, then `name-2`, `name-3`, ...
fn fresh(root: &Path, name: &str) -> PathBuf {
    let mut path = root.join(name);
    let mut k = 2;
    while path.exists() {
        path = root.join(format!("{name}-{k}"));
        k += 1;
    }
    path
}

/// Builds the directory under a temporary name then renames it into place.
fn atomically(root: &Path, name: &str, fill: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let tmp = tempfile::Builder::new().prefix(&format!(".{name}.")).tempdir_in(root)?;
    fill(tmp.path())?;
    let dest = fresh(root, name);
    let tmp = tmp.keep();
    fs::rename(&tmp, &dest)?;
    Ok(dest)
}

/// Writes one run under `root` and returns its directory.
pub fn write_run(out: &TrainOutput, root: &Path, name: &str) -> Result<PathBuf> {
    atomically(root, name, |dir| write_contents(out, dir))
}

/// Writes several trials of one configuration: `trial-<k>/` per run plus
/// a top-level reward plot with the mean and standard deviation.
pub fn write_trials(outs: &[TrainOutput], root: &Path, name: &str) -> Result<PathBuf> {
    let [first, ..] = outs else {
        return Err(OrchestratorError::Config("no trials to write".into()));
    };
    atomically(root, name, |dir| {
        for (k, o) in outs.iter().enumerate() {
            let sub = dir.join(format!("trial-{k}"));
            fs::create_dir_all(&sub)?;
            write_contents(o, &sub)?;
        }
        let runs: Vec<Vec<(f64, f64)>> = outs.iter().map(test_curve).collect();
        let label = first.config.mode.to_string();
        fs::write(dir.join("rewards.svg"), reward_svg(&[mean_std_curve(&label, &runs)], "test reward", "environment steps"))?;
        fs::write(dir.join("config.cfg"), first.config.to_text())?;
        Ok(())
    })
}

/// A run read back from a directory written by [`write_run`].
pub struct SavedRun {
    pub config: ExperimentConfig,
    pub learner: Learner,
    pub encoder: Option<Encoder>,
}

pub fn load_run(dir: &Path) -> Result<SavedRun> {
    let config = read_config(&dir.join("config.cfg"))?;
    let ck = dir.join("checkpoints");
    let learner = load_learner(&config, BufReader::new(File::open(ck.join("agent.ckpt"))?))?;
    let encoder = if config.mode.has_encoder() {
        let mut input = BufReader::new(File::open(ck.join("encoder.ckpt"))?);
        let recurrent = checkpoint::load(&mut input)?.network;
        let head = checkpoint::load(&mut input)?.network;
        Some(Encoder::from_networks(recurrent, head)?)
    } else {
        None
    };
    Ok(SavedRun { config, learner, encoder })
}
