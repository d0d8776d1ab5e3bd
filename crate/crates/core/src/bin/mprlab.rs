use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mprlab::encoder::read_representations_csv;
use mprlab::orchestrator::{
    default_mds, evaluate, export_mds, load_run, mds_svg, monotone_cells, output_root, sample_distributions,
    stream, train_trials, write_heatmap_csv, write_mds_csv, write_run, write_trials, Actor, ExperimentConfig,
    MdsMode, OrchestratorError, Stream,
};
use mprlab::selftest;

#[derive(Parser)]
#[command(name = "mprlab", version, about = "Policy representation learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--override orchestrator.seed=3`. Repeatable.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    /// Output root; defaults to $MPRLAB_OUT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every trial of a configuration and write a run directory.
    Train(Common),
    /// Evaluate a trained run against its test opponents.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory written by `train` (a single trial).
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Sample joint-action distributions with a random ego and write the distance matrix.
    SampleDist(Common),
    /// Sample discrete joint-action distributions and write one heatmap per policy.
    Heatmap(Common),
    /// Reduce a representations CSV to 2-D with classical MDS.
    Mds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// per-step or per-episode-mean; defaults by environment.
        #[arg(long)]
        mode: Option<MdsMode>,
        /// Keep only the last N steps of every episode.
        #[arg(long)]
        last: Option<usize>,
    },
    /// Gradient checks, distance axioms and environment determinism.
    Selftest,
}

type Result<T> = std::result::Result<T, OrchestratorError>;

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let text = match &c.config {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut cfg = ExperimentConfig::parse_with_overrides(&text, &c.overrides)?;
    if let Some(s) = c.seed {
        cfg.run.seed = s;
    }
    if let Some(w) = c.workers {
        cfg.run.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_name(cfg: &ExperimentConfig, what: &str) -> String {
    format!("{}-{}-seed{}", cfg.kind().name(), what, cfg.run.seed)
}

fn train(c: &Common) -> Result<PathBuf> {
    let cfg = load_config(c)?;
    let every = (cfg.run.iterations / 20).max(1);
    let outs = train_trials(&cfg, &mut |k, m| {
        if m.iteration as usize % every == 0 {
            let test = m.test_reward_avg.map(|r| format!("{r:.3}")).unwrap_or_else(|| "-".into());
            eprintln!("trial {k} iteration {} step {} train {:.3} test-avg {test}", m.iteration, m.step, m.train_reward);
        }
    })?;
    let root = output_root(c.out.as_deref());
    let name = run_name(&cfg, &cfg.mode.to_string());
    for (k, o) in outs.iter().enumerate() {
        if let Some(avg) = o.final_test_average() {
            eprintln!("trial {k}: final test average {avg:.4}");
        }
    }
    match outs.as_slice() {
        [one] => write_run(one, &root, &name),
        many => write_trials(many, &root, &name),
    }
}

fn eval(c: &Common, run: &Path, episodes: usize) -> Result<()> {
    let saved = load_run(run)?;
    let mut cfg = saved.config;
    if let Some(w) = c.workers {
        cfg.run.workers = w;
    }
    let mut rng = stream(c.seed.unwrap_or(cfg.run.seed), Stream::Evaluation);
    let eval = evaluate(&cfg.env, saved.learner.greedy(), saved.encoder.as_ref(), episodes, 0, cfg.run.workers, &mut rng)?;
    println!("episode,reward");
    for (k, r) in eval.episode_rewards.iter().enumerate() {
        println!("{k},{r}");
    }
    eprintln!("mean reward {:.4} over {episodes} episodes", eval.mean_reward);
    Ok(())
}

fn sample(c: &Common, heatmaps: bool) -> Result<PathBuf> {
    let cfg = load_config(c)?;
    let mut rng = stream(cfg.run.seed, Stream::Sampling);
    let store =
        sample_distributions(&cfg.env, cfg.run.num_sample, cfg.encoder.smoothing, Actor::Random, None, 0, cfg.run.workers, &mut rng)?;
    let maps = if heatmaps { store.heatmaps()? } else { Vec::new() };
    let distances = store.distance_matrix(cfg.encoder.projections, rand::Rng::random(&mut rng))?;
    let root = output_root(c.out.as_deref());
    fs::create_dir_all(&root)?;
    let what = if heatmaps { "heatmap" } else { "sample-dist" };
    let tmp = tempfile::Builder::new().prefix(".sample.").tempdir_in(&root)?;
    distances.write_csv(File::create(tmp.path().join("distances.csv"))?)?;
    fs::write(tmp.path().join("config.cfg"), cfg.to_text())?;
    fs::write(tmp.path().join("seed.txt"), format!("{}\n", cfg.run.seed))?;
    for (label, m) in &maps {
        write_heatmap_csv(m, File::create(tmp.path().join(format!("heatmap_{label}.csv")))?)?;
    }
    if heatmaps {
        let only: Vec<_> = maps.iter().map(|(_, m)| m.clone()).collect();
        let (ok, n) = monotone_cells(&only, 0.01);
        eprintln!("{ok} of {n} cells with frequency >= 0.01 change monotonically across {}", store.labels.join(", "));
    }
    for (i, l) in distances.labels().iter().enumerate() {
        let row: Vec<String> = distances.values().row(i).iter().map(|v| format!("{v:.4}")).collect();
        eprintln!("{l}: {}", row.join(" "));
    }
    let mut dest = root.join(run_name(&cfg, what));
    let mut k = 2;
    while dest.exists() {
        dest = root.join(format!("{}-{k}", run_name(&cfg, what)));
        k += 1;
    }
    fs::rename(tmp.keep(), &dest)?;
    Ok(dest)
}

fn mds(c: &Common, input: &Path, mode: Option<MdsMode>, last: Option<usize>) -> Result<PathBuf> {
    let rows = read_representations_csv(BufReader::new(File::open(input)?))?;
    let (mode, last) = match mode {
        Some(m) => (m, last),
        None => {
            let (m, l) = default_mds(load_config(c)?.kind());
            (m, last.or(l))
        }
    };
    let (points, negative) = export_mds(&rows, mode, last)?;
    let dir = match &c.out {
        Some(d) => d.clone(),
        None => input.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&dir)?;
    write_mds_csv(&points, File::create(dir.join("mds.csv"))?)?;
    fs::write(dir.join("mds.svg"), mds_svg(&points, "representations"))?;
    eprintln!("{} points, negative eigenvalue mass {negative:.4}", points.len());
    Ok(dir)
}

fn selftest() -> bool {
    let mut ok = true;
    for c in selftest::run_all() {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    ok
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c).map(|d| println!("{}", d.display())),
        Command::Eval { common, run, episodes } => eval(common, run, *episodes),
        Command::SampleDist(c) => sample(c, false).map(|d| println!("{}", d.display())),
        Command::Heatmap(c) => sample(c, true).map(|d| println!("{}", d.display())),
        Command::Mds { common, input, mode, last } => mds(common, input, *mode, *last).map(|d| println!("{}", d.display())),
        Command::Selftest => {
            return if selftest() { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
