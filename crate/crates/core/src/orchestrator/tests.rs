use std::io::BufReader;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::distmath::{symmetric_kl, PolicyDistribution};
use crate::encoder::{EncoderSpec, ObservationHistory};
use crate::envs::EnvKind;

fn tiny(kind: EnvKind, mode: EncoderMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default_for(kind);
    cfg.mode = mode;
    let pairs: &[(&str, &str)] = match kind {
        EnvKind::Push => &[
            ("env.horizon", "10"),
            ("rl.hidden", "16"),
            ("rl.batch", "8"),
            ("rl.learning_starts", "20"),
            ("rl.updates_per_iteration", "2"),
            ("encoder.hidden", "8"),
            ("encoder.layers", "1"),
            ("encoder.batch", "8"),
            ("encoder.updates", "2"),
            ("orchestrator.iterations", "6"),
            ("orchestrator.num_sample", "3"),
            ("orchestrator.num_collect", "2"),
            ("orchestrator.test_every", "40"),
            ("orchestrator.test_episodes", "2"),
            ("orchestrator.export_episodes", "2"),
        ],
        EnvKind::Keep => &[
            ("env.horizon", "8"),
            ("rl.repeats", "3"),
            ("rl.minibatch", "8"),
            ("encoder.hidden", "8"),
            ("encoder.batch", "4"),
            ("encoder.updates", "2"),
            ("encoder.buffer", "16"),
            ("orchestrator.iterations", "4"),
            ("orchestrator.num_sample", "2"),
            ("orchestrator.num_collect", "4"),
            ("orchestrator.test_episodes", "2"),
            ("orchestrator.export_episodes", "2"),
        ],
    };
    for (k, v) in pairs {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn config_text_round_trips() {
    for kind in [EnvKind::Push, EnvKind::Keep] {
        let mut cfg = ExperimentConfig::default_for(kind);
        cfg.set("rl.lr", "0.000123").unwrap();
        cfg.set("orchestrator.seed", "99").unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }
}

#[test]
fn unknown_key_lists_valid_keys() {
    let err = ExperimentConfig::parse("env.name = push\nrl.learning_rate = 0.1\n").unwrap_err();
    match err {
        OrchestratorError::UnknownKey { key, valid } => {
            assert_eq!(key, "rl.learning_rate");
            assert!(valid.contains("rl.lr"));
            assert!(valid.contains("orchestrator.iterations"));
        }
        other => panic!("unexpected error {other}"),
    }
    // Keep has no epsilon schedule.
    assert!(ExperimentConfig::parse("env.name = keep\nrl.eps_start = 0.5\n").is_err());
}

#[test]
fn overrides_apply_after_file_and_select_defaults() {
    let cfg = ExperimentConfig::parse_with_overrides(
        "rl.lr = 0.5\n# comment\norchestrator.seed = 3\n",
        &["orchestrator.seed=11".into(), "env.name=keep".into()],
    )
    .unwrap();
    assert_eq!(cfg.kind(), EnvKind::Keep);
    assert_eq!(cfg.algorithm, Algorithm::Ppo);
    assert_eq!(cfg.run.seed, 11);
    assert_eq!(cfg.rl.lr, 0.5);
    assert!(ExperimentConfig::parse_with_overrides("", &["no-equals".into()]).is_err());
    let short = ExperimentConfig::parse_with_overrides("", &["seed=3".into(), "iterations=7".into()]).unwrap();
    assert_eq!((short.run.seed, short.run.iterations), (3, 7));
    // `lr` exists under both rl and encoder.
    assert!(ExperimentConfig::parse_with_overrides("", &["lr=0.1".into()]).is_err());
    assert!(ExperimentConfig::parse_with_overrides("", &["bogus=1".into()]).is_err());
}

#[test]
fn validation_rejects_bad_ranges() {
    let mut cfg = ExperimentConfig::default_for(EnvKind::Push);
    cfg.run.iterations = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = ExperimentConfig::default_for(EnvKind::Push);
    cfg.mode = EncoderMode::MprNoRs;
    cfg.run.resample_period = 5;
    assert!(cfg.validate().is_err());
    assert!(ExperimentConfig::default_for(EnvKind::Keep).validate().is_ok());
    let mut cfg = ExperimentConfig::default_for(EnvKind::Keep);
    cfg.encoder.distance_scale = 0.0;
    assert!(cfg.validate().is_err());
    let mut cfg = ExperimentConfig::default_for(EnvKind::Keep);
    cfg.rl.reward_scale = -1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn streams_are_independent_and_reproducible() {
    use rand::Rng;
    let a: u64 = stream(5, Stream::Sampling).random();
    let b: u64 = stream(5, Stream::Sampling).random();
    let c: u64 = stream(5, Stream::Collection).random();
    let d: u64 = stream(6, Stream::Sampling).random();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_ne!(a, d);
}

#[test]
fn store_totals_match_episodes_times_horizon() {
    let cfg = tiny(EnvKind::Push, EncoderMode::MprNoRs);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = sample_distributions(&cfg.env, 7, 1.0, Actor::Random, None, 32, 1, &mut rng).unwrap();
    assert_eq!(store.labels.len(), cfg.env.training_policies().len());
    assert!(store.totals().iter().all(|&t| t == 7 * cfg.env.horizon() as u64));
    for (_, m) in store.heatmaps().unwrap() {
        assert!((m.sum() - 1.0).abs() < 1e-12);
    }

    let keep = tiny(EnvKind::Keep, EncoderMode::MprRs);
    let store = sample_distributions(&keep.env, 3, 1.0, Actor::Random, None, 32, 1, &mut rng).unwrap();
    assert!(store.totals().iter().all(|&t| t == 3 * keep.env.horizon() as u64));
    assert!(!store.is_discrete());
    assert!(store.heatmaps().is_err());
    let d = store.distance_matrix(50, 3).unwrap();
    for i in 0..d.len() {
        assert_eq!(d.get(i, i), Some(0.0));
    }
}

#[test]
fn same_policy_sampled_twice_is_close_in_kl() {
    let cfg = ExperimentConfig::default_for(EnvKind::Push);
    let a = sample_distributions(&cfg.env, 200, 1.0, Actor::Random, None, 32, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = sample_distributions(&cfg.env, 200, 1.0, Actor::Random, None, 32, 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for (p, q) in a.distributions.iter().zip(&b.distributions) {
        let (PolicyDistribution::Table(p), PolicyDistribution::Table(q)) = (p, q) else { panic!("discrete") };
        let kl = symmetric_kl(p, q).unwrap();
        assert!(kl < 0.05, "kl {kl}");
    }
}

#[test]
fn heatmap_csv_has_header_and_rows() {
    let m = Array2::from_shape_vec((2, 3), vec![0.1, 0.2, 0.0, 0.3, 0.4, 0.0]).unwrap();
    let mut buf = Vec::new();
    write_heatmap_csv(&m, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "ego\\opp,0,1,2");
    assert_eq!(lines[2], "1,0.3,0.4,0");
}

#[test]
fn monotone_cells_counts_eligible_cells() {
    let a = Array2::from_shape_vec((1, 3), vec![0.5, 0.1, 0.02]).unwrap();
    let b = Array2::from_shape_vec((1, 3), vec![0.5, 0.2, 0.001]).unwrap();
    let c = Array2::from_shape_vec((1, 3), vec![0.5, 0.3, 0.05]).unwrap();
    // Column 0 is ignored, column 1 rises, column 2 dips then rises.
    assert_eq!(monotone_cells(&[a, b, c], 0.01), (1, 2));
}

#[test]
fn rollout_is_independent_of_worker_count() {
    let cfg = tiny(EnvKind::Keep, EncoderMode::MprRs);
    let enc = crate::encoder::Encoder::new(EncoderSpec::gru(cfg.env.obs_dim(), 8, 32), 4).unwrap();
    let jobs: Vec<EpisodeJob> = (0..5)
        .map(|i| EpisodeJob { episode_id: i, label: 0, opponent: cfg.env.training_policies()[i as usize % 4], seed: 100 + i })
        .collect();
    let a = rollout(&cfg.env, &jobs, Actor::Random, Some(&enc), 32, 1).unwrap();
    let b = rollout(&cfg.env, &jobs, Actor::Random, Some(&enc), 32, 3).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.episode_id, y.episode_id);
        assert_eq!(x.steps, y.steps);
        assert_eq!(x.reps, y.reps);
    }
}

#[test]
fn representation_at_step_k_summarizes_observations_before_k() {
    let cfg = tiny(EnvKind::Push, EncoderMode::MprNoRs);
    let enc = crate::encoder::Encoder::new(EncoderSpec::lstm(cfg.env.obs_dim(), 8, 2, 32), 9).unwrap();
    let jobs = vec![EpisodeJob { episode_id: 0, label: 1, opponent: cfg.env.training_policies()[1], seed: 3 }];
    let ep = rollout(&cfg.env, &jobs, Actor::Random, Some(&enc), 32, 1).unwrap().remove(0);
    assert_eq!(ep.reps.len(), ep.steps.len() + 1);
    let empty = ObservationHistory::new(0, 1, cfg.env.obs_dim());
    let r0 = enc.encode(&empty).unwrap();
    assert_eq!(ep.reps[0], r0);
    for k in [1, 4, ep.steps.len()] {
        let rk = enc.encode(&ep.history.prefix(k)).unwrap();
        let err = rk.iter().zip(&ep.reps[k]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "step {k}: {err}");
    }
    assert_eq!(ep.history.observation(0), ep.steps[0].observation.as_slice());
}

#[test]
fn vanilla_mode_has_no_encoder_and_zero_representations() {
    let cfg = tiny(EnvKind::Push, EncoderMode::None);
    let out = train(&cfg).unwrap();
    assert!(out.encoder.is_none());
    assert!(out.distances.is_none());
    assert!(out.representations.is_empty());
    assert!(out.metrics.iter().all(|m| m.encoder_loss.is_none()));
    assert_eq!(out.total_steps, cfg.total_steps());
}

#[test]
fn resampling_schedule() {
    let mut cfg = tiny(EnvKind::Keep, EncoderMode::MprNoRs);
    let out = train(&cfg).unwrap();
    assert_eq!(out.rebuilds, 0);
    assert!(out.distances.is_some());

    cfg.mode = EncoderMode::MprRs;
    cfg.run.iterations = 5;
    cfg.run.resample_period = 2;
    let out = train(&cfg).unwrap();
    assert_eq!(out.rebuilds, 2);
    assert_eq!(out.metrics.len(), 5);
    assert!(out.metrics.iter().all(|m| m.test_reward.is_some()));
}

#[test]
fn distance_targets_can_be_rescaled() {
    let cfg = tiny(EnvKind::Push, EncoderMode::MprNoRs);
    let plain = train(&cfg).unwrap().distances.unwrap();
    let mut cfg = cfg;
    cfg.set("encoder.distance_scale", "2").unwrap();
    cfg.set("encoder.distance_offset", "0.5").unwrap();
    let scaled = train(&cfg).unwrap().distances.unwrap();
    for i in 0..plain.len() {
        for j in 0..plain.len() {
            let want = if i == j { 0.0 } else { 2.0 * plain.get(i, j).unwrap() + 0.5 };
            assert!((scaled.get(i, j).unwrap() - want).abs() < 1e-12);
        }
    }
}

#[test]
fn every_mode_trains_on_both_environments() {
    for kind in [EnvKind::Push, EnvKind::Keep] {
        for mode in EncoderMode::ALL {
            let mut cfg = tiny(kind, mode);
            cfg.run.iterations = 3;
            let out = train(&cfg).unwrap();
            assert_eq!(out.metrics.len(), 3, "{kind:?} {mode}");
            assert_eq!(out.encoder.is_some(), mode.has_encoder());
            if mode.has_encoder() {
                assert!(out.metrics.iter().any(|m| m.encoder_loss.is_some()), "{kind:?} {mode}");
                let labels: std::collections::HashSet<&str> =
                    out.representations.iter().map(|r| r.label.as_str()).collect();
                assert!(labels.len() >= 2, "{kind:?} {mode}: {labels:?}");
            }
        }
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    for kind in [EnvKind::Push, EnvKind::Keep] {
        let cfg = tiny(kind, if kind == EnvKind::Push { EncoderMode::MprNoRs } else { EncoderMode::MprRs });
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        crate::rl::write_metrics_csv(&a.metrics, &mut ca).unwrap();
        crate::rl::write_metrics_csv(&b.metrics, &mut cb).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.learner.fingerprint(), b.learner.fingerprint());
        let mut other = cfg.clone();
        other.run.seed += 1;
        assert_ne!(train(&other).unwrap().learner.fingerprint(), a.learner.fingerprint());
    }
}

#[test]
fn evaluation_is_deterministic_given_the_rng() {
    let cfg = tiny(EnvKind::Keep, EncoderMode::None);
    let out = train(&cfg).unwrap();
    let run = |seed| {
        evaluate(&cfg.env, out.learner.greedy(), None, 3, 0, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    };
    assert_eq!(run(4).episode_rewards, run(4).episode_rewards);
    assert_ne!(run(4).episode_rewards, run(5).episode_rewards);
    assert_eq!(run(4).episodes.len(), 3);
}

#[test]
fn learner_checkpoints_round_trip() {
    for kind in [EnvKind::Push, EnvKind::Keep] {
        let cfg = tiny(kind, EncoderMode::None);
        let out = train(&cfg).unwrap();
        let mut buf = Vec::new();
        save_learner(&out.learner, 7, &mut buf).unwrap();
        let back = load_learner(&cfg, BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(back.fingerprint(), out.learner.fingerprint());
    }
}

#[test]
fn run_directory_contents() {
    let cfg = tiny(EnvKind::Push, EncoderMode::MprNoRs);
    let out = train(&cfg).unwrap();
    let root = tempfile::tempdir().unwrap();
    let dir = write_run(&out, root.path(), "push").unwrap();
    for f in RUN_FILES.iter().chain(&["distances.csv", "representations.csv", "mds.csv", "mds.svg", "heatmap_d=0.1.csv"]) {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let again = write_run(&out, root.path(), "push").unwrap();
    assert_ne!(dir, again);
    let saved = load_run(&dir).unwrap();
    assert_eq!(saved.config, cfg);
    assert_eq!(saved.learner.fingerprint(), out.learner.fingerprint());
    assert_eq!(saved.encoder.unwrap().fingerprint(), out.encoder.unwrap().fingerprint());
    let metrics = crate::rl::read_metrics_csv(std::fs::File::open(dir.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(metrics, out.metrics);
    // No temporary directories are left behind.
    let names: Vec<String> =
        std::fs::read_dir(root.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(names.iter().all(|n| !n.starts_with('.')), "{names:?}");
}

#[test]
fn output_root_precedence() {
    let explicit = std::path::Path::new("/tmp/somewhere");
    assert_eq!(output_root(Some(explicit)), explicit);
}

fn row(label: &str, ep: u64, t: usize, v: &[f64]) -> crate::encoder::RepresentationRow {
    crate::encoder::RepresentationRow { episode_id: ep, label: label.into(), t, values: v.to_vec() }
}

#[test]
fn mds_of_collinear_points_keeps_distances() {
    let rows: Vec<_> = (0..5).map(|i| row("a", i, 1, &[i as f64 * 2.0, i as f64, 0.0])).collect();
    let (pts, neg) = export_mds(&rows, MdsMode::PerStep, None).unwrap();
    assert!(neg < 1e-9);
    for i in 0..5 {
        for j in 0..5 {
            let want = (i as f64 - j as f64).abs() * 5f64.sqrt();
            let got = crate::distmath::euclidean(&pts[i].coords, &pts[j].coords);
            assert!((got - want).abs() < 1e-9);
        }
    }
    assert!(export_mds(&rows[..2], MdsMode::PerStep, None).is_err());
}

#[test]
fn last_steps_and_episode_means() {
    let rows: Vec<_> = (1..=5).map(|t| row("x", 0, t, &[t as f64])).chain((1..=3).map(|t| row("y", 1, t, &[10.0]))).collect();
    let kept = last_steps(&rows, Some(2));
    let ts: Vec<usize> = kept.iter().map(|r| r.t).collect();
    assert_eq!(ts, vec![4, 5, 2, 3]);
    let means = representation_points(&rows, MdsMode::EpisodeMean);
    assert_eq!(means.len(), 2);
    assert_eq!(means[0].coords, vec![3.0]);
    assert_eq!(means[1].t, None);
}

#[test]
fn centroid_geometry_helpers() {
    let pts = vec![
        LabeledPoint { label: "a".into(), episode_id: 0, t: None, coords: vec![0.0, 0.0] },
        LabeledPoint { label: "a".into(), episode_id: 1, t: None, coords: vec![2.0, 0.0] },
        LabeledPoint { label: "b".into(), episode_id: 2, t: None, coords: vec![5.0, 1.0] },
        LabeledPoint { label: "c".into(), episode_id: 3, t: None, coords: vec![1.5, 3.0] },
    ];
    let c = centroids(&pts);
    assert_eq!(c[0], ("a".to_string(), vec![1.0, 0.0]));
    assert!((projection_fraction(&c[0].1, &c[1].1, &c[2].1) - 5.0 / 17.0).abs() < 1e-12);
    let (x, y, _) = closest_pair(&c).unwrap();
    assert_eq!((x.as_str(), y.as_str()), ("a", "c"));
}

#[test]
fn svg_legend_lists_exactly_the_labels_present() {
    let pts = vec![
        LabeledPoint { label: "d=0.3".into(), episode_id: 0, t: Some(1), coords: vec![0.0, 1.0] },
        LabeledPoint { label: "d=0.5".into(), episode_id: 1, t: Some(1), coords: vec![1.0, 0.0] },
    ];
    let svg = mds_svg(&pts, "t");
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<circle").count(), 2);
    assert!(svg.contains(">d=0.3</text>") && svg.contains(">d=0.5</text>"));
    assert!(!svg.contains("d=0.75"));

    let curve = mean_std_curve("m", &[vec![(1.0, 1.0), (2.0, 3.0)], vec![(1.0, 3.0), (2.0, 3.0)]]);
    assert_eq!(curve.points, vec![(1.0, 2.0, 1.0), (2.0, 3.0, 0.0)]);
    let svg = reward_svg(&[curve], "r", "steps");
    assert!(svg.contains("<polyline") && svg.contains("<polygon"));
}

#[test]
fn default_mds_settings() {
    assert_eq!(default_mds(EnvKind::Push), (MdsMode::PerStep, Some(10)));
    assert_eq!(default_mds(EnvKind::Keep), (MdsMode::EpisodeMean, None));
}
