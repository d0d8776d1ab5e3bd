//! End-to-end acceptance criteria. Every test prints one `criterion N PASS`
//! or `criterion N FAIL` line on stderr, whether or not output is captured.
//!
//! The training campaigns (criteria 6 to 10) run the default configurations
//! over five seeds and take a few hours on one core.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use mprlab::distmath::{
    build_frequency_table, sliced_wasserstein, symmetric_kl, wasserstein_1d, Action, ActionSpaceSizes, FrequencyTable,
    JointActionSample, PolicyDistanceMatrix, ProjectionSet, SampleSet,
};
use mprlab::encoder::{
    action_prediction_loss, action_prediction_loss_backward, embed_loss, embed_loss_backward, embed_step, ActionPredictor,
    EmbedBatch, Encoder, EncoderOptimizer, EncoderSpec, ObservationHistory, RepresentationRow,
};
use mprlab::envs::EnvKind;
use mprlab::nn::gradcheck::{max_relative_error, numerical_grads};
use mprlab::nn::{dense, Activation, LayerSpec, Network, SeqBatch, Tensor};
use mprlab::orchestrator::{
    centroids, closest_pair, export_mds, monotone_cells, projection_fraction, representation_points, sample_distributions,
    stream, train_with, write_run, Actor, EncoderMode, ExperimentConfig, LabeledPoint, MdsMode, Stream,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn report(n: usize, passed: bool, detail: &str) {
    let line = format!("criterion {n} {}: {detail}\n", if passed { "PASS" } else { "FAIL" });
    // Straight to the process stderr so the line survives output capture.
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn random_table(rng: &mut ChaCha8Rng) -> FrequencyTable {
    let n = rng.random_range(1..60);
    let samples: Vec<JointActionSample> = (0..n)
        .map(|_| JointActionSample {
            ego_action: Action::Discrete(rng.random_range(0..5)),
            opp_action: vec![Action::Discrete(rng.random_range(0..5))],
            policy_label: 0,
        })
        .collect();
    build_frequency_table(&samples, &ActionSpaceSizes::new(5, vec![5]), 1.0).unwrap()
}

fn random_set(dim: usize, rng: &mut ChaCha8Rng) -> SampleSet {
    let n = rng.random_range(1..40);
    let scale = rng.random_range(0.1..3.0);
    let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).collect();
    SampleSet::from_points(dim, &pts).unwrap()
}

#[test]
fn criterion_01_distance_axioms() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let slack = 1e-9;
    let mut kl_bad = 0;
    for _ in 0..1000 {
        let (p, q) = (random_table(&mut rng), random_table(&mut rng));
        let pq = symmetric_kl(&p, &q).unwrap();
        let qp = symmetric_kl(&q, &p).unwrap();
        let pp = symmetric_kl(&p, &p).unwrap();
        if !(pq >= -slack && (pq - qp).abs() <= slack && pp.abs() <= slack) {
            kl_bad += 1;
        }
    }
    let mut sw_bad = 0;
    for k in 0..1000 {
        let dim = rng.random_range(1..5);
        let proj = ProjectionSet::random(dim, 100, k);
        let (x, y, z) = (random_set(dim, &mut rng), random_set(dim, &mut rng), random_set(dim, &mut rng));
        let d = |a: &SampleSet, b: &SampleSet| sliced_wasserstein(a, b, &proj).unwrap();
        let (xy, yx, xx, xz, yz) = (d(&x, &y), d(&y, &x), d(&x, &x), d(&x, &z), d(&y, &z));
        if !(xy >= -slack && (xy - yx).abs() <= slack && xx.abs() <= slack && xz <= xy + yz + slack) {
            sw_bad += 1;
        }
    }
    let passed = kl_bad == 0 && sw_bad == 0;
    report(1, passed, &format!("symmetric KL violations {kl_bad}/1000, sliced Wasserstein violations {sw_bad}/1000"));
    assert!(passed);
}

/// W1 between equal-size 1-D samples: mean absolute difference of the sorted values.
fn sorted_w1(x: &[f64], y: &[f64]) -> f64 {
    let (mut a, mut b) = (x.to_vec(), y.to_vec());
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(u, v)| (u - v).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn criterion_02_sliced_wasserstein_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_1d: f64 = 0.0;
    for k in 0..200 {
        let n = rng.random_range(1..50);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..5.0)).collect();
        let to_set = |v: &[f64]| SampleSet::from_points(1, &v.iter().map(|&a| vec![a]).collect::<Vec<_>>()).unwrap();
        let sw = sliced_wasserstein(&to_set(&x), &to_set(&y), &ProjectionSet::random(1, 100, k)).unwrap();
        let w1 = wasserstein_1d(&x, &y).unwrap();
        worst_1d = worst_1d.max((sw - w1).abs()).max((w1 - sorted_w1(&x, &y)).abs());
    }

    let shift = [1.2, -0.5];
    let norm = f64::hypot(shift[0], shift[1]);
    let gauss = |rng: &mut ChaCha8Rng, offset: [f64; 2]| -> Vec<Vec<f64>> {
        (0..2000)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                vec![a + offset[0], b + offset[1]]
            })
            .collect()
    };
    let x = SampleSet::from_points(2, &gauss(&mut rng, [0.0, 0.0])).unwrap();
    let y = SampleSet::from_points(2, &gauss(&mut rng, shift)).unwrap();
    let sw = sliced_wasserstein(&x, &y, &ProjectionSet::random(2, 500, 7)).unwrap();
    let expected = 2.0 / std::f64::consts::PI * norm;
    let rel = (sw - expected).abs() / expected;

    let passed = worst_1d <= 1e-12 && rel < 0.05;
    report(2, passed, &format!("1-D max |SW - W1| {worst_1d:.1e}; Gaussian shift SW {sw:.4} vs 2/pi*|shift| {expected:.4} ({:.2}% off)", 100.0 * rel));
    assert!(passed);
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Analytic against central-difference gradients of `sum(w * net(x))`.
fn network_error(specs: Vec<LayerSpec>, steps: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 3;
    let mut net = Network::new(specs, seed).unwrap();
    let x = SeqBatch::new(steps, batch, random_matrix(steps * batch, net.input_dim(), &mut rng)).unwrap();
    let w = random_matrix(steps * batch, net.output_dim(), &mut rng);
    net.forward(&x, None).unwrap();
    net.zero_grad();
    net.backward(&SeqBatch::new(steps, batch, w.clone()).unwrap()).unwrap();
    let analytic = net.grads().to_vec();
    let numeric = numerical_grads(&mut net, 1e-5, |n| (n.predict(&x, None).unwrap().0.data() * &w).sum());
    max_relative_error(&analytic, &numeric)
}

fn random_history(id: u64, len: usize, dim: usize, rng: &mut ChaCha8Rng) -> ObservationHistory {
    let mut h = ObservationHistory::new(id, (id % 2) as usize, dim);
    for _ in 0..len {
        let o: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        h.push(&o, vec![Action::Discrete(rng.random_range(0..5))]).unwrap();
    }
    h
}

/// Central differences over every encoder parameter, then every predictor parameter.
fn encoder_numeric(enc: &Encoder, pred: &ActionPredictor, loss: impl Fn(&Encoder, &ActionPredictor) -> f64) -> Vec<Tensor> {
    let h = 1e-5;
    let mut out = Vec::new();
    for ni in 0..3 {
        let count = if ni < 2 { enc.clone().networks_mut()[ni].params().len() } else { pred.net.params().len() };
        for pi in 0..count {
            let shape = if ni < 2 { enc.clone().networks_mut()[ni].params()[pi].shape().to_vec() } else { pred.net.params()[pi].shape().to_vec() };
            let mut g = Tensor::zeros(&shape);
            for k in 0..g.len() {
                let eval = |delta: f64| {
                    let (mut e, mut p) = (enc.clone(), pred.clone());
                    let net: &mut Network = if ni < 2 { e.networks_mut()[ni] } else { &mut p.net };
                    net.params_mut()[pi].data_mut()[k] += delta;
                    loss(&e, &p)
                };
                g.data_mut()[k] = (eval(h) - eval(-h)) / (2.0 * h);
            }
            out.push(g);
        }
    }
    out
}

fn analytic_grads(enc: &mut Encoder, pred: &ActionPredictor) -> Vec<Tensor> {
    let [r, h] = enc.networks_mut();
    r.grads().iter().chain(h.grads()).chain(pred.net.grads()).cloned().collect()
}

#[test]
fn criterion_03_gradient_checks() {
    let mut errors: Vec<(String, f64)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for (k, act) in [Activation::Relu, Activation::Tanh, Activation::Identity].into_iter().enumerate() {
        let (i, h, o) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..4));
        let e = network_error(vec![dense(i, h, act), dense(h, o, act)], 1, 10 + k as u64);
        errors.push((format!("dense {}", act.name()), e));
    }
    let (i, h) = (rng.random_range(2..5), rng.random_range(2..5));
    errors.push(("lstm".into(), network_error(vec![LayerSpec::Lstm { input: i, hidden: h }, LayerSpec::Lstm { input: h, hidden: 3 }], 5, 20)));
    errors.push(("gru".into(), network_error(vec![LayerSpec::Gru { input: i, hidden: h }, LayerSpec::Gru { input: h, hidden: 3 }], 5, 21)));

    let histories: Vec<Arc<ObservationHistory>> = (0..4).map(|k| Arc::new(random_history(k, 3 + k as usize, 3, &mut rng))).collect();
    let d = PolicyDistanceMatrix::new(vec!["a".into(), "b".into()], ndarray::array![[0.0, 1.3], [1.3, 0.0]]).unwrap();
    let batch = EmbedBatch::all_pairs(histories.clone(), &d).unwrap();
    let refs: Vec<&ObservationHistory> = histories.iter().map(|h| h.as_ref()).collect();
    for (name, spec) in [("lstm", EncoderSpec::lstm(3, 4, 2, 5)), ("gru", EncoderSpec::gru(3, 4, 5))] {
        let mut enc = Encoder::new(spec, 30).unwrap();
        let mut pred = ActionPredictor::categorical(5, vec![5], 31).unwrap();

        enc.zero_grad();
        pred.net.zero_grad();
        embed_loss_backward(&batch, &mut enc).unwrap();
        let analytic = analytic_grads(&mut enc, &pred);
        let numeric = encoder_numeric(&enc, &pred, |e, _| embed_loss(&batch, e).unwrap());
        errors.push((format!("embedding loss through {name} encoder"), max_relative_error(&analytic, &numeric)));

        enc.zero_grad();
        let reps = enc.forward_prefixes(&refs).unwrap();
        let (_, g) = action_prediction_loss_backward(&refs, &reps, &mut pred).unwrap();
        enc.backward_prefixes(&g).unwrap();
        let analytic = analytic_grads(&mut enc, &pred);
        let numeric = encoder_numeric(&enc, &pred, |e, p| action_prediction_loss(&refs, e, p).unwrap());
        errors.push((format!("action cross-entropy through {name} encoder"), max_relative_error(&analytic, &numeric)));
    }
    let worst = errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    let passed = worst < 1e-4;
    report(3, passed, &format!("max relative error {worst:.1e} ({})", detail.join(", ")));
    assert!(passed);
}

#[test]
fn criterion_04_synthetic_distance_recovery() {
    let (obs_dim, len, per_policy, rep_dim) = (4, 8, 6, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    // Targets are distances between four random points in the representation space.
    let points: Vec<Vec<f64>> = (0..4).map(|_| (0..rep_dim).map(|_| 0.2 * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let targets = Array2::from_shape_fn((4, 4), |(i, j)| points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
    let labels: Vec<String> = (0..4).map(|k| format!("p{k}")).collect();
    let d = PolicyDistanceMatrix::new(labels, targets.clone()).unwrap();

    // Policy k emits a fixed per-step pattern plus small noise.
    let patterns: Vec<Vec<f64>> = (0..4).map(|_| (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut histories = Vec::new();
    for k in 0..4 {
        for e in 0..per_policy {
            let mut h = ObservationHistory::new((k * per_policy + e) as u64, k, obs_dim);
            for t in 0..len {
                let o: Vec<f64> = patterns[k].iter().map(|p| p * (1.0 + 0.3 * (t as f64).sin()) + 0.02 * rng.random_range(-1.0..1.0)).collect();
                h.push(&o, vec![]).unwrap();
            }
            histories.push(Arc::new(h));
        }
    }
    let batch = EmbedBatch::all_pairs(histories, &d).unwrap();
    let mut enc = Encoder::new(EncoderSpec::lstm(obs_dim, 32, 2, rep_dim), 405).unwrap();
    let mut opt = EncoderOptimizer::new(3e-3, Some(10.0));
    let mut loss = embed_loss(&batch, &enc).unwrap();
    let mut steps = 0;
    while loss >= 1e-3 && steps < 5000 {
        embed_step(&batch, &mut enc, &mut opt).unwrap();
        steps += 1;
        if steps % 50 == 0 {
            loss = embed_loss(&batch, &enc).unwrap();
        }
    }
    loss = embed_loss(&batch, &enc).unwrap();

    let reps = enc.predict_final(&batch.history_refs()).unwrap();
    let mut sums = Array2::<f64>::zeros((4, 4));
    let mut counts = Array2::<f64>::zeros((4, 4));
    for a in 0..batch.histories.len() {
        for b in 0..batch.histories.len() {
            let (la, lb) = (batch.histories[a].label, batch.histories[b].label);
            if la != lb {
                let dist = (&reps.row(a) - &reps.row(b)).mapv(|v| v * v).sum().sqrt();
                sums[[la, lb]] += dist;
                counts[[la, lb]] += 1.0;
            }
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                worst = worst.max((sums[[i, j]] / counts[[i, j]] - targets[[i, j]]).abs() / targets[[i, j]]);
            }
        }
    }
    let passed = loss < 1e-3 && worst <= 0.05;
    report(4, passed, &format!("embedding loss {loss:.2e} after {steps} steps, worst relative distance error {:.2}%", 100.0 * worst));
    assert!(passed);
}

#[test]
fn criterion_05_push_heatmap_monotonicity() {
    let cfg = ExperimentConfig::default_for(EnvKind::Push);
    let mut rng = stream(0, Stream::Sampling);
    let store = sample_distributions(&cfg.env, 200, cfg.encoder.smoothing, Actor::Random, None, 0, cfg.run.workers, &mut rng).unwrap();
    let maps: Vec<Array2<f64>> = store.heatmaps().unwrap().into_iter().map(|(_, m)| m).collect();
    let (ok, n) = monotone_cells(&maps, 0.01);
    let frac = ok as f64 / n.max(1) as f64;
    let passed = n > 0 && frac >= 0.8;
    report(5, passed, &format!("{ok} of {n} cells monotone across {} ({:.0}%)", store.labels.join(", "), 100.0 * frac));
    assert!(passed);
}

/// What the criteria need from one finished training run.
struct RunSummary {
    final_avg: f64,
    representations: Vec<RepresentationRow>,
    metrics_csv: Vec<u8>,
}

type Campaign = Vec<(EncoderMode, u64, RunSummary)>;

fn run_config(kind: EnvKind, mode: EncoderMode, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default_for(kind);
    cfg.mode = mode;
    cfg.run.seed = seed;
    cfg
}

fn run_once(kind: EnvKind, mode: EncoderMode, seed: u64) -> RunSummary {
    let cfg = run_config(kind, mode, seed);
    let start = Instant::now();
    let out = train_with(&cfg, &mut |_| {}).unwrap();
    let root = tempfile::tempdir().unwrap();
    let dir = write_run(&out, root.path(), "run").unwrap();
    let metrics_csv = std::fs::read(dir.join("metrics.csv")).unwrap();
    let final_avg = out.final_test_average().unwrap();
    let line = format!("  {} {mode} seed {seed}: final test average {final_avg:.3} ({:.0}s)\n", kind.name(), start.elapsed().as_secs_f64());
    let _ = std::io::stderr().write_all(line.as_bytes());
    RunSummary { final_avg, representations: out.representations, metrics_csv }
}

fn campaign(kind: EnvKind, modes: &[EncoderMode]) -> Campaign {
    let mut out = Vec::new();
    for &mode in modes {
        for seed in SEEDS {
            out.push((mode, seed, run_once(kind, mode, seed)));
        }
    }
    out
}

fn push_campaign() -> &'static Campaign {
    static C: OnceLock<Campaign> = OnceLock::new();
    C.get_or_init(|| campaign(EnvKind::Push, &[EncoderMode::MprNoRs, EncoderMode::Triplet, EncoderMode::None]))
}

fn keep_campaign() -> &'static Campaign {
    static C: OnceLock<Campaign> = OnceLock::new();
    C.get_or_init(|| campaign(EnvKind::Keep, &[EncoderMode::MprRs, EncoderMode::MprNoRs, EncoderMode::Triplet, EncoderMode::None]))
}

// Campaign-backed tests hold this lock so a parallel test runner does not
// interleave several hour-long campaigns.
static HEAVY: Mutex<()> = Mutex::new(());

fn finals(c: &Campaign, mode: EncoderMode) -> Vec<f64> {
    c.iter().filter(|(m, ..)| *m == mode).map(|(.., r)| r.final_avg).collect()
}

fn runs(c: &Campaign, mode: EncoderMode) -> impl Iterator<Item = (u64, &RunSummary)> {
    c.iter().filter(move |(m, ..)| *m == mode).map(|(_, s, r)| (*s, r))
}

fn stats(v: &[f64]) -> String {
    format!("{:.3} +- {:.3}", mean(v), sample_std(v))
}

#[test]
fn criterion_06_push_mpr_beats_baselines() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let c = push_campaign();
    let (nors, tri, none) = (finals(c, EncoderMode::MprNoRs), finals(c, EncoderMode::Triplet), finals(c, EncoderMode::None));
    let passed = mean(&nors) > mean(&tri)
        && mean(&nors) > mean(&none)
        && mean(&nors) - sample_std(&nors) > mean(&none) + sample_std(&none);
    report(6, passed, &format!("final test average MPR-NoRS {}, Triplet {}, vanilla {}", stats(&nors), stats(&tri), stats(&none)));
    assert!(passed);
}

fn centroid_of<'a>(cs: &'a [(String, Vec<f64>)], label: &str) -> Option<&'a [f64]> {
    cs.iter().find(|(l, _)| l == label).map(|(_, c)| c.as_slice())
}

#[test]
fn criterion_07_push_test_policy_lies_between_neighbours() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let c = push_campaign();
    let mut fractions = Vec::new();
    for (_, r) in runs(c, EncoderMode::MprNoRs) {
        let (points, _) = export_mds(&r.representations, MdsMode::PerStep, Some(10)).unwrap();
        let cs = centroids(&points);
        let f = match (centroid_of(&cs, "d=0.3"), centroid_of(&cs, "d=0.75"), centroid_of(&cs, "d=0.5")) {
            (Some(a), Some(b), Some(t)) => projection_fraction(a, b, t),
            _ => f64::NAN,
        };
        fractions.push(f);
    }
    let inside = fractions.iter().filter(|f| **f > 0.0 && **f < 1.0).count();
    let passed = inside >= 4;
    let shown: Vec<String> = fractions.iter().map(|f| format!("{f:.3}")).collect();
    report(7, passed, &format!("d=0.5 projects inside d=0.3 -> d=0.75 in {inside}/5 seeds (fractions {})", shown.join(", ")));
    assert!(passed);
}

#[test]
fn criterion_08_keep_mpr_beats_baselines() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let c = keep_campaign();
    let rs = finals(c, EncoderMode::MprRs);
    let nors = finals(c, EncoderMode::MprNoRs);
    let tri = finals(c, EncoderMode::Triplet);
    let none = finals(c, EncoderMode::None);
    let passed = mean(&rs) - sample_std(&rs) > mean(&none) + sample_std(&none)
        && mean(&rs) > mean(&tri)
        && mean(&nors) > mean(&tri);
    report(
        8,
        passed,
        &format!("final test average MPR-RS {}, MPR-NoRS {}, Triplet {}, vanilla {}", stats(&rs), stats(&nors), stats(&tri), stats(&none)),
    );
    assert!(passed);
}

#[test]
fn criterion_09_keep_closest_training_policies() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let c = keep_campaign();
    let want: BTreeSet<&str> = ["(45.0,1.0,0.5)", "(0.0,1.0,0.3)"].into_iter().collect();
    let mut hits = 0;
    let mut found = Vec::new();
    for (_, r) in runs(c, EncoderMode::MprRs) {
        let points: Vec<LabeledPoint> =
            representation_points(&r.representations, MdsMode::EpisodeMean).into_iter().filter(|p| p.label != "test").collect();
        if let Some((a, b, _)) = closest_pair(&centroids(&points)) {
            if want == [a.as_str(), b.as_str()].into_iter().collect() {
                hits += 1;
            }
            found.push(format!("{a}/{b}"));
        }
    }
    let passed = hits >= 4;
    report(9, passed, &format!("closest pair is (45.0,1.0,0.5)/(0.0,1.0,0.3) in {hits}/5 seeds ({})", found.join(", ")));
    assert!(passed);
}

#[test]
fn criterion_10_reruns_are_byte_identical() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let c = push_campaign();
    let (_, first) = runs(c, EncoderMode::MprNoRs).find(|(s, _)| *s == 0).unwrap();
    let again = run_once(EnvKind::Push, EncoderMode::MprNoRs, 0);
    let passed = first.metrics_csv == again.metrics_csv;
    report(10, passed, &format!("metrics.csv of Push MPR-NoRS seed 0 rerun: {} bytes, identical: {passed}", again.metrics_csv.len()));
    assert!(passed);
}
