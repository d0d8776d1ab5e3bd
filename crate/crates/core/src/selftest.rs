//! Quick built-in checks: layer and loss gradients against central
//! differences, distance axioms on random inputs, and environment replay
//! determinism.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distmath::{
    build_frequency_table, sliced_wasserstein, symmetric_kl, Action, ActionSpaceSizes, JointActionSample,
    ProjectionSet, SampleSet,
};
use crate::encoder::{cross_entropy, embed_loss_from_reps, EmbedPair};
use crate::envs::{EnvConfig, EnvKind, Episode, PolicySet};
use crate::nn::gradcheck::{max_relative_error, numerical_grads, relative_error};
use crate::nn::{dense, Activation, LayerSpec, Network, SeqBatch};

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn layer_error(specs: Vec<LayerSpec>, steps: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 3;
    let mut net = Network::new(specs, seed).map_err(|e| e.to_string())?;
    let input = SeqBatch::new(steps, batch, random_matrix(steps * batch, net.input_dim(), &mut rng)).map_err(|e| e.to_string())?;
    let w = random_matrix(steps * batch, net.output_dim(), &mut rng);
    net.forward(&input, None).map_err(|e| e.to_string())?;
    net.zero_grad();
    net.backward(&SeqBatch::new(steps, batch, w.clone()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let analytic = net.grads().to_vec();
    let numeric = numerical_grads(&mut net, 1e-5, |n| n.predict(&input, None).map(|(y, _)| (y.data() * &w).sum()).unwrap_or(f64::NAN));
    Ok(max_relative_error(&analytic, &numeric))
}

/// Max relative error of a loss gradient with respect to its input matrix.
fn input_error(x: &Array2<f64>, loss: impl Fn(&Array2<f64>) -> (f64, Array2<f64>)) -> f64 {
    let (_, g) = loss(x);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let mut xp = x.clone();
        xp[[r, c]] += h;
        let mut xm = x.clone();
        xm[[r, c]] -= h;
        let num = (loss(&xp).0 - loss(&xm).0) / (2.0 * h);
        worst = worst.max(relative_error(g[[r, c]], num));
    }
    worst
}

fn gradient_checks() -> Vec<Check> {
    let layers: [(&'static str, Vec<LayerSpec>, usize); 4] = [
        ("gradient: dense relu/tanh", vec![dense(4, 5, Activation::Tanh), dense(5, 3, Activation::Relu)], 1),
        ("gradient: dense identity", vec![dense(4, 2, Activation::Identity)], 1),
        ("gradient: lstm", vec![LayerSpec::Lstm { input: 3, hidden: 4 }, LayerSpec::Lstm { input: 4, hidden: 3 }], 4),
        ("gradient: gru", vec![LayerSpec::Gru { input: 3, hidden: 4 }], 4),
    ];
    let mut out: Vec<Check> = layers
        .into_iter()
        .enumerate()
        .map(|(k, (name, specs, steps))| match layer_error(specs, steps, 40 + k as u64) {
            Ok(e) => Check { name, passed: e < 1e-4, detail: format!("max relative error {e:.2e}") },
            Err(e) => Check { name, passed: false, detail: e },
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let reps = random_matrix(4, 6, &mut rng);
    let pairs: Vec<EmbedPair> = [(0, 1), (0, 2), (1, 3), (2, 3)]
        .into_iter()
        .map(|(i, j)| EmbedPair { i, j, target: rng.random_range(0.2..2.0) })
        .collect();
    let e = input_error(&reps, |x| embed_loss_from_reps(x.view(), &pairs).expect("valid pairs"));
    out.push(Check { name: "gradient: metric embedding loss", passed: e < 1e-4, detail: format!("max relative error {e:.2e}") });

    let logits = random_matrix(5, 4, &mut rng).mapv(|v| 3.0 * v);
    let targets = [0, 3, 1, 2, 3];
    let e = input_error(&logits, |x| cross_entropy(x.view(), &targets).expect("valid targets"));
    out.push(Check { name: "gradient: action cross-entropy", passed: e < 1e-4, detail: format!("max relative error {e:.2e}") });
    out
}

fn metric_checks(instances: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sizes = ActionSpaceSizes::new(3, vec![4]);
    let mut kl_bad = 0;
    for _ in 0..instances {
        let table = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(1..40);
            let samples: Vec<JointActionSample> = (0..n)
                .map(|_| JointActionSample {
                    ego_action: Action::Discrete(rng.random_range(0..3)),
                    opp_action: vec![Action::Discrete(rng.random_range(0..4))],
                    policy_label: 0,
                })
                .collect();
            build_frequency_table(&samples, &sizes, 1.0).expect("in range")
        };
        let (p, q) = (table(&mut rng), table(&mut rng));
        let (pq, qp, pp) = (symmetric_kl(&p, &q).unwrap_or(f64::NAN), symmetric_kl(&q, &p).unwrap_or(f64::NAN), symmetric_kl(&p, &p).unwrap_or(f64::NAN));
        if !(pq >= -1e-9 && (pq - qp).abs() <= 1e-9 && pp.abs() <= 1e-9) {
            kl_bad += 1;
        }
    }
    let mut sw_bad = 0;
    for k in 0..instances {
        let proj = ProjectionSet::random(3, 20, k as u64);
        let set = |rng: &mut ChaCha8Rng| {
            let pts: Vec<Vec<f64>> = (0..rng.random_range(1..30)).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            SampleSet::from_points(3, &pts).expect("3-D points")
        };
        let (x, y) = (set(&mut rng), set(&mut rng));
        let d = |a: &SampleSet, b: &SampleSet| sliced_wasserstein(a, b, &proj).unwrap_or(f64::NAN);
        let (xy, yx, xx) = (d(&x, &y), d(&y, &x), d(&x, &x));
        if !(xy >= -1e-9 && (xy - yx).abs() <= 1e-9 && xx.abs() <= 1e-9) {
            sw_bad += 1;
        }
    }
    vec![
        Check { name: "metric: symmetric KL axioms", passed: kl_bad == 0, detail: format!("{kl_bad} of {instances} violations") },
        Check { name: "metric: sliced Wasserstein axioms", passed: sw_bad == 0, detail: format!("{sw_bad} of {instances} violations") },
    ]
}

fn replay(cfg: &EnvConfig, seed: u64) -> Result<Vec<u64>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opponent = cfg.sample_opponent(PolicySet::Training, &mut rng);
    let mut ep = Episode::new(cfg, opponent, seed).map_err(|e| e.to_string())?;
    let mut trace = Vec::new();
    while !ep.is_done() {
        let a = match cfg.kind() {
            EnvKind::Push => Action::Discrete(rng.random_range(0..crate::envs::PUSH_NUM_ACTIONS)),
            EnvKind::Keep => Action::Continuous(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
        };
        let s = ep.step(&a).map_err(|e| e.to_string())?;
        trace.extend(s.next_observation.iter().map(|v| v.to_bits()));
        trace.push(s.reward.to_bits());
    }
    Ok(trace)
}

fn env_checks() -> Vec<Check> {
    [("environment: push replay", EnvKind::Push), ("environment: keep replay", EnvKind::Keep)]
        .into_iter()
        .map(|(name, kind)| {
            let cfg = EnvConfig::default_for(kind);
            match (replay(&cfg, 5), replay(&cfg, 5), replay(&cfg, 6)) {
                (Ok(a), Ok(b), Ok(c)) => Check {
                    name,
                    passed: a == b && a != c,
                    detail: format!("{} values per episode, same seed identical: {}", a.len(), a == b),
                },
                (Err(e), ..) | (_, Err(e), _) | (.., Err(e)) => Check { name, passed: false, detail: e },
            }
        })
        .collect()
}

/// Every check in order: gradients, distance axioms, environment replay.
pub fn run_all() -> Vec<Check> {
    let mut out = gradient_checks();
    out.extend(metric_checks(1000));
    out.extend(env_checks());
    out
}
