//! Acceptance checks. Runs as a plain binary and prints one line per
//! criterion. Pass criterion numbers as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;

use maxfl::client::LossBasis;
use maxfl::config::ExperimentConfig;
use maxfl::experiment::{run_seeds, write_rounds_csv, Simulation};
use maxfl::meanest::{
    expected_appeal, fedavg_upper_bound, find_local_minima, grad_v, hessian_v, maxfl_lower_bound, Estimator,
    StationaryKind, SurrogateKind, DEFAULT_GRID_STEP,
};
use maxfl::metrics::{maxfl_grad_norm, maxfl_objective_grad};
use maxfl::models::{self, fd_check, Batch, ModelSpec, Targets};
use maxfl::rng::std_normal;
use maxfl::server::AggregatorSpec;
use maxfl::{weight_from_gap, AppealGap, ModelParams, Purpose, RngStream, WeightMode};

const FLAGSHIP: &str = include_str!("../../../configs/flagship.toml");

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check {
        pass,
        detail: detail.into(),
    }
}

fn stream(i: u64) -> RngStream {
    RngStream::new(7, i, 0, Purpose::Test)
}

fn flagship() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(FLAGSHIP).expect("flagship config parses")
}

// independent oracles

fn oracle_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn oracle_q(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Five-point stencil derivative of `f` along coordinate `i`.
fn stencil<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut at = |d: f64| {
        p[i] = x[i] + d;
        f(&p)
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

fn random_batch(spec: &ModelSpec, rng: &mut impl Rng) -> Batch {
    let n = rng.random_range(1..=16);
    if matches!(spec, ModelSpec::ScalarQuadratic) {
        return Batch::scalar((0..n).map(|_| 3.0 * std_normal(rng)).collect());
    }
    let dim = spec.input_dim();
    let inputs = (0..n * dim).map(|_| std_normal(rng)).collect();
    let targets = match spec.classes() {
        Some(c) => Targets::Labels((0..n).map(|_| rng.random_range(0..c)).collect()),
        None => Targets::Values((0..n).map(|_| std_normal(rng)).collect()),
    };
    Batch::new(inputs, dim, targets).unwrap()
}

// criteria

fn c1_gradients() -> Check {
    let specs = [
        ModelSpec::ScalarQuadratic,
        ModelSpec::LinearRegression { input_dim: 3 },
        ModelSpec::SoftmaxRegression { input_dim: 4, classes: 3 },
        ModelSpec::Mlp {
            layer_sizes: vec![4, 8, 3],
        },
    ];
    let mut worst_fd = 0.0f64;
    let mut worst_scalar = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for (s, spec) in specs.iter().enumerate() {
        let mut rng = stream(s as u64).rng();
        for _ in 0..100 {
            let batch = random_batch(spec, &mut rng);
            let w = ModelParams((0..spec.param_count()).map(|_| 0.5 * std_normal(&mut rng)).collect());
            let err = fd_check(spec, &w, &batch, 1e-5).unwrap();
            if matches!(spec, ModelSpec::ScalarQuadratic) {
                worst_scalar = worst_scalar.max(err);
            } else {
                worst_fd = worst_fd.max(err);
            }
            let g = models::grad(spec, &w, &batch).unwrap();
            let f = |x: &[f64]| models::loss(spec, &ModelParams(x.to_vec()), &batch).unwrap();
            for i in 0..w.dim() {
                let d = stencil(f, w.as_slice(), i, 1e-6);
                worst_oracle = worst_oracle.max((g.0[i] - d).abs() / g.0[i].abs().max(1.0));
            }
        }
    }
    check(
        worst_fd <= 1e-4 && worst_scalar <= 1e-9 && worst_oracle <= 1e-4,
        format!("fd err {worst_fd:.2e} (<=1e-4), scalar {worst_scalar:.2e} (<=1e-9), stencil {worst_oracle:.2e}"),
    )
}

fn small_classification(model: &str) -> ExperimentConfig {
    let text = format!(
        r#"
seeds = [3]
rounds = 1
clients_per_round = 4
warmup_steps = 30
[algorithm]
kind = "maxfl"
[model]
{model}
[data]
n_clients = 4
[data.source]
kind = "synthetic"
n_samples = 400
n_features = 4
n_labels = 4
cluster_sep = 2.0
[data.partition]
scheme = "dirichlet"
alpha = 0.5
"#
    );
    ExperimentConfig::from_toml_str(&text).expect("small config parses")
}

fn c2_objective_gradient() -> Check {
    let mut worst = [0.0f64; 2];
    let mut worst_norm = 0.0f64;
    let mut states = 0;
    for (m, model) in ["kind = \"softmax_regression\"", "kind = \"mlp\"\nhidden = [5]"]
        .iter()
        .enumerate()
    {
        let sim = Simulation::new(&small_classification(model), 3).unwrap();
        let (spec, profiles) = (&sim.spec, &sim.seen);
        let rhos: Vec<f64> = profiles.iter().map(|p| p.rho().unwrap()).collect();
        let mut rng = stream(100 + m as u64).rng();
        for _ in 0..10 {
            let w = ModelParams(
                sim.server
                    .w
                    .as_slice()
                    .iter()
                    .map(|x| x + 0.3 * std_normal(&mut rng))
                    .collect(),
            );
            let objective = |x: &[f64]| {
                let x = ModelParams(x.to_vec());
                let total: f64 = profiles
                    .iter()
                    .zip(&rhos)
                    .map(|(p, r)| oracle_sigmoid(p.loss_on(spec, &x, LossBasis::TrainLoss).unwrap() - r))
                    .sum();
                total / profiles.len() as f64
            };
            let g = maxfl_objective_grad(&w, profiles, spec, WeightMode::SigmoidDerivative).unwrap();
            let fd: Vec<f64> = (0..w.dim()).map(|i| stencil(objective, w.as_slice(), i, 1e-6)).collect();
            let fd_norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = fd_norm.max(1e-12);
            let diff = g.0.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            worst[m] = worst[m].max(diff / scale);
            let n = maxfl_grad_norm(&w, profiles, spec, WeightMode::SigmoidDerivative).unwrap();
            worst_norm = worst_norm.max((n - fd_norm).abs() / scale);
            states += 1;
        }
    }
    check(
        worst[0].max(worst[1]) <= 1e-4 && worst_norm <= 1e-4,
        format!(
            "{states} states, rel grad err softmax {:.2e} mlp {:.2e}, rel norm err {worst_norm:.2e} (<=1e-4)",
            worst[0], worst[1]
        ),
    )
}

fn two_theta(gamma_g: f64) -> [f64; 2] {
    [0.0, 2.0 * gamma_g]
}

fn c3_fedavg_bound() -> Check {
    let mut pass = true;
    let mut parts = Vec::new();
    // pinned value of the bound at γ_G² = 20, γ² = 1
    let pinned = (fedavg_upper_bound(20.0, 1.0) - 0.0366312778).abs() < 1e-9;
    pass &= pinned;
    for (i, gg) in [0.5, 1.0, 2.0, 3.0, 20f64.sqrt()].into_iter().enumerate() {
        let bound = fedavg_upper_bound(gg * gg, 1.0);
        let oracle = 2.0 * (-(gg * gg) / 5.0).exp();
        pass &= (bound - oracle).abs() < 1e-12;
        let est = expected_appeal(
            Estimator::FedAvgMean,
            &two_theta(gg),
            1.0,
            100_000,
            RngStream::new(11, i as u64, 0, Purpose::Trial),
        )
        .unwrap();
        let ok = est.mean <= bound + 3.0 * est.stderr;
        pass &= ok;
        parts.push(format!("{gg:.2}:{:.4}<={:.4}", est.mean, bound));
    }
    check(pass, format!("{} pinned={pinned}", parts.join(" ")))
}

fn c4_maxfl_bound() -> Check {
    let lower = maxfl_lower_bound(1.0);
    let oracle = (-1.0f64).exp() / 16.0;
    // 0.022989 is the commonly quoted value; it sits 3.5e-6 below the formula
    let mut pass = (lower - oracle).abs() < 1e-15 && (lower - 0.0229924651).abs() < 1e-9 && (lower - 0.022989).abs() < 5e-6;
    let mut parts = vec![format!("bound {lower:.10}")];
    for (i, gg) in [0.5, 1.0, 2.0, 3.0, 20f64.sqrt()].into_iter().enumerate() {
        let est = expected_appeal(
            Estimator::MaxFlMinimum,
            &two_theta(gg),
            1.0,
            100_000,
            RngStream::new(12, i as u64, 0, Purpose::Trial),
        )
        .unwrap();
        pass &= est.mean >= lower - 3.0 * est.stderr;
        parts.push(format!("{gg:.2}:{:.4}", est.mean));
    }
    let fedavg = expected_appeal(
        Estimator::FedAvgMean,
        &two_theta(20f64.sqrt()),
        1.0,
        100_000,
        RngStream::new(12, 99, 0, Purpose::Trial),
    )
    .unwrap();
    pass &= fedavg.mean < 0.01;
    parts.push(format!("fedavg@20 {:.4}<0.01", fedavg.mean));
    check(pass, parts.join(" "))
}

fn c5_surrogates() -> Check {
    let mut rng = stream(500).rng();
    let mut worst_softplus = 0.0f64;
    let mut worst_relu = 0.0f64;
    for _ in 0..100 {
        let th = [3.0 * std_normal(&mut rng), 3.0 * std_normal(&mut rng)];
        let mid = 0.5 * (th[0] + th[1]);
        let mins = find_local_minima(&th, SurrogateKind::Softplus, DEFAULT_GRID_STEP);
        let d = mins.iter().map(|s| (s.w - mid).abs()).fold(f64::INFINITY, f64::min);
        worst_softplus = worst_softplus.max(if mins.len() == 1 { d } else { f64::INFINITY });
        let relu = Estimator::ReluSurrogate.estimate(&th, DEFAULT_GRID_STEP);
        worst_relu = worst_relu.max((relu - mid).abs());
    }
    let theta = [0.0, 2.0];
    let s = RngStream::new(13, 0, 0, Purpose::Trial);
    let relu = expected_appeal(Estimator::ReluSurrogate, &theta, 1.0, 20_000, s).unwrap();
    let avg = expected_appeal(Estimator::FedAvgMean, &theta, 1.0, 20_000, s).unwrap();
    let same = (relu.mean - avg.mean).abs() < 1e-12;
    check(
        worst_softplus <= 1e-6 && worst_relu <= 1e-6 && same,
        format!(
            "softplus {worst_softplus:.2e}, relu {worst_relu:.2e} (<=1e-6), appeal relu {:.4} fedavg {:.4}",
            relu.mean, avg.mean
        ),
    )
}

/// Closed-form second derivative of the two-client sigmoid objective at the
/// midpoint, where both clients sit at distance `γ̂_G`.
fn oracle_mid_hessian(gamma_hat: f64) -> f64 {
    let d2 = gamma_hat * gamma_hat;
    2.0 * oracle_q(d2) * (2.0 * (1.0 - 2.0 * oracle_sigmoid(d2)) * d2 + 1.0)
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (f(lo) > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn c6_minimum_bands() -> Check {
    let mut rng = stream(600).rng();
    let mut bad = 0;
    let mut hess_bad = 0;
    let mut located = 0;
    let mut n = 0;
    while n < 1000 {
        let a = 4.0 * std_normal(&mut rng);
        let b = 4.0 * std_normal(&mut rng);
        let (lo, hi) = (a.min(b), a.max(b));
        if (hi - lo) / 2.0 <= 2.0 {
            continue;
        }
        n += 1;
        let th = [lo, hi];
        let mid = 0.5 * (lo + hi);
        if hessian_v(&th, mid) >= 0.0 {
            hess_bad += 1;
        }
        for s in find_local_minima(&th, SurrogateKind::Sigmoid, DEFAULT_GRID_STEP) {
            if s.kind != StationaryKind::Minimum {
                continue;
            }
            located += 1;
            // a minimizer that rounds onto θ̂ itself still counts when v'
            // at θ̂ puts the exact root on the open side
            let right_of_lo = s.w > lo || (s.w == lo && grad_v(&th, lo, SurrogateKind::Sigmoid) < 0.0);
            let left_of_hi = s.w < hi || (s.w == hi && grad_v(&th, hi, SurrogateKind::Sigmoid) > 0.0);
            let in_band = (right_of_lo && s.w <= lo + 2.0) || (s.w >= hi - 2.0 && left_of_hi);
            if !in_band {
                bad += 1;
            }
        }
    }
    let lib = bisect(|g| hessian_v(&[0.0, 2.0 * g], g), 0.5, 2.0);
    let oracle = bisect(oracle_mid_hessian, 0.5, 2.0);
    let pass = bad == 0
        && located >= n
        && hess_bad == 0
        && (1.021..=1.023).contains(&lib)
        && (lib - oracle).abs() < 1e-9
        && (lib - 1.0215805869).abs() < 1e-9;
    check(
        pass,
        format!("{n} instances, {located} minima, {bad} out of band, {hess_bad} non-negative midpoint hessians, boundary {lib:.10} oracle {oracle:.10}"),
    )
}

fn c7_weight_curve() -> Check {
    let q = |x: f64| weight_from_gap(AppealGap(x), WeightMode::SigmoidDerivative);
    let mut pass = q(0.0) == 0.25;
    let mut worst_sym = 0.0f64;
    let mut increasing = 0;
    let n = 10_000;
    let mut prev = q(0.0);
    for i in 1..=n {
        let x = 30.0 * i as f64 / n as f64;
        let v = q(x);
        worst_sym = worst_sym.max((v - q(-x)).abs());
        pass &= v <= 0.25 && (v - oracle_q(x)).abs() <= 1e-15;
        if v >= prev {
            increasing += 1;
        }
        prev = v;
    }
    let q10 = q(10.0);
    pass &= worst_sym <= 1e-15 && increasing == 0 && (q10 - 4.5395807735951e-5).abs() < 1e-17;
    check(
        pass,
        format!("q(0)={} symmetry {worst_sym:.1e}, {increasing} non-decreasing steps, q(10)={q10:.13e}", q(0.0)),
    )
}

fn final_means(config: &ExperimentConfig) -> (f64, f64) {
    let runs = run_seeds(config).unwrap();
    let n = runs.len() as f64;
    let seen = runs.iter().map(|r| r.last().unwrap().gm_appeal_seen).sum::<f64>() / n;
    let unseen = runs.iter().map(|r| r.last().unwrap().gm_appeal_unseen).sum::<f64>() / n;
    (seen, unseen)
}

fn c8_directional() -> Check {
    let base = flagship();
    let eta_g = match base.algorithm {
        AggregatorSpec::Maxfl { eta_g, .. } => eta_g,
        _ => unreachable!("flagship runs maxfl"),
    };
    let (ms, mu) = final_means(&base);
    let mut fedavg = base.clone();
    fedavg.algorithm = AggregatorSpec::Fedavg { eta_g };
    let (fs, fu) = final_means(&fedavg);
    check(
        ms - fs >= 0.10 && mu - fu >= 0.10,
        format!("seen {ms:.3} vs {fs:.3}, unseen {mu:.3} vs {fu:.3} (margin >=0.10, eta_g {eta_g})"),
    )
}

fn byzantine_weights(mode: WeightMode) -> (f64, f64, usize) {
    let mut config = flagship();
    config.algorithm = match config.algorithm {
        AggregatorSpec::Maxfl { eta_g, epsilon, .. } => AggregatorSpec::Maxfl { mode, eta_g, epsilon },
        _ => unreachable!(),
    };
    config.byzantine.fraction = 0.1;
    config.byzantine.loss_inflation = 10.0;
    config.byzantine.noise_sigma = 1.0;
    let (mut worst_norm, mut min_raw, mut seen) = (0.0f64, f64::INFINITY, 0);
    for &seed in &config.seeds {
        let mut sim = Simulation::new(&config, seed).unwrap();
        while !sim.is_done() {
            let out = sim.step().unwrap();
            for w in out.weights.iter().filter(|w| sim.byzantine.contains(&w.client)) {
                worst_norm = worst_norm.max(w.normalized);
                min_raw = min_raw.min(w.raw);
                seen += 1;
            }
        }
    }
    (worst_norm, min_raw, seen)
}

fn c9_byzantine() -> Check {
    let (worst, _, n1) = byzantine_weights(WeightMode::SigmoidDerivative);
    let (_, raw, n2) = byzantine_weights(WeightMode::RawSigmoid);
    check(
        worst < 1e-3 && raw > 0.99 && n1 > 0 && n2 > 0,
        format!("normalized max {worst:.2e} (<1e-3) over {n1}, raw-sigmoid min {raw:.6} (>0.99) over {n2}"),
    )
}

fn small_baseline(algorithm: &str) -> ExperimentConfig {
    let text = format!(
        r#"
seeds = [5]
rounds = 20
clients_per_round = 4
tau = 5
warmup_steps = 20
[algorithm]
{algorithm}
[data]
n_clients = 8
[data.source]
kind = "synthetic"
n_samples = 800
n_features = 6
n_labels = 4
cluster_sep = 3.0
[data.partition]
scheme = "dirichlet"
alpha = 0.5
"#
    );
    ExperimentConfig::from_toml_str(&text).expect("baseline config parses")
}

fn trajectory(config: &ExperimentConfig) -> Vec<Vec<u64>> {
    let mut sim = Simulation::new(config, config.seeds[0]).unwrap();
    let mut out = Vec::new();
    while !sim.is_done() {
        sim.step().unwrap();
        out.push(sim.server.w.as_slice().iter().map(|v| v.to_bits()).collect());
    }
    out
}

fn c10_degeneracies() -> Check {
    let reference = trajectory(&small_baseline("kind = \"fedavg\"\neta_g = 1.0"));
    let prox = trajectory(&small_baseline("kind = \"fedprox\"\neta_g = 1.0\nmu = 0.0"));
    let qffl = trajectory(&small_baseline("kind = \"qffl\"\nq = 0.0\nlr = 0.05"));
    let differs = |t: &[Vec<u64>]| t.iter().zip(&reference).filter(|(a, b)| a != b).count();
    let (dp, dq) = (differs(&prox), differs(&qffl));
    check(
        dp == 0 && dq == 0 && reference.len() == 20,
        format!("{} rounds, fedprox differs on {dp}, qffl differs on {dq}", reference.len()),
    )
}

fn quadratic(rounds: usize, seed: u64) -> ExperimentConfig {
    let text = format!(
        r#"
seeds = [{seed}]
rounds = {rounds}
clients_per_round = 10
tau = 5
eta_l = 0.01
batch_size = 10
[algorithm]
kind = "maxfl"
[participation]
mode = "always_available"
[data]
n_clients = 10
[data.partition]
scheme = "mean_estimation"
theta = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5]
nu2 = 1.0
n_per_client = 50
"#
    );
    ExperimentConfig::from_toml_str(&text).expect("quadratic config parses")
}

fn min_grad_norm(config: &ExperimentConfig) -> f64 {
    run_seeds(config).unwrap()[0]
        .iter()
        .map(|r| r.grad_norm)
        .fold(f64::INFINITY, f64::min)
}

fn c11_convergence() -> Check {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in [1, 2, 3] {
        let short = min_grad_norm(&quadratic(50, seed));
        let long = min_grad_norm(&quadratic(400, seed));
        pass &= long < short;
        parts.push(format!("seed {seed}: {long:.3e}<{short:.3e}"));
    }
    check(pass, parts.join(", "))
}

fn rounds_csv(config: &ExperimentConfig, threads: usize, dir: &std::path::Path) -> Vec<u8> {
    let runs = maxfl::experiment::with_threads(threads, || run_seeds(config)).unwrap().unwrap();
    let path: PathBuf = dir.join(format!("rounds_{threads}.csv"));
    write_rounds_csv(&path, &runs.concat()).unwrap();
    std::fs::read(path).unwrap()
}

fn c12_determinism() -> Check {
    let mut config = flagship();
    config.seeds = vec![1];
    let dir = tempfile::tempdir().unwrap();
    let a = rounds_csv(&config, 1, dir.path());
    let b = rounds_csv(&config, 1, dir.path());
    let c = rounds_csv(&config, 2, dir.path());
    check(
        a == b && a == c && !a.is_empty(),
        format!("{} bytes, repeat identical {}, 1 vs 2 threads identical {}", a.len(), a == b, a == c),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 12] = [
        (1, "model gradients", c1_gradients),
        (2, "relaxed objective gradient", c2_objective_gradient),
        (3, "fedavg appeal upper bound", c3_fedavg_bound),
        (4, "maxfl appeal lower bound", c4_maxfl_bound),
        (5, "softplus and relu minimizers", c5_surrogates),
        (6, "minimum bands and hessian boundary", c6_minimum_bands),
        (7, "weight curve", c7_weight_curve),
        (8, "maxfl beats fedavg on appeal", c8_directional),
        (9, "byzantine weights", c9_byzantine),
        (10, "baseline degeneracies", c10_degeneracies),
        (11, "convergence sanity", c11_convergence),
        (12, "determinism", c12_determinism),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            check(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:2} {tag} {name}: {} [{secs:.1}s]", result.detail);
        if !result.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
