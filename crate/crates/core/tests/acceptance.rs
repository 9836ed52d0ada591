//! One line per acceptance criterion, printed straight to stdout so it shows
//! without `--nocapture`. Runs are memoized across criteria.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use metalabel::data::{count_flips, flip_quota, inject_feature_dependent, inject_uniform, make_synthetic, split_counts};
use metalabel::data::{Dataset, NoiseKind, Split, SyntheticSpec};
use metalabel::gradcheck::{
    check_meta_gradient, check_route_equivalence, random_mlp, run_suite, GradcheckOptions, TinyProblem,
};
use metalabel::harness::{prepare_dataset, MetricsLog, Method, Phase, Runner, Summary, TrainConfig, SCHEMA_VERSION};
use metalabel::meta::meta_step;
use metalabel::nn::{softmax, OptimizerConfig, OptimizerState};
use metalabel::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 4] = [0, 1, 2, 3];

#[allow(clippy::explicit_write)]
fn report(n: usize, passed: bool, started: Instant, detail: String) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let secs = started.elapsed().as_secs_f64();
    writeln!(std::io::stdout(), "criterion {n:>2}: {verdict}  {detail}  ({secs:.1}s)").unwrap();
}

fn config(seed: u64, kind: NoiseKind, ratio: f64) -> TrainConfig {
    let mut cfg = TrainConfig::from_json(&format!(r#"{{"schema_version": {SCHEMA_VERSION}}}"#)).unwrap();
    cfg.seed = seed;
    cfg.data.noise.kind = kind;
    cfg.data.noise.ratio = ratio;
    cfg
}

struct Run {
    summary: Summary,
    log: MetricsLog,
}

impl Run {
    fn acc(&self) -> f64 {
        self.summary.test_accuracy
    }

    /// Test accuracy the baseline would report if it were also selected on meta accuracy.
    fn meta_selected_acc(&self) -> f64 {
        let mut best = &self.log.rows[0];
        for r in &self.log.rows {
            if r.meta_acc > best.meta_acc {
                best = r;
            }
        }
        best.test_acc
    }
}

type Cache<T> = OnceLock<Mutex<HashMap<String, Arc<T>>>>;
static DATASETS: Cache<Dataset> = OnceLock::new();
static RUNS: Cache<Run> = OnceLock::new();

fn memo<T>(cache: &'static Cache<T>, key: String, make: impl FnOnce() -> T) -> Arc<T> {
    let map = cache.get_or_init(Default::default);
    if let Some(v) = map.lock().unwrap().get(&key) {
        return v.clone();
    }
    let v = Arc::new(make());
    map.lock().unwrap().insert(key, v.clone());
    v
}

fn dataset(cfg: &TrainConfig) -> Arc<Dataset> {
    let key = serde_json::to_string(&(&cfg.data, cfg.seed, &cfg.model, cfg.train.batch_size)).unwrap();
    memo(&DATASETS, key, || prepare_dataset(cfg).unwrap())
}

fn run(cfg: &TrainConfig, method: Method) -> Arc<Run> {
    memo(&RUNS, format!("{}/{method:?}", cfg.hash()), || {
        let ds = dataset(cfg);
        let out = Runner::new(cfg, &ds, method).unwrap().run(|_| Ok(())).unwrap();
        Run { summary: out.summary, log: out.log }
    })
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(" "))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Method and baseline test accuracies over the seeds.
fn paired(kind: NoiseKind, ratio: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (mut m, mut b, mut bm) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let cfg = config(seed, kind, ratio);
        m.push(run(&cfg, Method::MetaLabelNet).acc());
        let base = run(&cfg, Method::CrossEntropy);
        b.push(base.acc());
        bm.push(base.meta_selected_acc());
    }
    (m, b, bm)
}

fn gaps(m: &[f64], b: &[f64]) -> Vec<f64> {
    m.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[test]
fn criterion_01_meta_gradient_matches_finite_differences() {
    let t = Instant::now();
    let outcomes: Vec<_> = (0..20).map(|seed| check_meta_gradient(1, seed, 1e-4).unwrap()).collect();
    let worst = outcomes.iter().map(|o| o.worst_error).fold(0.0, f64::max);
    let passed = outcomes.iter().all(|o| o.passed) && t.elapsed().as_secs_f64() < 10.0;
    report(1, passed, t, format!("worst relative error {worst:.2e} over 20 seeds, need < 1e-4 in < 10 s"));
    assert!(passed);
}

#[test]
fn criterion_02_route_equivalence() {
    let t = Instant::now();
    let outcomes: Vec<_> = (0..20).map(|seed| check_route_equivalence(1, seed, 1e-6, false).unwrap()).collect();
    let worst = outcomes.iter().map(|o| o.worst_error).fold(0.0, f64::max);
    let passed = outcomes.iter().all(|o| o.passed) && t.elapsed().as_secs_f64() < 30.0;
    report(2, passed, t, format!("worst absolute difference {worst:.2e} over 20 seeds, need < 1e-6 in < 30 s"));
    assert!(passed);
}

fn gap_criterion(n: usize, ratio: f64, need: f64, seeds_needed: usize) {
    let t = Instant::now();
    let (m, b, bm) = paired(NoiseKind::FeatureDependent, ratio);
    let g = gaps(&m, &b);
    let hits = g.iter().filter(|&&x| x >= need).count();
    let per_seed = t.elapsed().as_secs_f64() / SEEDS.len() as f64;
    let passed = hits >= seeds_needed && per_seed < 300.0;
    report(
        n,
        passed,
        t,
        format!(
            "fd {ratio}: method {} baseline {} gap {} ({hits}/4 >= {need}, need {seeds_needed}/4); meta-selected baseline {}",
            fmt(&m),
            fmt(&b),
            fmt(&g),
            fmt(&bm)
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_03_beats_baseline_at_40_percent() {
    gap_criterion(3, 0.4, 0.05, 4);
}

#[test]
fn criterion_04_beats_baseline_at_80_percent() {
    gap_criterion(4, 0.8, 0.15, 3);
}

#[test]
fn criterion_05_feature_dependent_gap_exceeds_uniform() {
    let t = Instant::now();
    let (fm, fb, _) = paired(NoiseKind::FeatureDependent, 0.6);
    let (um, ub, _) = paired(NoiseKind::Uniform, 0.6);
    let (fd, un) = (mean(&gaps(&fm, &fb)), mean(&gaps(&um, &ub)));
    let passed = fd >= un;
    report(5, passed, t, format!("mean gap at 0.6: feature-dependent {fd:.3} vs uniform {un:.3}"));
    assert!(passed);
}

#[test]
fn criterion_06_unlabeled_mode() {
    let t = Instant::now();
    let (mut full, mut half) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let cfg = config(seed, NoiseKind::FeatureDependent, 0.4);
        full.push(run(&cfg, Method::MetaLabelNet).acc());
        let mut u = cfg.clone();
        u.data.unlabeled_fraction = 0.5;
        let ds = dataset(&u);
        assert_eq!(ds.labeled_indices(Split::Train).len(), ds.indices(Split::Train).len() / 2);
        // a masked-label read would abort the run with an error
        half.push(run(&u, Method::MetaLabelNet).acc());
    }
    let within = full.iter().zip(&half).filter(|(a, b)| (*a - *b).abs() <= 0.03).count();
    let passed = within >= 3;
    report(
        6,
        passed,
        t,
        format!("labeled {} half unlabeled {} ({within}/4 within 0.03, need 3/4); guard never fired", fmt(&full), fmt(&half)),
    );
    assert!(passed);
}

#[test]
fn criterion_07_labels_settle() {
    let t = Instant::now();
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let cfg = config(seed, NoiseKind::FeatureDependent, 0.4);
        let r = run(&cfg, Method::MetaLabelNet);
        let s: Vec<f64> = r.log.phase_rows(Phase::Meta).map(|row| row.label_stability_mean.unwrap()).collect();
        pairs.push((mean(&s[..5]), mean(&s[s.len() - 10..])));
    }
    let hits = pairs.iter().filter(|(first, last)| last < first).count();
    let passed = hits == 4;
    let shown: Vec<String> = pairs.iter().map(|(f, l)| format!("{f:.2e}->{l:.2e}")).collect();
    report(7, passed, t, format!("first-5 -> last-10 mean label change {} ({hits}/4 lower, need 4/4)", shown.join(" ")));
    assert!(passed);
}

#[test]
fn criterion_08_warmup_matters() {
    let t = Instant::now();
    let (mut warm, mut cold) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let cfg = config(seed, NoiseKind::FeatureDependent, 0.6);
        warm.push(run(&cfg, Method::MetaLabelNet).acc());
        let mut c = cfg.clone();
        c.train.e_phase1 = 0;
        cold.push(run(&c, Method::MetaLabelNet).acc());
    }
    let drop = mean(&warm) - mean(&cold);
    let passed = drop >= 0.02;
    report(
        8,
        passed,
        t,
        format!("fd 0.6: default warm-up {} no warm-up {} mean drop {drop:.3}, need >= 0.02", fmt(&warm), fmt(&cold)),
    );
    assert!(passed);
}

#[test]
fn criterion_09_entropy_loss_sharpens_predictions() {
    let t = Instant::now();
    // scored on the trained model; selection may pick a warm-up epoch that never saw L_e
    let (mut on, mut off, mut sel_on, mut sel_off) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let cfg = config(seed, NoiseKind::FeatureDependent, 0.4);
        let r = run(&cfg, Method::MetaLabelNet);
        on.push(r.summary.last_epoch_test_entropy);
        sel_on.push(r.summary.test_entropy);
        let mut c = cfg.clone();
        c.train.entropy_loss = false;
        let r = run(&c, Method::MetaLabelNet);
        off.push(r.summary.last_epoch_test_entropy);
        sel_off.push(r.summary.test_entropy);
    }
    let hits = on.iter().zip(&off).filter(|(a, b)| b > a).count();
    let passed = hits == 4;
    report(
        9,
        passed,
        t,
        format!(
            "final-model test entropy with L_e {} without {} ({hits}/4 higher without, need 4/4); selected models {} vs {}",
            fmt(&on),
            fmt(&off),
            fmt(&sel_on),
            fmt(&sel_off)
        ),
    );
    assert!(passed);
}

fn simplex_ok(rng: &mut ChaCha8Rng) -> bool {
    (0..500).all(|k| {
        let scale = [1.0, 30.0, 800.0][k % 3];
        let z = Matrix::from_vec(4, 5, (0..20).map(|_| scale * (rng.random::<f64>() - 0.5)).collect());
        let p = softmax(&z).unwrap();
        let p = p.probs();
        (0..4).all(|i| (p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9 && p.row(i).iter().all(|&v| v > 0.0 && v <= 1.0))
    })
}

fn noise_ok() -> bool {
    let base = make_synthetic(&SyntheticSpec { n: 4400, classes: 4, dims: 10, separation: 2.5, seed: 1 }).unwrap();
    let ds = split_counts(&base, 200, 200, 2).unwrap();
    let n = 4000.0;
    let uniform = (0..5u64).all(|s| {
        let flips = count_flips(&inject_uniform(&ds, 0.4, s).unwrap()) as f64;
        (flips - 0.4 * n).abs() <= 3.0 * (n * 0.24).sqrt()
    });
    let oracle = random_mlp(&mut ChaCha8Rng::seed_from_u64(3), &[10, 16, 4]);
    let quota = [0.0, 0.3, 0.6, 1.0].iter().all(|&r| {
        count_flips(&inject_feature_dependent(&ds, r, &oracle, 4).unwrap()) == flip_quota(r, 4000)
    });
    uniform && quota
}

fn determinism_ok() -> bool {
    let mut cfg = config(7, NoiseKind::FeatureDependent, 0.4);
    cfg.data.n = 1400;
    cfg.data.meta_size = 200;
    cfg.data.test_size = 200;
    cfg.train.e_phase1 = 2;
    cfg.train.e_phase2 = 6;
    let outs: Vec<_> = (0..2)
        .map(|_| {
            let ds = prepare_dataset(&cfg).unwrap();
            let out = Runner::new(&cfg, &ds, Method::MetaLabelNet).unwrap().run(|_| Ok(())).unwrap();
            (ds, out)
        })
        .collect();
    outs[0].0 == outs[1].0 && outs[0].1.log.same_outcome(&outs[1].1.log) && outs[0].1.selected == outs[1].1.selected
}

fn isolation_ok(rng: &mut ChaCha8Rng) -> bool {
    (0..20).all(|_| {
        let p = TinyProblem::sample(rng);
        let before = p.theta.clone();
        let mut phi = p.phi.clone();
        let mut opt = OptimizerState::new(OptimizerConfig::adaptive_moment(), &phi);
        meta_step(&mut phi, &p.theta, &p.batch, &p.meta, 1.0, 1e-2, &mut opt).unwrap();
        p.theta == before && phi != p.phi
    })
}

#[test]
fn criterion_10_invariant_suites() {
    let t = Instant::now();
    let suite = run_suite(&GradcheckOptions::default()).unwrap();
    let grads = suite.iter().all(|o| o.passed);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let parts = [
        ("gradient checks", grads),
        ("simplex", simplex_ok(&mut rng)),
        ("noise counts", noise_ok()),
        ("determinism", determinism_ok()),
        ("theta isolation", isolation_ok(&mut rng)),
    ];
    let within = t.elapsed().as_secs_f64() < 180.0;
    let passed = within && parts.iter().all(|p| p.1);
    let shown: Vec<String> = parts.iter().map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "FAILED" })).collect();
    report(10, passed, t, format!("{}; need all within 180 s", shown.join(", ")));
    assert!(passed);
}
