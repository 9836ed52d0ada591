mod common;

use metalabel::gradcheck::{check_gradient_of_gradient, check_loss_logits, check_loss_params, random_mlp, LossKind};
use metalabel::nn::{
    cce_from_logits, cce_loss_indices, entropy_from_logits, entropy_loss, kl_from_logits, kl_loss, log_clamped,
    one_hot, softmax, MetaParams, MlpParams, OptimizerConfig, OptimizerState, ParamSet, SoftLabels,
};
use metalabel::tape::Tape;
use metalabel::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn probs_of(z: &[f64]) -> SoftLabels {
    softmax(&Matrix::row_vector(z)).unwrap()
}

fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
    (2usize..8).prop_flat_map(|c| prop::collection::vec(-30.0f64..30.0, c))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(z in logits_strategy()) {
        let p = probs_of(&z);
        let s: f64 = p.probs().row(0).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(p.probs().row(0).iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn softmax_shift_invariant(z in logits_strategy(), c in -50.0f64..50.0) {
        let a = probs_of(&z);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let b = probs_of(&shifted);
        prop_assert!(common::max_abs_diff(a.probs().row(0), b.probs().row(0)) < 1e-12);
    }

    #[test]
    fn kl_nonnegative_and_zero_on_self(z in logits_strategy(), w in logits_strategy()) {
        let p = probs_of(&z);
        prop_assert!(kl_loss(&p, &p).unwrap().abs() < 1e-12);
        let w: Vec<f64> = w.iter().cycle().take(z.len()).cloned().collect();
        let q = probs_of(&w);
        prop_assert!(kl_loss(&p, &q).unwrap() >= -1e-12);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp(z in logits_strategy(), k in 0usize..8) {
        let y = k % z.len();
        let ce = cce_loss_indices(&probs_of(&z), &[y]).unwrap();
        prop_assert!((ce - (common::log_sum_exp(&z) - z[y])).abs() < 1e-10);
    }

    #[test]
    fn entropy_permutation_invariant(z in logits_strategy(), rot in 0usize..8) {
        let mut r = z.clone();
        r.rotate_left(rot % z.len());
        r.reverse();
        let a = entropy_loss(&probs_of(&z));
        let b = entropy_loss(&probs_of(&r));
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((a - common::entropy(&common::softmax(&z))).abs() < 1e-12);
    }
}

#[test]
fn softmax_of_log_counts() {
    let p = probs_of(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
    for (got, want) in p.probs().row(0).iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn uniform_loss_values() {
    let u = SoftLabels::uniform(1, 4);
    assert!((entropy_loss(&u) - 4f64.ln()).abs() < 1e-12);
    assert!((cce_loss_indices(&u, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
    let sharp = probs_of(&[0.0, 50.0, 0.0]);
    assert!(cce_loss_indices(&sharp, &[1]).unwrap() < 1e-20);
    assert!((kl_loss(&sharp, &sharp).unwrap()).abs() < 1e-12);
}

#[test]
fn forward_matches_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for dims in [vec![5, 4], vec![6, 8, 3], vec![4, 7, 5, 3]] {
        let theta = random_mlp(&mut rng, &dims);
        let x = Matrix::from_vec(9, dims[0], (0..9 * dims[0]).map(|k| ((k * 37 % 11) as f64 - 5.0) / 3.0).collect());
        let net = common::Net::from(&theta);
        let (logits, hidden) = theta.forward(&x).unwrap();
        for i in 0..x.rows() {
            let t = net.trace(x.row(i));
            assert!(common::max_abs_diff(logits.row(i), t.z.last().unwrap()) < 1e-12);
            assert!(common::max_abs_diff(hidden.row(i), t.a.last().unwrap()) < 1e-12);
        }
    }
}

#[test]
fn zero_network_is_uniform() {
    let theta = MlpParams::zeros(&[3, 5, 4]);
    let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]);
    let p = softmax(&theta.logits(&x).unwrap()).unwrap();
    assert!(p.probs().as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

/// Tape gradients of the three batch losses w.r.t. parameters, against
/// per-sample loop backprop with explicit softmax Jacobians.
#[test]
fn loss_parameter_gradients_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dims = [5, 6, 4];
    for trial in 0..10 {
        let theta = random_mlp(&mut rng, &dims);
        let n = 7;
        let x = Matrix::from_vec(n, 5, (0..n * 5).map(|k| (((k + trial) * 13 % 17) as f64 - 8.0) / 4.0).collect());
        let q = softmax(&Matrix::from_vec(n, 4, (0..n * 4).map(|k| ((k * 7 % 5) as f64) - 2.0).collect())).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| (i + trial) % 4).collect();
        let net = common::Net::from(&theta);

        for kind in 0..3 {
            let mut tape = Tape::new();
            let th = theta.record(&mut tape);
            let xv = tape.constant(x.clone());
            let (z, _) = th.forward(&mut tape, xv);
            let loss = match kind {
                0 => {
                    let qv = tape.constant(q.probs().clone());
                    let lq = log_clamped(&mut tape, qv);
                    kl_from_logits(&mut tape, z, lq)
                }
                1 => {
                    let y = tape.constant(one_hot(&labels, 4).unwrap());
                    cce_from_logits(&mut tape, z, y)
                }
                _ => entropy_from_logits(&mut tape, z),
            };
            let gv = tape.grad(loss, &th.vars()).unwrap();
            let got: Vec<f64> = gv.iter().flat_map(|&g| tape.value(g).as_slice().to_vec()).collect();

            let per: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let p = common::softmax(&net.logits(x.row(i)));
                    let dz = match kind {
                        0 => common::kl_dlogits(&p, q.probs().row(i)),
                        1 => common::ce_dlogits(&p, labels[i]),
                        _ => common::entropy_dlogits(&p),
                    };
                    net.backprop(x.row(i), &dz)
                })
                .collect();
            let want = common::mean_grad(&per);
            let (rel, abs) = common::worst_errors(&got, &want);
            assert!(rel < 1e-9 && abs < 1e-12, "kind {kind} trial {trial}: rel {rel} abs {abs}");
        }
    }
}

#[test]
fn finite_differences_over_many_trials() {
    for kind in [LossKind::Kl, LossKind::CrossEntropy, LossKind::Entropy] {
        let l = check_loss_logits(kind, 100, 21, 1e-6);
        assert!(l.passed, "{l:?}");
        let p = check_loss_params(kind, 100, 22, 1e-4);
        assert!(p.passed, "{p:?}");
    }
    let gg = check_gradient_of_gradient(100, 23, 1e-5);
    assert!(gg.passed, "{gg:?}");
}

/// Independent FD of the KL loss through the loop network, compared with
/// the tape, on random nets with hidden layers.
#[test]
fn kl_gradient_matches_loop_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = [3, 4, 3];
    let theta = random_mlp(&mut rng, &dims);
    let x = Matrix::from_rows(&[vec![0.3, -1.2, 0.8], vec![1.5, 0.1, -0.4], vec![-0.7, 0.9, 0.2]]);
    let q = softmax(&Matrix::from_rows(&[vec![1.0, 0.0, -1.0], vec![0.2, 0.3, 0.1], vec![-2.0, 1.0, 0.5]])).unwrap();
    let net = common::Net::from(&theta);
    let loss = |flat: &[f64]| {
        let n = net.with_flat(flat);
        (0..3).map(|i| common::kl(&common::softmax(&n.logits(x.row(i))), q.probs().row(i))).sum::<f64>() / 3.0
    };
    let fd = common::central_diff(&net.flat(), 1e-5, loss);

    let mut tape = Tape::new();
    let th = theta.record(&mut tape);
    let xv = tape.constant(x.clone());
    let (z, _) = th.forward(&mut tape, xv);
    let qv = tape.constant(q.probs().clone());
    let lq = log_clamped(&mut tape, qv);
    let l = kl_from_logits(&mut tape, z, lq);
    let gv = tape.grad(l, &th.vars()).unwrap();
    let got: Vec<f64> = gv.iter().flat_map(|&g| tape.value(g).as_slice().to_vec()).collect();
    let (rel, abs) = common::worst_errors(&got, &fd);
    assert!(rel < 1e-4 && abs < 1e-7, "rel {rel} abs {abs}");
}

fn tiny_params(w: f64) -> MetaParams {
    MetaParams { weight: Matrix::filled(2, 1, w), bias: Matrix::filled(1, 1, w) }
}

#[test]
fn momentum_recurrence_against_loop() {
    let cfg = OptimizerConfig::sgd_momentum();
    let mut p = tiny_params(0.5);
    let mut opt = OptimizerState::new(cfg, &p);
    let (mut w, mut v) = (vec![0.5; 3], vec![0.0; 3]);
    let grads = [0.3, -0.1, 0.7, 0.0, 0.2];
    for &g in &grads {
        opt.step(&mut p, &[Matrix::filled(2, 1, g), Matrix::filled(1, 1, g)], 0.05).unwrap();
        for k in 0..3 {
            let gk = g + 1e-4 * w[k];
            v[k] = 0.9 * v[k] + gk;
            w[k] -= 0.05 * v[k];
        }
    }
    assert!(common::max_abs_diff(&p.flatten(), &w) < 1e-15);
}

#[test]
fn adam_recurrence_against_loop() {
    let cfg = OptimizerConfig::adaptive_moment();
    let mut p = tiny_params(-0.2);
    let mut opt = OptimizerState::new(cfg, &p);
    let (mut w, mut m, mut s) = (vec![-0.2; 3], vec![0.0; 3], vec![0.0; 3]);
    let grads = [1.0, -0.5, 2.0, 0.25];
    for (t, &g) in grads.iter().enumerate() {
        opt.step(&mut p, &[Matrix::filled(2, 1, g), Matrix::filled(1, 1, g)], 0.01).unwrap();
        let t = t as i32 + 1;
        for k in 0..3 {
            let gk = g + cfg.weight_decay * w[k];
            m[k] = 0.9 * m[k] + 0.1 * gk;
            s[k] = 0.999 * s[k] + 0.001 * gk * gk;
            let mh = m[k] / (1.0 - 0.9f64.powi(t));
            let sh = s[k] / (1.0 - 0.999f64.powi(t));
            w[k] -= 0.01 * mh / (sh.sqrt() + 1e-8);
        }
    }
    assert!(common::max_abs_diff(&p.flatten(), &w) < 1e-15);
}
