//! Scalar-loop reference implementations shared by the integration tests.
//! Nothing here calls the library's math; it only reads parameter values.
#![allow(dead_code)]

use metalabel::nn::{MetaParams, MlpParams};
use metalabel::Matrix;

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| a * (a.ln() - b.max(1e-12).ln())).sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&a| a * a.ln()).sum::<f64>()
}

/// Chain rule through the explicit softmax Jacobian `p_c (delta_ck - p_k)`.
pub fn through_softmax(p: &[f64], dl_dp: &[f64]) -> Vec<f64> {
    (0..p.len())
        .map(|k| (0..p.len()).map(|c| dl_dp[c] * p[c] * (if c == k { 1.0 } else { 0.0 } - p[k])).sum())
        .collect()
}

pub fn kl_dlogits(p: &[f64], q: &[f64]) -> Vec<f64> {
    let dp: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| a.ln() - b.max(1e-12).ln() + 1.0).collect();
    through_softmax(p, &dp)
}

pub fn ce_dlogits(p: &[f64], y: usize) -> Vec<f64> {
    let dp: Vec<f64> = (0..p.len()).map(|c| if c == y { -1.0 / p[y] } else { 0.0 }).collect();
    through_softmax(p, &dp)
}

pub fn entropy_dlogits(p: &[f64]) -> Vec<f64> {
    let dp: Vec<f64> = p.iter().map(|&a| -(a.ln() + 1.0)).collect();
    through_softmax(p, &dp)
}

/// Dense relu network held as nested vectors: `w[l][i][o]`, `b[l][o]`.
#[derive(Clone, Debug)]
pub struct Net {
    pub w: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<f64>>,
}

pub struct Trace {
    /// Input to each layer.
    pub a: Vec<Vec<f64>>,
    /// Pre-activation of each layer; the last one is the logits.
    pub z: Vec<Vec<f64>>,
}

impl Net {
    pub fn from(theta: &MlpParams) -> Net {
        Net {
            w: theta.layers.iter().map(|l| to_rows(&l.weight)).collect(),
            b: theta.layers.iter().map(|l| l.bias.row(0).to_vec()).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.w.iter().zip(&self.b).map(|(w, b)| w.len() * b.len() + b.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.w.iter().zip(&self.b) {
            for row in w {
                out.extend(row);
            }
            out.extend(b);
        }
        out
    }

    pub fn with_flat(&self, flat: &[f64]) -> Net {
        let mut net = self.clone();
        let mut k = 0;
        for (w, b) in net.w.iter_mut().zip(net.b.iter_mut()) {
            for row in w.iter_mut() {
                for v in row.iter_mut() {
                    *v = flat[k];
                    k += 1;
                }
            }
            for v in b.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        net
    }

    pub fn trace(&self, x: &[f64]) -> Trace {
        let mut a = vec![x.to_vec()];
        let mut z = Vec::new();
        let last = self.w.len() - 1;
        for l in 0..self.w.len() {
            let input = &a[l];
            let out: Vec<f64> = (0..self.b[l].len())
                .map(|o| self.b[l][o] + (0..input.len()).map(|i| input[i] * self.w[l][i][o]).sum::<f64>())
                .collect();
            if l < last {
                a.push(out.iter().map(|&v| v.max(0.0)).collect());
            }
            z.push(out);
        }
        Trace { a, z }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).z.pop().unwrap()
    }

    /// Per-sample parameter gradient for a given logit gradient, flattened
    /// in layer order, weight (row-major) before bias.
    pub fn backprop(&self, x: &[f64], dlogits: &[f64]) -> Vec<f64> {
        let t = self.trace(x);
        let layers = self.w.len();
        let mut delta = dlogits.to_vec();
        let mut per_layer = vec![Vec::new(); layers];
        for l in (0..layers).rev() {
            let mut g = Vec::new();
            for i in 0..t.a[l].len() {
                for o in 0..delta.len() {
                    g.push(t.a[l][i] * delta[o]);
                }
            }
            g.extend(&delta);
            per_layer[l] = g;
            if l > 0 {
                delta = (0..t.a[l].len())
                    .map(|i| {
                        let back: f64 = (0..delta.len()).map(|o| self.w[l][i][o] * delta[o]).sum();
                        if t.z[l - 1][i] > 0.0 { back } else { 0.0 }
                    })
                    .collect();
            }
        }
        per_layer.concat()
    }
}

pub fn mean_grad(per_sample: &[Vec<f64>]) -> Vec<f64> {
    let n = per_sample.len() as f64;
    let mut out = vec![0.0; per_sample[0].len()];
    for g in per_sample {
        for (o, v) in out.iter_mut().zip(g) {
            *o += v / n;
        }
    }
    out
}

pub fn generator_probs(phi: &MetaParams, v: &[f64]) -> Vec<f64> {
    let (w, b) = (to_rows(&phi.weight), phi.bias.row(0).to_vec());
    let z: Vec<f64> = (0..b.len()).map(|c| b[c] + (0..v.len()).map(|f| v[f] * w[f][c]).sum::<f64>()).collect();
    softmax(&z)
}

/// Meta loss as a scalar function of the generator, entirely by loops:
/// soft labels, per-sample KL gradients, plain step, clean cross-entropy.
pub fn meta_loss(
    net: &Net,
    phi: &MetaParams,
    train_x: &[Vec<f64>],
    train_v: &[Vec<f64>],
    meta_x: &[Vec<f64>],
    meta_y: &[usize],
    inner_lr: f64,
) -> f64 {
    let grads: Vec<Vec<f64>> = train_x
        .iter()
        .zip(train_v)
        .map(|(x, v)| {
            let p = softmax(&net.logits(x));
            net.backprop(x, &kl_dlogits(&p, &generator_probs(phi, v)))
        })
        .collect();
    let g = mean_grad(&grads);
    let hat = net.with_flat(&net.flat().iter().zip(&g).map(|(t, d)| t - inner_lr * d).collect::<Vec<_>>());
    meta_x
        .iter()
        .zip(meta_y)
        .map(|(x, &y)| -softmax(&hat.logits(x))[y].ln())
        .sum::<f64>()
        / meta_x.len() as f64
}

/// Central differences of a scalar function over a flat parameter vector.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + h;
            let up = f(&probe);
            probe[k] = orig - h;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst relative error, comparing entries under `1e-8` absolutely.
/// Returns `(worst_relative, worst_small_absolute)`.
pub fn worst_errors(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    let (mut rel, mut abs) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let scale = x.abs().max(y.abs());
        if scale < 1e-8 {
            abs = abs.max((x - y).abs());
        } else {
            rel = rel.max((x - y).abs() / scale);
        }
    }
    (rel, abs)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
