use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in x out`
    pub weight: Matrix,
    /// `1 x out`
    pub bias: Matrix,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Multilayer perceptron: rectifier on every hidden layer, identity on the
/// output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    /// Scaled-uniform initialisation, `U(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`,
    /// biases zero. `dims` lists every width from input to output.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid("dims", format!("need >= 2 non-zero widths, got {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect();
                Dense {
                    weight: Matrix::from_vec(fan_in, fan_out, data),
                    bias: Matrix::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(MlpParams { layers })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        MlpParams {
            layers: dims
                .windows(2)
                .map(|w| Dense {
                    weight: Matrix::zeros(w[0], w[1]),
                    bias: Matrix::zeros(1, w[1]),
                })
                .collect(),
        }
    }

    /// Validates that consecutive layer widths chain.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layers", "at least one layer required"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.output_dim()) {
                return Err(Error::dims(
                    format!("layer {i} bias"),
                    format!("1x{}", l.output_dim()),
                    format!("{}x{}", l.bias.rows(), l.bias.cols()),
                ));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(Error::dims(
                    format!("layer {i} input"),
                    layers[i - 1].output_dim(),
                    l.input_dim(),
                ));
            }
        }
        Ok(MlpParams { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    /// Width of the activation feeding the output layer.
    pub fn hidden_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::input_dim)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Dense::output_dim));
        d
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::dims("layer 0 input", self.input_dim(), x.cols()));
        }
        Ok(())
    }

    /// Returns `(logits, hidden)` where `hidden` is the input of the output
    /// layer (the raw input for a single-layer network).
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_input(x)?;
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = a.matmul(&l.weight).add_row(&l.bias);
            if i == last {
                return Ok((z, a));
            }
            a = z.map(|v| v.max(0.0));
        }
        unreachable!("network has at least one layer")
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    pub fn record(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.var(l.weight.clone()), tape.var(l.bias.clone())))
                .collect(),
        }
    }

    /// Per-layer inputs and pre-activations, for hand-written backprop.
    pub fn trace(&self, x: &Matrix) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let z = a.matmul(&l.weight).add_row(&l.bias);
            inputs.push(a);
            a = if i + 1 < self.layers.len() {
                z.map(|v| v.max(0.0))
            } else {
                z.clone()
            };
            pre.push(z);
        }
        Ok(ForwardTrace { inputs, pre })
    }

    /// Backpropagates `dlogits` (gradient of some loss w.r.t. the logits)
    /// and returns the gradient w.r.t. each layer's pre-activation.
    pub fn deltas(&self, trace: &ForwardTrace, dlogits: &Matrix) -> Vec<Matrix> {
        let n = self.layers.len();
        let mut deltas = vec![Matrix::zeros(0, 0); n];
        deltas[n - 1] = dlogits.clone();
        for i in (0..n - 1).rev() {
            let back = deltas[i + 1].matmul(&self.layers[i + 1].weight.transpose());
            deltas[i] = back.zip_map(&trace.pre[i], |d, z| if z > 0.0 { d } else { 0.0 });
        }
        deltas
    }

    /// Parameter gradient assembled from per-layer deltas.
    pub fn grads_from_deltas(&self, trace: &ForwardTrace, deltas: &[Matrix]) -> MlpParams {
        MlpParams {
            layers: trace
                .inputs
                .iter()
                .zip(deltas)
                .map(|(a, d)| Dense {
                    weight: a.transpose().matmul(d),
                    bias: d.sum_rows(),
                })
                .collect(),
        }
    }

    /// Forward-mode derivative of the logits along the parameter direction `dir`.
    pub fn jvp(&self, x: &Matrix, dir: &MlpParams) -> Result<Matrix> {
        self.check_input(x)?;
        let mut a = x.clone();
        let mut ta = Matrix::zeros(x.rows(), x.cols());
        let last = self.layers.len() - 1;
        for (i, (l, t)) in self.layers.iter().zip(&dir.layers).enumerate() {
            let z = a.matmul(&l.weight).add_row(&l.bias);
            let tz = ta
                .matmul(&l.weight)
                .zip_map(&a.matmul(&t.weight), |p, q| p + q)
                .add_row(&t.bias);
            if i == last {
                return Ok(tz);
            }
            ta = tz.zip_map(&z, |d, zv| if zv > 0.0 { d } else { 0.0 });
            a = z.map(|v| v.max(0.0));
        }
        unreachable!("network has at least one layer")
    }

    /// Copy without the output layer.
    pub fn without_last_layer(&self) -> Vec<Dense> {
        self.layers[..self.layers.len() - 1].to_vec()
    }

    pub fn axpy(&self, alpha: f64, other: &MlpParams) -> MlpParams {
        let mut out = self.clone();
        for (o, t) in out.tensors_mut().into_iter().zip(other.tensors()) {
            *o = o.zip_map(t, |a, b| a + alpha * b);
        }
        out
    }
}

impl ParamSet for MlpParams {
    fn tensors(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub inputs: Vec<Matrix>,
    pub pre: Vec<Matrix>,
}

/// Tape handles for an [`MlpParams`], one `(weight, bias)` pair per layer.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Rebuilds handles from a flat list in canonical order.
    pub fn from_vars(vars: &[Var]) -> Self {
        assert!(vars.len() % 2 == 0, "weight/bias pairs expected");
        MlpVars {
            layers: vars.chunks(2).map(|c| (c[0], c[1])).collect(),
        }
    }

    /// Records the forward pass; returns `(logits, hidden)`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        let mut a = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(a, w);
            let z = tape.add_row(z, b);
            if i == last {
                return (z, a);
            }
            a = tape.relu(z);
        }
        unreachable!("network has at least one layer")
    }

    pub fn values(&self, tape: &Tape) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|&(w, b)| Dense {
                    weight: tape.value(w).clone(),
                    bias: tape.value(b).clone(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_outputs() {
        let p = MlpParams::zeros(&[3, 4, 2]);
        let x = Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.1, -0.3]);
        let (z, h) = p.forward(&x).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        assert!(h.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer() {
        let p = MlpParams::from_layers(vec![Dense {
            weight: Matrix::identity(2),
            bias: Matrix::zeros(1, 2),
        }])
        .unwrap();
        let (z, _) = p.forward(&Matrix::row_vector(&[1.0, 2.0])).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let p = MlpParams::zeros(&[3, 2]);
        let err = p.forward(&Matrix::zeros(1, 4)).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
        let bad = MlpParams::from_layers(vec![
            Dense { weight: Matrix::zeros(3, 4), bias: Matrix::zeros(1, 4) },
            Dense { weight: Matrix::zeros(5, 2), bias: Matrix::zeros(1, 2) },
        ]);
        assert!(bad.unwrap_err().to_string().contains("layer 1"));
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = MlpParams::init(&[10, 32, 4], &mut r1).unwrap();
        let b = MlpParams::init(&[10, 32, 4], &mut r2).unwrap();
        assert_eq!(a, b);
        let s = (6.0f64 / 42.0).sqrt();
        assert!(a.layers[0].weight.max_abs() < s);
    }

    #[test]
    fn tape_forward_matches_value_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = MlpParams::init(&[4, 5, 3], &mut rng).unwrap();
        let x = Matrix::from_vec(2, 4, (0..8).map(|i| i as f64 * 0.3 - 1.0).collect());
        let mut tape = Tape::new();
        let vars = p.record(&mut tape);
        let xv = tape.constant(x.clone());
        let (z, h) = vars.forward(&mut tape, xv);
        let (z2, h2) = p.forward(&x).unwrap();
        assert_eq!(tape.value(z), &z2);
        assert_eq!(tape.value(h), &h2);
    }

    #[test]
    fn manual_backprop_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MlpParams::init(&[4, 6, 5, 3], &mut rng).unwrap();
        let x = Matrix::from_vec(3, 4, (0..12).map(|i| ((i * 7) % 5) as f64 * 0.4 - 0.8).collect());
        let mut tape = Tape::new();
        let vars = p.record(&mut tape);
        let xv = tape.constant(x.clone());
        let (z, _) = vars.forward(&mut tape, xv);
        let sq = tape.mul(z, z);
        let loss = tape.sum(sq);
        let grads = tape.grad(loss, &vars.vars()).unwrap();

        let trace = p.trace(&x).unwrap();
        let dz = trace.pre.last().unwrap().scale(2.0);
        let manual = p.grads_from_deltas(&trace, &p.deltas(&trace, &dz));
        for (g, m) in grads.iter().zip(manual.tensors()) {
            let diff = tape.value(*g).zip_map(m, |a, b| (a - b).abs()).max_abs();
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn jvp_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MlpParams::init(&[3, 4, 2], &mut rng).unwrap();
        let dir = MlpParams::init(&[3, 4, 2], &mut rng).unwrap();
        let x = Matrix::from_vec(2, 3, vec![0.3, -0.2, 0.9, 1.1, 0.4, -0.7]);
        let t = p.jvp(&x, &dir).unwrap();
        let h = 1e-6;
        let plus = p.axpy(h, &dir).logits(&x).unwrap();
        let minus = p.axpy(-h, &dir).logits(&x).unwrap();
        let fd = plus.zip_map(&minus, |a, b| (a - b) / (2.0 * h));
        assert!(t.zip_map(&fd, |a, b| (a - b).abs()).max_abs() < 1e-8);
    }
}
