use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

/// A parameter collection with a canonical tensor order: layer order,
/// weight before bias, each tensor row-major.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    /// Overwrites all entries from a flat vector in canonical order.
    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dims("assign_flat", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Single dense layer mapping extracted features to class logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl MetaParams {
    pub fn zeros(features: usize, classes: usize) -> Self {
        MetaParams {
            weight: Matrix::zeros(features, classes),
            bias: Matrix::zeros(1, classes),
        }
    }

    pub fn features(&self) -> usize {
        self.weight.rows()
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, v: &Matrix) -> Result<Matrix> {
        if v.cols() != self.features() {
            return Err(Error::dims("label generator input", self.features(), v.cols()));
        }
        Ok(v.matmul(&self.weight).add_row(&self.bias))
    }

    pub fn record(&self, tape: &mut Tape) -> MetaVars {
        MetaVars {
            weight: tape.var(self.weight.clone()),
            bias: tape.var(self.bias.clone()),
        }
    }
}

impl ParamSet for MetaParams {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetaVars {
    pub weight: Var,
    pub bias: Var,
}

impl MetaVars {
    pub fn logits(&self, tape: &mut Tape, v: Var) -> Var {
        let z = tape.matmul(v, self.weight);
        tape.add_row(z, self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}
