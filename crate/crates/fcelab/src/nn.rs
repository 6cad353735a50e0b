//! Fully-connected layer plumbing shared by the flow and the energy model.

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A dense layer; weights stored out×in, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Fan-in-scaled uniform init: U(−1/√in, 1/√in), bias zero.
    pub fn fan_in_uniform(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..out_dim * in_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Linear {
            w: Tensor::new(vec![out_dim, in_dim], w).unwrap(),
            b: Tensor::zeros(vec![out_dim]),
        }
    }

    /// Zero init for final layers, so networks start as the zero function.
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear { w: Tensor::zeros(vec![out_dim, in_dim]), b: Tensor::zeros(vec![out_dim]) }
    }

    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        LinearVars {
            w: tape.leaf(self.w.clone(), trainable),
            b: tape.leaf(self.b.clone(), trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.affine(x, self.w, self.b)
    }
}

/// Copies tape gradients back into parameter tensors, in the same order the
/// vars were registered. Missing grads (parameter unused by the root) become
/// zeros so optimizer steps stay shape-aligned.
pub fn store_grads(tape: &Tape, vars: &[Var], params: &mut [&mut Tensor]) {
    assert_eq!(vars.len(), params.len());
    for (v, p) in vars.iter().zip(params.iter_mut()) {
        let g = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]);
        p.grad = Some(g);
    }
}
