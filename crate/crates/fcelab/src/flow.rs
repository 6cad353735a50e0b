//! Normalizing flow built from fully-connected affine coupling blocks with
//! alternating masks: exact sampling, exact inverse, exact log-density.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::{Linear, LinearVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453;

/// Log-scale squashing bound: s = S_MAX · tanh(raw / S_MAX). Keeps every
/// coupling invertible under adversarial updates.
pub const S_MAX: f64 = 5.0;

/// One affine coupling. The conditioner sees the passed coordinate (the other
/// zeroed), and its joint head emits log-scale and shift for both coordinates;
/// only the transformed half is used.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock {
    /// true: coordinate 0 passes through, coordinate 1 is transformed.
    pub mask_first: bool,
    pub layers: [Linear; 3],
}

impl CouplingBlock {
    fn mask(&self) -> ([f64; 2], [f64; 2]) {
        if self.mask_first {
            ([1.0, 0.0], [0.0, 1.0])
        } else {
            ([0.0, 1.0], [1.0, 0.0])
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub blocks: Vec<CouplingBlock>,
}

impl FlowModel {
    /// Identity-initialized flow: hidden layers fan-in uniform, final layer
    /// zero, masks strictly alternating.
    pub fn new(depth: usize, width: usize, rng: &mut impl Rng) -> Self {
        let blocks = (0..depth)
            .map(|i| CouplingBlock {
                mask_first: i % 2 == 0,
                layers: [
                    Linear::fan_in_uniform(2, width, rng),
                    Linear::fan_in_uniform(width, width, rng),
                    Linear::zeros(width, 4),
                ],
            })
            .collect();
        FlowModel { blocks }
    }

    /// All conditioner parameters zero (exact identity map, for tests).
    pub fn zeros(depth: usize, width: usize) -> Self {
        let blocks = (0..depth)
            .map(|i| CouplingBlock {
                mask_first: i % 2 == 0,
                layers: [Linear::zeros(2, width), Linear::zeros(width, width), Linear::zeros(width, 4)],
            })
            .collect();
        FlowModel { blocks }
    }

    /// Adds N(0, scale²) noise to every parameter (random non-identity model).
    pub fn randomize(&mut self, scale: f64, rng: &mut impl Rng) {
        for t in self.param_tensors_mut() {
            for v in t.data_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v += scale * e;
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            for (j, l) in blk.layers.iter().enumerate() {
                out.push((format!("flow.block{i}.layer{j}.W"), &l.w));
                out.push((format!("flow.block{i}.layer{j}.b"), &l.b));
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for blk in &mut self.blocks {
            for l in &mut blk.layers {
                out.push(&mut l.w);
                out.push(&mut l.b);
            }
        }
        out
    }

    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> FlowVars {
        let blocks = self
            .blocks
            .iter()
            .map(|blk| {
                let lv = [
                    blk.layers[0].vars(tape, trainable),
                    blk.layers[1].vars(tape, trainable),
                    blk.layers[2].vars(tape, trainable),
                ];
                let (m, inv) = blk.mask();
                BlockVars {
                    layers: lv,
                    mask: tape.constant(Tensor::new(vec![2], m.to_vec()).unwrap()),
                    inv_mask: tape.constant(Tensor::new(vec![2], inv.to_vec()).unwrap()),
                }
            })
            .collect();
        FlowVars { blocks }
    }

    // ── value-level conveniences (scratch tape, no gradients) ────────

    /// Exact log q_α at each point.
    pub fn log_prob_batch(&self, points: &[[f64; 2]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(4096) {
            let mut tape = Tape::new();
            let vars = self.vars(&mut tape, false);
            let x = tape.constant(Tensor::from_points(chunk));
            let lp = vars.log_prob(&mut tape, x)?;
            out.extend_from_slice(tape.value(lp).data());
        }
        Ok(out)
    }

    /// Draws n samples; returns the points together with their exact
    /// log q_α (computed on the forward path, no inversion).
    pub fn sample(&self, n: usize, seed: u64) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
        if n == 0 {
            return Err(crate::error::FceError::InvalidArgument(
                "sample size must be at least 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with(&self, n: usize, rng: &mut impl Rng) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
        let z = draw_base(n, rng);
        let mut points = Vec::with_capacity(n);
        let mut logq = Vec::with_capacity(n);
        for chunk in z.chunks(4096) {
            let mut tape = Tape::new();
            let vars = self.vars(&mut tape, false);
            let zv = tape.constant(Tensor::from_points(chunk));
            let (xv, ld) = vars.forward(&mut tape, zv)?;
            let lq0 = base_log_prob(&mut tape, zv)?;
            let xd = tape.value(xv).data();
            for r in 0..chunk.len() {
                points.push([xd[2 * r], xd[2 * r + 1]]);
            }
            let ldd = tape.value(ld).data();
            let q0d = tape.value(lq0).data();
            for r in 0..chunk.len() {
                logq.push(q0d[r] - ldd[r]);
            }
        }
        Ok((points, logq))
    }
}

/// Standard 2D Gaussian draws, the flow's base distribution.
pub fn draw_base(n: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            [a, b]
        })
        .collect()
}

/// log q₀ of an N×2 batch on the tape: −ln 2π − ‖z‖²/2, shape [N].
pub fn base_log_prob(tape: &mut Tape, z: Var) -> Result<Var> {
    let sq = tape.mul(z, z)?;
    let ss = tape.sum_axis1(sq)?;
    let half = tape.mul_scalar(ss, -0.5)?;
    tape.add_scalar(half, -LN_2PI)
}

struct BlockVars {
    layers: [LinearVars; 3],
    mask: Var,
    inv_mask: Var,
}

impl BlockVars {
    /// Squashed log-scale and shift from the passed coordinates, both already
    /// masked to the transformed half. Returns (s, t).
    fn conditioner(&self, tape: &mut Tape, x_masked: Var) -> Result<(Var, Var)> {
        let h = self.layers[0].apply(tape, x_masked)?;
        let h = tape.relu(h)?;
        let h = self.layers[1].apply(tape, h)?;
        let h = tape.relu(h)?;
        let out = self.layers[2].apply(tape, h)?;
        let s_raw = tape.narrow_cols(out, 0, 2)?;
        let t_raw = tape.narrow_cols(out, 2, 2)?;
        let scaled = tape.mul_scalar(s_raw, 1.0 / S_MAX)?;
        let sq = tape.tanh(scaled)?;
        let s = tape.mul_scalar(sq, S_MAX)?;
        let s = tape.mul_rowvec(s, self.inv_mask)?;
        let t = tape.mul_rowvec(t_raw, self.inv_mask)?;
        Ok((s, t))
    }
}

pub struct FlowVars {
    blocks: Vec<BlockVars>,
}

impl FlowVars {
    /// Rebuilds vars from pre-registered parameter leaves, six per block in
    /// `named_params` order, with each block's mask polarity.
    pub fn from_leaves(tape: &mut Tape, leaves: &[Var], mask_first: &[bool]) -> Self {
        assert_eq!(leaves.len(), 6 * mask_first.len());
        let blocks = mask_first
            .iter()
            .enumerate()
            .map(|(i, &mf)| {
                let b = 6 * i;
                let (m, inv) = if mf {
                    ([1.0, 0.0], [0.0, 1.0])
                } else {
                    ([0.0, 1.0], [1.0, 0.0])
                };
                BlockVars {
                    layers: [
                        LinearVars { w: leaves[b], b: leaves[b + 1] },
                        LinearVars { w: leaves[b + 2], b: leaves[b + 3] },
                        LinearVars { w: leaves[b + 4], b: leaves[b + 5] },
                    ],
                    mask: tape.constant(Tensor::new(vec![2], m.to_vec()).unwrap()),
                    inv_mask: tape.constant(Tensor::new(vec![2], inv.to_vec()).unwrap()),
                }
            })
            .collect();
        FlowVars { blocks }
    }

    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for l in &b.layers {
                out.push(l.w);
                out.push(l.b);
            }
        }
        out
    }

    /// x = g_α(z) with the summed log|det ∂x/∂z| per row.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let n = tape.value(z).shape()[0];
        let mut x = z;
        let mut log_det = tape.constant(Tensor::zeros(vec![n]));
        for blk in &self.blocks {
            let xm = tape.mul_rowvec(x, blk.mask)?;
            let (s, t) = blk.conditioner(tape, xm)?;
            let es = tape.exp(s)?;
            let scaled = tape.mul(x, es)?;
            let shifted = tape.add(scaled, t)?;
            let trans = tape.mul_rowvec(shifted, blk.inv_mask)?;
            x = tape.add(xm, trans)?;
            let ld = tape.sum_axis1(s)?;
            log_det = tape.add(log_det, ld)?;
        }
        Ok((x, log_det))
    }

    /// z = g_α⁻¹(x) with log|det ∂z/∂x| per row (the negated forward log-det).
    pub fn inverse(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let n = tape.value(x).shape()[0];
        let mut z = x;
        let mut log_det_inv = tape.constant(Tensor::zeros(vec![n]));
        for blk in self.blocks.iter().rev() {
            let zm = tape.mul_rowvec(z, blk.mask)?;
            let (s, t) = blk.conditioner(tape, zm)?;
            let ns = tape.neg(s)?;
            let ens = tape.exp(ns)?;
            let centered = tape.sub(z, t)?;
            let unscaled = tape.mul(centered, ens)?;
            let trans = tape.mul_rowvec(unscaled, blk.inv_mask)?;
            z = tape.add(zm, trans)?;
            let ld = tape.sum_axis1(s)?;
            log_det_inv = tape.sub(log_det_inv, ld)?;
        }
        Ok((z, log_det_inv))
    }

    /// log q_α(x) = log q₀(g_α⁻¹(x)) + log|det ∂g_α⁻¹/∂x|, shape [N].
    /// Differentiable w.r.t. both x and the flow parameters.
    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (z, ldi) = self.inverse(tape, x)?;
        let lq0 = base_log_prob(tape, z)?;
        tape.add(lq0, ldi)
    }

    /// log q_α(g_α(z)) on the forward path: log q₀(z) − forward log-det.
    pub fn log_prob_of_forward(&self, tape: &mut Tape, z: Var, log_det: Var) -> Result<Var> {
        let lq0 = base_log_prob(tape, z)?;
        tape.sub(lq0, log_det)
    }
}
