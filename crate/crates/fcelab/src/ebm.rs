//! Energy-based model p_θ(x) = exp(f_θ(x) − c) with a fully-connected trunk,
//! one or more heads sharing that trunk, and a learnable log-normalizer per
//! head. Also the posterior-ratio classifier shared by the contrastive
//! estimators.

use rand::Rng;

use crate::error::{FceError, Result};
use crate::nn::{Linear, LinearVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyModel {
    pub layers: Vec<Linear>,
    /// Learnable log-normalizers, one per head; trained like any parameter.
    pub c: Tensor,
    pub leaky_slope: f64,
}

impl EnergyModel {
    /// Hidden trunk widths with leaky ReLU between, final linear to n_heads.
    /// Trunk fan-in uniform, final layer zero-init, c = 0.
    pub fn new(hidden: &[usize], n_heads: usize, rng: &mut impl Rng) -> Self {
        assert!(n_heads >= 1);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = 2;
        for &h in hidden {
            layers.push(Linear::fan_in_uniform(prev, h, rng));
            prev = h;
        }
        layers.push(Linear::zeros(prev, n_heads));
        EnergyModel { layers, c: Tensor::zeros(vec![n_heads]), leaky_slope: 0.2 }
    }

    pub fn n_heads(&self) -> usize {
        self.c.len()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (j, l) in self.layers.iter().enumerate() {
            out.push((format!("ebm.layer{j}.W"), &l.w));
            out.push((format!("ebm.layer{j}.b"), &l.b));
        }
        out.push(("ebm.c".into(), &self.c));
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.c);
        out
    }

    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> EbmVars {
        EbmVars {
            layers: self.layers.iter().map(|l| l.vars(tape, trainable)).collect(),
            c: tape.leaf(self.c.clone(), trainable),
            slope: self.leaky_slope,
            n_heads: self.n_heads(),
        }
    }

    /// f_θ(x) − c for one head, value-level (scratch tape).
    pub fn log_unnormalized_batch(&self, points: &[[f64; 2]], head: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(4096) {
            let mut tape = Tape::new();
            let vars = self.vars(&mut tape, false);
            let x = tape.constant(Tensor::from_points(chunk));
            let lu = vars.log_unnormalized_head(&mut tape, x, head)?;
            out.extend_from_slice(tape.value(lu).data());
        }
        Ok(out)
    }
}

pub struct EbmVars {
    layers: Vec<LinearVars>,
    pub c: Var,
    slope: f64,
    n_heads: usize,
}

impl EbmVars {
    /// Assembles vars from pre-registered leaves, in `named_params` order.
    pub fn from_parts(layers: Vec<LinearVars>, c: Var, slope: f64, n_heads: usize) -> Self {
        EbmVars { layers, c, slope, n_heads }
    }

    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.w);
            out.push(l.b);
        }
        out.push(self.c);
        out
    }

    /// f_θ(x) for every head: N×K. Differentiable w.r.t. θ and x.
    pub fn energy_all(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(tape, h)?;
            if i < last {
                h = tape.leaky_relu(h, self.slope)?;
            }
        }
        Ok(h)
    }

    pub fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.n_heads {
            return Err(FceError::HeadOutOfRange { head, n_heads: self.n_heads });
        }
        Ok(())
    }

    /// f_θ(x) for one head, shape [N].
    pub fn energy_head(&self, tape: &mut Tape, x: Var, head: usize) -> Result<Var> {
        self.check_head(head)?;
        let all = self.energy_all(tape, x)?;
        let col = tape.narrow_cols(all, head, 1)?;
        let n = tape.value(col).shape()[0];
        tape.reshape(col, vec![n])
    }

    /// f_θ(x) − c for every head: N×K.
    pub fn log_unnormalized_all(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let f = self.energy_all(tape, x)?;
        let nc = tape.neg(self.c)?;
        tape.add_rowvec(f, nc)
    }

    /// f_θ(x) − c_head, shape [N].
    pub fn log_unnormalized_head(&self, tape: &mut Tape, x: Var, head: usize) -> Result<Var> {
        self.check_head(head)?;
        let all = self.log_unnormalized_all(tape, x)?;
        let col = tape.narrow_cols(all, head, 1)?;
        let n = tape.value(col).shape()[0];
        tape.reshape(col, vec![n])
    }
}

/// u(x) = σ(log p_θ(x) − log q(x)): posterior probability that x is real
/// under equal class priors. Computed in log-space; use `log_posterior_pair`
/// inside losses so extreme ratios never underflow.
pub fn posterior(tape: &mut Tape, log_p: Var, log_q: Var) -> Result<Var> {
    let d = tape.sub(log_p, log_q)?;
    tape.sigmoid(d)
}

/// (log u, log(1−u)) from the log-density difference, via log-sigmoid.
pub fn log_posterior_pair(tape: &mut Tape, log_p: Var, log_q: Var) -> Result<(Var, Var)> {
    let d = tape.sub(log_p, log_q)?;
    let lu = tape.log_sigmoid(d)?;
    let nd = tape.neg(d)?;
    let lnu = tape.log_sigmoid(nd)?;
    Ok((lu, lnu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64, heads: usize) -> EnergyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EnergyModel::new(&[128, 128, 128], heads, &mut rng)
    }

    #[test]
    fn zero_final_layer_gives_zero_energy() {
        let m = model(0, 1);
        let out = m.log_unnormalized_batch(&[[0.3, -2.0], [5.0, 5.0]], 0).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let mut m = model(1, 1);
        // Non-trivial outputs
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in m.param_tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let pts = [[0.1, 0.2], [-1.0, 0.5], [2.0, -2.0]];
        let fwd = m.log_unnormalized_batch(&pts, 0).unwrap();
        let perm = [pts[2], pts[0], pts[1]];
        let fwd_p = m.log_unnormalized_batch(&perm, 0).unwrap();
        assert_eq!(fwd_p, vec![fwd[2], fwd[0], fwd[1]]);
    }

    #[test]
    fn c_shift_moves_output_uniformly() {
        let mut m = model(3, 1);
        let pts = [[0.5, 0.5], [-1.0, 2.0]];
        let before = m.log_unnormalized_batch(&pts, 0).unwrap();
        m.c.data_mut()[0] += 0.75;
        let after = m.log_unnormalized_batch(&pts, 0).unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert!((b - 0.75 - a).abs() < 1e-15);
        }
    }

    #[test]
    fn head_out_of_range() {
        let m = model(4, 2);
        assert!(matches!(
            m.log_unnormalized_batch(&[[0.0, 0.0]], 2),
            Err(FceError::HeadOutOfRange { head: 2, n_heads: 2 })
        ));
    }

    #[test]
    fn heads_share_trunk_but_not_final_layer() {
        let mut m = model(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in m.param_tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let pts = [[0.4, -0.6]];
        let base: Vec<Vec<f64>> =
            (0..3).map(|h| m.log_unnormalized_batch(&pts, h).unwrap()).collect();
        // Perturb head 1's final-layer weights only.
        let last = m.layers.len() - 1;
        let w = m.layers[last].w.data_mut();
        for j in 0..128 {
            w[128 + j] += 0.5; // row 1 of the 3×128 weight
        }
        for h in 0..3 {
            let now = m.log_unnormalized_batch(&pts, h).unwrap();
            if h == 1 {
                assert_ne!(now, base[h]);
            } else {
                assert_eq!(now, base[h]);
            }
        }
    }

    #[test]
    fn posterior_symmetric_and_ratio_cases() {
        let mut tape = Tape::new();
        let lp = tape.constant(Tensor::new(vec![3], vec![0.0, 3.0f64.ln(), -1000.0]).unwrap());
        let lq = tape.constant(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let u = posterior(&mut tape, lp, lq).unwrap();
        let ud = tape.value(u).data();
        assert!((ud[0] - 0.5).abs() < 1e-15);
        assert!((ud[1] - 0.75).abs() < 1e-12);
        // log-space path never underflows to -inf
        let (lu, lnu) = log_posterior_pair(&mut tape, lp, lq).unwrap();
        assert!(tape.value(lu).data()[2].is_finite());
        assert!((tape.value(lu).data()[2] + 1000.0).abs() < 1e-9);
        assert!(tape.value(lnu).data()[2].abs() < 1e-9);
    }

    #[test]
    fn posterior_complement_sums_to_one() {
        let mut tape = Tape::new();
        let lp = tape.constant(Tensor::new(vec![2], vec![1.3, -0.4]).unwrap());
        let lq = tape.constant(Tensor::new(vec![2], vec![0.2, 0.9]).unwrap());
        let u = posterior(&mut tape, lp, lq).unwrap();
        let uc = posterior(&mut tape, lq, lp).unwrap();
        for (a, b) in tape.value(u).data().iter().zip(tape.value(uc).data()) {
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_invariant_to_common_shift() {
        let mut tape = Tape::new();
        let lp = tape.constant(Tensor::new(vec![2], vec![1.3, -0.4]).unwrap());
        let lq = tape.constant(Tensor::new(vec![2], vec![0.2, 0.9]).unwrap());
        let u1 = posterior(&mut tape, lp, lq).unwrap();
        let lp2 = tape.add_scalar(lp, 5.0).unwrap();
        let lq2 = tape.add_scalar(lq, 5.0).unwrap();
        let u2 = posterior(&mut tape, lp2, lq2).unwrap();
        for (a, b) in tape.value(u1).data().iter().zip(tape.value(u2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        use crate::tape::grad_check_params;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = EnergyModel::new(&[16, 16, 16], 1, &mut rng);
        for t in m.param_tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let pts: Vec<[f64; 2]> = (0..8)
            .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
            .collect();
        let params: Vec<Tensor> = m.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        let slope = m.leaky_slope;
        let n_layers = m.layers.len();
        let err = grad_check_params(
            |tape, vs| {
                let vars = EbmVars {
                    layers: (0..n_layers)
                        .map(|j| LinearVars { w: vs[2 * j], b: vs[2 * j + 1] })
                        .collect(),
                    c: vs[2 * n_layers],
                    slope,
                    n_heads: 1,
                };
                let x = tape.constant(Tensor::from_points(&pts));
                let f = vars.log_unnormalized_head(tape, x, 0)?;
                tape.mean_all(f)
            },
            &params,
            1e-5,
            20,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
