//! Adam and Adamax with bias correction.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptVariant {
    Adam,
    Adamax,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub variant: OptVariant,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    /// First moment per parameter tensor.
    pub m: Vec<Vec<f64>>,
    /// Second moment (Adam) or infinity-norm accumulator (Adamax).
    pub v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer {
            variant: OptVariant::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adamax(lr: f64) -> Self {
        Optimizer { variant: OptVariant::Adamax, ..Optimizer::adam(lr) }
    }

    /// One update using each tensor's stored grad. A non-finite gradient
    /// anywhere skips the whole step without advancing the counter.
    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer state shape drift");
        let finite = params
            .iter()
            .all(|p| p.grad.as_ref().map(|g| g.iter().all(|v| v.is_finite())).unwrap_or(false));
        if !finite {
            log::warn!("skipping optimizer step {}: missing or non-finite gradient", self.step_count + 1);
            return;
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        for (pi, p) in params.iter_mut().enumerate() {
            let g = p.grad.take().unwrap();
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            match self.variant {
                OptVariant::Adam => {
                    let bc2 = 1.0 - self.beta2.powi(t);
                    for (j, val) in p.data_mut().iter_mut().enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *val -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
                OptVariant::Adamax => {
                    for (j, val) in p.data_mut().iter_mut().enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = (self.beta2 * v[j]).max(g[j].abs());
                        *val -= self.lr * m[j] / (bc1 * (v[j] + self.eps));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Tensor {
        let mut t = Tensor::scalar(v);
        t.requires_grad = true;
        t
    }

    #[test]
    fn first_adam_step_is_lr_sized() {
        let lr = 0.01;
        let mut opt = Optimizer::adam(lr);
        let mut p = one_param(1.0);
        p.grad = Some(vec![1.0]);
        opt.step(&mut [&mut p]);
        // bias-corrected first step: Δ = lr·1/(1+ε′)
        assert!((p.data()[0] - (1.0 - lr)).abs() < lr * 1e-6, "p = {}", p.data()[0]);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut opt = Optimizer::adam(0.1);
        let mut p = one_param(2.5);
        for _ in 0..10 {
            p.grad = Some(vec![0.0]);
            opt.step(&mut [&mut p]);
        }
        assert_eq!(p.data()[0], 2.5);
    }

    #[test]
    fn adamax_accumulator_is_infinity_norm_fixed_point() {
        let mut opt = Optimizer::adamax(0.001);
        let mut p = one_param(0.0);
        p.grad = Some(vec![0.7]);
        opt.step(&mut [&mut p]);
        assert_eq!(opt.v[0][0], 0.7);
        for _ in 0..5 {
            p.grad = Some(vec![0.7]);
            opt.step(&mut [&mut p]);
            assert_eq!(opt.v[0][0], 0.7);
        }
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut opt = Optimizer::adam(0.1);
        let mut p = one_param(1.0);
        p.grad = Some(vec![f64::NAN]);
        opt.step(&mut [&mut p]);
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(opt.step_count, 0);
    }
}
