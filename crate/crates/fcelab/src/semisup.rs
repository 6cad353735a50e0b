//! Class-conditional EBM training with K heads on a shared trunk: the
//! unlabeled marginal is a uniform mixture over heads, labeled points add a
//! cross-entropy term on the head posterior, and negatives still come from
//! the jointly trained flow.

use std::io::Write;

use rand::Rng;

use crate::data::{LabeledDataset, UNLABELED};
use crate::ebm::{EbmVars, EnergyModel};
use crate::error::{FceError, Result};
use crate::flow::{self, FlowModel};
use crate::nn::store_grads;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{contrastive_terms, Side, TrainOptions};

/// log p_θ(x) up to the global normalizer, marginalized over heads with a
/// uniform class prior: logsumexp_k(f_k − c_k) − log K. For K = 1 this is
/// exactly the single-head log-density.
pub fn mixture_log_unnormalized(tape: &mut Tape, ebm: &EbmVars, x: Var) -> Result<Var> {
    let all = ebm.log_unnormalized_all(tape, x)?;
    let k = tape.value(all).shape()[1];
    let lse = tape.logsumexp_axis1(all)?;
    tape.add_scalar(lse, -(k as f64).ln())
}

fn one_hot(labels: &[i32], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l == UNLABELED {
            return Err(FceError::InvalidArgument(
                "label_loss received an unlabeled point".into(),
            ));
        }
        if l < 0 {
            return Err(FceError::InvalidArgument(format!("negative label {l}")));
        }
        if l as usize >= k {
            return Err(FceError::HeadOutOfRange { head: l as usize, n_heads: k });
        }
        data[i * k + l as usize] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], data)
}

/// Mean cross-entropy of the head posterior p(y|x) = softmax_k(f_k − c_k)
/// against the given labels. Identical heads give exactly ln K.
pub fn label_loss(tape: &mut Tape, ebm: &EbmVars, x: Var, labels: &[i32]) -> Result<Var> {
    let all = ebm.log_unnormalized_all(tape, x)?;
    let k = tape.value(all).shape()[1];
    let hot = tape.constant(one_hot(labels, k)?);
    let picked = tape.mul(all, hot)?;
    let picked = tape.sum_axis1(picked)?;
    let lse = tape.logsumexp_axis1(all)?;
    let nll = tape.sub(lse, picked)?;
    tape.mean_all(nll)
}

/// Head posterior per point: rows of softmax_k(f_k(x) − c_k), value-level.
pub fn predict(ebm: &EnergyModel, points: &[[f64; 2]]) -> Result<Vec<Vec<f64>>> {
    let k = ebm.n_heads();
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(4096) {
        let mut tape = Tape::new();
        let vars = ebm.vars(&mut tape, false);
        let x = tape.constant(Tensor::from_points(chunk));
        let all = vars.log_unnormalized_all(&mut tape, x)?;
        let vals = tape.value(all).data();
        for row in vals.chunks(k) {
            let lse = crate::tape::logsumexp(row);
            out.push(row.iter().map(|v| (v - lse).exp()).collect());
        }
    }
    Ok(out)
}

/// Fraction of points whose argmax head matches the label; unlabeled points
/// are skipped. Errors when nothing is labeled.
pub fn classification_accuracy(ebm: &EnergyModel, data: &LabeledDataset) -> Result<f64> {
    let probs = predict(ebm, &data.points)?;
    let mut right = 0usize;
    let mut total = 0usize;
    for (p, &l) in probs.iter().zip(&data.labels) {
        if l == UNLABELED {
            continue;
        }
        let argmax = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i as i32)
            .unwrap();
        right += (argmax == l) as usize;
        total += 1;
    }
    if total == 0 {
        return Err(FceError::InvalidArgument("accuracy over zero labeled points".into()));
    }
    Ok(right as f64 / total as f64)
}

#[derive(Clone, Debug)]
pub struct SemisupOptions {
    pub base: TrainOptions,
    /// Labeled points per iteration (resampled with replacement).
    pub labeled_batch: usize,
    pub label_loss_weight: f64,
    /// Iterations at the start that always update the EBM, before the
    /// accuracy gate takes over.
    pub warmup_ebm_iters: u64,
}

impl Default for SemisupOptions {
    fn default() -> Self {
        SemisupOptions {
            base: TrainOptions::default(),
            labeled_batch: 100,
            label_loss_weight: 1.0,
            warmup_ebm_iters: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemisupHistoryRow {
    pub iter: u64,
    pub side: Side,
    pub value: f64,
    pub accuracy: f64,
    pub label_loss: Option<f64>,
    pub heldout_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SemisupHistory {
    pub rows: Vec<SemisupHistoryRow>,
}

impl SemisupHistory {
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "iter,side,value,accuracy,ebm_mse,flow_nll,jsd,label_loss,heldout_acc")?;
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
            writeln!(
                out,
                "{},{},{:.16e},{:.16e},,,,{},{}",
                r.iter,
                r.side.as_str(),
                r.value,
                r.accuracy,
                opt(r.label_loss),
                opt(r.heldout_acc)
            )?;
        }
        Ok(())
    }

    pub fn final_heldout_acc(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.heldout_acc)
    }
}

/// Runs semi-supervised FCE iterations `comp.next_iter..=until`. Positives
/// are drawn from all data points; negatives are flow samples only, so
/// labeled points never enter the negative stream.
pub fn semisup_run(
    ebm: &mut EnergyModel,
    flow: &mut FlowModel,
    comp: &mut crate::train::FceComponents,
    data: &LabeledDataset,
    heldout: Option<&LabeledDataset>,
    opts: &SemisupOptions,
    until: u64,
) -> Result<SemisupHistory> {
    let labeled_idx = data.labeled_indices();
    if labeled_idx.is_empty() {
        return Err(FceError::InvalidArgument(
            "semisup training requires at least one labeled point".into(),
        ));
    }
    let k = ebm.n_heads() as i32;
    for &i in &labeled_idx {
        let l = data.labels[i];
        if l < 0 {
            return Err(FceError::InvalidArgument(format!("negative label {l}")));
        }
        if l >= k {
            return Err(FceError::HeadOutOfRange { head: l as usize, n_heads: k as usize });
        }
    }

    let base = &opts.base;
    let mut history = SemisupHistory::default();

    while comp.next_iter <= until {
        let iter = comp.next_iter;
        let rng = &mut comp.rng;
        let unlabeled: Vec<[f64; 2]> = (0..base.batch_size)
            .map(|_| data.points[rng.gen_range(0..data.points.len())])
            .collect();
        let labeled: Vec<usize> = (0..opts.labeled_batch)
            .map(|_| labeled_idx[rng.gen_range(0..labeled_idx.len())])
            .collect();
        let lab_pts: Vec<[f64; 2]> = labeled.iter().map(|&i| data.points[i]).collect();
        let lab_lbl: Vec<i32> = labeled.iter().map(|&i| data.labels[i]).collect();
        let z_batch = flow::draw_base(base.batch_size, rng);

        let warming = iter <= opts.warmup_ebm_iters;
        let side = if warming { Side::Ebm } else { comp.alt.side };
        let mut lloss = None;
        let (value, accuracy) = match side {
            Side::Ebm => {
                let mut tape = Tape::new();
                let evars = ebm.vars(&mut tape, true);
                let fvars = flow.vars(&mut tape, false);
                let xu = tape.constant(Tensor::from_points(&unlabeled));
                let xl = tape.constant(Tensor::from_points(&lab_pts));
                let zv = tape.constant(Tensor::from_points(&z_batch));
                let lq_u = fvars.log_prob(&mut tape, xu)?;
                let (xn, ld) = fvars.forward(&mut tape, zv)?;
                let lq_n = fvars.log_prob_of_forward(&mut tape, zv, ld)?;
                let lp_u = mixture_log_unnormalized(&mut tape, &evars, xu)?;
                let lp_n = mixture_log_unnormalized(&mut tape, &evars, xn)?;
                let (value, accuracy) =
                    contrastive_terms(&mut tape, lp_u, lq_u, lp_n, lq_n, base.log_prior_odds)?;
                let ll = label_loss(&mut tape, &evars, xl, &lab_lbl)?;
                lloss = Some(tape.value(ll).item());
                let v = tape.value(value).item();
                let wll = tape.mul_scalar(ll, opts.label_loss_weight)?;
                let nv = tape.neg(value)?;
                let loss = tape.add(nv, wll)?;
                tape.backward(loss)?;
                let flat = evars.flat();
                store_grads(&tape, &flat, &mut ebm.param_tensors_mut());
                comp.ebm_opt.step(&mut ebm.param_tensors_mut());
                (v, accuracy)
            }
            Side::Flow => {
                let mut tape = Tape::new();
                let evars = ebm.vars(&mut tape, false);
                let fvars = flow.vars(&mut tape, true);
                let xu = tape.constant(Tensor::from_points(&unlabeled));
                let zv = tape.constant(Tensor::from_points(&z_batch));
                let lq_u = fvars.log_prob(&mut tape, xu)?;
                let (xn, ld) = fvars.forward(&mut tape, zv)?;
                let lq_n = fvars.log_prob_of_forward(&mut tape, zv, ld)?;
                let lp_u = mixture_log_unnormalized(&mut tape, &evars, xu)?;
                let lp_n = mixture_log_unnormalized(&mut tape, &evars, xn)?;
                let (value, accuracy) =
                    contrastive_terms(&mut tape, lp_u, lq_u, lp_n, lq_n, base.log_prior_odds)?;
                let v = tape.value(value).item();
                tape.backward(value)?;
                let flat = fvars.flat();
                store_grads(&tape, &flat, &mut flow.param_tensors_mut());
                comp.flow_opt.step(&mut flow.param_tensors_mut());
                (v, accuracy)
            }
        };
        if !warming {
            comp.alt.after_update(accuracy);
        }
        comp.next_iter += 1;

        let eval_now =
            base.eval_every > 0 && (iter % base.eval_every == 0);
        history.rows.push(SemisupHistoryRow {
            iter,
            side,
            value,
            accuracy,
            label_loss: lloss,
            heldout_acc: if eval_now {
                heldout.and_then(|h| classification_accuracy(ebm, h).ok())
            } else {
                None
            },
        });
    }
    Ok(history)
}


/// Semi-supervised FCE training from scratch.
pub fn semisup_train(
    ebm: &mut EnergyModel,
    flow: &mut FlowModel,
    data: &LabeledDataset,
    heldout: Option<&LabeledDataset>,
    opts: &SemisupOptions,
    seed: u64,
) -> Result<SemisupHistory> {
    let mut comp = crate::train::FceComponents::fresh(&opts.base, seed);
    semisup_run(ebm, flow, &mut comp, data, heldout, opts, opts.base.iterations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_semisup_split, TwoSpirals};
    use crate::optim::Optimizer;
    use crate::tape::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN_2: f64 = std::f64::consts::LN_2;

    #[test]
    fn identical_heads_give_ln_k_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ebm = EnergyModel::new(&[16, 16], 2, &mut rng); // zero final layer, c = 0
        let mut tape = Tape::new();
        let vars = ebm.vars(&mut tape, false);
        let x = tape.constant(Tensor::from_points(&[[0.3, -0.2], [1.0, 1.0]]));
        let l = label_loss(&mut tape, &vars, x, &[0, 1]).unwrap();
        assert!((tape.value(l).item() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn unlabeled_point_in_label_loss_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ebm = EnergyModel::new(&[8], 2, &mut rng);
        let mut tape = Tape::new();
        let vars = ebm.vars(&mut tape, false);
        let x = tape.constant(Tensor::from_points(&[[0.0, 0.0]]));
        assert!(label_loss(&mut tape, &vars, x, &[UNLABELED]).is_err());
    }

    #[test]
    fn out_of_range_label_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ebm = EnergyModel::new(&[8], 2, &mut rng);
        let mut tape = Tape::new();
        let vars = ebm.vars(&mut tape, false);
        let x = tape.constant(Tensor::from_points(&[[0.0, 0.0]]));
        let r = label_loss(&mut tape, &vars, x, &[2]);
        assert!(matches!(r, Err(FceError::HeadOutOfRange { .. })));
    }

    #[test]
    fn single_head_mixture_equals_unsupervised_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ebm = EnergyModel::new(&[16, 16], 1, &mut rng);
        for t in ebm.param_tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let pts = [[0.4, -0.9], [1.2, 0.3], [-2.0, 1.5]];
        let mut tape = Tape::new();
        let vars = ebm.vars(&mut tape, false);
        let x = tape.constant(Tensor::from_points(&pts));
        let mix = mixture_log_unnormalized(&mut tape, &vars, x).unwrap();
        let single = vars.log_unnormalized_head(&mut tape, x, 0).unwrap();
        for (a, b) in tape.value(mix).data().iter().zip(tape.value(single).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn predictions_are_normalized_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ebm = EnergyModel::new(&[16, 16], 3, &mut rng);
        for t in ebm.param_tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let pts: Vec<[f64; 2]> =
            (0..20).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let p1 = predict(&ebm, &pts).unwrap();
        for row in &p1 {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // shifting every head's log-normalizer equally changes nothing
        for v in ebm.c.data_mut() {
            *v += 7.5;
        }
        let p2 = predict(&ebm, &pts).unwrap();
        for (r1, r2) in p1.iter().zip(&p2) {
            for (a, b) in r1.iter().zip(r2) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn label_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ebm = EnergyModel::new(&[12, 12], 2, &mut rng);
        for t in ebm.param_tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let pts: Vec<[f64; 2]> =
            (0..10).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let labels: Vec<i32> = (0..10).map(|i| (i % 2) as i32).collect();
        let params: Vec<Tensor> = ebm.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        let layer_count = ebm.layers.len();
        let err = grad_check_params(
            |tape, vs| {
                let evars = EbmVars::from_parts(
                    (0..layer_count)
                        .map(|j| crate::nn::LinearVars { w: vs[2 * j], b: vs[2 * j + 1] })
                        .collect(),
                    vs[2 * layer_count],
                    0.2,
                    2,
                );
                let x = tape.constant(Tensor::from_points(&pts));
                label_loss(tape, &evars, x, &labels)
            },
            &params,
            1e-5,
            12,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn supervised_heads_separate_two_blobs() {
        // Pure label-loss training (contrastive weight effectively ignored by
        // keeping the flow frozen and warmup off): two well-separated blobs
        // must classify nearly perfectly within a few hundred steps.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pts = Vec::new();
        let mut lbl = Vec::new();
        for _ in 0..300 {
            pts.push([rng.gen_range(-0.3..0.3) - 1.5, rng.gen_range(-0.3..0.3)]);
            lbl.push(0);
            pts.push([rng.gen_range(-0.3..0.3) + 1.5, rng.gen_range(-0.3..0.3)]);
            lbl.push(1);
        }
        let mut ebm = EnergyModel::new(&[32, 32], 2, &mut rng);
        let mut opt = Optimizer::adam(3e-3);
        for _ in 0..300 {
            let mut tape = Tape::new();
            let vars = ebm.vars(&mut tape, true);
            let x = tape.constant(Tensor::from_points(&pts));
            let l = label_loss(&mut tape, &vars, x, &lbl).unwrap();
            tape.backward(l).unwrap();
            let flat = vars.flat();
            store_grads(&tape, &flat, &mut ebm.param_tensors_mut());
            opt.step(&mut ebm.param_tensors_mut());
        }
        let ds = LabeledDataset { points: pts, labels: lbl };
        let acc = classification_accuracy(&ebm, &ds).unwrap();
        assert!(acc > 0.99, "accuracy {acc}");
    }

    #[test]
    fn zero_labeled_points_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ebm = EnergyModel::new(&[8], 2, &mut rng);
        let mut flow = FlowModel::new(2, 8, &mut rng);
        let data = LabeledDataset::unlabeled(vec![[0.0, 0.0]; 10]);
        let r = semisup_train(&mut ebm, &mut flow, &data, None, &SemisupOptions::default(), 0);
        assert!(r.is_err());
    }

    #[test]
    fn semisup_history_deterministic() {
        let data = make_semisup_split(&TwoSpirals::default(), 400, 20, 6).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut ebm = EnergyModel::new(&[16, 16], 2, &mut rng);
            let mut flow = FlowModel::new(2, 8, &mut rng);
            let opts = SemisupOptions {
                base: TrainOptions {
                    iterations: 25,
                    batch_size: 64,
                    eval_every: 10,
                    ..TrainOptions::default()
                },
                labeled_batch: 16,
                warmup_ebm_iters: 5,
                ..SemisupOptions::default()
            };
            semisup_train(&mut ebm, &mut flow, &data, Some(&data), &opts, 8).unwrap()
        };
        let h1 = run();
        let h2 = run();
        let mut b1 = Vec::new();
        let mut b2 = Vec::new();
        h1.write_csv(&mut b1).unwrap();
        h2.write_csv(&mut b2).unwrap();
        assert_eq!(b1, b2);
    }
}
