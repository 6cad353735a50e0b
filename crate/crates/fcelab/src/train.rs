//! Parameter-estimation procedures: flow MLE, noise contrastive estimation,
//! and flow contrastive estimation with the accuracy-gated alternation
//! schedule, plus the training diagnostics.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::GaussianMixture2D;
use crate::ebm::EnergyModel;
use crate::error::{FceError, Result};
use crate::eval::{density_mse_points, standard_eval_points};
use crate::flow::{self, FlowModel};
use crate::nn::store_grads;
use crate::optim::Optimizer;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Ebm,
    Flow,
}

impl Side {
    pub fn as_str(&self) -> &'static str {
        match self {
            Side::Ebm => "ebm",
            Side::Flow => "flow",
        }
    }
}

/// Accuracy-gated alternation: train the EBM until the classifier beats the
/// threshold, then train the flow until it drops back below. A consecutive
/// cap forces a switch so neither side can deadlock the schedule.
#[derive(Clone, Debug)]
pub struct AlternationState {
    pub side: Side,
    pub last_accuracy: f64,
    pub consecutive: u32,
    pub threshold: f64,
    pub max_consecutive: u32,
}

impl AlternationState {
    pub fn new(threshold: f64, max_consecutive: u32) -> Self {
        AlternationState {
            side: Side::Ebm,
            last_accuracy: 0.0,
            consecutive: 0,
            threshold,
            max_consecutive,
        }
    }

    /// Called after each parameter update with the batch accuracy observed by
    /// that update. Returns true when the side switched.
    pub fn after_update(&mut self, accuracy: f64) -> bool {
        self.consecutive += 1;
        self.last_accuracy = accuracy;
        let rule_fires = match self.side {
            Side::Ebm => accuracy > self.threshold,
            Side::Flow => accuracy < self.threshold,
        };
        let forced = self.consecutive >= self.max_consecutive;
        if rule_fires || forced {
            if forced && !rule_fires {
                log::warn!(
                    "{} side hit the consecutive-update cap ({}); forcing a switch",
                    self.side.as_str(),
                    self.max_consecutive
                );
            }
            self.side = match self.side {
                Side::Ebm => Side::Flow,
                Side::Flow => Side::Ebm,
            };
            self.consecutive = 0;
            true
        } else {
            false
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub iterations: u64,
    pub batch_size: usize,
    pub ebm_lr: f64,
    pub flow_lr: f64,
    pub accuracy_threshold: f64,
    pub max_consecutive: u32,
    pub eval_every: u64,
    pub eval_points: usize,
    /// log of p(y=0)/p(y=1); 0 means equal priors on data and negatives.
    pub log_prior_odds: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iterations: 20_000,
            batch_size: 500,
            ebm_lr: 3e-4,
            flow_lr: 1e-5,
            accuracy_threshold: 0.5,
            max_consecutive: 100,
            eval_every: 500,
            eval_points: 10_000,
            log_prior_odds: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iter: u64,
    pub side: Side,
    pub value: f64,
    pub accuracy: f64,
    pub ebm_mse: Option<f64>,
    pub flow_nll: Option<f64>,
    pub jsd: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "iter,side,value,accuracy,ebm_mse,flow_nll,jsd")?;
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
            writeln!(
                out,
                "{},{},{:.16e},{:.16e},{},{},{}",
                r.iter,
                r.side.as_str(),
                r.value,
                r.accuracy,
                opt(r.ebm_mse),
                opt(r.flow_nll),
                opt(r.jsd)
            )?;
        }
        Ok(())
    }

    /// (iteration, mse) pairs where the EBM density error was evaluated.
    pub fn mse_trace(&self) -> Vec<(u64, f64)> {
        self.rows.iter().filter_map(|r| r.ebm_mse.map(|m| (r.iter, m))).collect()
    }

    pub fn final_mse(&self) -> Option<f64> {
        self.mse_trace().last().map(|&(_, m)| m)
    }
}

/// Bits per dimension from a 2D negative log-likelihood in nats.
pub fn nll_to_bits_per_dim(nll_nats: f64) -> f64 {
    nll_nats / (2.0 * LN_2)
}

// ── contrastive objective ────────────────────────────────────────────

/// Shared log-classification objective on the tape:
///   mean log u(data) + mean log(1 − u(negatives)),
/// with u = σ(log p − log q − log prior odds). Also returns the fraction of
/// the 2n points the classifier gets right at the 0.5 cut; exact ties earn
/// half credit, so an uninformative classifier scores 0.5.
pub fn contrastive_terms(
    tape: &mut Tape,
    lp_data: Var,
    lq_data: Var,
    lp_neg: Var,
    lq_neg: Var,
    log_prior_odds: f64,
) -> Result<(Var, f64)> {
    let n_data = tape.value(lp_data).len();
    let n_neg = tape.value(lp_neg).len();
    if n_data != n_neg {
        return Err(FceError::ShapeMismatch {
            primitive: "contrastive_objective".into(),
            detail: format!("{n_data} positives vs {n_neg} negatives"),
        });
    }
    let d_data = tape.sub(lp_data, lq_data)?;
    let d_data = tape.add_scalar(d_data, -log_prior_odds)?;
    let d_neg = tape.sub(lp_neg, lq_neg)?;
    let d_neg = tape.add_scalar(d_neg, -log_prior_odds)?;
    let lu = tape.log_sigmoid(d_data)?;
    let nd = tape.neg(d_neg)?;
    let lnu = tape.log_sigmoid(nd)?;
    let m1 = tape.mean_all(lu)?;
    let m2 = tape.mean_all(lnu)?;
    let value = tape.add(m1, m2)?;

    let score = |d: f64, want_pos: bool| -> f64 {
        if d == 0.0 {
            0.5
        } else if (d > 0.0) == want_pos {
            1.0
        } else {
            0.0
        }
    };
    let correct_pos: f64 = tape.value(d_data).data().iter().map(|&d| score(d, true)).sum();
    let correct_neg: f64 = tape.value(d_neg).data().iter().map(|&d| score(d, false)).sum();
    let accuracy = (correct_pos + correct_neg) / (n_data + n_neg) as f64;
    Ok((value, accuracy))
}

/// NCE objective for a fixed noise distribution with known log-density.
/// Equals the 1/n-scaled Bernoulli log-likelihood of the classifier.
pub fn nce_objective(
    ebm: &EnergyModel,
    lq_data: &[f64],
    lq_noise: &[f64],
    data_batch: &[[f64; 2]],
    noise_batch: &[[f64; 2]],
) -> Result<f64> {
    if data_batch.len() != noise_batch.len() {
        return Err(FceError::ShapeMismatch {
            primitive: "nce_objective".into(),
            detail: format!("{} positives vs {} negatives", data_batch.len(), noise_batch.len()),
        });
    }
    let mut tape = Tape::new();
    let vars = ebm.vars(&mut tape, false);
    let xd = tape.constant(Tensor::from_points(data_batch));
    let xn = tape.constant(Tensor::from_points(noise_batch));
    let lp_d = vars.log_unnormalized_head(&mut tape, xd, 0)?;
    let lp_n = vars.log_unnormalized_head(&mut tape, xn, 0)?;
    let lq_d = tape.constant(Tensor::new(vec![lq_data.len()], lq_data.to_vec())?);
    let lq_n = tape.constant(Tensor::new(vec![lq_noise.len()], lq_noise.to_vec())?);
    let (value, _) = contrastive_terms(&mut tape, lp_d, lq_d, lp_n, lq_n, 0.0)?;
    Ok(tape.value(value).item())
}

/// FCE value function V(θ, α) with the classifier accuracy, evaluated on a
/// scratch tape (no updates).
pub fn fce_value(
    ebm: &EnergyModel,
    flow: &FlowModel,
    data_batch: &[[f64; 2]],
    z_batch: &[[f64; 2]],
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let evars = ebm.vars(&mut tape, false);
    let fvars = flow.vars(&mut tape, false);
    let xd = tape.constant(Tensor::from_points(data_batch));
    let zv = tape.constant(Tensor::from_points(z_batch));
    let lq_data = fvars.log_prob(&mut tape, xd)?;
    let (xn, ld) = fvars.forward(&mut tape, zv)?;
    let lq_neg = fvars.log_prob_of_forward(&mut tape, zv, ld)?;
    let lp_data = evars.log_unnormalized_head(&mut tape, xd, 0)?;
    let lp_neg = evars.log_unnormalized_head(&mut tape, xn, 0)?;
    let (value, accuracy) = contrastive_terms(&mut tape, lp_data, lq_data, lp_neg, lq_neg, 0.0)?;
    Ok((tape.value(value).item(), accuracy))
}

// ── single training steps ────────────────────────────────────────────

/// One gradient step on mean flow log-likelihood. Returns the batch NLL in
/// nats; a non-finite loss surfaces as an error before any update.
pub fn mle_flow_step(flow: &mut FlowModel, batch: &[[f64; 2]], opt: &mut Optimizer) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = flow.vars(&mut tape, true);
    let x = tape.constant(Tensor::from_points(batch));
    let lp = vars.log_prob(&mut tape, x)?;
    let mean_lp = tape.mean_all(lp)?;
    let nll = tape.neg(mean_lp)?;
    let loss = tape.value(nll).item();
    tape.backward(nll)?;
    let flat = vars.flat();
    store_grads(&tape, &flat, &mut flow.param_tensors_mut());
    opt.step(&mut flow.param_tensors_mut());
    Ok(loss)
}

/// One EBM-side FCE update: maximize V over θ with the flow frozen. The
/// log q terms enter as example-dependent bias constants. Returns
/// (value, accuracy) observed by the update.
pub fn fce_ebm_step(
    ebm: &mut EnergyModel,
    flow: &FlowModel,
    data_batch: &[[f64; 2]],
    z_batch: &[[f64; 2]],
    opt: &mut Optimizer,
    log_prior_odds: f64,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let evars = ebm.vars(&mut tape, true);
    let fvars = flow.vars(&mut tape, false);
    let xd = tape.constant(Tensor::from_points(data_batch));
    let zv = tape.constant(Tensor::from_points(z_batch));
    let lq_data = fvars.log_prob(&mut tape, xd)?;
    let (xn, ld) = fvars.forward(&mut tape, zv)?;
    let lq_neg = fvars.log_prob_of_forward(&mut tape, zv, ld)?;
    let lp_data = evars.log_unnormalized_head(&mut tape, xd, 0)?;
    let lp_neg = evars.log_unnormalized_head(&mut tape, xn, 0)?;
    let (value, accuracy) =
        contrastive_terms(&mut tape, lp_data, lq_data, lp_neg, lq_neg, log_prior_odds)?;
    let v = tape.value(value).item();
    let loss = tape.neg(value)?;
    tape.backward(loss)?;
    let flat = evars.flat();
    store_grads(&tape, &flat, &mut ebm.param_tensors_mut());
    opt.step(&mut ebm.param_tensors_mut());
    Ok((v, accuracy))
}

/// One flow-side FCE update: minimize V over α with θ frozen. Gradients flow
/// to α both through q_α and through the transported negatives g_α(z).
pub fn fce_flow_step(
    ebm: &EnergyModel,
    flow: &mut FlowModel,
    data_batch: &[[f64; 2]],
    z_batch: &[[f64; 2]],
    opt: &mut Optimizer,
    log_prior_odds: f64,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let evars = ebm.vars(&mut tape, false);
    let fvars = flow.vars(&mut tape, true);
    let xd = tape.constant(Tensor::from_points(data_batch));
    let zv = tape.constant(Tensor::from_points(z_batch));
    let lq_data = fvars.log_prob(&mut tape, xd)?;
    let (xn, ld) = fvars.forward(&mut tape, zv)?;
    let lq_neg = fvars.log_prob_of_forward(&mut tape, zv, ld)?;
    let lp_data = evars.log_unnormalized_head(&mut tape, xd, 0)?;
    let lp_neg = evars.log_unnormalized_head(&mut tape, xn, 0)?;
    let (value, accuracy) =
        contrastive_terms(&mut tape, lp_data, lq_data, lp_neg, lq_neg, log_prior_odds)?;
    let v = tape.value(value).item();
    tape.backward(value)?;
    let flat = fvars.flat();
    store_grads(&tape, &flat, &mut flow.param_tensors_mut());
    opt.step(&mut flow.param_tensors_mut());
    Ok((v, accuracy))
}

// ── training loops ───────────────────────────────────────────────────

fn draw_batch(data: &[[f64; 2]], n: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    (0..n).map(|_| data[rng.gen_range(0..data.len())]).collect()
}

pub struct EvalContext {
    pub truth: Option<GaussianMixture2D>,
    pub points: Vec<[f64; 2]>,
}

impl EvalContext {
    pub fn new(truth: Option<&GaussianMixture2D>, n: usize) -> Self {
        let points = truth.map(|t| standard_eval_points(t, n)).unwrap_or_default();
        EvalContext { truth: truth.cloned(), points }
    }

    fn ebm_mse(&self, ebm: &EnergyModel) -> Option<f64> {
        let truth = self.truth.as_ref()?;
        density_mse_points(
            |pts| ebm.log_unnormalized_batch(pts, 0),
            truth,
            &self.points,
        )
        .ok()
    }

    fn flow_nll(&self, flow: &FlowModel) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let lp = flow.log_prob_batch(&self.points).ok()?;
        Some(-lp.iter().sum::<f64>() / lp.len() as f64)
    }

    fn jsd(&self, flow: &FlowModel) -> Option<f64> {
        let truth = self.truth.as_ref()?;
        jsd_diagnostic(flow, truth, 2000, crate::eval::EVAL_SEED).ok()
    }
}

/// Mutable training state outside the models themselves: optimizers, the
/// alternation controller, the RNG, and the next iteration number. Snapshot
/// this (plus the models) to checkpoint a run; restoring it resumes the
/// exact sample/update sequence.
#[derive(Clone, Debug)]
pub struct FceComponents {
    pub ebm_opt: Optimizer,
    pub flow_opt: Optimizer,
    pub alt: AlternationState,
    pub rng: ChaCha8Rng,
    pub next_iter: u64,
}

impl FceComponents {
    pub fn fresh(opts: &TrainOptions, seed: u64) -> Self {
        FceComponents {
            ebm_opt: Optimizer::adam(opts.ebm_lr),
            flow_opt: Optimizer::adamax(opts.flow_lr),
            alt: AlternationState::new(opts.accuracy_threshold, opts.max_consecutive),
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_iter: 1,
        }
    }
}

/// Runs FCE iterations `comp.next_iter..=until` and returns their history.
pub fn fce_run(
    ebm: &mut EnergyModel,
    flow: &mut FlowModel,
    comp: &mut FceComponents,
    train_data: &[[f64; 2]],
    truth: Option<&GaussianMixture2D>,
    opts: &TrainOptions,
    until: u64,
) -> Result<History> {
    let evalctx = EvalContext::new(truth, opts.eval_points);
    let mut history = History::default();
    while comp.next_iter <= until {
        let iter = comp.next_iter;
        let data_batch = draw_batch(train_data, opts.batch_size, &mut comp.rng);
        let z_batch = flow::draw_base(opts.batch_size, &mut comp.rng);
        let side = comp.alt.side;
        let (value, accuracy) = match side {
            Side::Ebm => fce_ebm_step(
                ebm, flow, &data_batch, &z_batch, &mut comp.ebm_opt, opts.log_prior_odds,
            )?,
            Side::Flow => fce_flow_step(
                ebm, flow, &data_batch, &z_batch, &mut comp.flow_opt, opts.log_prior_odds,
            )?,
        };
        comp.alt.after_update(accuracy);
        comp.next_iter += 1;

        let eval_now = opts.eval_every > 0 && (iter % opts.eval_every == 0);
        history.rows.push(HistoryRow {
            iter,
            side,
            value,
            accuracy,
            ebm_mse: if eval_now { evalctx.ebm_mse(ebm) } else { None },
            flow_nll: if eval_now { evalctx.flow_nll(flow) } else { None },
            jsd: if eval_now { evalctx.jsd(flow) } else { None },
        });
    }
    Ok(history)
}

/// Joint FCE training from scratch. The flow passed in may be
/// identity/random initialized or MLE-pretrained; both starts are supported.
pub fn fce_train(
    ebm: &mut EnergyModel,
    flow: &mut FlowModel,
    train_data: &[[f64; 2]],
    truth: Option<&GaussianMixture2D>,
    opts: &TrainOptions,
    seed: u64,
) -> Result<History> {
    let mut comp = FceComponents::fresh(opts, seed);
    fce_run(ebm, flow, &mut comp, train_data, truth, opts, opts.iterations)
}

/// Single-optimizer training state for the NCE and MLE loops.
#[derive(Clone, Debug)]
pub struct SoloComponents {
    pub opt: Optimizer,
    pub rng: ChaCha8Rng,
    pub next_iter: u64,
}

impl SoloComponents {
    pub fn fresh(opt: Optimizer, seed: u64) -> Self {
        SoloComponents { opt, rng: ChaCha8Rng::seed_from_u64(seed), next_iter: 1 }
    }
}

/// Runs NCE iterations `comp.next_iter..=until` against a fixed noise
/// distribution (the Gaussian baseline).
pub fn nce_run(
    ebm: &mut EnergyModel,
    comp: &mut SoloComponents,
    train_data: &[[f64; 2]],
    noise: &GaussianMixture2D,
    truth: Option<&GaussianMixture2D>,
    opts: &TrainOptions,
    until: u64,
) -> Result<History> {
    let evalctx = EvalContext::new(truth, opts.eval_points);
    let mut history = History::default();

    while comp.next_iter <= until {
        let iter = comp.next_iter;
        let data_batch = draw_batch(train_data, opts.batch_size, &mut comp.rng);
        let noise_batch = noise.sample_with(opts.batch_size, &mut comp.rng);
        let lq_d: Vec<f64> = data_batch.iter().map(|&p| noise.log_density(p)).collect();
        let lq_n: Vec<f64> = noise_batch.iter().map(|&p| noise.log_density(p)).collect();

        let mut tape = Tape::new();
        let vars = ebm.vars(&mut tape, true);
        let xd = tape.constant(Tensor::from_points(&data_batch));
        let xn = tape.constant(Tensor::from_points(&noise_batch));
        let lp_d = vars.log_unnormalized_head(&mut tape, xd, 0)?;
        let lp_n = vars.log_unnormalized_head(&mut tape, xn, 0)?;
        let lq_dv = tape.constant(Tensor::new(vec![lq_d.len()], lq_d)?);
        let lq_nv = tape.constant(Tensor::new(vec![lq_n.len()], lq_n)?);
        let (value, accuracy) =
            contrastive_terms(&mut tape, lp_d, lq_dv, lp_n, lq_nv, opts.log_prior_odds)?;
        let v = tape.value(value).item();
        let loss = tape.neg(value)?;
        tape.backward(loss)?;
        let flat = vars.flat();
        store_grads(&tape, &flat, &mut ebm.param_tensors_mut());
        comp.opt.step(&mut ebm.param_tensors_mut());
        comp.next_iter += 1;

        let eval_now = opts.eval_every > 0 && (iter % opts.eval_every == 0);
        history.rows.push(HistoryRow {
            iter,
            side: Side::Ebm,
            value: v,
            accuracy,
            ebm_mse: if eval_now { evalctx.ebm_mse(ebm) } else { None },
            flow_nll: None,
            jsd: None,
        });
    }
    Ok(history)
}

/// Classical NCE from scratch.
pub fn nce_train(
    ebm: &mut EnergyModel,
    train_data: &[[f64; 2]],
    noise: &GaussianMixture2D,
    truth: Option<&GaussianMixture2D>,
    opts: &TrainOptions,
    seed: u64,
) -> Result<History> {
    let mut comp = SoloComponents::fresh(Optimizer::adam(opts.ebm_lr), seed);
    nce_run(ebm, &mut comp, train_data, noise, truth, opts, opts.iterations)
}

/// Runs MLE iterations `comp.next_iter..=until`; history carries the batch
/// NLL as `value`.
pub fn mle_run(
    flow: &mut FlowModel,
    comp: &mut SoloComponents,
    train_data: &[[f64; 2]],
    truth: Option<&GaussianMixture2D>,
    opts: &TrainOptions,
    until: u64,
) -> Result<History> {
    let evalctx = EvalContext::new(truth, opts.eval_points);
    let mut history = History::default();
    while comp.next_iter <= until {
        let iter = comp.next_iter;
        let batch = draw_batch(train_data, opts.batch_size, &mut comp.rng);
        let nll = mle_flow_step(flow, &batch, &mut comp.opt)?;
        comp.next_iter += 1;
        let eval_now = opts.eval_every > 0 && (iter % opts.eval_every == 0);
        history.rows.push(HistoryRow {
            iter,
            side: Side::Flow,
            value: nll,
            accuracy: f64::NAN,
            ebm_mse: None,
            flow_nll: if eval_now { evalctx.flow_nll(flow) } else { None },
            jsd: if eval_now { evalctx.jsd(flow) } else { None },
        });
    }
    Ok(history)
}

/// Flow MLE training from scratch.
pub fn mle_train(
    flow: &mut FlowModel,
    train_data: &[[f64; 2]],
    truth: Option<&GaussianMixture2D>,
    opts: &TrainOptions,
    seed: u64,
) -> Result<History> {
    let mut comp = SoloComponents::fresh(Optimizer::adamax(opts.flow_lr), seed);
    mle_run(flow, &mut comp, train_data, truth, opts, opts.iterations)
}

// ── diagnostics ──────────────────────────────────────────────────────

/// Monte-Carlo Jensen-Shannon divergence between the flow and a closed-form
/// ground truth, using exact log-densities on both sides. Bounded by ln 2.
pub fn jsd_diagnostic(flow: &FlowModel, truth: &GaussianMixture2D, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_samples = truth.sample_with(n, &mut rng);
    let (q_samples, _) = flow.sample_with(n, &mut rng)?;
    let mix_log = |lp: f64, lq: f64| crate::tape::logsumexp(&[lp, lq]) - LN_2;

    let lq_p = flow.log_prob_batch(&p_samples)?;
    let mut kl_p = 0.0;
    for (x, &lq) in p_samples.iter().zip(&lq_p) {
        let lp = truth.log_density(*x);
        kl_p += (lp - mix_log(lp, lq)) / n as f64;
    }
    let lq_q = flow.log_prob_batch(&q_samples)?;
    let mut kl_q = 0.0;
    for (x, &lq) in q_samples.iter().zip(&lq_q) {
        let lp = truth.log_density(*x);
        kl_q += (lq - mix_log(lp, lq)) / n as f64;
    }
    Ok(0.5 * kl_p + 0.5 * kl_q)
}

/// Monte-Carlo estimate of KL(q_α ‖ p_θ) up to log Z: energy minus entropy,
/// computed on the forward path without inverting the flow.
pub fn variational_free_energy(
    flow: &FlowModel,
    ebm: &EnergyModel,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = flow::draw_base(n, &mut rng);
    let mut tape = Tape::new();
    let fvars = flow.vars(&mut tape, false);
    let evars = ebm.vars(&mut tape, false);
    let zv = tape.constant(Tensor::from_points(&z));
    let (x, ld) = fvars.forward(&mut tape, zv)?;
    let lq = fvars.log_prob_of_forward(&mut tape, zv, ld)?;
    let lp = evars.log_unnormalized_head(&mut tape, x, 0)?;
    let diff = tape.sub(lq, lp)?;
    let m = tape.mean_all(diff)?;
    Ok(tape.value(m).item())
}

/// Gradient of the EBM log-likelihood (ascent direction): the mean score
/// difference between observed data and samples from the model itself.
/// Usable only when model samples are supplied by some external sampler;
/// no MCMC is shipped here, which is exactly why NCE/FCE exist.
pub fn ebm_mle_gradient(
    ebm: &EnergyModel,
    data_batch: &[[f64; 2]],
    model_samples: &[[f64; 2]],
) -> Result<Vec<(String, Vec<f64>)>> {
    let grad_of_mean_f = |pts: &[[f64; 2]]| -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = ebm.vars(&mut tape, true);
        let x = tape.constant(Tensor::from_points(pts));
        let f = vars.energy_head(&mut tape, x, 0)?;
        let m = tape.mean_all(f)?;
        tape.backward(m)?;
        Ok(vars
            .flat()
            .iter()
            .zip(ebm.named_params())
            .map(|(&v, (_, p))| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect())
    };
    let gd = grad_of_mean_f(data_batch)?;
    let gm = grad_of_mean_f(model_samples)?;
    Ok(ebm
        .named_params()
        .into_iter()
        .zip(gd.into_iter().zip(gm))
        .map(|((name, _), (d, m))| {
            (name, d.into_iter().zip(m).map(|(a, b)| a - b).collect())
        })
        .collect())
}

/// Moment-matched Gaussian: the classical NCE noise baseline.
pub fn fit_gaussian_baseline(data: &[[f64; 2]]) -> Result<GaussianMixture2D> {
    GaussianMixture2D::from_moments(data)
}
