//! End-to-end acceptance gate. Training runs are expensive, so each run's
//! summary is cached under target/acceptance-cache keyed by its exact
//! configuration; delete that directory to force recomputation.

use std::io::Write as IoWrite;
use std::path::PathBuf;
use std::process::Command;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use fcelab::config::{FlowInit, Method, RunConfig};
use fcelab::data::{GaussianMixture2D, GroundTruth};
use fcelab::ebm::EnergyModel;
use fcelab::eval::{density_mse, EVAL_SEED};
use fcelab::flow::FlowModel;
use fcelab::runner::{semisup_data, RunState};
use fcelab::semisup::{classification_accuracy, predict};
use fcelab::tape::Tape;
use fcelab::tensor::Tensor;
use fcelab::train::{
    contrastive_terms, fce_train, jsd_diagnostic, nce_objective, nce_train, Side, TrainOptions,
};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

static RUN_LOCK: Mutex<()> = Mutex::new(());

/// Bypasses libtest's output capture so each criterion's verdict is visible.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
}

fn cache_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-cache");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn cached<T: Serialize + DeserializeOwned>(name: &str, compute: impl FnOnce() -> T) -> T {
    let path = cache_dir().join(format!("{name}.json"));
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(v) = serde_json::from_str(&text) {
            return v;
        }
    }
    let _guard = RUN_LOCK.lock().unwrap();
    let v = compute();
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string(&v).unwrap()).unwrap();
    std::fs::rename(&tmp, &path).unwrap();
    v
}

#[derive(Serialize, Deserialize)]
struct UnsupSummary {
    final_mse: Option<f64>,
    final_jsd: Option<f64>,
    /// (iteration, cumulative EBM updates, EBM density MSE) at each eval.
    mse_trace: Vec<(u64, u64, f64)>,
    ebm_quadrature: Option<f64>,
}

fn rings_run(method: Method, flow_init: FlowInit, seed: u64) -> UnsupSummary {
    let init = match flow_init {
        FlowInit::Rand => "rand",
        FlowInit::Trained => "trained",
    };
    let name = format!("rings8-{}-{init}-seed{seed}", method.as_str());
    cached(&name, || {
        let mut cfg = RunConfig::minimal(method, "rings8");
        cfg.seed = seed;
        cfg.flow_init = flow_init;
        let mut state = RunState::fresh(cfg.clone()).unwrap();
        let history = state.run_to(cfg.iterations).unwrap();
        let h = history.unsup().unwrap();
        let mut mse_trace = Vec::new();
        let mut ebm_updates = 0u64;
        for r in &h.rows {
            if r.side == Side::Ebm {
                ebm_updates += 1;
            }
            if let Some(m) = r.ebm_mse {
                mse_trace.push((r.iter, ebm_updates, m));
            }
        }
        let gm = GroundTruth::by_name("rings8").unwrap().gaussians().unwrap().clone();
        let final_mse = state
            .ebm
            .as_ref()
            .map(|e| density_mse(|p| e.log_unnormalized_batch(p, 0), &gm).unwrap());
        let final_jsd =
            state.flow.as_ref().map(|f| jsd_diagnostic(f, &gm, 2000, EVAL_SEED).unwrap());
        let ebm_quadrature = state
            .ebm
            .as_ref()
            .map(|e| quadrature(|p| e.log_unnormalized_batch(p, 0), 6.0, 400));
        UnsupSummary { final_mse, final_jsd, mse_trace, ebm_quadrature }
    })
}

fn quadrature(log_density: impl Fn(&[[f64; 2]]) -> fcelab::Result<Vec<f64>>, half: f64, n: usize) -> f64 {
    let cell = 2.0 * half / n as f64;
    let mut mass = 0.0;
    for iy in 0..n {
        let y = -half + (iy as f64 + 0.5) * cell;
        let row: Vec<[f64; 2]> =
            (0..n).map(|ix| [-half + (ix as f64 + 0.5) * cell, y]).collect();
        mass += log_density(&row).unwrap().iter().map(|l| l.exp()).sum::<f64>() * cell * cell;
    }
    mass
}

#[test]
fn criterion_1_fce_final_mse_below_nce() {
    let mut wins = 0;
    let mut detail = String::new();
    for &seed in &SEEDS {
        let fce = rings_run(Method::Fce, FlowInit::Trained, seed);
        let nce = rings_run(Method::Nce, FlowInit::Rand, seed);
        let (f, n) = (fce.final_mse.unwrap(), nce.final_mse.unwrap());
        if f < n {
            wins += 1;
        }
        detail.push_str(&format!(" seed{seed}: fce {f:.3} vs nce {n:.3};"));
    }
    let pass = wins >= 4;
    report(&format!(
        "criterion 1 {}: FCE(trained) MSE below NCE on {wins}/5 seeds (need >= 4);{detail}",
        if pass { "PASS" } else { "FAIL" }
    ));
    let quad = rings_run(Method::Fce, FlowInit::Trained, 0).ebm_quadrature.unwrap();
    assert!(
        (0.5..=2.0).contains(&quad),
        "FCE-trained EBM quadrature {quad} outside [0.5, 2.0]"
    );
    assert!(pass, "criterion 1 failed:{detail}");
}

/// EBM updates needed before the run's density MSE first drops to `target`.
fn updates_to_reach(s: &UnsupSummary, target: f64) -> Option<u64> {
    s.mse_trace.iter().find(|&&(_, _, m)| m <= target).map(|&(_, u, _)| u)
}

#[test]
fn criterion_2_rand_start_converges_in_fewer_ebm_updates() {
    let mut wins = 0;
    let mut detail = String::new();
    for &seed in &SEEDS {
        let trained = rings_run(Method::Fce, FlowInit::Trained, seed);
        let rand = rings_run(Method::Fce, FlowInit::Rand, seed);
        let target = trained.final_mse.unwrap();
        let t = updates_to_reach(&trained, target);
        let r = updates_to_reach(&rand, target);
        let win = match (r, t) {
            (Some(r), Some(t)) => r < t,
            (Some(_), None) => true,
            _ => false,
        };
        if win {
            wins += 1;
        }
        detail.push_str(&format!(" seed{seed}: rand {r:?} vs trained {t:?} updates;"));
    }
    let pass = wins >= 3;
    report(&format!(
        "criterion 2 {}: rand start reaches trained final MSE in fewer EBM updates on {wins}/5 seeds (need >= 3);{detail}",
        if pass { "PASS" } else { "FAIL" }
    ));
    assert!(pass, "criterion 2 failed:{detail}");
}

#[test]
fn criterion_3_fce_flow_jsd_not_above_mle() {
    let mut wins = 0;
    let mut detail = String::new();
    for &seed in &SEEDS {
        let fce = rings_run(Method::Fce, FlowInit::Trained, seed);
        let mle = rings_run(Method::Mle, FlowInit::Rand, seed);
        let (f, m) = (fce.final_jsd.unwrap(), mle.final_jsd.unwrap());
        if f <= m {
            wins += 1;
        }
        detail.push_str(&format!(" seed{seed}: fce {f:.4} vs mle {m:.4};"));
    }
    let pass = wins >= 3;
    report(&format!(
        "criterion 3 {}: FCE flow JSD <= MLE flow JSD on {wins}/5 seeds (need >= 3);{detail}",
        if pass { "PASS" } else { "FAIL" }
    ));
    assert!(pass, "criterion 3 failed:{detail}");
}

#[derive(Serialize, Deserialize)]
struct SemisupSummary {
    heldout_acc: f64,
    /// Mean posterior assigned to the own-class head, per class.
    own_class_posterior: Vec<f64>,
}

fn semisup_run_summary(seed: u64) -> SemisupSummary {
    cached(&format!("spirals-semisup-trained-wu10k-seed{seed}"), || {
        let mut cfg = RunConfig::minimal(Method::Semisup, "spirals");
        cfg.seed = seed;
        cfg.flow_init = FlowInit::Trained;
        cfg.warmup_ebm_iters = 10_000;
        let mut state = RunState::fresh(cfg.clone()).unwrap();
        state.run_to(cfg.iterations).unwrap();
        let ebm = state.ebm.as_ref().unwrap();
        let (_, heldout) = semisup_data(&cfg).unwrap();
        let heldout_acc = classification_accuracy(ebm, &heldout).unwrap();
        let post = predict(ebm, &heldout.points).unwrap();
        let mut sums = vec![0.0; cfg.n_classes];
        let mut counts = vec![0usize; cfg.n_classes];
        for (p, &l) in post.iter().zip(&heldout.labels) {
            sums[l as usize] += p[l as usize];
            counts[l as usize] += 1;
        }
        let own_class_posterior =
            sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
        SemisupSummary { heldout_acc, own_class_posterior }
    })
}

#[test]
fn criterion_4_semisup_two_spirals() {
    let mut wins = 0;
    let mut detail = String::new();
    for &seed in &SEEDS {
        let s = semisup_run_summary(seed);
        let posterior_ok = s.own_class_posterior.iter().all(|&p| p >= 0.9);
        if s.heldout_acc >= 0.95 && posterior_ok {
            wins += 1;
        }
        detail.push_str(&format!(
            " seed{seed}: acc {:.3}, own-class posterior {:?};",
            s.heldout_acc,
            s.own_class_posterior.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ));
    }
    let pass = wins >= 4;
    report(&format!(
        "criterion 4 {}: semisup accuracy >= 0.95 with own-class posterior >= 0.9 on {wins}/5 seeds (need >= 4);{detail}",
        if pass { "PASS" } else { "FAIL" }
    ));
    assert!(pass, "criterion 4 failed:{detail}");
}

#[derive(Serialize, Deserialize)]
struct NceConsistencySummary {
    mse: f64,
}

#[test]
fn criterion_5_nce_consistency_on_gaussian_data() {
    let s: NceConsistencySummary = cached("nce-consistency", || {
        let data_dist = GaussianMixture2D::single([0.0, 0.0], [[0.25, 0.0], [0.0, 0.25]]);
        let noise = GaussianMixture2D::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let train = data_dist.sample_with(20_000, &mut rng);
        let mut ebm = EnergyModel::new(&[128, 128, 128], 1, &mut rng);
        let opts = TrainOptions { eval_every: u64::MAX, ..TrainOptions::default() };
        nce_train(&mut ebm, &train, &noise, None, &opts, 101).unwrap();

        // 2σ region of the data: the disk of radius 1 (σ = 0.5 per axis).
        let mut pts = Vec::new();
        let n = 60;
        for iy in 0..n {
            for ix in 0..n {
                let x = -1.0 + (ix as f64 + 0.5) * 2.0 / n as f64;
                let y = -1.0 + (iy as f64 + 0.5) * 2.0 / n as f64;
                if x * x + y * y <= 1.0 {
                    pts.push([x, y]);
                }
            }
        }
        let model = ebm.log_unnormalized_batch(&pts, 0).unwrap();
        let mse = pts
            .iter()
            .zip(&model)
            .map(|(&p, m)| (m - data_dist.log_density(p)).powi(2))
            .sum::<f64>()
            / pts.len() as f64;
        NceConsistencySummary { mse }
    });
    let pass = s.mse < 0.05;
    report(&format!(
        "criterion 5 {}: NCE-trained EBM matches analytic Gaussian density, MSE {:.4} over the 2-sigma disk (need < 0.05)",
        if pass { "PASS" } else { "FAIL" },
        s.mse
    ));
    assert!(pass, "criterion 5 failed: MSE {}", s.mse);
}

#[test]
fn criterion_6_property_suites() {
    // Gradient checks: 100 random configurations per model/objective.
    let out = Command::new(env!("CARGO_BIN_EXE_fcelab")).arg("gradcheck").output().unwrap();
    assert!(
        out.status.success(),
        "gradcheck failed:\n{}",
        String::from_utf8_lossy(&out.stdout)
    );

    // Flow round-trip under 1e-8.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let mut flow = FlowModel::new(10, 32, &mut rng);
        flow.randomize(0.1, &mut rng);
        let x = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
        let mut tape = Tape::new();
        let fv = flow.vars(&mut tape, false);
        let p = tape.constant(Tensor::from_points(&[x]));
        let (z, _) = fv.inverse(&mut tape, p).unwrap();
        let (back, _) = fv.forward(&mut tape, z).unwrap();
        let b = tape.value(back);
        assert!((b.data()[0] - x[0]).abs() < 1e-8 && (b.data()[1] - x[1]).abs() < 1e-8);
    }

    // Flow normalization quadrature within [0.99, 1.01].
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
        let mut flow = FlowModel::new(10, 64, &mut rng);
        flow.randomize(0.05, &mut rng);
        let mass = quadrature(|p| flow.log_prob_batch(p), 6.0, 400);
        assert!((0.99..=1.01).contains(&mass), "flow quadrature {mass}");
    }

    // Symmetric value function: p ≡ q gives exactly −2 ln 2.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let flow = FlowModel::new(4, 16, &mut rng);
        let (pts, _) = flow.sample(64, 51).unwrap();
        let lq = flow.log_prob_batch(&pts).unwrap();
        let mut tape = Tape::new();
        let l1 = tape.constant(Tensor::new(vec![lq.len(), 1], lq.clone()).unwrap());
        let l2 = tape.constant(Tensor::new(vec![lq.len(), 1], lq.clone()).unwrap());
        let l3 = tape.constant(Tensor::new(vec![lq.len(), 1], lq.clone()).unwrap());
        let l4 = tape.constant(Tensor::new(vec![lq.len(), 1], lq).unwrap());
        let (v, _) = contrastive_terms(&mut tape, l1, l2, l3, l4, 0.0).unwrap();
        let value = tape.value(v).item();
        assert!(
            (value + 2.0 * std::f64::consts::LN_2).abs() < 1e-9,
            "symmetric value {value}"
        );
    }

    // Log-space objective equals the direct Bernoulli recomputation to 1e-12.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut ebm = EnergyModel::new(&[16, 16], 1, &mut rng);
        for t in ebm.param_tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let noise = GaussianMixture2D::standard();
        let data: Vec<[f64; 2]> =
            (0..64).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let neg = noise.sample_with(64, &mut rng);
        let lq_d: Vec<f64> = data.iter().map(|&p| noise.log_density(p)).collect();
        let lq_n: Vec<f64> = neg.iter().map(|&p| noise.log_density(p)).collect();
        let obj = nce_objective(&ebm, &lq_d, &lq_n, &data, &neg).unwrap();
        let lp_d = ebm.log_unnormalized_batch(&data, 0).unwrap();
        let lp_n = ebm.log_unnormalized_batch(&neg, 0).unwrap();
        let u = |lp: f64, lq: f64| 1.0 / (1.0 + (lq - lp).exp());
        let direct = lp_d.iter().zip(&lq_d).map(|(&p, &q)| u(p, q).ln()).sum::<f64>()
            / data.len() as f64
            + lp_n.iter().zip(&lq_n).map(|(&p, &q)| (1.0 - u(p, q)).ln()).sum::<f64>()
                / neg.len() as f64;
        assert!((obj - direct).abs() < 1e-12, "log-space {obj} vs direct {direct}");
    }

    // Determinism: identical seeds give byte-identical training history.
    {
        let histories: Vec<Vec<u8>> = (0..2)
            .map(|_| {
                let mut rng = ChaCha8Rng::seed_from_u64(70);
                let mut ebm = EnergyModel::new(&[16, 16], 1, &mut rng);
                let mut flow = FlowModel::new(2, 8, &mut rng);
                flow.randomize(0.05, &mut rng);
                let truth = GroundTruth::by_name("rings8").unwrap();
                let data = truth.sample(256, 71).unwrap();
                let opts = TrainOptions {
                    iterations: 30,
                    batch_size: 32,
                    eval_every: 10,
                    eval_points: 100,
                    ..TrainOptions::default()
                };
                let h = fce_train(
                    &mut ebm,
                    &mut flow,
                    &data,
                    Some(truth.gaussians().unwrap()),
                    &opts,
                    72,
                )
                .unwrap();
                let mut buf = Vec::new();
                h.write_csv(&mut buf).unwrap();
                buf
            })
            .collect();
        assert_eq!(histories[0], histories[1], "training history differs between reruns");
    }

    // Checkpoint round-trip losslessness.
    {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::minimal(Method::Fce, "rings8");
        cfg.iterations = 20;
        cfg.batch_size = 32;
        cfg.train_size = 128;
        cfg.eval_every = 10;
        cfg.eval_points = 100;
        cfg.flow_depth = 2;
        cfg.flow_width = 8;
        cfg.ebm_widths = vec![16, 16];
        let mut state = RunState::fresh(cfg).unwrap();
        state.run_to(20).unwrap();
        let path = tmp.path().join("c.ckpt");
        state.save(&path).unwrap();
        let back = RunState::load(&path).unwrap();
        let a = state.ebm.as_ref().unwrap().named_params();
        let b = back.ebm.as_ref().unwrap().named_params();
        for ((n1, t1), (n2, t2)) in a.iter().zip(&b) {
            assert_eq!(n1, n2);
            for (x, y) in t1.data().iter().zip(t2.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "parameter {n1} not bit-exact");
            }
        }
    }

    report("criterion 6 PASS: gradient, round-trip, quadrature, symmetric-value, objective-agreement, determinism, and checkpoint suites");
}

#[test]
fn criterion_7_image_scale_experiments_excluded() {
    report(
        "criterion 7 PASS (exclusion note): image-scale results (FID, image bits/dim, SVM feature \
         evaluation, SVHN semi-supervised error) require GPU-scale training and are out of scope; \
         the desk-scale criteria 1-6 stand in for them",
    );
}
