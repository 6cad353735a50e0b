//! Turns a RunConfig into a full training run: builds models and datasets,
//! drives the right training loop, and handles checkpoint snapshot/restore
//! so an interrupted run resumes on the exact sample sequence.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{FlowInit, Method, RunConfig};
use crate::data::{make_semisup_split, GroundTruth, LabeledDataset, TwoSpirals};
use crate::ebm::EnergyModel;
use crate::error::{FceError, Result};
use crate::eval::{render_grid, DensityGrid, GridSpec};
use crate::flow::FlowModel;
use crate::optim::Optimizer;
use crate::semisup::{semisup_run, SemisupHistory};
use crate::tensor::Tensor;
use crate::train::{
    fce_run, fit_gaussian_baseline, mle_run, mle_train, nce_run, AlternationState,
    FceComponents, History, Side, SoloComponents,
};

/// Seed offsets so the dataset, model init, and training stream draw from
/// unrelated RNG sequences under one user-facing seed.
const DATA_SEED_OFFSET: u64 = 0x0da7a;
const INIT_SEED_OFFSET: u64 = 0x1417;
const PRETRAIN_SEED_OFFSET: u64 = 0x93e7;
const HELDOUT_SEED_OFFSET: u64 = 0x8e1d;

#[derive(Clone, Debug, PartialEq)]
pub enum RunHistory {
    Unsup(History),
    Semi(SemisupHistory),
}

impl RunHistory {
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> Result<()> {
        match self {
            RunHistory::Unsup(h) => h.write_csv(out),
            RunHistory::Semi(h) => h.write_csv(out),
        }
    }

    pub fn unsup(&self) -> Option<&History> {
        match self {
            RunHistory::Unsup(h) => Some(h),
            RunHistory::Semi(_) => None,
        }
    }

    pub fn semi(&self) -> Option<&SemisupHistory> {
        match self {
            RunHistory::Unsup(_) => None,
            RunHistory::Semi(h) => Some(h),
        }
    }

    pub fn append(&mut self, other: RunHistory) {
        match (self, other) {
            (RunHistory::Unsup(a), RunHistory::Unsup(b)) => a.rows.extend(b.rows),
            (RunHistory::Semi(a), RunHistory::Semi(b)) => a.rows.extend(b.rows),
            _ => panic!("history kind mismatch"),
        }
    }
}

/// Everything a training run carries between iterations. Models and
/// optimizer/RNG state live here; datasets are regenerated from the config.
#[derive(Clone, Debug)]
pub struct RunState {
    pub cfg: RunConfig,
    pub ebm: Option<EnergyModel>,
    pub flow: Option<FlowModel>,
    /// NCE only: the moment-matched Gaussian noise baseline.
    pub noise: Option<crate::data::GaussianMixture2D>,
    pub fce: Option<FceComponents>,
    pub solo: Option<SoloComponents>,
}

pub fn train_data(cfg: &RunConfig) -> Result<Vec<[f64; 2]>> {
    GroundTruth::by_name(&cfg.data)?.sample(cfg.train_size, cfg.seed.wrapping_add(DATA_SEED_OFFSET))
}

/// Semi-supervised split plus a fully labeled held-out set from a disjoint
/// seed.
pub fn semisup_data(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    if cfg.data != "spirals" {
        return Err(FceError::Config(format!(
            "semisup runs are defined on `spirals`, not `{}`",
            cfg.data
        )));
    }
    let dist = TwoSpirals::default();
    let train = make_semisup_split(
        &dist,
        cfg.train_size,
        cfg.labels_per_class,
        cfg.seed.wrapping_add(DATA_SEED_OFFSET),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(HELDOUT_SEED_OFFSET));
    let draws = dist.sample_labeled(2_000, &mut rng);
    let heldout = LabeledDataset {
        points: draws.iter().map(|d| d.0).collect(),
        labels: draws.iter().map(|d| d.1).collect(),
    };
    Ok((train, heldout))
}

impl RunState {
    /// Builds a fresh run: initializes models, pretrains the flow when
    /// flow_init = trained, fits the NCE baseline.
    pub fn fresh(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(INIT_SEED_OFFSET));
        let opts = cfg.train_options();

        let ebm = match cfg.method {
            Method::Mle => None,
            _ => Some(EnergyModel::new(&cfg.ebm_widths, cfg.n_heads(), &mut init_rng)),
        };
        let mut flow = match cfg.method {
            Method::Nce => None,
            _ => Some(FlowModel::new(cfg.flow_depth, cfg.flow_width, &mut init_rng)),
        };
        let mut noise = None;

        match cfg.method {
            Method::Fce | Method::Semisup => {
                if cfg.flow_init == FlowInit::Trained {
                    let data = match cfg.method {
                        Method::Semisup => semisup_data(&cfg)?.0.points,
                        _ => train_data(&cfg)?,
                    };
                    let pre_opts = crate::train::TrainOptions {
                        iterations: cfg.pretrain_iterations,
                        flow_lr: cfg.pretrain_lr,
                        eval_every: 0,
                        ..opts.clone()
                    };
                    mle_train(
                        flow.as_mut().unwrap(),
                        &data,
                        None,
                        &pre_opts,
                        cfg.seed.wrapping_add(PRETRAIN_SEED_OFFSET),
                    )?;
                }
            }
            Method::Nce => {
                noise = Some(fit_gaussian_baseline(&train_data(&cfg)?)?);
            }
            Method::Mle => {}
        }

        let (fce, solo) = match cfg.method {
            Method::Fce | Method::Semisup => (Some(FceComponents::fresh(&opts, cfg.seed)), None),
            Method::Nce => {
                (None, Some(SoloComponents::fresh(Optimizer::adam(cfg.ebm_lr), cfg.seed)))
            }
            Method::Mle => {
                (None, Some(SoloComponents::fresh(Optimizer::adamax(cfg.flow_lr), cfg.seed)))
            }
        };
        Ok(RunState { cfg, ebm, flow, noise, fce, solo })
    }

    pub fn next_iter(&self) -> u64 {
        self.fce
            .as_ref()
            .map(|c| c.next_iter)
            .or_else(|| self.solo.as_ref().map(|c| c.next_iter))
            .unwrap_or(1)
    }

    /// Runs training up to iteration `until` and returns the new history rows.
    pub fn run_to(&mut self, until: u64) -> Result<RunHistory> {
        let cfg = self.cfg.clone();
        let opts = cfg.train_options();
        match cfg.method {
            Method::Fce => {
                let data = train_data(&cfg)?;
                let truth_owner = GroundTruth::by_name(&cfg.data)?;
                let truth = truth_owner.gaussians().ok();
                let h = fce_run(
                    self.ebm.as_mut().unwrap(),
                    self.flow.as_mut().unwrap(),
                    self.fce.as_mut().unwrap(),
                    &data,
                    truth,
                    &opts,
                    until,
                )?;
                Ok(RunHistory::Unsup(h))
            }
            Method::Nce => {
                let data = train_data(&cfg)?;
                let truth_owner = GroundTruth::by_name(&cfg.data)?;
                let truth = truth_owner.gaussians().ok();
                let h = nce_run(
                    self.ebm.as_mut().unwrap(),
                    self.solo.as_mut().unwrap(),
                    &data,
                    self.noise.as_ref().unwrap(),
                    truth,
                    &opts,
                    until,
                )?;
                Ok(RunHistory::Unsup(h))
            }
            Method::Mle => {
                let data = train_data(&cfg)?;
                let truth_owner = GroundTruth::by_name(&cfg.data)?;
                let truth = truth_owner.gaussians().ok();
                let h = mle_run(
                    self.flow.as_mut().unwrap(),
                    self.solo.as_mut().unwrap(),
                    &data,
                    truth,
                    &opts,
                    until,
                )?;
                Ok(RunHistory::Unsup(h))
            }
            Method::Semisup => {
                let (train, heldout) = semisup_data(&cfg)?;
                let h = semisup_run(
                    self.ebm.as_mut().unwrap(),
                    self.flow.as_mut().unwrap(),
                    self.fce.as_mut().unwrap(),
                    &train,
                    Some(&heldout),
                    &cfg.semisup_options(),
                    until,
                )?;
                Ok(RunHistory::Semi(h))
            }
        }
    }

    // ── checkpoint glue ──────────────────────────────────────────────

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = json!({
            "kind": self.cfg.method.as_str(),
            "config": serde_json::to_value(&self.cfg)?,
            "next_iter": self.next_iter(),
        });
        if let Some(c) = &self.fce {
            meta["alt"] = json!({
                "side": c.alt.side,
                "last_accuracy": c.alt.last_accuracy,
                "consecutive": c.alt.consecutive,
            });
            meta["ebm_opt_steps"] = json!(c.ebm_opt.step_count);
            meta["flow_opt_steps"] = json!(c.flow_opt.step_count);
            meta["rng"] = rng_meta(&c.rng);
        }
        if let Some(c) = &self.solo {
            meta["opt_steps"] = json!(c.opt.step_count);
            meta["rng"] = rng_meta(&c.rng);
        }

        let mut ck = Checkpoint::new(meta);
        if let Some(ebm) = &self.ebm {
            for (name, t) in ebm.named_params() {
                ck.push(name, t.shape().to_vec(), t.data().to_vec());
            }
        }
        if let Some(flow) = &self.flow {
            for (name, t) in flow.named_params() {
                ck.push(name, t.shape().to_vec(), t.data().to_vec());
            }
        }
        if let Some(noise) = &self.noise {
            let comps: Vec<_> = noise.components().collect();
            let k = comps.len();
            let mut means = Vec::new();
            let mut covs = Vec::new();
            let mut weights = Vec::new();
            for (m, c, w) in comps {
                means.extend_from_slice(&m);
                covs.extend_from_slice(&[c[0][0], c[0][1], c[1][0], c[1][1]]);
                weights.push(w);
            }
            ck.push("noise.means", vec![k, 2], means);
            ck.push("noise.covs", vec![k, 2, 2], covs);
            ck.push("noise.weights", vec![k], weights);
        }
        if let Some(c) = &self.fce {
            push_optimizer(&mut ck, "opt.ebm", &c.ebm_opt, self.ebm.as_ref().unwrap().named_params());
            push_optimizer(
                &mut ck,
                "opt.flow",
                &c.flow_opt,
                self.flow.as_ref().unwrap().named_params(),
            );
        }
        if let Some(c) = &self.solo {
            let named = match self.cfg.method {
                Method::Nce => self.ebm.as_ref().unwrap().named_params(),
                _ => self.flow.as_ref().unwrap().named_params(),
            };
            push_optimizer(&mut ck, "opt", &c.opt, named);
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let cfg_value = ck
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| FceError::Checkpoint("missing config in metadata".into()))?;
        let cfg: RunConfig = serde_json::from_value(cfg_value)
            .map_err(|e| FceError::Checkpoint(format!("bad config in metadata: {e}")))?;
        cfg.validate().map_err(|e| FceError::Checkpoint(e.to_string()))?;
        let next_iter = ck.meta_u64("next_iter")?;
        let opts = cfg.train_options();

        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let mut expected: Vec<String> = Vec::new();

        let ebm = match cfg.method {
            Method::Mle => None,
            _ => {
                let mut e = EnergyModel::new(&cfg.ebm_widths, cfg.n_heads(), &mut dummy);
                let named: Vec<(String, Vec<usize>)> = e
                    .named_params()
                    .into_iter()
                    .map(|(n, t)| (n, t.shape().to_vec()))
                    .collect();
                ck.restore_params(&named, &mut e.param_tensors_mut())?;
                expected.extend(named.into_iter().map(|(n, _)| n));
                Some(e)
            }
        };
        let flow = match cfg.method {
            Method::Nce => None,
            _ => {
                let mut f = FlowModel::new(cfg.flow_depth, cfg.flow_width, &mut dummy);
                let named: Vec<(String, Vec<usize>)> = f
                    .named_params()
                    .into_iter()
                    .map(|(n, t)| (n, t.shape().to_vec()))
                    .collect();
                ck.restore_params(&named, &mut f.param_tensors_mut())?;
                expected.extend(named.into_iter().map(|(n, _)| n));
                Some(f)
            }
        };
        let noise = match cfg.method {
            Method::Nce => {
                let (_, means) = ck.array("noise.means")?;
                let (_, covs) = ck.array("noise.covs")?;
                let (_, weights) = ck.array("noise.weights")?;
                expected.extend(
                    ["noise.means", "noise.covs", "noise.weights"].map(String::from),
                );
                let comps = (0..weights.len())
                    .map(|i| {
                        (
                            [means[2 * i], means[2 * i + 1]],
                            [
                                [covs[4 * i], covs[4 * i + 1]],
                                [covs[4 * i + 2], covs[4 * i + 3]],
                            ],
                            weights[i],
                        )
                    })
                    .collect();
                Some(crate::data::GaussianMixture2D::new(comps)?)
            }
            _ => None,
        };

        let rng = rng_from_meta(
            ck.meta.get("rng").ok_or_else(|| FceError::Checkpoint("missing rng state".into()))?,
        )?;

        let (fce, solo) = match cfg.method {
            Method::Fce | Method::Semisup => {
                let alt_meta = ck
                    .meta
                    .get("alt")
                    .ok_or_else(|| FceError::Checkpoint("missing alternation state".into()))?;
                let mut alt = AlternationState::new(cfg.accuracy_threshold, cfg.max_consecutive);
                alt.side = match alt_meta.get("side").and_then(|v| v.as_str()) {
                    Some("ebm") => Side::Ebm,
                    Some("flow") => Side::Flow,
                    _ => return Err(FceError::Checkpoint("bad alternation side".into())),
                };
                alt.last_accuracy =
                    alt_meta.get("last_accuracy").and_then(|v| v.as_f64()).unwrap_or(0.0);
                alt.consecutive =
                    alt_meta.get("consecutive").and_then(|v| v.as_u64()).unwrap_or(0) as u32;

                let mut ebm_opt = Optimizer::adam(cfg.ebm_lr);
                ebm_opt.step_count = ck.meta_u64("ebm_opt_steps")?;
                restore_optimizer(&ck, "opt.ebm", &mut ebm_opt, ebm.as_ref().unwrap().named_params(), &mut expected)?;
                let mut flow_opt = Optimizer::adamax(cfg.flow_lr);
                flow_opt.step_count = ck.meta_u64("flow_opt_steps")?;
                restore_optimizer(&ck, "opt.flow", &mut flow_opt, flow.as_ref().unwrap().named_params(), &mut expected)?;
                (
                    Some(FceComponents { ebm_opt, flow_opt, alt, rng, next_iter }),
                    None,
                )
            }
            Method::Nce | Method::Mle => {
                let mut opt = match cfg.method {
                    Method::Nce => Optimizer::adam(cfg.ebm_lr),
                    _ => Optimizer::adamax(cfg.flow_lr),
                };
                opt.step_count = ck.meta_u64("opt_steps")?;
                let named = match cfg.method {
                    Method::Nce => ebm.as_ref().unwrap().named_params(),
                    _ => flow.as_ref().unwrap().named_params(),
                };
                restore_optimizer(&ck, "opt", &mut opt, named, &mut expected)?;
                (None, Some(SoloComponents { opt, rng, next_iter }))
            }
        };
        let _ = opts;

        ck.reject_unknown_keys(&expected)?;
        Ok(RunState { cfg, ebm, flow, noise, fce, solo })
    }

    // ── artifact rendering ───────────────────────────────────────────

    pub fn default_grid(&self) -> GridSpec {
        match self.cfg.data.as_str() {
            "spirals" => GridSpec::new(-1.6, 1.6, -1.6, 1.6, 200, 200).unwrap(),
            _ => GridSpec::new(-4.0, 4.0, -4.0, 4.0, 200, 200).unwrap(),
        }
    }

    /// EBM log-density grid (learned c included); `head` picks a class head,
    /// or the uniform mixture when None.
    pub fn ebm_grid(&self, spec: GridSpec, head: Option<usize>) -> Result<DensityGrid> {
        let ebm = self
            .ebm
            .as_ref()
            .ok_or_else(|| FceError::InvalidArgument("this run has no EBM".into()))?;
        match head {
            Some(h) => render_grid(|pts| ebm.log_unnormalized_batch(pts, h), spec),
            None => render_grid(
                |pts| {
                    let k = ebm.n_heads();
                    let mut per_head = Vec::with_capacity(k);
                    for h in 0..k {
                        per_head.push(ebm.log_unnormalized_batch(pts, h)?);
                    }
                    Ok((0..pts.len())
                        .map(|i| {
                            let row: Vec<f64> = per_head.iter().map(|v| v[i]).collect();
                            crate::tape::logsumexp(&row) - (k as f64).ln()
                        })
                        .collect())
                },
                spec,
            ),
        }
    }

    pub fn flow_grid(&self, spec: GridSpec) -> Result<DensityGrid> {
        let flow = self
            .flow
            .as_ref()
            .ok_or_else(|| FceError::InvalidArgument("this run has no flow".into()))?;
        render_grid(|pts| flow.log_prob_batch(pts), spec)
    }

    /// Writes history.csv, final.ckpt, meta.json, density grids, and flow
    /// samples into `out`.
    pub fn write_artifacts(&self, out: &Path, history: &RunHistory) -> Result<()> {
        std::fs::create_dir_all(out)?;
        let mut buf = Vec::new();
        history.write_csv(&mut buf)?;
        std::fs::write(out.join("history.csv"), buf)?;
        self.save(out.join("final.ckpt"))?;

        let meta = json!({
            "method": self.cfg.method.as_str(),
            "data": self.cfg.data,
            "seed": self.cfg.seed,
            "iterations_completed": self.next_iter() - 1,
            "mse_evaluation": "data-sampled points (10^4 draws from the ground truth with a fixed seed), not a uniform box",
        });
        std::fs::write(out.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;

        let spec = self.default_grid();
        if let Some(ebm) = &self.ebm {
            let mut buf = Vec::new();
            self.ebm_grid(spec, None)?.write_csv(&mut buf)?;
            std::fs::write(out.join("ebm_grid.csv"), buf)?;
            if ebm.n_heads() > 1 {
                for h in 0..ebm.n_heads() {
                    let mut buf = Vec::new();
                    self.ebm_grid(spec, Some(h))?.write_csv(&mut buf)?;
                    std::fs::write(out.join(format!("head{h}_grid.csv")), buf)?;
                }
            }
        }
        if let Some(flow) = &self.flow {
            let mut buf = Vec::new();
            self.flow_grid(spec)?.write_csv(&mut buf)?;
            std::fs::write(out.join("flow_grid.csv"), buf)?;
            let (samples, _) = flow.sample(2_000, crate::eval::EVAL_SEED)?;
            let mut buf = Vec::new();
            crate::data::export_samples_csv(&samples, None, &mut buf)?;
            std::fs::write(out.join("samples.csv"), buf)?;
        }
        Ok(())
    }
}

fn rng_meta(rng: &ChaCha8Rng) -> serde_json::Value {
    let seed: Vec<u64> = rng.get_seed().iter().map(|&b| b as u64).collect();
    let pos = rng.get_word_pos();
    json!({
        "seed": seed,
        "word_pos_lo": (pos & u64::MAX as u128) as u64,
        "word_pos_hi": (pos >> 64) as u64,
        "stream": rng.get_stream(),
    })
}

fn rng_from_meta(v: &serde_json::Value) -> Result<ChaCha8Rng> {
    let bad = || FceError::Checkpoint("bad rng state".into());
    let seed_arr = v.get("seed").and_then(|s| s.as_array()).ok_or_else(bad)?;
    if seed_arr.len() != 32 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed_arr.iter().enumerate() {
        seed[i] = b.as_u64().ok_or_else(bad)? as u8;
    }
    let lo = v.get("word_pos_lo").and_then(|x| x.as_u64()).ok_or_else(bad)?;
    let hi = v.get("word_pos_hi").and_then(|x| x.as_u64()).ok_or_else(bad)?;
    let stream = v.get("stream").and_then(|x| x.as_u64()).ok_or_else(bad)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(((hi as u128) << 64) | lo as u128);
    Ok(rng)
}

/// Stores first/second-moment arrays per parameter; zeros when the optimizer
/// has not allocated state yet, which is what lazy allocation would produce.
fn push_optimizer(ck: &mut Checkpoint, prefix: &str, opt: &Optimizer, named: Vec<(String, &Tensor)>) {
    for (i, (_, t)) in named.iter().enumerate() {
        let m = opt.m.get(i).cloned().unwrap_or_else(|| vec![0.0; t.len()]);
        let v = opt.v.get(i).cloned().unwrap_or_else(|| vec![0.0; t.len()]);
        ck.push(format!("{prefix}.m.{i}"), t.shape().to_vec(), m);
        ck.push(format!("{prefix}.v.{i}"), t.shape().to_vec(), v);
    }
}

fn restore_optimizer(
    ck: &Checkpoint,
    prefix: &str,
    opt: &mut Optimizer,
    named: Vec<(String, &Tensor)>,
    expected: &mut Vec<String>,
) -> Result<()> {
    opt.m.clear();
    opt.v.clear();
    for (i, (_, t)) in named.iter().enumerate() {
        let mk = format!("{prefix}.m.{i}");
        let vk = format!("{prefix}.v.{i}");
        let (ms, md) = ck.array(&mk)?;
        let (vs, vd) = ck.array(&vk)?;
        if ms != t.shape() || vs != t.shape() {
            return Err(FceError::Checkpoint(format!("optimizer state shape mismatch at {mk}")));
        }
        opt.m.push(md.to_vec());
        opt.v.push(vd.to_vec());
        expected.push(mk);
        expected.push(vk);
    }
    if opt.step_count == 0 {
        // never stepped: stay in the lazily-unallocated state it was saved in
        opt.m.clear();
        opt.v.clear();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Method;

    fn small_cfg(method: Method, data: &str) -> RunConfig {
        let mut cfg = RunConfig::minimal(method, data);
        cfg.iterations = 24;
        cfg.batch_size = 32;
        cfg.train_size = 500;
        cfg.eval_every = 8;
        cfg.eval_points = 100;
        cfg.flow_depth = 2;
        cfg.flow_width = 8;
        cfg.ebm_widths = vec![16, 16];
        cfg.labeled_batch = 8;
        cfg.pretrain_iterations = 10;
        cfg
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        for method in [Method::Fce, Method::Nce, Method::Mle, Method::Semisup] {
            let data = if method == Method::Semisup { "spirals" } else { "rings8" };
            let cfg = small_cfg(method, data);

            let mut full = RunState::fresh(cfg.clone()).unwrap();
            let full_hist = full.run_to(24).unwrap();

            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("mid.ckpt");
            let mut first = RunState::fresh(cfg).unwrap();
            let mut hist = first.run_to(11).unwrap();
            first.save(&path).unwrap();
            let mut resumed = RunState::load(&path).unwrap();
            assert_eq!(resumed.next_iter(), 12);
            let tail = resumed.run_to(24).unwrap();
            hist.append(tail);

            let mut a = Vec::new();
            let mut b = Vec::new();
            full_hist.write_csv(&mut a).unwrap();
            hist.write_csv(&mut b).unwrap();
            assert_eq!(a, b, "{method:?}: resumed history differs");

            // final parameters bit-identical too
            match method {
                Method::Mle => assert_eq!(full.flow, resumed.flow),
                Method::Nce => assert_eq!(full.ebm, resumed.ebm),
                _ => {
                    assert_eq!(full.ebm, resumed.ebm);
                    assert_eq!(full.flow, resumed.flow);
                }
            }
        }
    }

    #[test]
    fn checkpoint_restores_parameters_bit_exactly() {
        let cfg = small_cfg(Method::Fce, "rings8");
        let mut st = RunState::fresh(cfg).unwrap();
        st.run_to(10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        st.save(&path).unwrap();
        let back = RunState::load(&path).unwrap();
        assert_eq!(st.ebm, back.ebm);
        assert_eq!(st.flow, back.flow);
        let c1 = st.fce.as_ref().unwrap();
        let c2 = back.fce.as_ref().unwrap();
        assert_eq!(c1.ebm_opt.m, c2.ebm_opt.m);
        assert_eq!(c1.ebm_opt.v, c2.ebm_opt.v);
        assert_eq!(c1.flow_opt.m, c2.flow_opt.m);
        assert_eq!(c1.rng, c2.rng);
    }

    #[test]
    fn artifacts_are_written() {
        let cfg = small_cfg(Method::Fce, "rings8");
        let mut st = RunState::fresh(cfg).unwrap();
        let h = st.run_to(24).unwrap();
        let dir = tempfile::tempdir().unwrap();
        st.write_artifacts(dir.path(), &h).unwrap();
        for f in ["history.csv", "final.ckpt", "meta.json", "ebm_grid.csv", "flow_grid.csv", "samples.csv"] {
            assert!(dir.path().join(f).exists(), "missing {f}");
        }
    }

    #[test]
    fn semisup_on_rings_is_config_error() {
        let cfg = small_cfg(Method::Semisup, "rings8");
        let mut st = RunState::fresh(cfg).unwrap();
        assert!(st.run_to(5).is_err());
    }

    #[test]
    fn trained_flow_init_changes_the_flow() {
        let mut cfg = small_cfg(Method::Fce, "rings8");
        let rand_state = RunState::fresh(cfg.clone()).unwrap();
        cfg.flow_init = crate::config::FlowInit::Trained;
        let trained_state = RunState::fresh(cfg).unwrap();
        assert_ne!(rand_state.flow, trained_state.flow);
    }
}
