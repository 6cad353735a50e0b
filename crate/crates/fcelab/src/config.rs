//! Run configuration: JSON with documented defaults, so a minimal config is
//! `{"method":"fce","data":"rings8"}`. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FceError, Result};
use crate::semisup::SemisupOptions;
use crate::train::TrainOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fce,
    Nce,
    Mle,
    Semisup,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Fce => "fce",
            Method::Nce => "nce",
            Method::Mle => "mle",
            Method::Semisup => "semisup",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fce" => Ok(Method::Fce),
            "nce" => Ok(Method::Nce),
            "mle" => Ok(Method::Mle),
            "semisup" => Ok(Method::Semisup),
            other => Err(FceError::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowInit {
    /// Identity/random initialization.
    Rand,
    /// MLE-pretrained before the contrastive phase.
    Trained,
}

fn d_seed() -> u64 { 0 }
fn d_iterations() -> u64 { 20_000 }
fn d_batch_size() -> usize { 500 }
fn d_ebm_lr() -> f64 { 3e-4 }
fn d_flow_lr() -> f64 { 1e-5 }
fn d_threshold() -> f64 { 0.5 }
fn d_max_consecutive() -> u32 { 100 }
fn d_flow_depth() -> usize { 10 }
fn d_flow_width() -> usize { 128 }
fn d_ebm_widths() -> Vec<usize> { vec![128, 128, 128] }
fn d_flow_init() -> FlowInit { FlowInit::Rand }
fn d_pretrain_iterations() -> u64 { 20_000 }
fn d_pretrain_lr() -> f64 { 1e-3 }
fn d_eval_every() -> u64 { 500 }
fn d_eval_points() -> usize { 10_000 }
fn d_train_size() -> usize { 20_000 }
fn d_labels_per_class() -> usize { 7 }
fn d_labeled_batch() -> usize { 100 }
fn d_label_loss_weight() -> f64 { 1.0 }
fn d_n_classes() -> usize { 2 }
fn d_negative_prior_odds() -> f64 { 1.0 }

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// Distribution name: rings8 | checkerboard | spirals.
    pub data: String,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_iterations")]
    pub iterations: u64,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_ebm_lr")]
    pub ebm_lr: f64,
    #[serde(default = "d_flow_lr")]
    pub flow_lr: f64,
    #[serde(default = "d_threshold")]
    pub accuracy_threshold: f64,
    #[serde(default = "d_max_consecutive")]
    pub max_consecutive: u32,
    /// Ratio of negatives to positives assumed by the classifier prior;
    /// enters the logit as −ln(odds). 1 keeps the balanced objective.
    #[serde(default = "d_negative_prior_odds")]
    pub negative_prior_odds: f64,
    #[serde(default = "d_flow_depth")]
    pub flow_depth: usize,
    #[serde(default = "d_flow_width")]
    pub flow_width: usize,
    #[serde(default = "d_ebm_widths")]
    pub ebm_widths: Vec<usize>,
    #[serde(default = "d_flow_init")]
    pub flow_init: FlowInit,
    /// MLE pretraining budget used when flow_init = trained.
    #[serde(default = "d_pretrain_iterations")]
    pub pretrain_iterations: u64,
    #[serde(default = "d_pretrain_lr")]
    pub pretrain_lr: f64,
    #[serde(default = "d_eval_every")]
    pub eval_every: u64,
    #[serde(default = "d_eval_points")]
    pub eval_points: usize,
    /// Training-set size drawn from the data distribution.
    #[serde(default = "d_train_size")]
    pub train_size: usize,
    /// Semi-supervised only: labeled points per class.
    #[serde(default = "d_labels_per_class")]
    pub labels_per_class: usize,
    #[serde(default = "d_labeled_batch")]
    pub labeled_batch: usize,
    #[serde(default = "d_label_loss_weight")]
    pub label_loss_weight: f64,
    #[serde(default)]
    pub warmup_ebm_iters: u64,
    #[serde(default = "d_n_classes")]
    pub n_classes: usize,
    /// Output directory; the CLI --out flag overrides it.
    #[serde(default)]
    pub out: Option<String>,
}

impl RunConfig {
    pub fn minimal(method: Method, data: &str) -> Self {
        serde_json::from_value(serde_json::json!({
            "method": method.as_str(),
            "data": data,
        }))
        .expect("minimal config must deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| FceError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ebm_lr <= 0.0 || self.flow_lr <= 0.0 || self.pretrain_lr <= 0.0 {
            return Err(FceError::Config("learning rates must be positive".into()));
        }
        if !(self.accuracy_threshold > 0.0 && self.accuracy_threshold < 1.0) {
            return Err(FceError::Config("accuracy_threshold must be in (0,1)".into()));
        }
        if !(self.negative_prior_odds > 0.0 && self.negative_prior_odds.is_finite()) {
            return Err(FceError::Config("negative_prior_odds must be positive and finite".into()));
        }
        if self.batch_size == 0 || self.train_size == 0 {
            return Err(FceError::Config("batch_size and train_size must be positive".into()));
        }
        if self.flow_depth == 0 || self.flow_width == 0 {
            return Err(FceError::Config("flow depth and width must be positive".into()));
        }
        if self.ebm_widths.is_empty() {
            return Err(FceError::Config("ebm_widths must not be empty".into()));
        }
        crate::data::GroundTruth::by_name(&self.data)
            .map_err(|e| FceError::Config(e.to_string()))?;
        if self.method == Method::Semisup {
            if self.labels_per_class == 0 {
                return Err(FceError::Config("semisup requires labels_per_class ≥ 1".into()));
            }
            if self.n_classes < 2 {
                return Err(FceError::Config("semisup requires n_classes ≥ 2".into()));
            }
            if self.labeled_batch == 0 {
                return Err(FceError::Config("semisup requires labeled_batch ≥ 1".into()));
            }
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            iterations: self.iterations,
            batch_size: self.batch_size,
            ebm_lr: self.ebm_lr,
            flow_lr: self.flow_lr,
            accuracy_threshold: self.accuracy_threshold,
            max_consecutive: self.max_consecutive,
            eval_every: self.eval_every,
            eval_points: self.eval_points,
            log_prior_odds: self.negative_prior_odds.ln(),
        }
    }

    pub fn semisup_options(&self) -> SemisupOptions {
        SemisupOptions {
            base: self.train_options(),
            labeled_batch: self.labeled_batch,
            label_loss_weight: self.label_loss_weight,
            warmup_ebm_iters: self.warmup_ebm_iters,
        }
    }

    pub fn n_heads(&self) -> usize {
        if self.method == Method::Semisup {
            self.n_classes
        } else {
            1
        }
    }
}
