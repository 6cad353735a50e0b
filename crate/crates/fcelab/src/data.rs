//! Synthetic 2D ground-truth distributions: exact samplers, and exact
//! log-densities where a closed form exists.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{FceError, Result};
use crate::tape::logsumexp;

pub const UNLABELED: i32 = -1;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug)]
pub struct GaussComponent {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub weight: f64,
    // Derived quantities.
    chol: [[f64; 2]; 2],
    inv: [[f64; 2]; 2],
    log_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GaussianMixture2D {
    components: Vec<GaussComponent>,
}

impl GaussianMixture2D {
    pub fn new(components: Vec<([f64; 2], [[f64; 2]; 2], f64)>) -> Result<Self> {
        let wsum: f64 = components.iter().map(|c| c.2).sum();
        if (wsum - 1.0).abs() > 1e-12 {
            return Err(FceError::InvalidArgument(format!("mixture weights sum to {wsum}, not 1")));
        }
        let mut comps = Vec::with_capacity(components.len());
        for (mean, cov, weight) in components {
            let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
            if det <= 0.0 || cov[0][0] <= 0.0 {
                return Err(FceError::InvalidArgument(format!(
                    "covariance {cov:?} is not positive-definite"
                )));
            }
            let l00 = cov[0][0].sqrt();
            let l10 = cov[1][0] / l00;
            let l11 = (cov[1][1] - l10 * l10).sqrt();
            let inv = [
                [cov[1][1] / det, -cov[0][1] / det],
                [-cov[1][0] / det, cov[0][0] / det],
            ];
            comps.push(GaussComponent {
                mean,
                cov,
                weight,
                chol: [[l00, 0.0], [l10, l11]],
                inv,
                log_norm: -LN_2PI - 0.5 * det.ln(),
            });
        }
        Ok(GaussianMixture2D { components: comps })
    }

    /// Eight equal-weight isotropic Gaussians (σ = 0.2) on a circle of radius 2.
    pub fn rings8() -> Self {
        let sigma2 = 0.2 * 0.2;
        let comps: Vec<_> = (0..8)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
                (
                    [2.0 * a.cos(), 2.0 * a.sin()],
                    [[sigma2, 0.0], [0.0, sigma2]],
                    0.125,
                )
            })
            .collect();
        GaussianMixture2D::new(comps).unwrap()
    }

    pub fn single(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Self {
        GaussianMixture2D::new(vec![(mean, cov, 1.0)]).unwrap()
    }

    pub fn standard() -> Self {
        Self::single([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])
    }

    pub fn components(&self) -> impl Iterator<Item = ([f64; 2], [[f64; 2]; 2], f64)> + '_ {
        self.components.iter().map(|c| (c.mean, c.cov, c.weight))
    }

    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let d = [x[0] - c.mean[0], x[1] - c.mean[1]];
                let q = d[0] * (c.inv[0][0] * d[0] + c.inv[0][1] * d[1])
                    + d[1] * (c.inv[1][0] * d[0] + c.inv[1][1] * d[1]);
                c.weight.ln() + c.log_norm - 0.5 * q
            })
            .collect();
        logsumexp(&terms)
    }

    pub fn sample_with(&self, n: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
        (0..n)
            .map(|_| {
                let mut u: f64 = rng.gen();
                let mut ci = self.components.len() - 1;
                for (i, c) in self.components.iter().enumerate() {
                    if u < c.weight {
                        ci = i;
                        break;
                    }
                    u -= c.weight;
                }
                let c = &self.components[ci];
                let e0: f64 = rng.sample(StandardNormal);
                let e1: f64 = rng.sample(StandardNormal);
                [
                    c.mean[0] + c.chol[0][0] * e0,
                    c.mean[1] + c.chol[1][0] * e0 + c.chol[1][1] * e1,
                ]
            })
            .collect()
    }

    /// Data mean and covariance, for the moment-matched Gaussian baseline.
    pub fn from_moments(points: &[[f64; 2]]) -> Result<Self> {
        let n = points.len() as f64;
        let mut mean = [0.0, 0.0];
        for p in points {
            mean[0] += p[0] / n;
            mean[1] += p[1] / n;
        }
        let mut cov = [[0.0; 2]; 2];
        for p in points {
            let d = [p[0] - mean[0], p[1] - mean[1]];
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += d[i] * d[j] / n;
                }
            }
        }
        GaussianMixture2D::new(vec![(mean, cov, 1.0)])
    }
}

/// Two interleaved spirals with binary class labels; class 0 is the point
/// reflection of class 1. Radius r = t, angle 3π·t·turns for t ∈ [0.25, 1].
#[derive(Clone, Debug)]
pub struct TwoSpirals {
    pub noise_sd: f64,
    pub turns: f64,
}

impl Default for TwoSpirals {
    fn default() -> Self {
        TwoSpirals { noise_sd: 0.05, turns: 1.0 }
    }
}

impl TwoSpirals {
    /// One draw: (point, class, arc parameter t).
    pub fn draw(&self, rng: &mut impl Rng) -> ([f64; 2], i32, f64) {
        let t: f64 = rng.gen_range(0.25..1.0);
        let angle = 3.0 * std::f64::consts::PI * t * self.turns;
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let n0: f64 = rng.sample(StandardNormal);
        let n1: f64 = rng.sample(StandardNormal);
        let p = [
            sign * t * angle.cos() + self.noise_sd * n0,
            sign * t * angle.sin() + self.noise_sd * n1,
        ];
        (p, if sign > 0.0 { 1 } else { 0 }, t)
    }

    pub fn sample_labeled(&self, n: usize, rng: &mut impl Rng) -> Vec<([f64; 2], i32, f64)> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

#[derive(Clone, Debug)]
pub enum GroundTruth {
    Gaussians(GaussianMixture2D),
    Checkerboard,
    Spirals(TwoSpirals),
}

impl GroundTruth {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "rings8" => Ok(GroundTruth::Gaussians(GaussianMixture2D::rings8())),
            "checkerboard" => Ok(GroundTruth::Checkerboard),
            "spirals" => Ok(GroundTruth::Spirals(TwoSpirals::default())),
            other => Err(FceError::InvalidArgument(format!("unknown distribution `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GroundTruth::Gaussians(_) => "rings8",
            GroundTruth::Checkerboard => "checkerboard",
            GroundTruth::Spirals(_) => "spirals",
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
        if n == 0 {
            return Err(FceError::InvalidArgument("sample size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.sample_with(n, &mut rng))
    }

    pub fn sample_with(&self, n: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
        match self {
            GroundTruth::Gaussians(g) => g.sample_with(n, rng),
            GroundTruth::Checkerboard => (0..n)
                .map(|_| loop {
                    let x: f64 = rng.gen_range(-2.0..2.0);
                    let y: f64 = rng.gen_range(-2.0..2.0);
                    if (x.floor() as i64 + y.floor() as i64).rem_euclid(2) == 0 {
                        return [x, y];
                    }
                })
                .collect(),
            GroundTruth::Spirals(s) => s.sample_labeled(n, rng).into_iter().map(|(p, _, _)| p).collect(),
        }
    }

    pub fn log_density(&self, x: [f64; 2]) -> Result<f64> {
        match self {
            GroundTruth::Gaussians(g) => Ok(g.log_density(x)),
            GroundTruth::Checkerboard => Err(FceError::UnsupportedDensity("checkerboard".into())),
            GroundTruth::Spirals(_) => Err(FceError::UnsupportedDensity("two-spirals".into())),
        }
    }

    pub fn gaussians(&self) -> Result<&GaussianMixture2D> {
        match self {
            GroundTruth::Gaussians(g) => Ok(g),
            other => Err(FceError::UnsupportedDensity(other.name().into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub points: Vec<[f64; 2]>,
    /// Entries in {0, …, K−1}, or `UNLABELED`.
    pub labels: Vec<i32>,
}

impl LabeledDataset {
    pub fn unlabeled(points: Vec<[f64; 2]>) -> Self {
        let labels = vec![UNLABELED; points.len()];
        LabeledDataset { points, labels }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] != UNLABELED).collect()
    }

    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "x,y,label")?;
        for (p, l) in self.points.iter().zip(&self.labels) {
            writeln!(out, "{:.16e},{:.16e},{}", p[0], p[1], l)?;
        }
        Ok(())
    }
}

/// Semi-supervised split: exactly `labels_per_class` labeled points per class,
/// chosen at arc-length quantiles so they spread along each spiral; the rest
/// of the sample stays unlabeled.
pub fn make_semisup_split(
    dist: &TwoSpirals,
    n_unlabeled: usize,
    labels_per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if labels_per_class == 0 {
        return Err(FceError::InvalidArgument("labels_per_class must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = dist.sample_labeled(n_unlabeled, &mut rng);
    let mut labels = vec![UNLABELED; draws.len()];
    for class in 0..2i32 {
        let mut members: Vec<usize> =
            (0..draws.len()).filter(|&i| draws[i].1 == class).collect();
        if members.len() < labels_per_class {
            return Err(FceError::InvalidArgument(format!(
                "labels_per_class = {labels_per_class} exceeds the {} samples of class {class}",
                members.len()
            )));
        }
        members.sort_by(|&a, &b| draws[a].2.partial_cmp(&draws[b].2).unwrap());
        for i in 0..labels_per_class {
            let q = (i as f64 + 0.5) / labels_per_class as f64;
            let pos = ((q * members.len() as f64) as usize).min(members.len() - 1);
            labels[members[pos]] = class;
        }
    }
    let labeled = labels.iter().filter(|&&l| l != UNLABELED).count();
    if labeled != 2 * labels_per_class {
        // Quantile collision can only happen when labels_per_class approaches
        // the class size; treat it as the same argument error.
        return Err(FceError::InvalidArgument(format!(
            "labels_per_class = {labels_per_class} too large for stratified placement"
        )));
    }
    Ok(LabeledDataset { points: draws.iter().map(|d| d.0).collect(), labels })
}

/// Samples with point CSV export, label −1 when the source has no labels.
pub fn export_samples_csv(points: &[[f64; 2]], labels: Option<&[i32]>, out: &mut impl Write) -> Result<()> {
    writeln!(out, "x,y,label")?;
    for (i, p) in points.iter().enumerate() {
        let l = labels.map(|ls| ls[i]).unwrap_or(UNLABELED);
        writeln!(out, "{:.16e},{:.16e},{}", p[0], p[1], l)?;
    }
    Ok(())
}
