//! Evaluation metrics and density rasterization.

use std::io::Write;

use crate::data::GaussianMixture2D;
use crate::error::{FceError, Result};

/// Seed for the shared evaluation point set, fixed so every run's MSE is
/// computed over identical points.
pub const EVAL_SEED: u64 = 1_000_003;

/// Evaluation points sampled from the ground truth with the fixed seed; the
/// MSE then weights the data's support rather than the far field.
pub fn standard_eval_points(truth: &GaussianMixture2D, n: usize) -> Vec<[f64; 2]> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(EVAL_SEED);
    truth.sample_with(n, &mut rng)
}

/// Mean of (model log-density − true log-density)² over the given points.
pub fn density_mse_points(
    model_log_density: impl Fn(&[[f64; 2]]) -> Result<Vec<f64>>,
    truth: &GaussianMixture2D,
    points: &[[f64; 2]],
) -> Result<f64> {
    if points.is_empty() {
        return Err(FceError::InvalidArgument("density_mse over zero points".into()));
    }
    let model = model_log_density(points)?;
    if model.len() != points.len() {
        return Err(FceError::ShapeMismatch {
            primitive: "density_mse".into(),
            detail: format!("{} log-densities for {} points", model.len(), points.len()),
        });
    }
    let mut acc = 0.0;
    for (p, m) in points.iter().zip(&model) {
        if !m.is_finite() {
            return Err(FceError::NonFinite("density_mse".into()));
        }
        let d = m - truth.log_density(*p);
        acc += d * d;
    }
    Ok(acc / points.len() as f64)
}

/// `density_mse_points` over the default evaluation set (10⁴ points).
pub fn density_mse(
    model_log_density: impl Fn(&[[f64; 2]]) -> Result<Vec<f64>>,
    truth: &GaussianMixture2D,
) -> Result<f64> {
    let points = standard_eval_points(truth, 10_000);
    density_mse_points(model_log_density, truth, &points)
}

/// Rectangular raster region with cell counts per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(FceError::InvalidArgument("grid bounds must be increasing".into()));
        }
        if nx < 2 || ny < 2 {
            return Err(FceError::InvalidArgument("grid resolution must be ≥ 2 per axis".into()));
        }
        Ok(GridSpec { x_min, x_max, y_min, y_max, nx, ny })
    }

    /// Parses "xmin,xmax,ymin,ymax,nx,ny".
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 6 {
            return Err(FceError::InvalidArgument(format!(
                "grid spec `{s}`: expected xmin,xmax,ymin,ymax,nx,ny"
            )));
        }
        let f = |i: usize| -> Result<f64> {
            parts[i]
                .parse()
                .map_err(|_| FceError::InvalidArgument(format!("grid spec: bad number `{}`", parts[i])))
        };
        let u = |i: usize| -> Result<usize> {
            parts[i]
                .parse()
                .map_err(|_| FceError::InvalidArgument(format!("grid spec: bad count `{}`", parts[i])))
        };
        GridSpec::new(f(0)?, f(1)?, f(2)?, f(3)?, u(4)?, u(5)?)
    }

    pub fn cell_area(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64 * (self.y_max - self.y_min) / self.ny as f64
    }

    /// Cell center (ix, iy), iy indexing rows from y_min.
    pub fn center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.x_min + (ix as f64 + 0.5) * (self.x_max - self.x_min) / self.nx as f64,
            self.y_min + (iy as f64 + 0.5) * (self.y_max - self.y_min) / self.ny as f64,
        ]
    }
}

/// Log-densities at cell centers, row-major over y then x.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.spec.nx + ix]
    }

    /// Riemann sum of exp(log-density) over the region.
    pub fn mass(&self) -> f64 {
        self.values.iter().map(|v| v.exp()).sum::<f64>() * self.spec.cell_area()
    }

    /// CSV `x,y,log_density`, row-major, 17-significant-digit decimals.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "x,y,log_density")?;
        for iy in 0..self.spec.ny {
            for ix in 0..self.spec.nx {
                let [x, y] = self.spec.center(ix, iy);
                writeln!(out, "{:.16e},{:.16e},{:.16e}", x, y, self.value(ix, iy))?;
            }
        }
        Ok(())
    }
}

/// Worker count for data-parallel evaluation: FCELAB_THREADS, default 1.
pub fn eval_threads() -> usize {
    std::env::var("FCELAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Evaluates a log-density callable at every cell center. Rows fan out over
/// `FCELAB_THREADS` workers against the read-only model; output is ordered
/// by row index, so the result is identical at any worker count.
pub fn render_grid<F>(model_log_density: F, spec: GridSpec) -> Result<DensityGrid>
where
    F: Fn(&[[f64; 2]]) -> Result<Vec<f64>> + Sync,
{
    let threads = eval_threads().min(spec.ny);
    let row_points = |iy: usize| -> Vec<[f64; 2]> {
        (0..spec.nx).map(|ix| spec.center(ix, iy)).collect()
    };
    let rows: Vec<Result<Vec<f64>>> = if threads <= 1 {
        (0..spec.ny).map(|iy| model_log_density(&row_points(iy))).collect()
    } else {
        let mut rows: Vec<Option<Result<Vec<f64>>>> = (0..spec.ny).map(|_| None).collect();
        let chunk = spec.ny.div_ceil(threads);
        std::thread::scope(|s| {
            let mut rest: &mut [Option<Result<Vec<f64>>>] = &mut rows;
            let mut start = 0;
            while !rest.is_empty() {
                let take = chunk.min(rest.len());
                let (head, tail) = rest.split_at_mut(take);
                let base = start;
                let f = &model_log_density;
                let rp = &row_points;
                s.spawn(move || {
                    for (off, slot) in head.iter_mut().enumerate() {
                        *slot = Some(f(&rp(base + off)));
                    }
                });
                rest = tail;
                start += take;
            }
        });
        rows.into_iter().map(|r| r.unwrap()).collect()
    };

    let mut values = Vec::with_capacity(spec.nx * spec.ny);
    for row in rows {
        let row = row?;
        if row.len() != spec.nx {
            return Err(FceError::ShapeMismatch {
                primitive: "render_grid".into(),
                detail: format!("{} values for {} cells", row.len(), spec.nx),
            });
        }
        for v in &row {
            if !v.is_finite() {
                return Err(FceError::NonFinite("render_grid".into()));
            }
        }
        values.extend_from_slice(&row);
    }
    Ok(DensityGrid { spec, values })
}
