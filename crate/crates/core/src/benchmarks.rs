//! Benchmark response functions, dataset generation and the standardized
//! RMSPE metric.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::designs::scale_to_ranges;
use crate::error::{invalid, GpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkName {
    Toy,
    Otl,
    Borehole,
}

impl fmt::Display for BenchmarkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Toy => "toy",
            Self::Otl => "otl",
            Self::Borehole => "borehole",
        })
    }
}

impl FromStr for BenchmarkName {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "toy" => Ok(Self::Toy),
            "otl" => Ok(Self::Otl),
            "borehole" => Ok(Self::Borehole),
            other => invalid(format!("unknown benchmark '{other}' (expected toy, otl or borehole)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: BenchmarkName,
    pub d: usize,
    /// Physical input ranges, one per dimension.
    pub ranges: Vec<(f64, f64)>,
    pub noise_sd: f64,
    pub train_size: usize,
    pub test_size: usize,
    /// Independent test sets scored against each training fit.
    pub test_sets: usize,
    /// Whether the GP sees unit-cube inputs (`true`) or physical ones.
    pub unit_inputs: bool,
}

pub const OTL_RANGES: [(f64, f64); 6] =
    [(50.0, 150.0), (25.0, 70.0), (0.5, 3.0), (1.2, 2.5), (0.25, 1.2), (50.0, 300.0)];

pub const BOREHOLE_RANGES: [(f64, f64); 8] = [
    (0.05, 0.15),
    (100.0, 50000.0),
    (63070.0, 115600.0),
    (990.0, 1110.0),
    (63.1, 116.0),
    (700.0, 820.0),
    (1120.0, 1680.0),
    (9855.0, 12045.0),
];

impl BenchmarkSpec {
    pub fn toy() -> Self {
        Self {
            name: BenchmarkName::Toy,
            d: 1,
            ranges: vec![(0.0, 10.0)],
            noise_sd: 0.5,
            train_size: 11,
            test_size: 100,
            test_sets: 1,
            unit_inputs: false,
        }
    }

    pub fn otl() -> Self {
        Self {
            name: BenchmarkName::Otl,
            d: 6,
            ranges: OTL_RANGES.to_vec(),
            noise_sd: 0.02,
            train_size: 200,
            test_size: 1000,
            test_sets: 1,
            unit_inputs: true,
        }
    }

    pub fn borehole() -> Self {
        Self {
            name: BenchmarkName::Borehole,
            d: 8,
            ranges: BOREHOLE_RANGES.to_vec(),
            noise_sd: 0.02,
            train_size: 200,
            test_size: 100,
            test_sets: 100,
            unit_inputs: true,
        }
    }

    pub fn by_name(name: BenchmarkName) -> Self {
        match name {
            BenchmarkName::Toy => Self::toy(),
            BenchmarkName::Otl => Self::otl(),
            BenchmarkName::Borehole => Self::borehole(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranges.len() != self.d {
            return invalid(format!("{} ranges for dimension {}", self.ranges.len(), self.d));
        }
        if !(self.noise_sd >= 0.0) {
            return invalid(format!("noise sd must be >= 0, got {}", self.noise_sd));
        }
        if self.train_size == 0 || self.test_size < 2 || self.test_sets == 0 {
            return invalid("train size, test size (>= 2) and test-set count must be positive");
        }
        Ok(())
    }

    /// Noise-free response at a physical-scale input.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.d {
            return invalid(format!("{} expects {} inputs, got {}", self.name, self.d, x.len()));
        }
        match self.name {
            BenchmarkName::Toy => Ok(toy_fn(x[0])),
            BenchmarkName::Otl => otl_fn(x),
            BenchmarkName::Borehole => borehole_fn(x),
        }
    }
}

pub fn toy_fn(x: f64) -> f64 {
    x * x.sin()
}

fn outside(x: &[f64], ranges: &[(f64, f64)]) -> bool {
    x.iter().zip(ranges).any(|(v, (lo, hi))| *v < lo - 1e-9 * lo.abs() || *v > hi + 1e-9 * hi.abs())
}

/// Output voltage of the OTL push-pull circuit. Inputs in order
/// `(R_b1, R_b2, R_f, R_c1, R_c2, I)`.
pub fn otl_fn(x: &[f64]) -> Result<f64> {
    if x.len() != 6 {
        return invalid(format!("OTL circuit takes 6 inputs, got {}", x.len()));
    }
    if outside(x, &OTL_RANGES) {
        warn!("OTL input {x:?} lies outside the nominal ranges");
    }
    let (rb1, rb2, rf, rc1, rc2, i) = (x[0], x[1], x[2], x[3], x[4], x[5]);
    let vb1 = 12.0 * rb2 / (rb1 + rb2);
    let ic = i * (rc2 + 9.0);
    let denom = ic + rf;
    Ok((vb1 + 0.74) * ic / denom + 11.35 * rf / denom + 0.74 * rf * ic / (denom * rc1))
}

/// Water flow through a borehole. Inputs in order
/// `(r_w, r, T_u, H_u, T_l, H_l, L, K_w)`.
pub fn borehole_fn(x: &[f64]) -> Result<f64> {
    if x.len() != 8 {
        return invalid(format!("borehole takes 8 inputs, got {}", x.len()));
    }
    let (rw, r, tu, hu, tl, hl, l, kw) = (x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7]);
    if !(rw > 0.0 && r > rw) {
        return invalid(format!("borehole needs r > r_w > 0, got r={r}, r_w={rw}"));
    }
    let log_ratio = (r / rw).ln();
    Ok(2.0 * PI * tu * (hu - hl) / (log_ratio * (1.0 + 2.0 * l * tu / (log_ratio * rw * rw * kw) + tu / tl)))
}

/// Evaluates the benchmark on the unit-cube design `x`, adding
/// `N(0, noise_sd^2)` noise. The dataset keeps unit-cube inputs, or the
/// physical ones when `spec.unit_inputs` is off.
pub fn make_dataset<R: Rng + ?Sized>(
    spec: &BenchmarkSpec,
    x: &DMatrix<f64>,
    noise_sd: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if x.ncols() != spec.d {
        return invalid(format!("design has dimension {} but {} needs {}", x.ncols(), spec.name, spec.d));
    }
    let phys = scale_to_ranges(x, &spec.ranges)?;
    let normal = if noise_sd > 0.0 {
        Some(Normal::new(0.0, noise_sd).map_err(|e| GpError::InvalidArgument(e.to_string()))?)
    } else {
        None
    };
    let mut y = DVector::zeros(x.nrows());
    let mut row = vec![0.0; spec.d];
    for i in 0..x.nrows() {
        row.iter_mut().enumerate().for_each(|(j, v)| *v = phys[(i, j)]);
        y[i] = spec.eval(&row)? + normal.map_or(0.0, |n| n.sample(rng));
    }
    Dataset::new(if spec.unit_inputs { x.clone() } else { phys }, y)
}

/// `sqrt(mean((pred - truth)^2)) / sd(truth)`, sample standard deviation.
pub fn standardized_rmspe(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return invalid(format!("{} predictions for {} responses", pred.len(), truth.len()));
    }
    let m = truth.len();
    if m < 2 {
        return invalid("standardized RMSPE needs at least two test responses");
    }
    let mf = m as f64;
    let mean = truth.iter().sum::<f64>() / mf;
    let var = truth.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (mf - 1.0);
    if !(var > 0.0) {
        return invalid("test responses are constant; standardized RMSPE undefined");
    }
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / mf;
    Ok(mse.sqrt() / var.sqrt())
}
