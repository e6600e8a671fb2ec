//! Monte Carlo helpers shared by the verification layers.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::exec;
use crate::paths::{simulate_path, NoiseSource, TimeGrid};
use crate::scenarios::VolControl;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, se: f64::NAN, n };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, n }
    }

    pub fn from_moments(sum: f64, sum_sq: f64, n: usize) -> Self {
        if n == 0 {
            return Self { mean: f64::NAN, se: f64::NAN, n };
        }
        let mean = sum / n as f64;
        let se = if n > 1 {
            let var = ((sum_sq - n as f64 * mean * mean) / (n - 1) as f64).max(0.0);
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, n }
    }
}

/// Estimate of `mean(a - b)` for paired (common-random-number) samples.
pub fn paired_difference(a: &[f64], b: &[f64]) -> Estimate {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Estimate::from_samples(&d)
}

/// `B_T` for paths `0..n_paths` under `control`.
pub fn terminal_values(control: &VolControl, grid: &TimeGrid, noise: NoiseSource, n_paths: usize) -> Result<Vec<f64>> {
    exec::try_map_range(n_paths, |i| Ok(simulate_path(control, grid, &noise, i as u64)?.b(grid.steps())))
}

/// Running sums used by binned conditional-mean checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments {
    pub n: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    pub fn estimate(&self) -> Estimate {
        Estimate::from_moments(self.sum, self.sum_sq, self.n)
    }
}
