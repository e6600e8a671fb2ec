//! Time grids, sampled trajectories of the canonical process and the
//! pathwise integrals used by the decomposition.
//!
//! Volatility controls are expressed as **variances**: a control value `a`
//! on a cell means `d<B>_t = a dt` there, so the Gaussian increment over the
//! cell has standard deviation `sqrt(a * dt)`. Controls are never given as
//! volatilities `sigma = sqrt(a)`.
//!
//! # Bundle formats
//!
//! CSV: header `path_id,t,B,qv` for `d = 1`. For `d > 1` the columns are
//! `path_id,t,B0..B{d-1},qv00..qv{d-1}{d-1}` (row-major).
//!
//! Binary (all little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `VGPB` |
//! | 2     | version `u16` (= 1) |
//! | 4     | `d` as `u32` |
//! | 4     | `N` (steps) as `u32` |
//! | 8     | `n_paths` as `u64` |
//! | 8     | horizon `T` as `f64` |
//! | ...   | per path: `(N+1)*d` values then `(N+1)*d*d` qv entries, `f64` |

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{argument, domain, Error, Result};
use crate::exec;
use crate::scenarios::VolControl;

pub const BUNDLE_MAGIC: &[u8; 4] = b"VGPB";
pub const BUNDLE_VERSION: u16 = 1;

/// Uniform grid `t_k = k T / N`, `k = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return argument(format!("horizon must be positive, got {horizon}"));
        }
        if steps == 0 {
            return argument("time grid needs at least one step");
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    /// Grid index of time `t`, if `t` is a node (relative tolerance `1e-9`).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let k = x.round();
        if k < 0.0 || k > self.steps as f64 {
            return None;
        }
        if (x - k).abs() <= 1e-9 * (1.0 + x.abs()) {
            Some(k as usize)
        } else {
            None
        }
    }

    pub fn require_index(&self, t: f64) -> Result<usize> {
        self.index_of(t)
            .ok_or_else(|| Error::Argument(format!("time {t} is not a node of the grid (T={}, N={})", self.horizon, self.steps)))
    }

    /// True if every node of `self` is a node of `finer`.
    pub fn is_coarsening_of(&self, finer: &TimeGrid) -> bool {
        (self.horizon - finer.horizon).abs() <= 1e-12 * self.horizon && finer.steps.is_multiple_of(self.steps)
    }
}

/// One sampled trajectory with its running quadratic variation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
    qv: Vec<f64>,
}

impl DiscretePath {
    /// Builds a path from raw node values. `values` has `(N+1)*d` entries,
    /// `qv` has `(N+1)*d*d`.
    pub fn from_parts(grid: TimeGrid, dim: usize, values: Vec<f64>, qv: Vec<f64>) -> Result<Self> {
        let n = grid.steps() + 1;
        if dim == 0 || values.len() != n * dim || qv.len() != n * dim * dim {
            return argument(format!(
                "path arrays do not match grid: d={dim}, N+1={n}, values={}, qv={}",
                values.len(),
                qv.len()
            ));
        }
        Ok(Self { grid, dim, values, qv })
    }

    /// A one-dimensional path with quadratic variation given by the running
    /// sum of squared increments.
    pub fn from_values(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.steps() + 1 {
            return argument("values length must be N+1");
        }
        let mut qv = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        qv.push(0.0);
        for w in values.windows(2) {
            acc += (w[1] - w[0]).powi(2);
            qv.push(acc);
        }
        Self::from_parts(grid, 1, values, qv)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.steps() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Component 0 at node `k`.
    #[inline]
    pub fn b(&self, k: usize) -> f64 {
        self.values[k * self.dim]
    }

    pub fn value(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.dim + j]
    }

    /// Entry `(0, 0)` of the quadratic variation at node `k`.
    #[inline]
    pub fn qv_scalar(&self, k: usize) -> f64 {
        self.qv[k * self.dim * self.dim]
    }

    pub fn qv_at(&self, k: usize) -> &[f64] {
        let m = self.dim * self.dim;
        &self.qv[k * m..(k + 1) * m]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn qv(&self) -> &[f64] {
        &self.qv
    }

    pub fn component(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|k| self.value(k, j)).collect()
    }

    /// Component 0 as a contiguous series.
    pub fn series(&self) -> Vec<f64> {
        self.component(0)
    }
}

/// A set of paths simulated under one control on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub dim: usize,
    pub paths: Vec<DiscretePath>,
    pub control: Option<String>,
    pub rng_seed: Option<u64>,
}

impl PathBundle {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Deterministic per-path Gaussian source. Path `i` always receives the same
/// draws for a given seed, whichever control it is simulated under, which is
/// what the common-random-number comparisons rely on.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSource {
    pub seed: u64,
    pub antithetic: bool,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { seed, antithetic: false }
    }

    pub fn with_antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    /// Fills `out` with the standard normal draws of path `path_id`.
    pub fn fill(&self, path_id: u64, out: &mut [f64]) {
        let (stream, sign) = if self.antithetic {
            (path_id / 2, if path_id % 2 == 1 { -1.0 } else { 1.0 })
        } else {
            (path_id, 1.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        for x in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x = sign * z;
        }
    }
}

/// Simulates path `path_id` under `control`.
///
/// On cell `k` the increment is `sqrt(a_k dt) * L xi_k` where `a_k` is the
/// control's scalar level read from the prefix up to `t_k` and `L L^T` its
/// shape matrix (identity in `d = 1`); the quadratic variation grows by
/// `a_k dt * shape` exactly.
pub fn simulate_path(control: &VolControl, grid: &TimeGrid, noise: &NoiseSource, path_id: u64) -> Result<DiscretePath> {
    if control.grid() != grid {
        return argument("control and simulation grid differ");
    }
    let d = control.dim();
    let n = grid.steps();
    let dt = grid.dt();
    let mut xi = vec![0.0; n * d];
    noise.fill(path_id, &mut xi);

    let mut values = vec![0.0; (n + 1) * d];
    let mut qv = vec![0.0; (n + 1) * d * d];
    let mut state = control.start(0.0);
    let shape = control.shape();
    let chol = control.shape_factor();
    for k in 0..n {
        let x = values[k * d];
        let a = control.level(k, x, &state);
        if !(a.is_finite() && a > 0.0) {
            return domain(format!(
                "control '{}' produced non-positive variance {a} at node {k}",
                control.label()
            ));
        }
        let scale = (a * dt).sqrt();
        for i in 0..d {
            let mut inc = 0.0;
            for j in 0..=i {
                inc += chol[i * d + j] * xi[k * d + j];
            }
            values[(k + 1) * d + i] = values[k * d + i] + scale * inc;
        }
        for e in 0..d * d {
            qv[(k + 1) * d * d + e] = qv[k * d * d + e] + a * dt * shape[e];
        }
        control.advance(k + 1, values[(k + 1) * d], &mut state);
    }
    DiscretePath::from_parts(*grid, d, values, qv)
}

/// Simulates `n_paths` paths under `control`. Deterministic given `seed`.
pub fn simulate(control: &VolControl, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathBundle> {
    simulate_with(control, grid, n_paths, NoiseSource::new(seed))
}

pub fn simulate_with(control: &VolControl, grid: &TimeGrid, n_paths: usize, noise: NoiseSource) -> Result<PathBundle> {
    let paths = exec::try_map_range(n_paths, |i| simulate_path(control, grid, &noise, i as u64))?;
    Ok(PathBundle {
        grid: *grid,
        dim: control.dim(),
        paths,
        control: Some(control.label().to_string()),
        rng_seed: Some(noise.seed),
    })
}

/// Karandikar-type pathwise integral `int Y_- dB` at oscillation level `n`.
///
/// `tau_0 = 0`, `tau_{i+1}` is the first grid node after `tau_i` where
/// `|Y - Y_{tau_i}| >= 2^-n`; on `(tau_m, tau_{m+1}]` the integral is
/// `Y_{tau_m} (B_t - B_{tau_m}) + sum_{i<m} Y_{tau_i} (B_{tau_{i+1}} - B_{tau_i})`.
pub fn pathwise_integral_series(y: &[f64], b: &[f64], level: u32) -> Result<Vec<f64>> {
    if y.len() != b.len() {
        return argument(format!("integrand has {} nodes, integrator {}", y.len(), b.len()));
    }
    if level == 0 {
        return argument("oscillation level n must be >= 1");
    }
    if y.is_empty() {
        return argument("empty series");
    }
    let eps = 0.5f64.powi(level as i32);
    let mut out = vec![0.0; y.len()];
    let mut anchor = 0usize;
    let mut acc = 0.0;
    for k in 1..y.len() {
        out[k] = acc + y[anchor] * (b[k] - b[anchor]);
        if (y[k] - y[anchor]).abs() >= eps {
            acc = out[k];
            anchor = k;
        }
    }
    Ok(out)
}

/// [`pathwise_integral_series`] against component 0 of a path.
pub fn pathwise_integral(y: &[f64], integrator: &DiscretePath, level: u32) -> Result<Vec<f64>> {
    if y.len() != integrator.len() {
        return argument("integrand and integrator are on different grids");
    }
    pathwise_integral_series(y, &integrator.series(), level)
}

/// Discrete bracket `<Y, B>` computed two ways.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariation {
    pub dim: usize,
    /// `sum_{j<k} dY_j dB_j`, `(N+1)*d` entries.
    pub direct: Vec<f64>,
    /// `B_k Y_k - B_0 Y_0 - sum_{j<k} (B_j dY_j + Y_j dB_j)`.
    pub by_parts: Vec<f64>,
}

impl Covariation {
    pub fn max_discrepancy(&self) -> f64 {
        self.direct
            .iter()
            .zip(&self.by_parts)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn at(&self, k: usize, j: usize) -> f64 {
        self.direct[k * self.dim + j]
    }
}

pub fn quadratic_covariation(y: &[f64], path: &DiscretePath) -> Result<Covariation> {
    if y.len() != path.len() {
        return argument("Y and B are on different grids");
    }
    let d = path.dim();
    let n = path.len();
    let mut direct = vec![0.0; n * d];
    let mut by_parts = vec![0.0; n * d];
    for j in 0..d {
        let mut acc = 0.0;
        let mut ito = 0.0;
        for k in 1..n {
            let dy = y[k] - y[k - 1];
            let db = path.value(k, j) - path.value(k - 1, j);
            acc += dy * db;
            ito += path.value(k - 1, j) * dy + y[k - 1] * db;
            direct[k * d + j] = acc;
            by_parts[k * d + j] = path.value(k, j) * y[k] - path.value(0, j) * y[0] - ito;
        }
    }
    Ok(Covariation { dim: d, direct, by_parts })
}

// ----------------------------------------------------------------------------
// Import / export

fn csv_header(d: usize) -> Vec<String> {
    let mut h = vec!["path_id".to_string(), "t".to_string()];
    if d == 1 {
        h.push("B".into());
        h.push("qv".into());
    } else {
        for j in 0..d {
            h.push(format!("B{j}"));
        }
        for a in 0..d {
            for b in 0..d {
                h.push(format!("qv{a}{b}"));
            }
        }
    }
    h
}

pub fn write_bundle_csv<W: Write>(bundle: &PathBundle, out: W) -> Result<()> {
    let d = bundle.dim;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(d))?;
    for (pid, p) in bundle.paths.iter().enumerate() {
        for k in 0..p.len() {
            let mut rec = vec![pid.to_string(), format!("{}", bundle.grid.node(k))];
            for j in 0..d {
                rec.push(format!("{}", p.value(k, j)));
            }
            for q in p.qv_at(k) {
                rec.push(format!("{q}"));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_bundle_csv<R: Read>(input: R) -> Result<PathBundle> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let ncol = headers.len();
    // ncol = 2 + d + d^2
    let d = (1..=16)
        .find(|d| 2 + d + d * d == ncol)
        .ok_or_else(|| Error::Format(format!("cannot infer dimension from {ncol} columns")))?;
    let mut rows: Vec<(usize, f64, Vec<f64>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let pid: usize = rec[0].trim().parse().map_err(|e| Error::Format(format!("path_id: {e}")))?;
        let t: f64 = rec[1].trim().parse().map_err(|e| Error::Format(format!("t: {e}")))?;
        let vals = (2..ncol)
            .map(|c| rec[c].trim().parse::<f64>().map_err(|e| Error::Format(format!("column {c}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push((pid, t, vals));
    }
    if rows.is_empty() {
        return Err(Error::Format("empty bundle".into()));
    }
    let n_paths = rows.iter().map(|r| r.0).max().unwrap() + 1;
    if !rows.len().is_multiple_of(n_paths) {
        return Err(Error::Format("ragged bundle: paths have different lengths".into()));
    }
    let n_nodes = rows.len() / n_paths;
    if n_nodes < 2 {
        return Err(Error::Format("paths need at least two nodes".into()));
    }
    let horizon = rows[n_nodes - 1].1;
    let grid = TimeGrid::new(horizon, n_nodes - 1)?;
    let mut paths = Vec::with_capacity(n_paths);
    for pid in 0..n_paths {
        let chunk = &rows[pid * n_nodes..(pid + 1) * n_nodes];
        let mut values = Vec::with_capacity(n_nodes * d);
        let mut qv = Vec::with_capacity(n_nodes * d * d);
        for (k, (id, t, vals)) in chunk.iter().enumerate() {
            if *id != pid || (t - grid.node(k)).abs() > 1e-9 * (1.0 + horizon) {
                return Err(Error::Format(format!("row for path {id} at t={t} out of order")));
            }
            values.extend_from_slice(&vals[..d]);
            qv.extend_from_slice(&vals[d..]);
        }
        paths.push(DiscretePath::from_parts(grid, d, values, qv)?);
    }
    Ok(PathBundle { grid, dim: d, paths, control: None, rng_seed: None })
}

pub fn write_bundle_binary<W: Write>(bundle: &PathBundle, mut out: W) -> Result<()> {
    out.write_all(BUNDLE_MAGIC)?;
    out.write_all(&BUNDLE_VERSION.to_le_bytes())?;
    out.write_all(&(bundle.dim as u32).to_le_bytes())?;
    out.write_all(&(bundle.grid.steps() as u32).to_le_bytes())?;
    out.write_all(&(bundle.paths.len() as u64).to_le_bytes())?;
    out.write_all(&bundle.grid.horizon().to_le_bytes())?;
    for p in &bundle.paths {
        for v in p.values().iter().chain(p.qv()) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_bundle_binary<R: Read>(mut input: R) -> Result<PathBundle> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != BUNDLE_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut b2 = [0u8; 2];
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != BUNDLE_VERSION {
        return Err(Error::Format(format!("unsupported bundle version {version}")));
    }
    input.read_exact(&mut b4)?;
    let d = u32::from_le_bytes(b4) as usize;
    input.read_exact(&mut b4)?;
    let n = u32::from_le_bytes(b4) as usize;
    input.read_exact(&mut b8)?;
    let n_paths = u64::from_le_bytes(b8) as usize;
    input.read_exact(&mut b8)?;
    let horizon = f64::from_le_bytes(b8);
    let grid = TimeGrid::new(horizon, n)?;
    if d == 0 {
        return Err(Error::Format("dimension 0".into()));
    }
    let mut read_vec = |len: usize| -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            input.read_exact(&mut b8)?;
            v.push(f64::from_le_bytes(b8));
        }
        Ok(v)
    };
    let mut paths = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let values = read_vec((n + 1) * d)?;
        let qv = read_vec((n + 1) * d * d)?;
        paths.push(DiscretePath::from_parts(grid, d, values, qv)?);
    }
    Ok(PathBundle { grid, dim: d, paths, control: None, rng_seed: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{Rule, VolControl};

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn grid_nodes_hit_endpoints() {
        let g = grid(7);
        let nodes = g.nodes();
        assert_eq!(nodes[0], 0.0);
        assert_eq!(nodes[7], 1.0);
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(g.index_of(3.0 / 7.0), Some(3));
        assert_eq!(g.index_of(0.5), None);
    }

    #[test]
    fn empty_grid_is_rejected() {
        assert!(matches!(TimeGrid::new(1.0, 0), Err(Error::Argument(_))));
        assert!(matches!(TimeGrid::new(0.0, 5), Err(Error::Argument(_))));
    }

    #[test]
    fn brownian_moments() {
        let g = grid(16);
        let c = VolControl::constant(&g, 1.0);
        let noise = NoiseSource::new(11);
        let n = 100_000;
        let bt: Vec<f64> = (0..n).map(|i| simulate_path(&c, &g, &noise, i).unwrap().b(16)).collect();
        let mean = bt.iter().sum::<f64>() / n as f64;
        let var = bt.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd_mean = (1.0 / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * sd_mean, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn constant_control_has_exact_qv() {
        let g = grid(50);
        let c = VolControl::constant(&g, 2.5);
        let b = simulate(&c, &g, 20, 3).unwrap();
        for p in &b.paths {
            assert!((p.qv_scalar(50) - 2.5).abs() < 1e-12);
            assert_eq!(p.b(0), 0.0);
            assert_eq!(p.qv_scalar(0), 0.0);
        }
    }

    #[test]
    fn adapted_indicator_control_qv_increments() {
        let g = grid(40);
        let rule = Rule::ThresholdSwitch { level: 0.0, below: 1.0, above: 2.0, abs: false };
        let c = VolControl::new("ind", &g, rule).unwrap();
        let b = simulate(&c, &g, 50, 9).unwrap();
        let dt = g.dt();
        for p in &b.paths {
            for k in 0..40 {
                let expect = (1.0 + if p.b(k) > 0.0 { 1.0 } else { 0.0 }) * dt;
                let got = p.qv_scalar(k + 1) - p.qv_scalar(k);
                assert!((got - expect).abs() < 1e-15, "k={k}");
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let g = grid(30);
        let c = VolControl::constant(&g, 1.3);
        let a = simulate(&c, &g, 64, 42).unwrap();
        let b = simulate(&c, &g, 64, 42).unwrap();
        assert_eq!(a, b);
        let other = simulate(&c, &g, 64, 43).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn antithetic_pairs_mirror() {
        let g = grid(10);
        let c = VolControl::constant(&g, 1.0);
        let noise = NoiseSource::new(5).with_antithetic(true);
        let p0 = simulate_path(&c, &g, &noise, 0).unwrap();
        let p1 = simulate_path(&c, &g, &noise, 1).unwrap();
        for k in 0..=10 {
            assert!((p0.b(k) + p1.b(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_positive_control_is_domain_error() {
        let g = grid(4);
        let c = VolControl::new("bad", &g, Rule::Constant(0.0));
        assert!(matches!(c, Err(Error::Domain(_))));
    }

    #[test]
    fn constant_integrand_gives_scaled_path() {
        let g = grid(64);
        let c = VolControl::constant(&g, 1.0);
        let p = simulate(&c, &g, 1, 1).unwrap().paths.remove(0);
        let y = vec![2.5; p.len()];
        for n in 1..10 {
            let i = pathwise_integral(&y, &p, n).unwrap();
            for k in 0..p.len() {
                assert!((i[k] - 2.5 * p.b(k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_integrand_on_four_nodes() {
        // Y jumps from 1 to 3 at node 2; the integral is the two-term Riemann sum
        // 1*(B_2 - B_0) + 3*(B_3 - B_2).
        let g = TimeGrid::new(3.0, 3).unwrap();
        let p = DiscretePath::from_values(g, vec![0.0, 0.4, -0.3, 0.9]).unwrap();
        let y = [1.0, 1.0, 3.0, 3.0];
        for n in 1..6 {
            let i = pathwise_integral(&y, &p, n).unwrap();
            assert_eq!(i[0], 0.0);
            assert!((i[1] - 0.4).abs() < 1e-15);
            assert!((i[2] - (-0.3)).abs() < 1e-15);
            assert!((i[3] - (-0.3 + 3.0 * 1.2)).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_grids_rejected() {
        let g = grid(4);
        let p = DiscretePath::from_values(g, vec![0.0; 5]).unwrap();
        assert!(pathwise_integral(&[0.0; 4], &p, 2).is_err());
        assert!(quadratic_covariation(&[0.0; 3], &p).is_err());
        assert!(pathwise_integral(&[0.0; 5], &p, 0).is_err());
    }

    #[test]
    fn bracket_of_path_with_itself() {
        let g = grid(200);
        let c = VolControl::constant(&g, 1.0);
        let p = simulate(&c, &g, 1, 77).unwrap().paths.remove(0);
        let y = p.series();
        let cov = quadratic_covariation(&y, &p).unwrap();
        let sum_sq: f64 = y.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
        assert!((cov.direct[200] - sum_sq).abs() < 1e-12);
        // Sampling error of the realized QV is O(sqrt(dt)).
        assert!((cov.direct[200] - p.qv_scalar(200)).abs() < 0.5);
        assert!(cov.max_discrepancy() < 1e-10 * 200.0);

        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let cov2 = quadratic_covariation(&y2, &p).unwrap();
        assert!((cov2.direct[200] - 2.0 * sum_sq).abs() < 1e-12);
    }

    #[test]
    fn bracket_with_smooth_deterministic_integrand_vanishes() {
        let mut last = f64::INFINITY;
        for n in [100, 400, 1600, 6400] {
            let g = grid(n);
            let c = VolControl::constant(&g, 1.0);
            let p = simulate(&c, &g, 1, 5).unwrap().paths.remove(0);
            let y: Vec<f64> = g.nodes().iter().map(|t| (3.0 * t).sin()).collect();
            let cov = quadratic_covariation(&y, &p).unwrap();
            let v = cov.direct[n].abs();
            assert!(v < 3.0 / (n as f64).sqrt());
            last = last.min(v);
        }
        assert!(last < 0.05);
    }

    #[test]
    fn csv_and_binary_roundtrip() {
        let g = grid(5);
        let c = VolControl::constant(&g, 1.7);
        let b = simulate(&c, &g, 3, 8).unwrap();
        let mut buf = Vec::new();
        write_bundle_binary(&b, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"VGPB");
        let back = read_bundle_binary(&buf[..]).unwrap();
        assert_eq!(back.paths, b.paths);

        let mut txt = Vec::new();
        write_bundle_csv(&b, &mut txt).unwrap();
        let s = String::from_utf8(txt.clone()).unwrap();
        assert!(s.starts_with("path_id,t,B,qv"));
        let back = read_bundle_csv(&txt[..]).unwrap();
        assert_eq!(back.paths, b.paths);
    }

    #[test]
    fn bad_magic_rejected() {
        let err = read_bundle_binary(&b"XXXX\x01\x00"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
