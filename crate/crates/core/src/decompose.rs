//! Decomposition `E_t = E_0 + int Z dB - K_t` along simulated paths, and the
//! checks of the second-order backward equation it solves.
//!
//! `E` along a path is the lattice value interpolated at `(t_k, B_{t_k})`
//! (quadratic in `x`, among nodes with the path's bound signature) with
//! `E_N = X` exactly. `K` is the residual
//! `K_{k+1} = K_k + E_k - E_{k+1} + Z_k (B_{k+1} - B_k)`, so the budget
//! identity holds by construction and the content lies in the sign and the
//! size of `K`.
//!
//! Paths are processed in a stream: per control only summary statistics
//! are kept, plus the first `keep_paths` paths in full for export.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::claims::{Claim, Payoff};
use crate::dp::{dp_on, ValueLattice};
use crate::error::{argument, config, domain, Result};
use crate::exec;
use crate::mc::{Estimate, Moments};
use crate::paths::{simulate_path, DiscretePath, NoiseSource, TimeGrid};
use crate::scenarios::{ScenarioSet, VolControl};

/// Smallest admissible estimated variance for the bracket source.
pub const MIN_VARIANCE: f64 = 1e-10;
/// Bins with fewer paths are skipped (and regression falls back to the bracket).
pub const MIN_BIN: usize = 50;
/// Bracket smoothing window, in steps.
pub const BRACKET_WINDOW: usize = 3;
/// Standardized bin width and range for conditional checks.
const BIN_WIDTH: f64 = 0.25;
const BIN_RANGE: f64 = 3.0;
/// Relative band for minimality and residual checks, in units of `||X||`.
pub const MINIMALITY_BAND: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZSource {
    #[default]
    MarkovianDelta,
    Regression,
    Bracket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposeConfig {
    pub source: ZSource,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub keep_paths: usize,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self { source: ZSource::MarkovianDelta, n_paths: 10_000, seed: 1, keep_paths: 0 }
    }
}

/// Time-by-space bins for conditional means.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Bins {
    steps: usize,
    per_step: usize,
    scale: f64,
    dt: f64,
}

impl Bins {
    pub(crate) fn new(grid: &TimeGrid, a_max: f64) -> Self {
        let per_step = (2.0 * BIN_RANGE / BIN_WIDTH).round() as usize + 2;
        Self { steps: grid.steps(), per_step, scale: a_max, dt: grid.dt() }
    }

    pub(crate) fn len(&self) -> usize {
        self.steps * self.per_step
    }

    pub(crate) fn index(&self, k: usize, x: f64) -> usize {
        let sd = (self.scale * (k as f64 * self.dt).max(self.dt)).sqrt();
        let z = x / sd;
        let b = if z < -BIN_RANGE {
            0
        } else if z >= BIN_RANGE {
            self.per_step - 1
        } else {
            1 + ((z + BIN_RANGE) / BIN_WIDTH).floor() as usize
        };
        k * self.per_step + b.min(self.per_step - 1)
    }
}

/// Per-bin least-squares sums of `dE` on `dB`.
#[derive(Debug, Clone, Copy, Default)]
struct Ols {
    n: usize,
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
}

impl Ols {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.sxy += x * y;
    }
    fn merge(&mut self, o: &Ols) {
        self.n += o.n;
        self.sx += o.sx;
        self.sy += o.sy;
        self.sxx += o.sxx;
        self.sxy += o.sxy;
    }
    fn slope(&self) -> Option<f64> {
        if self.n < MIN_BIN {
            return None;
        }
        let n = self.n as f64;
        let var = self.sxx - self.sx * self.sx / n;
        if var <= 1e-14 * self.sxx.max(1e-300) {
            return None;
        }
        Some((self.sxy - self.sx * self.sy / n) / var)
    }
}

/// How `Z` is produced along a path.
#[derive(Debug, Clone)]
pub struct Strategy {
    pub source: ZSource,
    lattice: ValueLattice,
    payoff: Payoff,
    /// Pooled `Z_0` for the bracket source.
    z0: f64,
    /// Per-bin regression slopes (`NaN` where the bracket is used).
    slopes: Arc<Vec<f64>>,
    bins: Bins,
}

impl Strategy {
    /// Lattice delta, no simulation needed.
    pub fn markovian(lattice: &ValueLattice, payoff: &Payoff) -> Self {
        let grid = *lattice.structure.grid();
        Self {
            source: ZSource::MarkovianDelta,
            lattice: lattice.clone(),
            payoff: payoff.clone(),
            z0: 0.0,
            slopes: Arc::new(vec![]),
            bins: Bins::new(&grid, 1.0),
        }
    }

    pub fn lattice(&self) -> &ValueLattice {
        &self.lattice
    }

    /// `E` along the path, with the lattice delta.
    pub fn values_along(&self, path: &DiscretePath) -> (Vec<f64>, Vec<f64>) {
        let s = &self.lattice.structure;
        let n = path.len() - 1;
        let mut cur = s.cursor(path.b(0));
        let mut e = Vec::with_capacity(n + 1);
        let mut d = Vec::with_capacity(n + 1);
        for k in 0..=n {
            if k > 0 {
                cur.advance(k, path.b(k));
            }
            if k == n {
                e.push(self.payoff.eval(path.b(n)));
                d.push(0.0);
                break;
            }
            let sig = cur.signature(k).unwrap_or(0);
            let (v, z) = self.lattice.value_along(k, path.b(k), sig).unwrap_or((f64::NAN, f64::NAN));
            e.push(v);
            d.push(z);
        }
        (e, d)
    }

    /// `Z_0..Z_{N-1}` along a path with values `e`.
    pub fn z_along(&self, path: &DiscretePath, e: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
        let n = path.len() - 1;
        match self.source {
            ZSource::MarkovianDelta => Ok(delta[..n].to_vec()),
            ZSource::Bracket => bracket_z(path, e, self.z0),
            ZSource::Regression => {
                let br = bracket_z(path, e, self.z0)?;
                Ok((0..n)
                    .map(|k| {
                        let s = self.slopes[self.bins.index(k, path.b(k))];
                        if s.is_nan() {
                            br[k]
                        } else {
                            s
                        }
                    })
                    .collect())
            }
        }
    }
}

/// `Z_k = sum dE dB / sum d<B>` over the trailing window; `Z_0 = z0`.
fn bracket_z(path: &DiscretePath, e: &[f64], z0: f64) -> Result<Vec<f64>> {
    let n = path.len() - 1;
    let dt = path.grid().dt();
    let mut z = vec![z0; n];
    for (k, zk) in z.iter_mut().enumerate().skip(1) {
        let lo = k.saturating_sub(BRACKET_WINDOW);
        let mut num = 0.0;
        let mut den = 0.0;
        for j in lo..k {
            num += (e[j + 1] - e[j]) * (path.b(j + 1) - path.b(j));
            den += path.qv_scalar(j + 1) - path.qv_scalar(j);
        }
        let a_hat = den / ((k - lo) as f64 * dt);
        if !(a_hat >= MIN_VARIANCE) {
            return domain(format!("estimated variance {a_hat:e} at node {k} is degenerate"));
        }
        *zk = num / den;
    }
    Ok(z)
}

/// Full arrays for one path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathRecord {
    pub path_id: usize,
    pub b: Vec<f64>,
    pub e: Vec<f64>,
    pub z: Vec<f64>,
    pub k: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StopMoment {
    pub stop: String,
    pub p: f64,
    pub estimate: Estimate,
}

/// Streaming summary for one pool control.
#[derive(Debug, Clone, Serialize)]
pub struct ControlDecomposition {
    pub control: String,
    pub is_argmax: bool,
    pub k_terminal: Estimate,
    /// `(t, E[K_T - K_t])` at the minimality check times.
    pub k_remaining: Vec<(f64, Estimate)>,
    pub max_terminal_error: f64,
    pub max_budget_error: f64,
    /// Largest one-step decrease of `K` over all paths.
    pub max_decrease: f64,
    pub paths_with_decrease: usize,
    /// `min over bins of mean(dK) + 3 SE` (bins with at least 50 paths).
    pub compensator_worst: f64,
    /// `max over bins of mean(dE) - 3 SE`.
    pub supermartingale_worst: f64,
    pub class_d: Vec<StopMoment>,
    pub z_mean_sq: f64,
    #[serde(skip)]
    pub paths: Vec<PathRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Decomposition {
    pub claim: String,
    pub source: ZSource,
    pub n_paths: usize,
    /// Seed of the extraction paths; hedging must use another.
    pub seed: u64,
    pub steps: usize,
    pub horizon: f64,
    pub e0: f64,
    /// `sup_P E^P|X|`, the scale of every tolerance.
    pub norm_x: f64,
    /// `sup_P E^P|X|^p` for the class-(D) diagnostic.
    pub moment_bounds: Vec<(f64, f64)>,
    pub controls: Vec<ControlDecomposition>,
    #[serde(skip)]
    pub strategy: Strategy,
}

/// Fractions of `T` at which minimality is checked.
pub const MINIMALITY_TIMES: [f64; 4] = [0.0, 0.25, 0.5, 0.75];
/// Exponents of the class-(D) diagnostic.
pub const CLASS_D_POWERS: [f64; 2] = [1.0, 1.5];

fn stop_sample(grid: &TimeGrid, a_max: f64) -> Vec<(String, crate::scenarios::Stopping)> {
    use crate::scenarios::Stopping;
    let n = grid.steps();
    let level = 0.5 * (a_max * grid.horizon()).sqrt();
    vec![
        ("fixed(T/4)".into(), Stopping::Fixed { node: n / 4 }),
        ("fixed(T/2)".into(), Stopping::Fixed { node: n / 2 }),
        ("fixed(3T/4)".into(), Stopping::Fixed { node: 3 * n / 4 }),
        ("fixed(T)".into(), Stopping::Fixed { node: n }),
        (format!("hit(|B|>={level:.3})"), Stopping::Hitting { level, cap: n }),
    ]
}

#[derive(Clone)]
struct Acc {
    k_t: Moments,
    rem: Vec<Moments>,
    term_err: f64,
    budget_err: f64,
    max_dec: f64,
    dec_paths: usize,
    dk: Vec<Moments>,
    de: Vec<Moments>,
    stops: Vec<Moments>,
    z_sq: f64,
    z_n: usize,
}

impl Acc {
    fn new(bins: usize, stops: usize) -> Self {
        Self {
            k_t: Moments::default(),
            rem: vec![Moments::default(); MINIMALITY_TIMES.len()],
            term_err: 0.0,
            budget_err: 0.0,
            max_dec: 0.0,
            dec_paths: 0,
            dk: vec![Moments::default(); bins],
            de: vec![Moments::default(); bins],
            stops: vec![Moments::default(); stops],
            z_sq: 0.0,
            z_n: 0,
        }
    }

    fn merge(&mut self, o: Acc) {
        self.k_t.merge(&o.k_t);
        for (a, b) in self.rem.iter_mut().zip(&o.rem) {
            a.merge(b);
        }
        self.term_err = self.term_err.max(o.term_err);
        self.budget_err = self.budget_err.max(o.budget_err);
        self.max_dec = self.max_dec.max(o.max_dec);
        self.dec_paths += o.dec_paths;
        for (a, b) in self.dk.iter_mut().zip(&o.dk) {
            a.merge(b);
        }
        for (a, b) in self.de.iter_mut().zip(&o.de) {
            a.merge(b);
        }
        for (a, b) in self.stops.iter_mut().zip(&o.stops) {
            a.merge(b);
        }
        self.z_sq += o.z_sq;
        self.z_n += o.z_n;
    }
}

/// Pathwise tolerance for the monotonicity of `K`: `10 dt ||X||`.
pub fn monotonicity_tol(grid: &TimeGrid, norm_x: f64) -> f64 {
    10.0 * grid.dt() * norm_x
}

/// Extracts `Z` and the residuals `K^P` for every pool control plus the
/// lattice argmax control.
pub fn extract_decomposition(claim: &Claim, set: &ScenarioSet, lattice: &ValueLattice, cfg: &DecomposeConfig) -> Result<Decomposition> {
    let grid = *set.grid();
    if lattice.structure.grid() != &grid {
        return argument("lattice and scenario set are on different grids");
    }
    if cfg.n_paths == 0 {
        return argument("decomposition needs at least one path");
    }
    let n = grid.steps();
    let a_max = set.global_bounds().1;
    let bins = Bins::new(&grid, a_max);
    let norm_x = dp_on(&lattice.structure, &claim.payoff.abs_pow(1.0), "|X|")?.root_value();
    let moment_bounds = CLASS_D_POWERS
        .iter()
        .map(|p| Ok((*p, dp_on(&lattice.structure, &claim.payoff.abs_pow(*p), "|X|^p")?.root_value())))
        .collect::<Result<Vec<_>>>()?;

    let argmax = lattice.argmax_control()?;
    let mut controls: Vec<(VolControl, bool)> = set.pool().iter().map(|c| (c.clone(), false)).collect();
    controls.push((argmax, true));

    let noise = NoiseSource::new(cfg.seed);
    let mut strategy = Strategy {
        source: cfg.source,
        lattice: lattice.clone(),
        payoff: claim.payoff.clone(),
        z0: 0.0,
        slopes: Arc::new(vec![]),
        bins,
    };

    // Pooled first-step bracket for Z_0.
    if cfg.source != ZSource::MarkovianDelta {
        let root = lattice.root_value();
        let mut num = 0.0;
        let mut den = 0.0;
        for (c, _) in &controls {
            let parts = exec::try_map_range(cfg.n_paths, |i| {
                let p = simulate_path(c, &grid, &noise, i as u64)?;
                let (e, _) = strategy.values_along(&p);
                Ok(((e[1] - root) * p.b(1), p.qv_scalar(1)))
            })?;
            for (a, b) in parts {
                num += a;
                den += b;
            }
        }
        if !(den / (controls.len() * cfg.n_paths) as f64 / grid.dt() >= MIN_VARIANCE) {
            return domain("estimated variance of the first step is degenerate");
        }
        strategy.z0 = num / den;
    }

    // Regression slopes pooled across controls.
    if cfg.source == ZSource::Regression {
        let mut ols = vec![Ols::default(); bins.len()];
        for (c, _) in &controls {
            let part = exec::chunked_fold(
                cfg.n_paths,
                || (vec![Ols::default(); bins.len()], None::<crate::Error>),
                |acc, i| {
                    if acc.1.is_some() {
                        return;
                    }
                    match simulate_path(c, &grid, &noise, i as u64) {
                        Ok(p) => {
                            let (e, _) = strategy.values_along(&p);
                            for k in 0..n {
                                acc.0[bins.index(k, p.b(k))].push(p.b(k + 1) - p.b(k), e[k + 1] - e[k]);
                            }
                        }
                        Err(err) => acc.1 = Some(err),
                    }
                },
                |a, b| {
                    for (x, y) in a.0.iter_mut().zip(&b.0) {
                        x.merge(y);
                    }
                    if a.1.is_none() {
                        a.1 = b.1;
                    }
                },
            );
            if let Some(e) = part.1 {
                return Err(e);
            }
            for (x, y) in ols.iter_mut().zip(&part.0) {
                x.merge(y);
            }
        }
        let slopes: Vec<f64> = ols.iter().map(|o| o.slope().unwrap_or(f64::NAN)).collect();
        let fallback = ols.iter().filter(|o| o.n > 0 && o.slope().is_none()).count();
        if fallback > 0 {
            log::warn!("regression: {fallback} bins are too small or rank deficient; using the bracket estimate there");
        }
        strategy.slopes = Arc::new(slopes);
    }

    let stops = stop_sample(&grid, a_max);
    let rem_nodes: Vec<usize> = MINIMALITY_TIMES.iter().map(|f| (f * n as f64).floor() as usize).collect();
    let n_stop_stats = stops.len() * CLASS_D_POWERS.len();
    let tol = monotonicity_tol(&grid, norm_x);
    let mut out = Vec::with_capacity(controls.len());
    for (c, is_argmax) in &controls {
        let acc = exec::chunked_fold(
            cfg.n_paths,
            || (Acc::new(bins.len(), n_stop_stats), None::<crate::Error>, Vec::<PathRecord>::new()),
            |acc, i| {
                if acc.1.is_some() {
                    return;
                }
                let res = (|| -> Result<()> {
                    let p = simulate_path(c, &grid, &noise, i as u64)?;
                    let (e, d) = strategy.values_along(&p);
                    if e.iter().any(|v| !v.is_finite()) {
                        return domain(format!("path {i} leaves the lattice"));
                    }
                    let z = strategy.z_along(&p, &e, &d)?;
                    let mut kk = vec![0.0; n + 1];
                    let mut gains = 0.0;
                    let a = &mut acc.0;
                    let mut dec = 0.0f64;
                    for k in 0..n {
                        let db = p.b(k + 1) - p.b(k);
                        kk[k + 1] = kk[k] + e[k] - e[k + 1] + z[k] * db;
                        gains += z[k] * db;
                        let bin = bins.index(k, p.b(k));
                        a.dk[bin].push(kk[k + 1] - kk[k]);
                        a.de[bin].push(e[k + 1] - e[k]);
                        dec = dec.max(kk[k] - kk[k + 1]);
                        a.z_sq += z[k] * z[k];
                        a.z_n += 1;
                        let budget = (e[k + 1] - (e[0] + gains - kk[k + 1])).abs();
                        a.budget_err = a.budget_err.max(budget);
                    }
                    a.term_err = a.term_err.max((e[n] - strategy.payoff.eval(p.b(n))).abs());
                    a.max_dec = a.max_dec.max(dec);
                    if dec > tol {
                        a.dec_paths += 1;
                    }
                    a.k_t.push(kk[n]);
                    for (r, node) in rem_nodes.iter().enumerate() {
                        a.rem[r].push(kk[n] - kk[*node]);
                    }
                    let series = p.series();
                    for (si, (_, st)) in stops.iter().enumerate() {
                        let s = st.along(&series);
                        for (pi, pw) in CLASS_D_POWERS.iter().enumerate() {
                            a.stops[si * CLASS_D_POWERS.len() + pi].push(e[s].abs().powf(*pw));
                        }
                    }
                    if i < cfg.keep_paths {
                        acc.2.push(PathRecord { path_id: i, b: series, e, z, k: kk });
                    }
                    Ok(())
                })();
                if let Err(err) = res {
                    acc.1 = Some(err);
                }
            },
            |a, b| {
                a.0.merge(b.0);
                if a.1.is_none() {
                    a.1 = b.1;
                }
                a.2.extend(b.2);
            },
        );
        let (acc, err, paths) = acc;
        if let Some(e) = err {
            return Err(e);
        }
        let worst = |ms: &[Moments], sign: f64| {
            ms.iter()
                .filter(|m| m.n >= MIN_BIN)
                .map(|m| {
                    let e = m.estimate();
                    e.mean + sign * 3.0 * e.se
                })
                .fold(if sign > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY }, |a, b| if sign > 0.0 { a.min(b) } else { a.max(b) })
        };
        let class_d = stops
            .iter()
            .enumerate()
            .flat_map(|(si, (label, _))| {
                CLASS_D_POWERS.iter().enumerate().map(move |(pi, p)| (si, pi, label.clone(), *p))
            })
            .map(|(si, pi, stop, p)| StopMoment { stop, p, estimate: acc.stops[si * CLASS_D_POWERS.len() + pi].estimate() })
            .collect();
        out.push(ControlDecomposition {
            control: c.label().to_string(),
            is_argmax: *is_argmax,
            k_terminal: acc.k_t.estimate(),
            k_remaining: rem_nodes.iter().zip(&acc.rem).map(|(k, m)| (grid.node(*k), m.estimate())).collect(),
            max_terminal_error: acc.term_err,
            max_budget_error: acc.budget_err,
            max_decrease: acc.max_dec,
            paths_with_decrease: acc.dec_paths,
            compensator_worst: worst(&acc.dk, 1.0),
            supermartingale_worst: worst(&acc.de, -1.0),
            class_d,
            z_mean_sq: acc.z_sq / acc.z_n.max(1) as f64,
            paths,
        });
    }
    Ok(Decomposition {
        claim: claim.label.clone(),
        source: cfg.source,
        n_paths: cfg.n_paths,
        seed: cfg.seed,
        steps: n,
        horizon: grid.horizon(),
        e0: lattice.root_value(),
        norm_x,
        moment_bounds,
        controls: out,
        strategy,
    })
}

impl Decomposition {
    pub fn control(&self, label: &str) -> Option<&ControlDecomposition> {
        self.controls.iter().find(|c| c.control == label)
    }

    pub fn argmax(&self) -> Option<&ControlDecomposition> {
        self.controls.iter().find(|c| c.is_argmax)
    }

    /// CSV of the kept paths: `control, path_id, t, B, E, Z, K`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["control", "path_id", "t", "B", "E", "Z", "K"])?;
        let dt = self.horizon / self.steps as f64;
        for c in &self.controls {
            for p in &c.paths {
                for k in 0..=self.steps {
                    let z = if k < self.steps { p.z[k].to_string() } else { String::new() };
                    w.write_record(&[
                        c.control.clone(),
                        p.path_id.to_string(),
                        (k as f64 * dt).to_string(),
                        p.b[k].to_string(),
                        p.e[k].to_string(),
                        z,
                        p.k[k].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    pub band: f64,
    pub pass: bool,
}

impl Gate {
    pub fn le(name: &str, value: f64, band: f64) -> Self {
        Self { name: name.into(), value, band, pass: value <= band }
    }
    pub fn ge(name: &str, value: f64, band: f64) -> Self {
        Self { name: name.into(), value, band, pass: value >= band }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualLine {
    pub control: String,
    pub k_terminal: Estimate,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BSDEReport {
    pub claim: String,
    pub norm_x: f64,
    pub residuals: Vec<ResidualLine>,
    pub min_residual: ResidualLine,
    /// (a) `max |E_T - X|` and the budget identity.
    pub terminal_identity: Gate,
    pub budget_identity: Gate,
    /// (b) conditional means of `dK` per bin, worst `mean + 3 SE` (must be `>= -tol`).
    pub k_monotone: Gate,
    /// Pathwise monotonicity of `K`: reported, not gated.
    pub k_pathwise: Gate,
    pub k_pathwise_fraction: f64,
    /// (c) `min over pool of E[K_T - K_t] - 3 SE` at each check time.
    pub minimality: Vec<Gate>,
    /// Supermartingale property of `E` under each control.
    pub supermartingale: Vec<Gate>,
    /// (d) `E^P|Y_sigma|^p - 3 SE` against `sup_P E^P|X|^p`.
    pub class_d: Vec<Gate>,
    pub pass: bool,
}

/// Checks the second-order BSDE properties of a decomposition.
pub fn verify_2bsde(dec: &Decomposition) -> Result<BSDEReport> {
    let Some(_) = dec.argmax() else {
        return config("decomposition pool lacks the lattice argmax control");
    };
    let grid = TimeGrid::new(dec.horizon, dec.steps)?;
    let band = MINIMALITY_BAND * dec.norm_x;
    let tol = monotonicity_tol(&grid, dec.norm_x);
    let exact_tol = 1e-9 * (1.0 + dec.norm_x);

    let residuals: Vec<ResidualLine> = dec
        .controls
        .iter()
        .map(|c| ResidualLine {
            control: c.control.clone(),
            k_terminal: c.k_terminal,
            pass: c.k_terminal.mean >= -(3.0 * c.k_terminal.se + band),
        })
        .collect();
    let min_residual = residuals.iter().min_by(|a, b| a.k_terminal.mean.total_cmp(&b.k_terminal.mean)).unwrap().clone();

    let terminal = dec.controls.iter().map(|c| c.max_terminal_error).fold(0.0, f64::max);
    let budget = dec.controls.iter().map(|c| c.max_budget_error).fold(0.0, f64::max);
    let comp = dec.controls.iter().map(|c| c.compensator_worst).fold(f64::INFINITY, f64::min);
    let pathwise = dec.controls.iter().map(|c| c.max_decrease).fold(0.0, f64::max);
    let bad_paths: usize = dec.controls.iter().map(|c| c.paths_with_decrease).sum();
    let frac = bad_paths as f64 / (dec.n_paths * dec.controls.len()) as f64;

    let minimality: Vec<Gate> = (0..MINIMALITY_TIMES.len())
        .map(|r| {
            let best = dec
                .controls
                .iter()
                .map(|c| c.k_remaining[r].1)
                .min_by(|a, b| a.mean.total_cmp(&b.mean))
                .unwrap();
            let t = dec.controls[0].k_remaining[r].0;
            Gate::le(&format!("min_P E[K_T - K_t], t = {t}"), best.mean - 3.0 * best.se, band)
        })
        .collect();
    let supermartingale: Vec<Gate> = dec
        .controls
        .iter()
        .map(|c| Gate::le(&format!("binned E[dY] - 3 SE under {}", c.control), c.supermartingale_worst, tol))
        .collect();
    let mut class_d = Vec::new();
    for c in &dec.controls {
        for m in &c.class_d {
            let bound = dec.moment_bounds.iter().find(|(p, _)| *p == m.p).map(|(_, b)| *b).unwrap_or(f64::INFINITY);
            class_d.push(Gate::le(
                &format!("E|Y_sigma|^{} under {} at {}", m.p, c.control, m.stop),
                m.estimate.mean - 3.0 * m.estimate.se,
                bound + exact_tol,
            ));
        }
    }
    let terminal_identity = Gate::le("max |E_T - X|", terminal, exact_tol);
    let budget_identity = Gate::le("max |E_t - (E_0 + int Z dB - K_t)|", budget, exact_tol);
    let k_monotone = Gate::ge("min binned E[dK] + 3 SE", comp, -tol);
    let k_pathwise = Gate::le("max one-step decrease of K", pathwise, tol);
    let pass = residuals.iter().all(|r| r.pass)
        && terminal_identity.pass
        && budget_identity.pass
        && k_monotone.pass
        && minimality.iter().all(|g: &Gate| g.pass)
        && supermartingale.iter().all(|g: &Gate| g.pass)
        && class_d.iter().all(|g| g.pass);
    Ok(BSDEReport {
        claim: dec.claim.clone(),
        norm_x: dec.norm_x,
        residuals,
        min_residual,
        terminal_identity,
        budget_identity,
        k_monotone,
        k_pathwise,
        k_pathwise_fraction: frac,
        minimality,
        supermartingale,
        class_d,
        pass,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SymmetryReport {
    pub claim: String,
    pub symmetric: bool,
    /// `E_0(X) + E_0(-X)`.
    pub gap: f64,
    /// `max over nodes of |E_t(X) + E_t(-X)|`.
    pub max_nodewise: f64,
    /// `max |K|` over pool controls when symmetric.
    pub max_abs_k: Option<f64>,
    pub k_zero: Option<bool>,
}

/// Symmetry tolerance on the lattice.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// `E(-X) = -E(X)` on the lattice; when it holds, `K` must vanish.
pub fn check_symmetry(claim: &Claim, set: &ScenarioSet, lattice: &ValueLattice, n_paths: usize, seed: u64) -> Result<SymmetryReport> {
    let neg = dp_on(&lattice.structure, &claim.payoff.negated(), "-X")?;
    let mut max_nodewise = 0.0f64;
    for (a, b) in lattice.values.iter().zip(&neg.values) {
        for (x, y) in a.iter().zip(b) {
            max_nodewise = max_nodewise.max((x + y).abs());
        }
    }
    let gap = lattice.root_value() + neg.root_value();
    let symmetric = max_nodewise <= SYMMETRY_TOL;
    let (max_abs_k, k_zero) = if symmetric && n_paths > 0 {
        let dec = extract_decomposition(claim, set, lattice, &DecomposeConfig { source: ZSource::MarkovianDelta, n_paths, seed, keep_paths: n_paths })?;
        let m = dec
            .controls
            .iter()
            .flat_map(|c| c.paths.iter().flat_map(|p| p.k.iter().map(|v| v.abs())))
            .fold(0.0f64, f64::max);
        (Some(m), Some(m <= 1e-9 * (1.0 + dec.norm_x)))
    } else {
        (None, None)
    };
    Ok(SymmetryReport { claim: claim.label.clone(), symmetric, gap, max_nodewise, max_abs_k, k_zero })
}

#[derive(Debug, Clone, Serialize)]
pub struct ZAgreement {
    pub rms: f64,
    /// `dx + sqrt(dt)` of the lattice.
    pub scale: f64,
    pub constant: f64,
}

/// RMS difference between bracket and Markovian `Z` along paths.
pub fn z_agreement(claim: &Claim, lattice: &ValueLattice, control: &VolControl, n_paths: usize, seed: u64) -> Result<ZAgreement> {
    let grid = *lattice.structure.grid();
    let noise = NoiseSource::new(seed);
    let root = lattice.root_value();
    let mut strategy = Strategy {
        source: ZSource::Bracket,
        lattice: lattice.clone(),
        payoff: claim.payoff.clone(),
        z0: 0.0,
        slopes: Arc::new(vec![]),
        bins: Bins::new(&grid, 1.0),
    };
    let paths = exec::try_map_range(n_paths, |i| simulate_path(control, &grid, &noise, i as u64))?;
    let (mut num, mut den) = (0.0, 0.0);
    for p in &paths {
        let (e, _) = strategy.values_along(p);
        num += (e[1] - root) * p.b(1);
        den += p.qv_scalar(1);
    }
    strategy.z0 = num / den;
    let (mut ss, mut cnt) = (0.0, 0usize);
    for p in &paths {
        let (e, d) = strategy.values_along(p);
        let zb = strategy.z_along(p, &e, &d)?;
        for k in 0..grid.steps() {
            ss += (zb[k] - d[k]).powi(2);
            cnt += 1;
        }
    }
    let rms = (ss / cnt as f64).sqrt();
    let scale = lattice.structure.dx() + grid.dt().sqrt();
    Ok(ZAgreement { rms, scale, constant: rms / scale })
}
