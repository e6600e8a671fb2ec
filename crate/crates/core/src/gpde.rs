//! Finite differences for the G-heat equation `-u_t - G(u_xx) = 0`, `u(T, .) = f`.
//!
//! `G(gamma) = (a_high gamma^+ - a_low gamma^-) / 2` is always evaluated in
//! this split form. The default scheme is explicit and monotone under
//! `dt * a_high <= dx^2`; the implicit scheme solves each step by policy
//! iteration over `{a_low, a_high}` with a tridiagonal solve per policy.
//!
//! Boundary nodes keep the payoff value `f(x_b)` for all times. With the
//! default half-width of six standard deviations the boundary influence at
//! the origin is far below the scheme error.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::claims::Payoff;
use crate::error::{argument, config, domain, Error, Result};
use crate::exec;
use crate::paths::TimeGrid;

/// Default half-width in units of `sqrt(a_high T)`.
pub const DEFAULT_WIDTH_SD: f64 = 6.0;
/// Default `dt a_high / dx^2` for automatic grids.
pub const DEFAULT_CFL: f64 = 0.5;
/// Stored slices per surface, at most.
pub const MAX_STORED_SLICES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GFunction {
    pub a_low: f64,
    pub a_high: f64,
}

impl GFunction {
    pub fn new(a_low: f64, a_high: f64) -> Result<Self> {
        if !(a_low.is_finite() && a_high.is_finite()) || a_low < 0.0 || a_low > a_high {
            return domain(format!("G needs 0 <= a_low <= a_high, got ({a_low}, {a_high})"));
        }
        if a_low == 0.0 {
            log::warn!("a_low = 0: the G-heat equation is degenerate");
        }
        Ok(Self { a_low, a_high })
    }

    #[inline]
    pub fn eval(&self, gamma: f64) -> f64 {
        0.5 * (self.a_high * gamma.max(0.0) - self.a_low * (-gamma).max(0.0))
    }

    /// The variance attaining the sup for curvature `gamma` (`a_high` on ties).
    #[inline]
    pub fn argmax(&self, gamma: f64) -> f64 {
        if gamma >= 0.0 {
            self.a_high
        } else {
            self.a_low
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Explicit,
    ImplicitSplitting,
}

/// Space-time mesh. Nodes are `x_i = x_min + i dx`, `i = 0..nx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PDEGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub time: TimeGrid,
    pub scheme: Scheme,
}

impl PDEGrid {
    pub fn new(x_min: f64, x_max: f64, nx: usize, time: TimeGrid, scheme: Scheme) -> Result<Self> {
        if !(x_min < 0.0 && 0.0 < x_max) {
            return config(format!("PDE grid needs x_min < 0 < x_max, got [{x_min}, {x_max}]"));
        }
        if nx < 3 {
            return config("PDE grid needs at least 3 spatial nodes");
        }
        Ok(Self { x_min, x_max, nx, time, scheme })
    }

    /// Symmetric grid with `x = 0` (and every multiple of `dx`) on a node.
    pub fn centered(half_width: f64, dx: f64, time: TimeGrid, scheme: Scheme) -> Result<Self> {
        if !(dx > 0.0 && half_width > dx) {
            return config(format!("need 0 < dx < half_width, got dx = {dx}, half_width = {half_width}"));
        }
        let m = (half_width / dx).ceil() as usize;
        Self::new(-(m as f64) * dx, m as f64 * dx, 2 * m + 1, time, scheme)
    }

    /// Explicit grid for horizon `T` and spacing `dx`: the default
    /// half-width and the number of steps that gives `dt a_high / dx^2`
    /// at most [`DEFAULT_CFL`].
    pub fn auto(g: &GFunction, horizon: f64, dx: f64) -> Result<Self> {
        let steps = ((g.a_high * horizon) / (DEFAULT_CFL * dx * dx)).ceil().max(1.0) as usize;
        let time = TimeGrid::new(horizon, steps)?;
        let half = DEFAULT_WIDTH_SD * (g.a_high * horizon).sqrt().max(dx);
        Self::centered(half, dx, time, Scheme::Explicit)
    }

    /// Explicit grid on a given time grid, `dx` chosen from [`DEFAULT_CFL`].
    pub fn auto_for_time(g: &GFunction, time: TimeGrid) -> Result<Self> {
        let dx = (g.a_high.max(1e-300) * time.dt() / DEFAULT_CFL).sqrt();
        let half = DEFAULT_WIDTH_SD * (g.a_high * time.horizon()).sqrt().max(dx);
        Self::centered(half, dx, time, Scheme::Explicit)
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    /// `dt a_high / dx^2`.
    pub fn cfl(&self, g: &GFunction) -> f64 {
        self.time.dt() * g.a_high / (self.dx() * self.dx())
    }

    pub fn check(&self, g: &GFunction) -> Result<()> {
        if self.scheme == Scheme::Explicit && self.cfl(g) > 1.0 + 1e-12 {
            return config(format!(
                "explicit scheme violates dt <= dx^2 / a_high: dt = {}, dx^2 / a_high = {}",
                self.time.dt(),
                self.dx() * self.dx() / g.a_high
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryRecord {
    pub kind: &'static str,
    pub left: f64,
    pub right: f64,
}

/// `u(t_k, x_i)` on a subset of time nodes (every `stride`-th plus `N`).
#[derive(Debug, Clone)]
pub struct ValueSurface {
    pub grid: PDEGrid,
    pub g: GFunction,
    times: Vec<usize>,
    u: Vec<f64>,
    pub boundary: BoundaryRecord,
}

impl ValueSurface {
    /// Stored time-node indices, increasing.
    pub fn times(&self) -> &[usize] {
        &self.times
    }

    /// Slice at the `j`-th stored time.
    pub fn slice(&self, j: usize) -> &[f64] {
        let nx = self.grid.nx;
        &self.u[j * nx..(j + 1) * nx]
    }

    /// Slice at time node `k`, if stored.
    pub fn slice_at_node(&self, k: usize) -> Option<&[f64]> {
        self.times.binary_search(&k).ok().map(|j| self.slice(j))
    }

    pub fn at(&self, j: usize, i: usize) -> f64 {
        self.u[j * self.grid.nx + i]
    }

    /// Quadratic interpolation in `x` at stored time `j`.
    pub fn value_at(&self, j: usize, x: f64) -> f64 {
        interp_quadratic(self.slice(j), self.grid.x_min, self.grid.dx(), x)
    }

    /// `u(0, 0)`.
    pub fn root(&self) -> f64 {
        self.value_at(0, 0.0)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let z = extract_delta(self);
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "u", "Z"])?;
        let nx = self.grid.nx;
        for (j, k) in self.times.iter().enumerate() {
            let t = self.grid.time.node(*k);
            for i in 0..nx {
                w.write_record(&[t.to_string(), self.grid.x(i).to_string(), self.at(j, i).to_string(), z[j * nx + i].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn interp_quadratic(v: &[f64], x0: f64, dx: f64, x: f64) -> f64 {
    let n = v.len();
    let s = (x - x0) / dx;
    let c = (s.round() as isize).clamp(1, n as isize - 2) as usize;
    let r = s - c as f64;
    let (a, b, d) = (v[c - 1], v[c], v[c + 1]);
    b + 0.5 * r * (d - a) + 0.5 * r * r * (d - 2.0 * b + a)
}

/// Backward sweep over `steps` time steps, in place. `scratch` must have
/// the same length as `u`.
fn sweep_explicit(g: &GFunction, u: &mut [f64], scratch: &mut [f64], dt: f64, dx: f64) {
    let lam = dt / (dx * dx);
    let n = u.len();
    scratch[0] = u[0];
    scratch[n - 1] = u[n - 1];
    for i in 1..n - 1 {
        let gamma = u[i + 1] - 2.0 * u[i] + u[i - 1];
        scratch[i] = u[i] + lam * g.eval(gamma);
    }
    u.copy_from_slice(scratch);
}

/// One implicit step by policy iteration: solve
/// `u_i - dt/2 a_i D2 u_i = prev_i` with `a_i` the argmax of the current iterate.
fn step_implicit(g: &GFunction, u: &mut [f64], prev: &[f64], dt: f64, dx: f64, work: &mut ImplicitWork) {
    let n = u.len();
    let lam = 0.5 * dt / (dx * dx);
    work.policy.clear();
    work.policy.extend((0..n).map(|i| {
        if i == 0 || i == n - 1 {
            0.0
        } else {
            g.argmax(prev[i + 1] - 2.0 * prev[i] + prev[i - 1])
        }
    }));
    u.copy_from_slice(prev);
    for _ in 0..64 {
        // Tridiagonal system with Dirichlet end rows.
        let (a, b, c, d) = (&mut work.a, &mut work.b, &mut work.c, &mut work.d);
        a.resize(n, 0.0);
        b.resize(n, 0.0);
        c.resize(n, 0.0);
        d.resize(n, 0.0);
        for i in 0..n {
            if i == 0 || i == n - 1 {
                a[i] = 0.0;
                b[i] = 1.0;
                c[i] = 0.0;
            } else {
                let w = lam * work.policy[i];
                a[i] = -w;
                b[i] = 1.0 + 2.0 * w;
                c[i] = -w;
            }
            d[i] = prev[i];
        }
        thomas(a, b, c, d, u);
        let mut changed = false;
        for i in 1..n - 1 {
            let p = g.argmax(u[i + 1] - 2.0 * u[i] + u[i - 1]);
            if p != work.policy[i] {
                work.policy[i] = p;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

#[derive(Default)]
struct ImplicitWork {
    policy: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &mut [f64], x: &mut [f64]) {
    let n = b.len();
    let mut cp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    d[0] /= b[0];
    for i in 1..n {
        let m = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / m;
        d[i] = (d[i] - a[i] * d[i - 1]) / m;
    }
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - cp[i] * x[i + 1];
    }
}

/// Marches `u` backward from node `from` to node `to < from`, calling
/// `store(k, u)` at every node visited (including `from`).
fn march(g: &GFunction, grid: &PDEGrid, u: &mut [f64], from: usize, to: usize, mut store: impl FnMut(usize, &[f64])) {
    let dt = grid.time.dt();
    let dx = grid.dx();
    let mut scratch = vec![0.0; u.len()];
    let mut work = ImplicitWork::default();
    store(from, u);
    for k in (to..from).rev() {
        match grid.scheme {
            Scheme::Explicit => sweep_explicit(g, u, &mut scratch, dt, dx),
            Scheme::ImplicitSplitting => {
                scratch.copy_from_slice(u);
                step_implicit(g, u, &scratch, dt, dx, &mut work);
            }
        }
        store(k, u);
    }
}

/// Solves from terminal node values.
pub fn solve_from_terminal(g: &GFunction, terminal: Vec<f64>, grid: &PDEGrid) -> Result<ValueSurface> {
    grid.check(g)?;
    if terminal.len() != grid.nx {
        return argument(format!("terminal data has {} values for {} nodes", terminal.len(), grid.nx));
    }
    if let Some(i) = terminal.iter().position(|v| !v.is_finite()) {
        return domain(format!("terminal value at x = {} is not finite", grid.x(i)));
    }
    let n = grid.time.steps();
    let stride = n.div_ceil(MAX_STORED_SLICES).max(1);
    let boundary = BoundaryRecord { kind: "dirichlet_payoff", left: terminal[0], right: terminal[grid.nx - 1] };
    let mut u = terminal;
    let mut stored: Vec<(usize, Vec<f64>)> = Vec::new();
    march(g, grid, &mut u, n, 0, |k, v| {
        if k % stride == 0 || k == n {
            stored.push((k, v.to_vec()));
        }
    });
    stored.reverse();
    let times = stored.iter().map(|(k, _)| *k).collect();
    let u = stored.into_iter().flat_map(|(_, v)| v).collect();
    Ok(ValueSurface { grid: *grid, g: *g, times, u, boundary })
}

/// Solves the G-heat equation for terminal payoff `f`.
pub fn solve_g_pde(g: &GFunction, f: &Payoff, grid: &PDEGrid) -> Result<ValueSurface> {
    f.validate()?;
    if f.growth() > crate::claims::GrowthClass::Linear {
        log::debug!("payoff {} grows faster than linearly; relying on the truncated domain", f.describe());
    }
    let terminal = f.sample_on_mesh(&grid.xs(), grid.dx())?;
    solve_from_terminal(g, terminal, grid)
}

/// Spatial derivative: central differences inside, one-sided at the ends.
/// Same layout as the surface (stored time slices, row-major).
pub fn extract_delta(surface: &ValueSurface) -> Vec<f64> {
    let nx = surface.grid.nx;
    let dx = surface.grid.dx();
    let mut z = Vec::with_capacity(surface.u.len());
    for j in 0..surface.times.len() {
        let s = surface.slice(j);
        z.push((s[1] - s[0]) / dx);
        for i in 1..nx - 1 {
            z.push((s[i + 1] - s[i - 1]) / (2.0 * dx));
        }
        z.push((s[nx - 1] - s[nx - 2]) / dx);
    }
    z
}

/// Upper bound on spatial-node updates for [`solve_multitime`].
pub const MULTITIME_BUDGET: f64 = 4e9;

/// `E_0[f(B_{t_1}, ..., B_{t_n})]` by stepwise evaluation: on each
/// monitoring interval the PDE is solved per fixed tuple of earlier
/// monitored values, and the result is read at the last monitored value.
pub fn solve_multitime<F>(g: &GFunction, f: F, dates: &[f64], grid: &PDEGrid) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    grid.check(g)?;
    let n = dates.len();
    if n == 0 || n > 4 {
        return argument(format!("stepwise evaluation supports 1..=4 monitoring dates, got {n}"));
    }
    let idx = dates
        .iter()
        .map(|t| grid.time.index_of(*t).ok_or_else(|| Error::Argument(format!("monitoring date {t} is not on the time grid"))))
        .collect::<Result<Vec<_>>>()?;
    if idx.windows(2).any(|w| w[1] <= w[0]) || idx[0] == 0 || idx[n - 1] != grid.time.steps() {
        return argument("monitoring dates must increase strictly, start after 0 and end at T");
    }
    let nx = grid.nx;
    let work = (0..n).map(|j| (nx as f64).powi(j as i32 + 1) * (idx[j] - if j == 0 { 0 } else { idx[j - 1] }) as f64).sum::<f64>();
    if work > MULTITIME_BUDGET {
        return Err(Error::Resource(format!(
            "stepwise evaluation needs about {work:.2e} node updates (budget {MULTITIME_BUDGET:.0e}); use fewer spatial nodes or dates"
        )));
    }
    let xs = grid.xs();
    // values[tuple of n-1 indices] after each stage, flattened.
    let mut values: Vec<f64> = Vec::new();
    for j in (0..n).rev() {
        // Stage j: for each tuple (i_0..i_{j-1}), solve on [t_{j-1}, t_j]
        // with terminal data indexed by the stage-j variable.
        let tuples = nx.pow(j as u32);
        let from = idx[j];
        let to = if j == 0 { 0 } else { idx[j - 1] };
        let next = exec::try_map_range(tuples, |t| -> Result<f64> {
            let mut prefix = vec![0.0; n];
            let mut r = t;
            for p in (0..j).rev() {
                prefix[p] = xs[r % nx];
                r /= nx;
            }
            let mut u: Vec<f64> = if j == n - 1 {
                (0..nx)
                    .map(|i| {
                        prefix[j] = xs[i];
                        f(&prefix)
                    })
                    .collect()
            } else {
                values[t * nx..(t + 1) * nx].to_vec()
            };
            if let Some(i) = u.iter().position(|v| !v.is_finite()) {
                return domain(format!("payoff is not finite at node {i}"));
            }
            march(g, grid, &mut u, from, to, |_, _| {});
            let at = if j == 0 { 0.0 } else { prefix[j - 1] };
            Ok(interp_quadratic(&u, grid.x_min, grid.dx(), at))
        })?;
        values = next;
    }
    Ok(values[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g14() -> GFunction {
        GFunction::new(1.0, 4.0).unwrap()
    }

    #[test]
    fn g_split_form() {
        let g = g14();
        assert_eq!(g.eval(2.0), 4.0);
        assert_eq!(g.eval(-2.0), -1.0);
        assert_eq!(g.eval(0.0), 0.0);
        assert!(GFunction::new(2.0, 1.0).is_err());
    }

    #[test]
    fn squares_closed_forms() {
        let g = g14();
        let grid = PDEGrid::auto(&g, 1.0, 0.05).unwrap();
        let up = solve_g_pde(&g, &Payoff::square(), &grid).unwrap();
        let dn = solve_g_pde(&g, &Payoff::NegSquare, &grid).unwrap();
        assert!((up.root() - 4.0).abs() < 1e-3, "{}", up.root());
        assert!((dn.root() + 1.0).abs() < 1e-3, "{}", dn.root());
    }

    #[test]
    fn linear_is_harmonic() {
        let g = g14();
        let grid = PDEGrid::auto(&g, 1.0, 0.1).unwrap();
        let s = solve_g_pde(&g, &Payoff::linear(1.0, 0.0), &grid).unwrap();
        for j in 0..s.times().len() {
            for i in 0..grid.nx {
                assert!((s.at(j, i) - grid.x(i)).abs() < 1e-12);
            }
        }
        let z = extract_delta(&s);
        assert!(z.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn cfl_violation_is_config_error() {
        let g = g14();
        let t = TimeGrid::new(1.0, 10).unwrap();
        let grid = PDEGrid::centered(12.0, 0.05, t, Scheme::Explicit).unwrap();
        assert!(matches!(solve_g_pde(&g, &Payoff::square(), &grid), Err(Error::Config(_))));
        // Implicit has no step restriction.
        let s = solve_g_pde(&g, &Payoff::square(), &grid.with_scheme(Scheme::ImplicitSplitting)).unwrap();
        assert!((s.root() - 4.0).abs() < 1e-6);
    }

    #[test]
    fn implicit_matches_explicit_on_call() {
        let g = g14();
        let grid = PDEGrid::auto(&g, 1.0, 0.05).unwrap();
        let e = solve_g_pde(&g, &Payoff::Call { strike: 0.0 }, &grid).unwrap().root();
        let i = solve_g_pde(&g, &Payoff::Call { strike: 0.0 }, &grid.with_scheme(Scheme::ImplicitSplitting)).unwrap().root();
        let exact = (4.0 / (2.0 * std::f64::consts::PI)).sqrt();
        assert!((e - exact).abs() < 2e-3 && (i - exact).abs() < 2e-3, "{e} {i} {exact}");
    }

    #[test]
    fn delta_of_square_degenerate() {
        let g = GFunction::new(1.0, 1.0).unwrap();
        let grid = PDEGrid::centered(12.0, 0.05, TimeGrid::new(1.0, 1000).unwrap(), Scheme::Explicit).unwrap();
        let s = solve_g_pde(&g, &Payoff::square(), &grid).unwrap();
        let z = extract_delta(&s);
        let nx = grid.nx;
        for j in 0..s.times().len() {
            // away from the frozen boundary
            for i in (1..nx - 1).filter(|i| grid.x(*i).abs() <= 2.0) {
                assert!((z[j * nx + i] - 2.0 * grid.x(i)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn non_finite_terminal_rejected() {
        let g = g14();
        let grid = PDEGrid::auto(&g, 1.0, 0.5).unwrap();
        let mut v = vec![0.0; grid.nx];
        v[3] = f64::NAN;
        assert!(matches!(solve_from_terminal(&g, v, &grid), Err(Error::Domain(_))));
    }

    #[test]
    fn multitime_examples() {
        let g = g14();
        let grid = PDEGrid::auto(&g, 1.0, 0.1).unwrap();
        let sq = solve_multitime(&g, |x: &[f64]| (x[1] - x[0]).powi(2), &[0.5, 1.0], &grid).unwrap();
        assert!((sq - 2.0).abs() < 1e-3, "{sq}");
        let inc = solve_multitime(&g, |x: &[f64]| x[1] - x[0], &[0.5, 1.0], &grid).unwrap();
        assert!(inc.abs() < 1e-9);
        let one = solve_multitime(&g, |x: &[f64]| x[0] * x[0], &[1.0], &grid).unwrap();
        let direct = solve_g_pde(&g, &Payoff::square(), &grid).unwrap().root();
        assert!((one - direct).abs() < 1e-12);
        assert!(solve_multitime(&g, |x: &[f64]| x[0], &[0.3333, 1.0], &grid).is_err());
    }

    #[test]
    fn surface_csv_has_header() {
        let g = g14();
        let grid = PDEGrid::auto(&g, 1.0, 0.5).unwrap();
        let s = solve_g_pde(&g, &Payoff::square(), &grid).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x,u,Z\n"));
        assert_eq!(text.lines().count(), 1 + s.times().len() * grid.nx);
    }
}
