//! Lattice dynamic programming for the worst-case conditional expectation.
//!
//! The state mesh is `x_i = i dx` with `dx = lambda sqrt(a_max dt)`,
//! `lambda >= 1`. One step under local variance `a` is trinomial with
//! `p_up = p_down = a dt / (2 dx^2)`, which has mean 0 and variance `a dt`
//! exactly. The value of a step is affine in `a`, so the supremum over the
//! bound interval is attained at an endpoint: `a_high` when the discrete
//! curvature is non-negative, `a_low` otherwise. Every step also evaluates
//! the `control_mesh` interior points and records the largest excess over
//! the endpoint choice, which must be zero.
//!
//! When the bounds carry state (for example a latch on `|B|`) the lattice
//! nodes are pairs `(i, signature)`, the signature being the interned rule
//! state. Recombining rules keep the lattice polynomial; non-recombining
//! ones are limited to short horizons.
//!
//! Slice `k` spans `i` in `[-(k+P), k+P]` with `P` padding nodes, so that
//! paths leaving the reachable cone can still be interpolated.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::claims::{Claim, Payoff};
use crate::error::{argument, domain, Error, Result};
use crate::exec;
use crate::mc::{terminal_values, Estimate};
use crate::paths::{NoiseSource, TimeGrid};
use crate::scenarios::{ExternalRule, Rule, ScenarioSet, Stopping, VolControl};

/// Longest horizon for non-recombining bounds.
pub const MAX_TREE_STEPS: usize = 20;
/// Tolerance of the exact lattice checks.
pub const LATTICE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfig {
    /// `dx / sqrt(a_max dt)`, at least 1.
    pub lambda: f64,
    pub padding: usize,
    pub node_budget: usize,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self { lambda: 1.0, padding: 16, node_budget: 5_000_000 }
    }
}

/// Verification outcome in the common JSON shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub max_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn new(check: impl Into<String>, max_violation: f64, tolerance: f64) -> Self {
        Self { check: check.into(), max_violation, tolerance, pass: max_violation <= tolerance }
    }
}

#[derive(Debug)]
struct Slice {
    i_min: i64,
    /// Nodes ordered by `i` with a single signature.
    dense: bool,
    node_i: Vec<i64>,
    node_sig: Vec<u32>,
    /// Children `(i-1, i, i+1)` in the next slice; empty for slice `N`.
    children: Vec<[u32; 3]>,
    lookup: HashMap<(i64, u32), u32>,
    sigs: Vec<Vec<f64>>,
    sig_lookup: HashMap<Vec<u64>, u32>,
}

impl Slice {
    fn len(&self) -> usize {
        self.node_i.len()
    }

    fn node(&self, i: i64, sig: u32) -> Option<usize> {
        if self.dense {
            if sig != 0 || i < self.i_min || i >= self.i_min + self.len() as i64 {
                None
            } else {
                Some((i - self.i_min) as usize)
            }
        } else {
            self.lookup.get(&(i, sig)).map(|n| *n as usize)
        }
    }

    fn sig_of(&self, state: &[f64]) -> Option<u32> {
        if self.dense {
            return Some(0);
        }
        self.sig_lookup.get(&bits(state)).copied()
    }

    fn intern(&mut self, state: Vec<f64>) -> u32 {
        let key = bits(&state);
        if let Some(s) = self.sig_lookup.get(&key) {
            return *s;
        }
        let id = self.sigs.len() as u32;
        self.sigs.push(state);
        self.sig_lookup.insert(key, id);
        id
    }

    fn insert(&mut self, i: i64, sig: u32) -> u32 {
        if let Some(n) = self.lookup.get(&(i, sig)) {
            return *n;
        }
        let id = self.node_i.len() as u32;
        self.node_i.push(i);
        self.node_sig.push(sig);
        self.lookup.insert((i, sig), id);
        id
    }

    fn empty() -> Self {
        Self {
            i_min: 0,
            dense: false,
            node_i: vec![],
            node_sig: vec![],
            children: vec![],
            lookup: HashMap::new(),
            sigs: vec![],
            sig_lookup: HashMap::new(),
        }
    }
}

fn bits(s: &[f64]) -> Vec<u64> {
    s.iter().map(|v| v.to_bits()).collect()
}

/// Node structure shared by every value computed on one scenario set.
#[derive(Debug)]
pub struct Structure {
    grid: TimeGrid,
    dx: f64,
    padding: usize,
    low: Rule,
    high: Rule,
    low_len: usize,
    high_len: usize,
    control_mesh: usize,
    slices: Vec<Slice>,
}

impl Structure {
    pub fn build(set: &ScenarioSet, cfg: &LatticeConfig) -> Result<Self> {
        if !(cfg.lambda >= 1.0) {
            return argument(format!("lattice needs lambda >= 1 (mesh condition dx^2 >= a_high dt), got {}", cfg.lambda));
        }
        let grid = *set.grid();
        let n = grid.steps();
        let a_max = set.global_bounds().1;
        let dx = cfg.lambda * (a_max * grid.dt()).sqrt();
        let low = set.low().clone();
        let high = set.high().clone();
        let low_len = low.state_len(n);
        let high_len = high.state_len(n);
        let recombining = low.recombining() && high.recombining();
        if !recombining && n > MAX_TREE_STEPS {
            return Err(Error::Resource(format!(
                "bounds are not recombining and need a prefix tree; N = {n} exceeds {MAX_TREE_STEPS} steps. \
                 Use a rule with a finite state or a coarser time grid"
            )));
        }
        let padding = if recombining { cfg.padding } else { 0 };
        let mut s = Self { grid, dx, padding, low, high, low_len, high_len, control_mesh: set.control_mesh(), slices: vec![] };
        if low_len + high_len == 0 {
            s.build_dense(cfg)?;
        } else {
            s.build_signed(cfg)?;
        }
        Ok(s)
    }

    fn half_width(&self, k: usize) -> i64 {
        (k + self.padding) as i64
    }

    fn build_dense(&mut self, cfg: &LatticeConfig) -> Result<()> {
        let n = self.grid.steps();
        let total: usize = (0..=n).map(|k| 2 * (k + self.padding) + 1).sum();
        if total > cfg.node_budget {
            return Err(Error::Resource(format!("lattice needs {total} nodes, budget is {}", cfg.node_budget)));
        }
        for k in 0..=n {
            let w = self.half_width(k);
            let len = (2 * w + 1) as usize;
            let children = if k < n { (0..len as u32).map(|j| [j, j + 1, j + 2]).collect() } else { vec![] };
            let mut sl = Slice::empty();
            sl.i_min = -w;
            sl.dense = true;
            sl.node_i = (-w..=w).collect();
            sl.node_sig = vec![0; len];
            sl.children = children;
            sl.sigs = vec![vec![]];
            self.slices.push(sl);
        }
        Ok(())
    }

    fn build_signed(&mut self, cfg: &LatticeConfig) -> Result<()> {
        let n = self.grid.steps();
        let (ll, hl) = (self.low_len, self.high_len);
        let mut first = Slice::empty();
        let p = self.padding as i64;
        for i in -p..=p {
            let x = i as f64 * self.dx;
            let mut st = vec![0.0; ll + hl];
            self.low.init(x, &mut st[..ll], n);
            self.high.init(x, &mut st[ll..], n);
            let sig = first.intern(st);
            first.insert(i, sig);
        }
        self.slices.push(first);
        let mut total = self.slices[0].len();
        for k in 0..n {
            let mut next = Slice::empty();
            let cur = &self.slices[k];
            let mut children = Vec::with_capacity(cur.len());
            for nd in 0..cur.len() {
                let i = cur.node_i[nd];
                let st = &cur.sigs[cur.node_sig[nd] as usize];
                let mut kids = [0u32; 3];
                for (c, di) in [-1i64, 0, 1].into_iter().enumerate() {
                    let x = (i + di) as f64 * self.dx;
                    let mut s2 = st.clone();
                    self.low.advance(k + 1, x, &mut s2[..ll], n);
                    self.high.advance(k + 1, x, &mut s2[ll..], n);
                    let sig = next.intern(s2);
                    kids[c] = next.insert(i + di, sig);
                }
                children.push(kids);
            }
            total += next.len();
            if total > cfg.node_budget {
                return Err(Error::Resource(format!(
                    "lattice exceeds the node budget of {} at step {}; the bound rules have too many states",
                    cfg.node_budget,
                    k + 1
                )));
            }
            self.slices[k].children = children;
            self.slices.push(next);
        }
        Ok(())
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn slice_len(&self, k: usize) -> usize {
        self.slices[k].len()
    }

    pub fn node_count(&self) -> usize {
        self.slices.iter().map(|s| s.len()).sum()
    }

    /// `(i, signature)` of node `n` in slice `k`.
    pub fn node(&self, k: usize, n: usize) -> (i64, u32) {
        (self.slices[k].node_i[n], self.slices[k].node_sig[n])
    }

    pub fn x(&self, k: usize, n: usize) -> f64 {
        self.slices[k].node_i[n] as f64 * self.dx
    }

    pub fn find(&self, k: usize, i: i64, sig: u32) -> Option<usize> {
        self.slices[k].node(i, sig)
    }

    pub fn children(&self, k: usize, n: usize) -> [u32; 3] {
        self.slices[k].children[n]
    }

    /// Root node: `i = 0` with the initial rule state.
    pub fn root(&self) -> usize {
        let st = self.initial_state(0.0);
        let sig = self.slices[0].sig_of(&st).expect("root signature");
        self.find(0, 0, sig).expect("root node")
    }

    fn initial_state(&self, x0: f64) -> Vec<f64> {
        let n = self.grid.steps();
        let mut st = vec![0.0; self.low_len + self.high_len];
        self.low.init(x0, &mut st[..self.low_len], n);
        self.high.init(x0, &mut st[self.low_len..], n);
        st
    }

    /// `(a_low, a_high)` at node `n` of slice `k`.
    pub fn bounds(&self, k: usize, n: usize) -> (f64, f64) {
        let sl = &self.slices[k];
        let x = sl.node_i[n] as f64 * self.dx;
        let st = &sl.sigs[sl.node_sig[n] as usize];
        let steps = self.grid.steps();
        (
            self.low.eval(k, x, &st[..self.low_len], steps),
            self.high.eval(k, x, &st[self.low_len..], steps),
        )
    }

    fn coef(&self) -> f64 {
        self.grid.dt() / (2.0 * self.dx * self.dx)
    }

    /// One backward step of the G-recursion from `next` (slice `k+1`).
    /// Returns values, argmax and the largest control-mesh excess.
    fn step(&self, k: usize, next: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let c = self.coef();
        let m = self.control_mesh.max(2);
        let out = exec::map_range(self.slices[k].len(), |nd| {
            let [a, b, d] = self.slices[k].children[nd];
            let (um, u0, up) = (next[a as usize], next[b as usize], next[d as usize]);
            let gamma = up + um - 2.0 * u0;
            let (lo, hi) = self.bounds(k, nd);
            let arg = if gamma >= 0.0 { hi } else { lo };
            let v = u0 + arg * c * gamma;
            let mut excess = 0.0f64;
            for j in 1..m - 1 {
                let am = lo + (hi - lo) * j as f64 / (m - 1) as f64;
                excess = excess.max(u0 + am * c * gamma - v);
            }
            (v, arg, excess)
        });
        let mut vals = Vec::with_capacity(out.len());
        let mut args = Vec::with_capacity(out.len());
        let mut ex = 0.0f64;
        for (v, a, e) in out {
            vals.push(v);
            args.push(a);
            ex = ex.max(e);
        }
        (vals, args, ex)
    }

    /// Linear step under the fixed fraction `theta` of each node's interval.
    fn step_linear(&self, k: usize, next: &[f64], theta: f64) -> Vec<f64> {
        let c = self.coef();
        (0..self.slices[k].len())
            .map(|nd| {
                let [a, b, d] = self.slices[k].children[nd];
                let (um, u0, up) = (next[a as usize], next[b as usize], next[d as usize]);
                let (lo, hi) = self.bounds(k, nd);
                u0 + (lo + theta * (hi - lo)) * c * (up + um - 2.0 * u0)
            })
            .collect()
    }

    /// Runs the G-recursion from `data` at slice `t` down to slice `s`.
    /// Entry `j` of the result is slice `s + j`.
    pub fn recurse(&self, data: Vec<f64>, t: usize, s: usize) -> Vec<Vec<f64>> {
        let mut out = vec![data];
        for k in (s..t).rev() {
            let (v, _, _) = self.step(k, out.last().unwrap());
            out.push(v);
        }
        out.reverse();
        out
    }

    /// Terminal node values of a payoff on slice `N`.
    pub fn terminal(&self, f: &Payoff) -> Result<Vec<f64>> {
        let n = self.grid.steps();
        let xs: Vec<f64> = self.slices[n].node_i.iter().map(|i| *i as f64 * self.dx).collect();
        if self.slices[n].dense {
            f.sample_on_mesh(&xs, self.dx)
        } else {
            // Nodes repeat per signature; sample the distinct x once.
            let mut cache: HashMap<i64, f64> = HashMap::new();
            let i_min = *self.slices[n].node_i.iter().min().unwrap();
            let i_max = *self.slices[n].node_i.iter().max().unwrap();
            let mesh: Vec<f64> = (i_min..=i_max).map(|i| i as f64 * self.dx).collect();
            let vals = f.sample_on_mesh(&mesh, self.dx)?;
            for (j, i) in (i_min..=i_max).enumerate() {
                cache.insert(i, vals[j]);
            }
            Ok(self.slices[n].node_i.iter().map(|i| cache[i]).collect())
        }
    }

    /// Signature of a rule state at slice `k`, if the lattice has it.
    pub fn signature(&self, k: usize, state: &[f64]) -> Option<u32> {
        self.slices[k].sig_of(state)
    }

    /// Quadratic interpolation of slice values at `x` among nodes with
    /// signature `sig`. Returns `(value, derivative)`.
    pub fn interpolate(&self, k: usize, values: &[f64], x: f64, sig: u32) -> Option<(f64, f64)> {
        let dx = self.dx;
        let c = (x / dx).round() as i64;
        let sl = &self.slices[k];
        for centre in [c, c - 1, c + 1] {
            if let (Some(a), Some(b), Some(d)) = (sl.node(centre - 1, sig), sl.node(centre, sig), sl.node(centre + 1, sig)) {
                let r = x / dx - centre as f64;
                let (a, b, d) = (values[a], values[b], values[d]);
                let v = b + 0.5 * r * (d - a) + 0.5 * r * r * (d - 2.0 * b + a);
                let z = ((d - a) * 0.5 + r * (d - 2.0 * b + a)) / dx;
                return Some((v, z));
            }
        }
        // Sparse region: nearest node with that signature.
        for off in 0..=(2 * self.half_width(k)) {
            for i in [c - off, c + off] {
                if let Some(nd) = sl.node(i, sig) {
                    return Some((values[nd], 0.0));
                }
            }
        }
        None
    }

    /// Tracks the bound-rule state along a path.
    pub fn cursor(&self, x0: f64) -> Cursor<'_> {
        Cursor { s: self, state: self.initial_state(x0) }
    }
}

pub struct Cursor<'a> {
    s: &'a Structure,
    state: Vec<f64>,
}

impl Cursor<'_> {
    pub fn advance(&mut self, k: usize, x: f64) {
        let s = self.s;
        let n = s.grid.steps();
        s.low.advance(k, x, &mut self.state[..s.low_len], n);
        s.high.advance(k, x, &mut self.state[s.low_len..], n);
    }

    pub fn signature(&self, k: usize) -> Option<u32> {
        self.s.signature(k, &self.state)
    }
}

/// `E_{t_k}(X)` on every lattice node, with the argmax control.
#[derive(Debug, Clone)]
pub struct ValueLattice {
    pub structure: Arc<Structure>,
    pub values: Vec<Vec<f64>>,
    pub argmax: Arc<Vec<Vec<f64>>>,
    /// Largest gain of an interior control-mesh value over the endpoint choice.
    pub mesh_excess: f64,
    pub label: String,
}

impl ValueLattice {
    pub fn root_value(&self) -> f64 {
        self.values[0][self.structure.root()]
    }

    pub fn steps(&self) -> usize {
        self.structure.grid.steps()
    }

    /// Value and spatial derivative at `(t_k, x)` for the bound signature `sig`.
    pub fn value_along(&self, k: usize, x: f64, sig: u32) -> Option<(f64, f64)> {
        self.structure.interpolate(k, &self.values[k], x, sig)
    }

    /// Every recorded argmax lies in `{a_low, a_high}` of its node.
    pub fn argmax_at_endpoints(&self) -> bool {
        let s = &self.structure;
        (0..self.steps()).all(|k| {
            (0..s.slice_len(k)).all(|n| {
                let (lo, hi) = s.bounds(k, n);
                let a = self.argmax[k][n];
                a == lo || a == hi
            })
        })
    }

    /// The argmax control realized as an adapted rule on paths.
    pub fn argmax_control(&self) -> Result<VolControl> {
        let s = &self.structure;
        let range = (s.low.range().0, s.high.range().1);
        let rule = ArgmaxRule { structure: self.structure.clone(), argmax: self.argmax.clone(), range, label: format!("argmax[{}]", self.label) };
        VolControl::new(rule.label.clone(), &s.grid, Rule::External(Arc::new(rule)))
    }

    /// CSV: `t, x_index, value, argmax, signature`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let s = &self.structure;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x_index", "value", "argmax", "signature"])?;
        for k in 0..=self.steps() {
            let t = s.grid.node(k);
            for n in 0..s.slice_len(k) {
                let (i, sig) = s.node(k, n);
                let a = if k < self.steps() { self.argmax[k][n].to_string() } else { String::new() };
                w.write_record(&[t.to_string(), i.to_string(), self.values[k][n].to_string(), a, sig.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug)]
struct ArgmaxRule {
    structure: Arc<Structure>,
    argmax: Arc<Vec<Vec<f64>>>,
    range: (f64, f64),
    label: String,
}

impl ExternalRule for ArgmaxRule {
    fn state_len(&self, _steps: usize) -> usize {
        self.structure.low_len + self.structure.high_len
    }
    fn init(&self, x0: f64, state: &mut [f64]) {
        state.copy_from_slice(&self.structure.initial_state(x0));
    }
    fn advance(&self, k: usize, x: f64, state: &mut [f64]) {
        let s = &self.structure;
        let n = s.grid.steps();
        s.low.advance(k, x, &mut state[..s.low_len], n);
        s.high.advance(k, x, &mut state[s.low_len..], n);
    }
    fn eval(&self, k: usize, x: f64, state: &[f64]) -> f64 {
        let s = &self.structure;
        let n = s.grid.steps();
        let hi = s.high.eval(k, x, &state[s.low_len..], n);
        let Some(sig) = s.signature(k, state) else { return hi };
        let c = (x / s.dx).round() as i64;
        let w = s.half_width(k);
        let c = c.clamp(-w, w);
        for off in 0..=(2 * w) {
            for i in [c - off, c + off] {
                if let Some(nd) = s.find(k, i, sig) {
                    // The node's endpoint choice, read against the path's own bounds.
                    let (_, nhi) = s.bounds(k, nd);
                    return if self.argmax[k][nd] == nhi { hi } else { s.low.eval(k, x, &state[..s.low_len], n) };
                }
            }
        }
        hi
    }
    fn range(&self) -> (f64, f64) {
        self.range
    }
    fn recombining(&self) -> bool {
        self.structure.low.recombining() && self.structure.high.recombining()
    }
    fn label(&self) -> String {
        self.label.clone()
    }
}

/// Backward G-recursion for a terminal payoff.
pub fn dp_value(claim: &Claim, set: &ScenarioSet, cfg: &LatticeConfig) -> Result<ValueLattice> {
    let structure = Arc::new(Structure::build(set, cfg)?);
    dp_on(&structure, &claim.payoff, &claim.label)
}

/// [`dp_value`] on an existing node structure.
pub fn dp_on(structure: &Arc<Structure>, payoff: &Payoff, label: &str) -> Result<ValueLattice> {
    payoff.validate()?;
    let terminal = structure.terminal(payoff)?;
    dp_from_terminal(structure, terminal, label)
}

/// Backward recursion from arbitrary terminal node values.
pub fn dp_from_terminal(structure: &Arc<Structure>, terminal: Vec<f64>, label: &str) -> Result<ValueLattice> {
    let n = structure.grid.steps();
    if terminal.len() != structure.slice_len(n) {
        return argument("terminal data does not match the last lattice slice");
    }
    if terminal.iter().any(|v| !v.is_finite()) {
        return domain("claim is not finite on the lattice");
    }
    let mut values = vec![Vec::new(); n + 1];
    let mut argmax = vec![Vec::new(); n];
    values[n] = terminal;
    let mut mesh_excess = 0.0f64;
    for k in (0..n).rev() {
        let (v, a, e) = structure.step(k, &values[k + 1]);
        values[k] = v;
        argmax[k] = a;
        mesh_excess = mesh_excess.max(e);
    }
    let scale = values[0].iter().fold(1.0f64, |m, v| m.max(v.abs()));
    assert!(mesh_excess <= 1e-12 * scale, "control-mesh value exceeds the endpoint maximum by {mesh_excess}");
    Ok(ValueLattice { structure: structure.clone(), values, argmax: Arc::new(argmax), mesh_excess, label: label.to_string() })
}

/// Recomputes `E_s` from the stored `E_t` and returns the largest
/// nodewise discrepancy with the stored `E_s`.
pub fn check_time_consistency(lattice: &ValueLattice, s: usize, t: usize) -> Result<f64> {
    let n = lattice.steps();
    if s > t || t > n {
        return argument(format!("need s <= t <= N, got s = {s}, t = {t}"));
    }
    let re = lattice.structure.recurse(lattice.values[t].clone(), t, s);
    Ok(re[0].iter().zip(&lattice.values[s]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoppedNode {
    pub k: usize,
    pub i: i64,
    pub signature: u32,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StoppingReport {
    pub stopped: Vec<StoppedNode>,
    /// Stored values against a fresh recursion from `T`.
    pub restart: CheckReport,
    /// `E_0` against the recursion stopped at `sigma`.
    pub dynamic_programming: CheckReport,
    /// `E_sigma >= E[E_tau | sigma]` for `tau = min(sigma + m, N)` under each control-mesh value.
    pub later_times: CheckReport,
    pub pass: bool,
}

/// Lags used for the later-stopping-time check.
pub const LATER_LAGS: [usize; 3] = [1, 2, 5];

/// Reads `E_sigma(X)` off the lattice and verifies it.
pub fn value_at_stopping_time(lattice: &ValueLattice, sigma: &Stopping) -> Result<StoppingReport> {
    let s = &lattice.structure;
    let n = lattice.steps();
    sigma.validate(n)?;
    // Forward exploration of (node, stopping state) from the root.
    struct Item {
        node: usize,
        stopped: bool,
        kids: [usize; 3],
    }
    let mut layers: Vec<Vec<Item>> = Vec::with_capacity(n + 1);
    let root = s.root();
    let mut st0 = vec![0.0; sigma.state_len()];
    sigma.init(0.0, &mut st0);
    let mut frontier: HashMap<(usize, Vec<u64>), usize> = HashMap::new();
    frontier.insert((root, bits(&st0)), 0);
    let mut cur_states = vec![st0];
    let mut cur_nodes = vec![root];
    for k in 0..=n {
        let mut layer = Vec::with_capacity(cur_nodes.len());
        let mut next: HashMap<(usize, Vec<u64>), usize> = HashMap::new();
        let mut next_states = Vec::new();
        let mut next_nodes = Vec::new();
        for (idx, &nd) in cur_nodes.iter().enumerate() {
            let x = s.x(k, nd);
            let st = &cur_states[idx];
            let stopped = k == n || sigma.stops(k, x, st);
            let mut kids = [0usize; 3];
            if !stopped {
                let ch = s.children(k, nd);
                for c in 0..3 {
                    let cn = ch[c] as usize;
                    let mut s2 = st.clone();
                    sigma.advance(k + 1, s.x(k + 1, cn), &mut s2);
                    let key = (cn, bits(&s2));
                    let id = match next.get(&key) {
                        Some(id) => *id,
                        None => {
                            let id = next_nodes.len();
                            next.insert(key, id);
                            next_nodes.push(cn);
                            next_states.push(s2);
                            id
                        }
                    };
                    kids[c] = id;
                }
            }
            layer.push(Item { node: nd, stopped, kids });
        }
        layers.push(layer);
        cur_states = next_states;
        cur_nodes = next_nodes;
        if cur_nodes.is_empty() {
            break;
        }
    }

    let mut stopped = Vec::new();
    let mut restart_viol = 0.0f64;
    let k_min = layers.iter().position(|l| l.iter().any(|it| it.stopped)).unwrap_or(n);
    let fresh = s.recurse(lattice.values[n].clone(), n, k_min);
    for (k, layer) in layers.iter().enumerate() {
        for it in layer.iter().filter(|it| it.stopped) {
            let (i, sig) = s.node(k, it.node);
            let v = lattice.values[k][it.node];
            restart_viol = restart_viol.max((fresh[k - k_min][it.node] - v).abs());
            stopped.push(StoppedNode { k, i, signature: sig, value: v });
        }
    }
    stopped.sort_by_key(|a| (a.k, a.i, a.signature));
    stopped.dedup();

    // Recursion on the continuation region with E_sigma as stopped data.
    let c = s.coef();
    let mut v_next: Vec<f64> = Vec::new();
    for k in (0..layers.len()).rev() {
        let layer = &layers[k];
        let mut v = vec![0.0; layer.len()];
        for (idx, it) in layer.iter().enumerate() {
            v[idx] = if it.stopped {
                lattice.values[k][it.node]
            } else {
                let (um, u0, up) = (v_next[it.kids[0]], v_next[it.kids[1]], v_next[it.kids[2]]);
                let gamma = up + um - 2.0 * u0;
                let (lo, hi) = s.bounds(k, it.node);
                u0 + if gamma >= 0.0 { hi } else { lo } * c * gamma
            };
        }
        v_next = v;
    }
    let dpp = (v_next[0] - lattice.root_value()).abs();

    // Later stopping times.
    let mut later = 0.0f64;
    let mesh = s.control_mesh.max(2);
    let mut by_slice: HashMap<usize, Vec<usize>> = HashMap::new();
    for (k, layer) in layers.iter().enumerate() {
        for it in layer.iter().filter(|it| it.stopped && k < n) {
            by_slice.entry(k).or_default().push(it.node);
        }
    }
    let mut ks: Vec<usize> = by_slice.keys().copied().collect();
    ks.sort_unstable();
    for k in ks {
        let nodes = &by_slice[&k];
        for m in LATER_LAGS {
            let t = (k + m).min(n);
            for j in 0..mesh {
                let theta = j as f64 / (mesh - 1) as f64;
                let mut w = lattice.values[t].clone();
                for kk in (k..t).rev() {
                    w = s.step_linear(kk, &w, theta);
                }
                for &nd in nodes {
                    later = later.max(w[nd] - lattice.values[k][nd]);
                }
            }
        }
    }

    let restart = CheckReport::new("optional_sampling_restart", restart_viol, LATTICE_TOL);
    let dynamic_programming = CheckReport::new("optional_sampling_dpp", dpp, LATTICE_TOL);
    let later_times = CheckReport::new("optional_sampling_later_times", later.max(0.0), LATTICE_TOL);
    let pass = restart.pass && dynamic_programming.pass && later_times.pass;
    Ok(StoppingReport { stopped, restart, dynamic_programming, later_times, pass })
}

#[derive(Debug, Clone, Serialize)]
pub struct ControlEstimate {
    pub control: String,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct LowerBoundReport {
    pub claim: String,
    pub per_control: Vec<ControlEstimate>,
    pub best: ControlEstimate,
    pub dp_value: f64,
    /// `dp_value - best.mean`, with the standard error of `best`.
    pub gap: f64,
    pub gap_se: f64,
}

/// Common-random-number estimates of `E^P[X]` over the pool; their
/// maximum bounds the lattice value from below.
pub fn mc_lower_bound(claim: &Claim, set: &ScenarioSet, dp_value: f64, n_paths: usize, seed: u64) -> Result<LowerBoundReport> {
    if set.pool().is_empty() {
        return argument("scenario set has no pool controls");
    }
    let noise = NoiseSource::new(seed);
    let mut per_control = Vec::new();
    for c in set.pool() {
        let bt = terminal_values(c, set.grid(), noise, n_paths)?;
        let xs: Vec<f64> = bt.iter().map(|x| claim.eval(*x)).collect();
        per_control.push(ControlEstimate { control: c.label().to_string(), estimate: Estimate::from_samples(&xs) });
    }
    let best = per_control.iter().max_by(|a, b| a.estimate.mean.total_cmp(&b.estimate.mean)).unwrap().clone();
    Ok(LowerBoundReport {
        claim: claim.label.clone(),
        gap: dp_value - best.estimate.mean,
        gap_se: best.estimate.se,
        per_control,
        best,
        dp_value,
    })
}

/// Stepwise lattice evaluation of `f(B_{t_1}, ..., B_{t_n})` for constant
/// bounds; the discrete counterpart of the multi-date PDE recursion.
pub fn dp_multitime<F>(set: &ScenarioSet, cfg: &LatticeConfig, f: F, dates: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if set.constant_bounds().is_none() {
        return argument("stepwise lattice evaluation needs constant bounds");
    }
    let s = Structure::build(set, cfg)?;
    let grid = *set.grid();
    let nd = dates.len();
    if nd == 0 || nd > 4 {
        return argument(format!("stepwise evaluation supports 1..=4 monitoring dates, got {nd}"));
    }
    let idx = dates
        .iter()
        .map(|t| grid.index_of(*t).ok_or_else(|| Error::Argument(format!("monitoring date {t} is not on the time grid"))))
        .collect::<Result<Vec<_>>>()?;
    if idx.windows(2).any(|w| w[1] <= w[0]) || idx[0] == 0 || idx[nd - 1] != grid.steps() {
        return argument("monitoring dates must increase strictly, start after 0 and end at T");
    }
    let width = |k: usize| 2 * (k + s.padding) + 1;
    let tuples_total: f64 = (0..nd).map(|j| idx[..j].iter().map(|k| width(*k) as f64).product::<f64>()).sum();
    let work = tuples_total * (grid.steps() * width(grid.steps())) as f64;
    if work > 4e9 {
        return Err(Error::Resource(format!("stepwise lattice evaluation needs about {work:.2e} node updates")));
    }
    let mut values: Vec<f64> = Vec::new();
    for j in (0..nd).rev() {
        let from = idx[j];
        let to = if j == 0 { 0 } else { idx[j - 1] };
        let tuples: usize = idx[..j].iter().map(|k| width(*k)).product();
        let next = exec::map_range(tuples, |t| {
            let mut prefix = vec![0.0; nd];
            let mut pos = vec![0usize; nd];
            let mut r = t;
            for p in (0..j).rev() {
                let w = width(idx[p]);
                pos[p] = r % w;
                prefix[p] = s.x(idx[p], pos[p]);
                r /= w;
            }
            let data: Vec<f64> = if j == nd - 1 {
                (0..width(from))
                    .map(|q| {
                        let mut p = prefix.clone();
                        p[j] = s.x(from, q);
                        f(&p)
                    })
                    .collect()
            } else {
                let w = width(from);
                values[t * w..(t + 1) * w].to_vec()
            };
            let re = s.recurse(data, from, to);
            if j == 0 {
                re[0][s.root()]
            } else {
                re[0][pos[j - 1]]
            }
        });
        values = next;
    }
    Ok(values[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{Event, SetKind};

    fn set(n: usize) -> ScenarioSet {
        ScenarioSet::interval(&TimeGrid::new(1.0, n).unwrap(), 1.0, 4.0).unwrap()
    }

    fn sq() -> Claim {
        Claim::new("B_T^2", Payoff::square())
    }

    #[test]
    fn martingale_claim_is_its_own_value() {
        let lat = dp_value(&Claim::new("B_T", Payoff::linear(1.0, 0.0)), &set(50), &LatticeConfig::default()).unwrap();
        let s = &lat.structure;
        for k in 0..=50 {
            for nd in 0..s.slice_len(k) {
                assert!((lat.values[k][nd] - s.x(k, nd)).abs() < 1e-12);
            }
        }
        assert!(lat.root_value().abs() < 1e-12);
    }

    #[test]
    fn squares() {
        let lat = dp_value(&sq(), &set(200), &LatticeConfig::default()).unwrap();
        assert!((lat.root_value() - 4.0).abs() < 2e-2);
        let neg = dp_value(&sq().negated(), &set(200), &LatticeConfig::default()).unwrap();
        assert!((neg.root_value() + 1.0).abs() < 2e-2);
        assert!(neg.argmax.iter().all(|s| s.iter().all(|a| *a == 1.0)));
        assert!(lat.argmax.iter().all(|s| s.iter().all(|a| *a == 4.0)));
        assert!(lat.argmax_at_endpoints() && neg.argmax_at_endpoints());
        assert_eq!(lat.mesh_excess, 0.0);
    }

    #[test]
    fn time_consistency_trivial_pairs() {
        let lat = dp_value(&sq(), &set(40), &LatticeConfig::default()).unwrap();
        assert_eq!(check_time_consistency(&lat, 7, 7).unwrap(), 0.0);
        assert!(check_time_consistency(&lat, 0, 40).unwrap() <= LATTICE_TOL);
        assert!(check_time_consistency(&lat, 3, 29).unwrap() <= LATTICE_TOL);
        assert!(check_time_consistency(&lat, 5, 3).is_err());
    }

    #[test]
    fn stopping_rules() {
        let lat = dp_value(&sq(), &set(40), &LatticeConfig::default()).unwrap();
        let fixed = value_at_stopping_time(&lat, &Stopping::Fixed { node: 20 }).unwrap();
        assert!(fixed.pass, "{fixed:?}");
        assert!(fixed.stopped.iter().all(|s| s.k == 20));
        let hit = value_at_stopping_time(&lat, &Stopping::Hitting { level: 1.0, cap: 40 }).unwrap();
        assert!(hit.pass, "{hit:?}");
        let two = Stopping::TwoValued { event: Event::AboveAt { node: 10, level: 0.0 }, early: 20, late: 40 };
        let r = value_at_stopping_time(&lat, &two).unwrap();
        assert!(r.pass);
        assert!(r.stopped.iter().any(|s| s.k == 20) && r.stopped.iter().any(|s| s.k == 40));
        let bad = Stopping::TwoValued { event: Event::AboveAt { node: 30, level: 0.0 }, early: 20, late: 40 };
        assert!(matches!(value_at_stopping_time(&lat, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn path_dependent_bounds_use_signatures() {
        let g = TimeGrid::new(1.0, 40).unwrap();
        let high = Rule::HitSwitch { level: 0.5, before: 2.0, after: 4.0 };
        let set = ScenarioSet::from_rules(SetKind::IntervalBounds, &g, Rule::Constant(1.0), high, vec![], 3).unwrap();
        let lat = dp_value(&sq(), &set, &LatticeConfig::default()).unwrap();
        // Between the constant-2 and constant-4 worlds.
        let v = lat.root_value();
        assert!(v > 2.0 && v < 4.0, "{v}");
        assert!(lat.argmax_at_endpoints());
        assert!(check_time_consistency(&lat, 0, 40).unwrap() <= LATTICE_TOL);
        let c = lat.argmax_control().unwrap();
        let p = crate::paths::simulate_path(&c, &g, &NoiseSource::new(3), 0).unwrap();
        let levels = c.levels_along(&p.series());
        assert!(levels.iter().all(|a| *a == 2.0 || *a == 4.0));
    }

    #[test]
    fn non_recombining_bounds_hit_resource_limit() {
        use crate::scenarios::PrefixFn;
        let g = TimeGrid::new(1.0, 30).unwrap();
        let high = Rule::External(Arc::new(PrefixFn { name: "h".into(), range: (2.0, 4.0), f: Arc::new(|_, p: &[f64]| if p.iter().sum::<f64>() > 0.0 { 4.0 } else { 2.0 }) }));
        let set = ScenarioSet::from_rules(SetKind::IntervalBounds, &g, Rule::Constant(1.0), high, vec![], 2).unwrap();
        assert!(matches!(dp_value(&sq(), &set, &LatticeConfig::default()), Err(Error::Resource(_))));
    }

    #[test]
    fn multitime_increment_square() {
        let set = set(20);
        let v = dp_multitime(&set, &LatticeConfig::default(), |x: &[f64]| (x[1] - x[0]).powi(2), &[0.5, 1.0]).unwrap();
        assert!((v - 2.0).abs() < 1e-9, "{v}");
        let inc = dp_multitime(&set, &LatticeConfig::default(), |x: &[f64]| x[1] - x[0], &[0.5, 1.0]).unwrap();
        assert!(inc.abs() < 1e-12);
    }

    #[test]
    fn lower_bound_pool() {
        let s = set(50);
        let lat = dp_value(&sq(), &s, &LatticeConfig::default()).unwrap();
        let r = mc_lower_bound(&sq(), &s, lat.root_value(), 20_000, 5).unwrap();
        assert!(r.gap.abs() <= 3.0 * r.gap_se + 2e-2, "{r:?}");
        assert_eq!(r.best.control, "const(4)");
    }

    #[test]
    fn lattice_csv() {
        let lat = dp_value(&sq(), &set(4), &LatticeConfig { padding: 1, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        lat.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x_index,value,argmax,signature"));
        let nodes: usize = (0..=4).map(|k| 2 * (k + 1) + 1).sum();
        assert_eq!(text.lines().count(), 1 + nodes);
    }
}
