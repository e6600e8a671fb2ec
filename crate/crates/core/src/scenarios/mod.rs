//! Scenario sets: variance controls, their pasting, membership checks and
//! the finite-pool diagnostics.
//!
//! A scenario set is held in two forms. The interval form (lower and upper
//! variance bounds, possibly state or path dependent) drives the lattice and
//! PDE solvers. The finite-pool form lists explicit controls for Monte Carlo
//! verification; every pool control must lie within the declared bounds.

mod rules;
mod stopping;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use rules::{ExternalRule, Pasted, PrefixFn, Rule, RuleState};
pub use stopping::{Event, Stopping};

use crate::claims::Claim;
use crate::error::{argument, domain, Error, Result};
use crate::mc::{paired_difference, terminal_values, Estimate};
use crate::paths::{simulate_path, NoiseSource, TimeGrid};

/// Default membership tolerance.
pub const MEMBERSHIP_TOL: f64 = 1e-12;
/// Monte Carlo rejection threshold, in standard errors.
pub const MC_REJECT_SE: f64 = 3.0;
/// Prefixes sampled by [`contains`].
pub const PREFIX_SAMPLES: usize = 256;

/// An adapted, piecewise-constant variance control on a fixed grid.
///
/// In `d` dimensions the control is `a_k * shape`, with `a_k` the scalar
/// level produced by the rule (read from component 0 of the path) and
/// `shape` a fixed symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct VolControl {
    label: String,
    grid: TimeGrid,
    rule: Rule,
    dim: usize,
    shape: Arc<Vec<f64>>,
    chol: Arc<Vec<f64>>,
}

impl VolControl {
    pub fn new(label: impl Into<String>, grid: &TimeGrid, rule: Rule) -> Result<Self> {
        let (lo, hi) = rule.range();
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0) {
            return domain(format!("variance control must be positive and finite, range is [{lo}, {hi}]"));
        }
        rule.validate(grid.steps())?;
        Ok(Self {
            label: label.into(),
            grid: *grid,
            rule,
            dim: 1,
            shape: Arc::new(vec![1.0]),
            chol: Arc::new(vec![1.0]),
        })
    }

    /// Constant control `a`. Panics if `a` is not positive.
    pub fn constant(grid: &TimeGrid, a: f64) -> Self {
        Self::new(format!("const({a})"), grid, Rule::Constant(a)).expect("constant variance must be positive")
    }

    /// Replaces the unit shape by a `d x d` SPD matrix (row-major).
    pub fn with_shape(mut self, dim: usize, shape: Vec<f64>) -> Result<Self> {
        if dim == 0 || shape.len() != dim * dim {
            return argument(format!("shape must be {dim}x{dim}"));
        }
        for i in 0..dim {
            for j in 0..dim {
                if (shape[i * dim + j] - shape[j * dim + i]).abs() > 1e-12 {
                    return domain("variance shape is not symmetric");
                }
            }
        }
        let chol = cholesky(&shape, dim).ok_or_else(|| Error::Domain("variance shape is not positive definite".into()))?;
        self.dim = dim;
        self.shape = Arc::new(shape);
        self.chol = Arc::new(chol);
        Ok(self)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rule(&self) -> &Rule {
        &self.rule
    }

    pub fn shape(&self) -> &[f64] {
        &self.shape
    }

    /// Lower-triangular `L` with `L L^T = shape`.
    pub fn shape_factor(&self) -> &[f64] {
        &self.chol
    }

    pub fn start(&self, x0: f64) -> RuleState {
        let n = self.grid.steps();
        let mut s = vec![0.0; self.rule.state_len(n)];
        self.rule.init(x0, &mut s, n);
        s
    }

    #[inline]
    pub fn advance(&self, k: usize, x: f64, state: &mut RuleState) {
        self.rule.advance(k, x, state, self.grid.steps());
    }

    /// Scalar level on cell `(t_k, t_{k+1}]`.
    #[inline]
    pub fn level(&self, k: usize, x: f64, state: &RuleState) -> f64 {
        self.rule.eval(k, x, state, self.grid.steps())
    }

    /// Levels `a_0..a_{N-1}` realized along a path (component 0 values).
    pub fn levels_along(&self, path: &[f64]) -> Vec<f64> {
        let n = self.grid.steps();
        let mut s = self.start(path[0]);
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            out.push(self.level(k, path[k], &s));
            self.advance(k + 1, path[k + 1], &mut s);
        }
        out
    }
}

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

// ----------------------------------------------------------------------------
// JSON forms

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RuleSpec {
    Constant {
        value: f64,
    },
    ThresholdSwitch {
        level: f64,
        below: f64,
        above: f64,
        #[serde(default)]
        abs: bool,
    },
    TimeSwitch {
        time: f64,
        before: f64,
        after: f64,
    },
    HitSwitch {
        level: f64,
        before: f64,
        after: f64,
    },
    Pasted {
        base: Box<RuleSpec>,
        branch: StopSpec,
        event: EventSpec,
        on: Box<RuleSpec>,
        off: Box<RuleSpec>,
    },
}

impl RuleSpec {
    pub fn resolve(&self, grid: &TimeGrid) -> Result<Rule> {
        Ok(match self {
            RuleSpec::Constant { value } => Rule::Constant(*value),
            RuleSpec::ThresholdSwitch { level, below, above, abs } => Rule::ThresholdSwitch {
                level: *level,
                below: *below,
                above: *above,
                abs: *abs,
            },
            RuleSpec::TimeSwitch { time, before, after } => Rule::TimeSwitch {
                node: grid.require_index(*time)?,
                before: *before,
                after: *after,
            },
            RuleSpec::HitSwitch { level, before, after } => Rule::HitSwitch { level: *level, before: *before, after: *after },
            RuleSpec::Pasted { base, branch, event, on, off } => Rule::Pasted(Box::new(Pasted {
                base: base.resolve(grid)?,
                branch: branch.resolve(grid)?,
                event: event.resolve(grid)?,
                on: on.resolve(grid)?,
                off: off.resolve(grid)?,
            })),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StopSpec {
    Fixed { time: f64 },
    Hitting { level: f64, cap_time: f64 },
    TwoValued { event: EventSpec, early: f64, late: f64 },
    Randomized { early: f64, late: f64, width: f64, prob: f64, seed: u64 },
}

impl StopSpec {
    pub fn resolve(&self, grid: &TimeGrid) -> Result<Stopping> {
        let s = match self {
            StopSpec::Fixed { time } => Stopping::Fixed { node: grid.require_index(*time)? },
            StopSpec::Hitting { level, cap_time } => Stopping::Hitting { level: *level, cap: grid.require_index(*cap_time)? },
            StopSpec::TwoValued { event, early, late } => Stopping::TwoValued {
                event: event.resolve(grid)?,
                early: grid.require_index(*early)?,
                late: grid.require_index(*late)?,
            },
            StopSpec::Randomized { early, late, width, prob, seed } => Stopping::Randomized {
                early: grid.require_index(*early)?,
                late: grid.require_index(*late)?,
                width: *width,
                prob: *prob,
                seed: *seed,
            },
        };
        s.validate(grid.steps())?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventSpec {
    Always,
    Never,
    AboveAtBranch { level: f64 },
    AbsAboveAtBranch { level: f64 },
    AboveAt { time: f64, level: f64 },
    Not { event: Box<EventSpec> },
}

impl EventSpec {
    pub fn resolve(&self, grid: &TimeGrid) -> Result<Event> {
        Ok(match self {
            EventSpec::Always => Event::Always,
            EventSpec::Never => Event::Never,
            EventSpec::AboveAtBranch { level } => Event::AboveAtBranch { level: *level },
            EventSpec::AbsAboveAtBranch { level } => Event::AbsAboveAtBranch { level: *level },
            EventSpec::AboveAt { time, level } => Event::AboveAt { node: grid.require_index(*time)?, level: *level },
            EventSpec::Not { event } => Event::Not(Box::new(event.resolve(grid)?)),
        })
    }
}

/// A bound given either as a number or as a named rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoundSpec {
    Value(f64),
    Rule(RuleSpec),
}

impl BoundSpec {
    fn resolve(&self, grid: &TimeGrid) -> Result<Rule> {
        match self {
            BoundSpec::Value(v) => Ok(Rule::Constant(*v)),
            BoundSpec::Rule(r) => r.resolve(grid),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSpec {
    pub label: String,
    pub rule: RuleSpec,
}

impl ControlSpec {
    pub fn resolve(&self, grid: &TimeGrid) -> Result<VolControl> {
        VolControl::new(self.label.clone(), grid, self.rule.resolve(grid)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    IntervalBounds,
    FinitePool,
}

fn default_mesh() -> usize {
    5
}

/// JSON document describing a scenario set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: SetKind,
    pub a_low: BoundSpec,
    pub a_high: BoundSpec,
    #[serde(default)]
    pub pool: Vec<ControlSpec>,
    #[serde(default = "default_mesh")]
    pub control_mesh: usize,
}

impl ScenarioSpec {
    pub fn constant(kind: SetKind, a_low: f64, a_high: f64) -> Self {
        Self {
            kind,
            a_low: BoundSpec::Value(a_low),
            a_high: BoundSpec::Value(a_high),
            pool: vec![],
            control_mesh: default_mesh(),
        }
    }
}

/// A scenario set resolved on a time grid.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    pub kind: SetKind,
    grid: TimeGrid,
    low: Rule,
    high: Rule,
    pool: Vec<VolControl>,
    control_mesh: usize,
}

impl ScenarioSet {
    pub fn from_spec(spec: &ScenarioSpec, grid: &TimeGrid) -> Result<Self> {
        let pool = spec.pool.iter().map(|c| c.resolve(grid)).collect::<Result<Vec<_>>>()?;
        Self::from_rules(spec.kind, grid, spec.a_low.resolve(grid)?, spec.a_high.resolve(grid)?, pool, spec.control_mesh)
    }

    /// Constant bounds `[a_low, a_high]` with the two endpoint controls as pool.
    pub fn interval(grid: &TimeGrid, a_low: f64, a_high: f64) -> Result<Self> {
        let pool = vec![
            VolControl::new(format!("const({a_low})"), grid, Rule::Constant(a_low))?,
            VolControl::new(format!("const({a_high})"), grid, Rule::Constant(a_high))?,
        ];
        Self::from_rules(SetKind::IntervalBounds, grid, Rule::Constant(a_low), Rule::Constant(a_high), pool, default_mesh())
    }

    pub fn from_rules(kind: SetKind, grid: &TimeGrid, low: Rule, high: Rule, pool: Vec<VolControl>, control_mesh: usize) -> Result<Self> {
        low.validate(grid.steps())?;
        high.validate(grid.steps())?;
        if control_mesh < 2 {
            return argument("control_mesh must be at least 2 (it includes both endpoints)");
        }
        let (llo, lhi) = low.range();
        let (hlo, hhi) = high.range();
        if !(llo > 0.0 && hhi.is_finite()) {
            return domain(format!("bounds must satisfy 0 < a_low and a_high finite, got [{llo}, {hhi}]"));
        }
        if kind == SetKind::FinitePool && pool.is_empty() {
            return argument("finite-pool scenario set needs a nonempty pool");
        }
        let set = Self { kind, grid: *grid, low, high, pool, control_mesh };
        if lhi > hlo {
            // Bounds overlap in range; check the order along sampled prefixes.
            let probe = VolControl::new("probe", grid, Rule::Constant(0.5 * (llo + hhi)))?;
            for prefix in sample_prefixes(&set, &probe)? {
                let (lo, hi) = set.bounds_along(&prefix);
                if lo.iter().zip(&hi).any(|(a, b)| a > b) {
                    return domain("a_low exceeds a_high on a sampled prefix");
                }
            }
        }
        for c in &set.pool {
            if !contains_interval(&set, c, MEMBERSHIP_TOL)? {
                return domain(format!("pool control '{}' leaves the declared bounds", c.label()));
            }
        }
        Ok(set)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn low(&self) -> &Rule {
        &self.low
    }

    pub fn high(&self) -> &Rule {
        &self.high
    }

    pub fn pool(&self) -> &[VolControl] {
        &self.pool
    }

    pub fn control_mesh(&self) -> usize {
        self.control_mesh
    }

    /// `(inf a_low, sup a_high)`.
    pub fn global_bounds(&self) -> (f64, f64) {
        (self.low.range().0, self.high.range().1)
    }

    /// `Some((a_low, a_high))` when both bounds are constants.
    pub fn constant_bounds(&self) -> Option<(f64, f64)> {
        match (&self.low, &self.high) {
            (Rule::Constant(a), Rule::Constant(b)) => Some((*a, *b)),
            _ => None,
        }
    }

    pub fn with_pool(mut self, pool: Vec<VolControl>) -> Result<Self> {
        for c in &pool {
            if !contains_interval(&self, c, MEMBERSHIP_TOL)? {
                return domain(format!("pool control '{}' leaves the declared bounds", c.label()));
            }
        }
        self.pool = pool;
        Ok(self)
    }

    pub fn push_pool(&mut self, control: VolControl) -> Result<()> {
        if !contains_interval(self, &control, MEMBERSHIP_TOL)? {
            return domain(format!("pool control '{}' leaves the declared bounds", control.label()));
        }
        self.pool.push(control);
        Ok(())
    }

    /// Bound values on each cell along a path prefix.
    pub fn bounds_along(&self, path: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.grid.steps();
        let mut sl = vec![0.0; self.low.state_len(n)];
        let mut sh = vec![0.0; self.high.state_len(n)];
        self.low.init(path[0], &mut sl, n);
        self.high.init(path[0], &mut sh, n);
        let mut lo = Vec::with_capacity(n);
        let mut hi = Vec::with_capacity(n);
        for k in 0..n {
            lo.push(self.low.eval(k, path[k], &sl, n));
            hi.push(self.high.eval(k, path[k], &sh, n));
            self.low.advance(k + 1, path[k + 1], &mut sl, n);
            self.high.advance(k + 1, path[k + 1], &mut sh, n);
        }
        (lo, hi)
    }
}

/// Seeded prefix sample: a mix of paths under the control itself and under
/// the extreme constant variances of the set.
fn sample_prefixes(set: &ScenarioSet, control: &VolControl) -> Result<Vec<Vec<f64>>> {
    let grid = set.grid();
    let (glo, ghi) = set.global_bounds();
    let lo = VolControl::new("lo", grid, Rule::Constant(glo))?;
    let hi = VolControl::new("hi", grid, Rule::Constant(ghi))?;
    let noise = NoiseSource::new(0x005E_ED0F_9AC7);
    let mut out = Vec::with_capacity(PREFIX_SAMPLES);
    for i in 0..PREFIX_SAMPLES {
        let c = match i % 4 {
            0 => &lo,
            1 => &hi,
            _ => control,
        };
        let c = if c.dim() != 1 { &hi } else { c };
        out.push(simulate_path(c, grid, &noise, i as u64)?.series());
    }
    Ok(out)
}

fn contains_interval(set: &ScenarioSet, control: &VolControl, tol: f64) -> Result<bool> {
    if control.grid() != set.grid() {
        return argument("control and scenario set are on different grids");
    }
    if control.dim() != 1 {
        return argument("interval bounds describe one-dimensional controls");
    }
    let (clo, chi) = control.rule().range();
    let (llo, lhi) = set.low.range();
    let (hlo, hhi) = set.high.range();
    if clo >= lhi - tol && chi <= hlo + tol {
        return Ok(true);
    }
    if chi < llo - tol || clo > hhi + tol {
        return Ok(false);
    }
    for prefix in sample_prefixes(set, control)? {
        let (lo, hi) = set.bounds_along(&prefix);
        let a = control.levels_along(&prefix);
        for k in 0..a.len() {
            if a[k] < lo[k] - tol || a[k] > hi[k] + tol {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Membership of `control` in `set`, checked on a seeded prefix sample.
pub fn contains(set: &ScenarioSet, control: &VolControl, tol: f64) -> Result<bool> {
    match set.kind {
        SetKind::IntervalBounds => contains_interval(set, control, tol),
        SetKind::FinitePool => {
            if control.grid() != set.grid() {
                return argument("control and scenario set are on different grids");
            }
            let prefixes = sample_prefixes(set, control)?;
            'pool: for p in set.pool() {
                if p.dim() != control.dim() || p.shape().iter().zip(control.shape()).any(|(a, b)| (a - b).abs() > tol) {
                    continue;
                }
                for prefix in &prefixes {
                    let a = control.levels_along(prefix);
                    let b = p.levels_along(prefix);
                    if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > tol) {
                        continue 'pool;
                    }
                }
                return Ok(true);
            }
            Ok(false)
        }
    }
}

/// Ingredients of a pasting: `base` up to `branch`, then `on_event` on the
/// event and `off_event` off it.
#[derive(Debug, Clone)]
pub struct PasteSpec {
    pub base: VolControl,
    pub branch: Stopping,
    pub event: Event,
    pub on_event: VolControl,
    pub off_event: VolControl,
}

/// Concatenates the controls of `spec`; exact, cell by cell.
pub fn paste(spec: &PasteSpec) -> Result<VolControl> {
    let grid = spec.base.grid();
    if spec.on_event.grid() != grid || spec.off_event.grid() != grid {
        return argument("pasted controls must share one grid");
    }
    if spec.on_event.shape() != spec.base.shape() || spec.off_event.shape() != spec.base.shape() {
        return domain("pasted controls must share one variance shape");
    }
    let rule = Rule::Pasted(Box::new(Pasted {
        base: spec.base.rule().clone(),
        branch: spec.branch.clone(),
        event: spec.event.clone(),
        on: spec.on_event.rule().clone(),
        off: spec.off_event.rule().clone(),
    }));
    let label = format!("paste({}|{}|{})", spec.base.label(), spec.on_event.label(), spec.off_event.label());
    let c = VolControl::new(label, grid, rule)?;
    if spec.base.dim() > 1 {
        c.with_shape(spec.base.dim(), spec.base.shape().to_vec())
    } else {
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpwardSelection {
    /// Index of the winning candidate per path (lowest index on ties).
    pub selected: Vec<usize>,
    pub merged: Vec<f64>,
}

/// Pathwise maximum of conditional estimates, with the attaining candidate.
pub fn upward_select(candidates: &[Vec<f64>]) -> Result<UpwardSelection> {
    let first = candidates.first().ok_or_else(|| Error::Argument("no candidates to select from".into()))?;
    let n = first.len();
    if candidates.iter().any(|c| c.len() != n) {
        return argument("candidate estimates are on different prefix samples");
    }
    let mut selected = vec![0; n];
    let mut merged = first.clone();
    for (j, c) in candidates.iter().enumerate().skip(1) {
        for i in 0..n {
            if c[i] > merged[i] {
                merged[i] = c[i];
                selected[i] = j;
            }
        }
    }
    Ok(UpwardSelection { selected, merged })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum MaxChosenOutcome {
    Accept {
        claims_checked: usize,
    },
    Reject {
        claim_index: usize,
        claim: String,
        candidate: Estimate,
        pool_sup: Estimate,
        excess: Estimate,
    },
}

/// Sound-rejection check that adding `candidate` to a finite pool does not
/// raise the pool supremum on any of `claims`. Acceptance is heuristic:
/// only the listed claims are tested.
pub fn max_chosen_check(set: &ScenarioSet, candidate: &VolControl, claims: &[Claim], n_paths: usize, seed: u64) -> Result<MaxChosenOutcome> {
    if set.kind != SetKind::FinitePool {
        return argument("max_chosen_check needs a finite-pool scenario set");
    }
    let grid = set.grid();
    let noise = NoiseSource::new(seed);
    let cand_bt = terminal_values(candidate, grid, noise, n_paths)?;
    let pool_bt = set
        .pool()
        .iter()
        .map(|c| terminal_values(c, grid, noise, n_paths))
        .collect::<Result<Vec<_>>>()?;
    for (ci, claim) in claims.iter().enumerate() {
        let cand: Vec<f64> = cand_bt.iter().map(|x| claim.eval(*x)).collect();
        let pool_vals: Vec<Vec<f64>> = pool_bt.iter().map(|bt| bt.iter().map(|x| claim.eval(*x)).collect()).collect();
        let ests: Vec<Estimate> = pool_vals.iter().map(|v| Estimate::from_samples(v)).collect();
        let best = (0..ests.len()).max_by(|a, b| ests[*a].mean.total_cmp(&ests[*b].mean)).unwrap();
        let excess = paired_difference(&cand, &pool_vals[best]);
        if excess.mean > MC_REJECT_SE * excess.se + 1e-12 {
            return Ok(MaxChosenOutcome::Reject {
                claim_index: ci,
                claim: claim.label.clone(),
                candidate: Estimate::from_samples(&cand),
                pool_sup: ests[best],
                excess,
            });
        }
    }
    Ok(MaxChosenOutcome::Accept { claims_checked: claims.len() })
}
