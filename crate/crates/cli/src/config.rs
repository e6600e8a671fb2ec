//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evalexpr::{ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Value};
use gexp_core::claims::Claim;
use gexp_core::decompose::ZSource;
use gexp_core::dp::LatticeConfig;
use gexp_core::gpde::{GFunction, PDEGrid, Scheme, DEFAULT_CFL};
use gexp_core::paths::TimeGrid;
use gexp_core::scenarios::{ControlSpec, EventSpec, ScenarioSet, ScenarioSpec, SetKind, StopSpec, VolControl};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Price,
    Hedge,
    Decompose,
    Verify,
    Paste,
    Integrate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    /// Time steps of the lattice and the simulated paths.
    pub steps: usize,
    /// Spatial step of the PDE when the mesh is chosen automatically.
    #[serde(default = "default_dx")]
    pub dx: f64,
    #[serde(default)]
    pub nx: Option<usize>,
    #[serde(default)]
    pub x_min: Option<f64>,
    #[serde(default)]
    pub x_max: Option<f64>,
    #[serde(default)]
    pub pde_steps: Option<usize>,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_dx() -> f64 {
    0.05
}

fn default_lambda() -> f64 {
    1.0
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 200,
            dx: default_dx(),
            nx: None,
            x_min: None,
            x_max: None,
            pde_steps: None,
            scheme: Scheme::Explicit,
            lambda: default_lambda(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_paths: 10_000, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeSection {
    #[serde(default)]
    pub source: ZSource,
    /// Overrides `mc.n_paths`.
    #[serde(default)]
    pub n_paths: Option<usize>,
    /// Paths written to `decomposition.csv`, per control.
    #[serde(default = "default_keep")]
    pub keep_paths: usize,
}

fn default_keep() -> usize {
    20
}

impl Default for DecomposeSection {
    fn default() -> Self {
        Self { source: ZSource::default(), n_paths: None, keep_paths: default_keep() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HedgeSection {
    /// Initial capital; the conservative price when absent.
    #[serde(default)]
    pub capital: Option<f64>,
    #[serde(default)]
    pub n_paths: Option<usize>,
    #[serde(default = "default_bins")]
    pub hist_bins: usize,
}

fn default_bins() -> usize {
    40
}

impl Default for HedgeSection {
    fn default() -> Self {
        Self { capital: None, n_paths: None, hist_bins: default_bins() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PasteSection {
    pub base: ControlSpec,
    pub branch: StopSpec,
    pub event: EventSpec,
    pub on: ControlSpec,
    pub off: ControlSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrateSection {
    #[serde(default = "default_levels")]
    pub levels: Vec<u32>,
    #[serde(default = "default_integrate_paths")]
    pub n_paths: usize,
    /// Steps of the simulated integrator on `[0, horizon]`.
    #[serde(default = "default_integrate_steps")]
    pub steps: usize,
    /// Constant variance of the integrator.
    #[serde(default = "default_integrate_a")]
    pub a: f64,
}

fn default_levels() -> Vec<u32> {
    vec![4, 6, 8]
}

fn default_integrate_paths() -> usize {
    100
}

fn default_integrate_steps() -> usize {
    1 << 14
}

fn default_integrate_a() -> f64 {
    1.0
}

impl Default for IntegrateSection {
    fn default() -> Self {
        Self {
            levels: default_levels(),
            n_paths: default_integrate_paths(),
            steps: default_integrate_steps(),
            a: default_integrate_a(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub scenario: ScenarioSpec,
    pub claim: Claim,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub operations: Vec<Operation>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Closed-form value of `E(X)` in the variables `a_low`, `a_high`, `T`, `pi`.
    #[serde(default)]
    pub expected: Option<String>,
    /// Tolerance of the price agreement checks.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub decompose: DecomposeSection,
    #[serde(default)]
    pub hedge: HedgeSection,
    #[serde(default)]
    pub paste: Option<PasteSection>,
    #[serde(default)]
    pub integrate: IntegrateSection,
}

fn default_tolerance() -> f64 {
    1e-2
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if !(g.horizon > 0.0 && g.horizon.is_finite()) {
            bail!("grid.horizon must be positive, got {}", g.horizon);
        }
        if g.steps == 0 {
            bail!("grid.steps must be at least 1");
        }
        if g.lambda < 1.0 {
            bail!("grid.lambda must satisfy lambda >= 1, got {}", g.lambda);
        }
        if self.mc.n_paths == 0 {
            bail!("mc.n_paths must be at least 1");
        }
        if self.tolerance <= 0.0 {
            bail!("tolerance must be positive");
        }
        self.claim.payoff.validate()?;
        let set = self.scenario_set()?;
        if let Some((lo, hi)) = set.constant_bounds() {
            self.pde_grid(&GFunction::new(lo, hi)?)?;
        }
        if let Some(expr) = &self.expected {
            let (lo, hi) = set.global_bounds();
            self.eval_expected(expr, lo, hi)?;
        }
        if self.integrate.steps == 0 || self.integrate.n_paths == 0 || !(self.integrate.a > 0.0) {
            bail!("integrate needs positive steps, n_paths and a");
        }
        if self.integrate.levels.contains(&0) {
            bail!("integrate levels must be at least 1");
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        Ok(TimeGrid::new(self.grid.horizon, self.grid.steps)?)
    }

    pub fn lattice(&self) -> LatticeConfig {
        LatticeConfig { lambda: self.grid.lambda, ..LatticeConfig::default() }
    }

    /// The scenario set on the time grid. Interval sets without a pool get
    /// the two constant endpoint controls.
    pub fn scenario_set(&self) -> Result<ScenarioSet> {
        self.scenario_set_on(&self.time_grid()?)
    }

    pub fn scenario_set_on(&self, grid: &TimeGrid) -> Result<ScenarioSet> {
        let mut set = ScenarioSet::from_spec(&self.scenario, grid)?;
        if set.pool().is_empty() && set.kind == SetKind::IntervalBounds {
            let (lo, hi) = set.global_bounds();
            set = set.with_pool(vec![VolControl::constant(grid, lo), VolControl::constant(grid, hi)])?;
        }
        Ok(set)
    }

    /// PDE mesh: explicit bounds when `nx`, `x_min` and `x_max` are all set,
    /// otherwise a centered mesh with spacing `dx` and a stable step count.
    pub fn pde_grid(&self, g: &GFunction) -> Result<PDEGrid> {
        let c = &self.grid;
        let grid = match (c.nx, c.x_min, c.x_max) {
            (Some(nx), Some(lo), Some(hi)) => {
                let dx = (hi - lo) / (nx.max(2) - 1) as f64;
                let steps = c.pde_steps.unwrap_or(((g.a_high * c.horizon) / (DEFAULT_CFL * dx * dx)).ceil().max(1.0) as usize);
                PDEGrid::new(lo, hi, nx, TimeGrid::new(c.horizon, steps)?, c.scheme)?
            }
            (None, None, None) => {
                let auto = PDEGrid::auto(g, c.horizon, c.dx)?;
                match c.pde_steps {
                    Some(steps) => PDEGrid { time: TimeGrid::new(c.horizon, steps)?, ..auto },
                    None => auto,
                }
                .with_scheme(c.scheme)
            }
            _ => bail!("grid.nx, grid.x_min and grid.x_max must be given together"),
        };
        grid.check(g)?;
        Ok(grid)
    }

    pub fn eval_expected(&self, expr: &str, a_low: f64, a_high: f64) -> Result<f64> {
        let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
        for (k, v) in [("a_low", a_low), ("a_high", a_high), ("T", self.grid.horizon), ("pi", std::f64::consts::PI)] {
            ctx.set_value(k.into(), Value::Float(v)).map_err(|e| anyhow::anyhow!("{e}"))?;
        }
        evalexpr::eval_number_with_context(expr, &ctx).map_err(|e| anyhow::anyhow!("expected value '{expr}': {e}"))
    }

    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.mc.seed = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"name": "t", "scenario": {"kind": "interval_bounds", "a_low": 1.0, "a_high": 4.0},
        "claim": {"payoff": {"kind": "square"}}}"#;

    #[test]
    fn defaults_and_endpoint_pool() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.grid, GridConfig::default());
        let set = cfg.scenario_set().unwrap();
        assert_eq!(set.pool().len(), 2);
    }

    #[test]
    fn expected_formula() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let v = cfg.eval_expected("math::sqrt(a_high*T/(2*pi))", 1.0, 4.0).unwrap();
        assert!((v - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert_eq!(cfg.eval_expected("a_high*T", 1.0, 4.0).unwrap(), 4.0);
        assert!(cfg.eval_expected("a_hgh", 1.0, 4.0).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = MINIMAL.replace("\"name\"", "\"nmae\": 1, \"name\"");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }
}
