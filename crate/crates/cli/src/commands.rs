//! One function per subcommand. Each writes its reports, prints a short
//! summary and returns whether all of its checks passed.

use anyhow::{bail, Result};
use gexp_core::decompose::{extract_decomposition, verify_2bsde, BSDEReport, DecomposeConfig, Decomposition};
use gexp_core::dp::dp_value;
use gexp_core::exec;
use gexp_core::gpde::{solve_g_pde, GFunction};
use gexp_core::hedge::{classify_replicable, superhedge_verify, ClassifyConfig, HedgeConfig, HedgeReport, ReplicabilityReport};
use gexp_core::paths::{pathwise_integral, simulate_path, NoiseSource, TimeGrid};
use gexp_core::scenarios::{contains, paste, PasteSpec, ScenarioSet, VolControl, MEMBERSHIP_TOL};
use serde::Serialize;

use crate::config::{ExperimentConfig, Operation};
use crate::output::OutDir;

pub struct Session {
    pub cfg: ExperimentConfig,
    pub out: OutDir,
    /// Extra halvings of the time step in the price ladder.
    pub refine: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Rung {
    pub steps: usize,
    pub dp: f64,
    pub error: Option<f64>,
    /// Previous error over this one.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PriceReport {
    pub name: String,
    pub claim: String,
    pub steps: usize,
    pub dp: f64,
    /// `None` when the bounds are not constant.
    pub pde: Option<f64>,
    pub expected: Option<f64>,
    pub dp_pde_gap: Option<f64>,
    pub dp_expected_gap: Option<f64>,
    pub pde_expected_gap: Option<f64>,
    pub tolerance: f64,
    pub ladder: Vec<Rung>,
    pub pass: bool,
}

/// Errors below this count as exact in the refinement ladder.
const LADDER_FLOOR: f64 = 1e-10;

pub fn compute_price(cfg: &ExperimentConfig, refine: usize) -> Result<PriceReport> {
    let set = cfg.scenario_set()?;
    let lattice = cfg.lattice();
    let dp = dp_value(&cfg.claim, &set, &lattice)?.root_value();
    let (lo, hi) = set.global_bounds();
    let pde = match set.constant_bounds() {
        Some((lo, hi)) => {
            let g = GFunction::new(lo, hi)?;
            Some(solve_g_pde(&g, &cfg.claim.payoff, &cfg.pde_grid(&g)?)?.root())
        }
        None => None,
    };
    let expected = cfg.expected.as_deref().map(|e| cfg.eval_expected(e, lo, hi)).transpose()?;
    let gap = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| (a - b).abs());
    let dp_pde_gap = gap(Some(dp), pde);
    let dp_expected_gap = gap(Some(dp), expected);
    let pde_expected_gap = gap(pde, expected);
    let tol = cfg.tolerance;
    let mut pass = [dp_pde_gap, dp_expected_gap, pde_expected_gap].iter().flatten().all(|g| *g <= tol);

    let mut ladder = Vec::new();
    if refine > 0 {
        let reference = expected.or(pde);
        let mut prev: Option<f64> = None;
        for j in 0..=refine {
            let steps = cfg.grid.steps << j;
            let grid = TimeGrid::new(cfg.grid.horizon, steps)?;
            let v = dp_value(&cfg.claim, &cfg.scenario_set_on(&grid)?, &lattice)?.root_value();
            let error = reference.map(|r| (v - r).abs());
            let ratio = prev.zip(error).map(|(p, e)| if e > 0.0 { p / e } else { f64::INFINITY });
            if expected.is_some() {
                if let (Some(p), Some(e)) = (prev, error) {
                    pass &= e <= p || e <= LADDER_FLOOR;
                }
            }
            ladder.push(Rung { steps, dp: v, error, ratio });
            prev = error;
        }
    }
    Ok(PriceReport {
        name: cfg.name.clone(),
        claim: cfg.claim.label.clone(),
        steps: cfg.grid.steps,
        dp,
        pde,
        expected,
        dp_pde_gap,
        dp_expected_gap,
        pde_expected_gap,
        tolerance: tol,
        ladder,
        pass,
    })
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.6}"))
}

fn show_e(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.3e}"))
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn price(s: &Session) -> Result<bool> {
    let r = compute_price(&s.cfg, s.refine)?;
    println!("E0({}) = {:.6} (dp), {} (pde), {} (expected)", r.claim, r.dp, show(r.pde), show(r.expected));
    println!(
        "  |dp - pde| = {}, |dp - expected| = {}, |pde - expected| = {}, tolerance {:e}",
        show_e(r.dp_pde_gap),
        show_e(r.dp_expected_gap),
        show_e(r.pde_expected_gap),
        r.tolerance
    );
    for rung in &r.ladder {
        println!("  N = {:>6}: dp {:.8}  error {}  ratio {}", rung.steps, rung.dp, show_e(rung.error), show(rung.ratio));
    }
    s.out.write_json("price.json", &r)?;
    println!("price: {}", verdict(r.pass));
    Ok(r.pass)
}

fn decomposition(cfg: &ExperimentConfig, set: &ScenarioSet) -> Result<Decomposition> {
    let lattice = dp_value(&cfg.claim, set, &cfg.lattice())?;
    let dc = DecomposeConfig {
        source: cfg.decompose.source,
        n_paths: cfg.decompose.n_paths.unwrap_or(cfg.mc.n_paths),
        seed: cfg.mc.seed,
        keep_paths: cfg.decompose.keep_paths,
    };
    Ok(extract_decomposition(&cfg.claim, set, &lattice, &dc)?)
}

pub fn decompose(s: &Session) -> Result<bool> {
    let set = s.cfg.scenario_set()?;
    let dec = decomposition(&s.cfg, &set)?;
    let report = verify_2bsde(&dec)?;
    print_bsde(&report);
    s.out.write_with("decomposition.csv", |w| Ok(dec.write_csv(w)?))?;
    #[derive(Serialize)]
    struct Doc<'a> {
        decomposition: &'a Decomposition,
        checks: &'a BSDEReport,
    }
    s.out.write_json("bsde.json", &Doc { decomposition: &dec, checks: &report })?;
    println!("decompose: {}", verdict(report.pass));
    Ok(report.pass)
}

fn print_bsde(r: &BSDEReport) {
    println!("E0({}) decomposition, ||X|| = {:.4}", r.claim, r.norm_x);
    for l in &r.residuals {
        println!("  E[K_T] under {:<16} {:>10.5} +- {:.5}", l.control, l.k_terminal.mean, l.k_terminal.se);
    }
    let gates = [&r.terminal_identity, &r.budget_identity, &r.k_monotone];
    for g in gates.into_iter().chain(&r.minimality).chain(&r.supermartingale).chain(&r.class_d) {
        println!("  [{}] {:<40} {:>12.4e} vs {:.4e}", verdict(g.pass), g.name, g.value, g.band);
    }
}

fn hedge_report(cfg: &ExperimentConfig, set: &ScenarioSet, dec: &Decomposition) -> Result<HedgeReport> {
    let hc = HedgeConfig {
        n_paths: cfg.hedge.n_paths.unwrap_or(cfg.mc.n_paths),
        seed: cfg.mc.seed.wrapping_add(1),
        hist_bins: cfg.hedge.hist_bins,
    };
    Ok(superhedge_verify(&cfg.claim, set, dec, cfg.hedge.capital.unwrap_or(dec.e0), &hc)?)
}

fn print_hedge(r: &HedgeReport) {
    println!("hedging {} from x = {:.6} (price {:.6}), band {:.4e}", r.claim, r.x, r.dp_value, r.band);
    for c in &r.controls {
        println!(
            "  [{}] {:<16} shortfall {:>10.5} +- {:.5}, covered {:.4}, min {:.4}",
            verdict(c.pass),
            c.control,
            c.shortfall.mean,
            c.shortfall.se,
            c.covered,
            c.min
        );
    }
    for n in &r.notes {
        println!("  note: {n}");
    }
}

pub fn hedge(s: &Session) -> Result<bool> {
    let set = s.cfg.scenario_set()?;
    let dec = decomposition(&s.cfg, &set)?;
    let r = hedge_report(&s.cfg, &set, &dec)?;
    print_hedge(&r);
    s.out.write_json("hedge.json", &r)?;
    s.out.write_with("shortfall.csv", |w| Ok(r.write_histogram_csv(w, s.cfg.hedge.hist_bins)?))?;
    println!("hedge: {}", verdict(r.pass));
    Ok(r.pass)
}

#[derive(Serialize)]
pub struct VerifyReport {
    pub name: String,
    pub price: PriceReport,
    pub bsde: BSDEReport,
    pub hedge: HedgeReport,
    pub replicability: ReplicabilityReport,
    pub pass: bool,
}

pub fn compute_verify(cfg: &ExperimentConfig, refine: usize) -> Result<VerifyReport> {
    let price = compute_price(cfg, refine)?;
    let set = cfg.scenario_set()?;
    let dec = decomposition(cfg, &set)?;
    let bsde = verify_2bsde(&dec)?;
    let hedge = hedge_report(cfg, &set, &dec)?;
    let cc = ClassifyConfig { lattice: cfg.lattice(), n_paths: cfg.mc.n_paths, seed: cfg.mc.seed.wrapping_add(2) };
    let replicability = classify_replicable(&cfg.claim, &set, &cc)?;
    let pass = price.pass && bsde.pass && hedge.pass && replicability.consistent;
    Ok(VerifyReport { name: cfg.name.clone(), price, bsde, hedge, replicability, pass })
}

pub fn verify(s: &Session) -> Result<bool> {
    let r = compute_verify(&s.cfg, s.refine)?;
    println!("[{}] price: dp {:.6}, pde {}", verdict(r.price.pass), r.price.dp, show(r.price.pde));
    println!("[{}] 2BSDE decomposition", verdict(r.bsde.pass));
    println!("[{}] superhedge from x = {:.6}", verdict(r.hedge.pass), r.hedge.x);
    let class = if r.replicability.classification.is_replicable() { "replicable" } else { "not replicable" };
    println!(
        "[{}] replicability: {class}, symmetry gap {:.6}",
        verdict(r.replicability.consistent),
        r.replicability.symmetry.gap
    );
    s.out.write_json("verify.json", &r)?;
    println!("verify: {}", verdict(r.pass));
    Ok(r.pass)
}

#[derive(Debug, Clone, Serialize)]
pub struct Containment {
    pub control: String,
    pub contained: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PasteReport {
    pub inputs: Vec<Containment>,
    pub pasted: Containment,
    pub pass: bool,
}

pub fn compute_paste(cfg: &ExperimentConfig) -> Result<PasteReport> {
    let Some(p) = &cfg.paste else {
        bail!("config has no 'paste' section");
    };
    let grid = cfg.time_grid()?;
    let set = cfg.scenario_set()?;
    let spec = PasteSpec {
        base: p.base.resolve(&grid)?,
        branch: p.branch.resolve(&grid)?,
        event: p.event.resolve(&grid)?,
        on_event: p.on.resolve(&grid)?,
        off_event: p.off.resolve(&grid)?,
    };
    let check = |c: &VolControl| -> Result<Containment> {
        Ok(Containment { control: c.label().to_string(), contained: contains(&set, c, MEMBERSHIP_TOL)? })
    };
    let inputs = [&spec.base, &spec.on_event, &spec.off_event].into_iter().map(check).collect::<Result<Vec<_>>>()?;
    let pasted = check(&paste(&spec)?)?;
    let pass = pasted.contained;
    Ok(PasteReport { inputs, pasted, pass })
}

pub fn paste_cmd(s: &Session) -> Result<bool> {
    let r = compute_paste(&s.cfg)?;
    for c in &r.inputs {
        println!("  {:<24} {}", c.control, if c.contained { "inside" } else { "outside" });
    }
    println!("  {:<24} {}", r.pasted.control, if r.pasted.contained { "inside" } else { "outside" });
    s.out.write_json("paste.json", &r)?;
    if !r.pass {
        let outside: Vec<&str> = r.inputs.iter().filter(|c| !c.contained).map(|c| c.control.as_str()).collect();
        eprintln!("containment violated: {} leaves the scenario set (outside inputs: {})", r.pasted.control, outside.join(", "));
    }
    println!("paste: {}", verdict(r.pass));
    Ok(r.pass)
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegrateRow {
    pub level: u32,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegrateReport {
    pub steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub rows: Vec<IntegrateRow>,
    /// Mean error of the left-point sum on the full grid.
    pub grid_floor: f64,
    pub pass: bool,
}

/// `int B dB` at each level against `(B_T^2 - <B>_T) / 2`.
pub fn compute_integrate(cfg: &ExperimentConfig) -> Result<IntegrateReport> {
    let ic = &cfg.integrate;
    let steps = ic.steps;
    let grid = TimeGrid::new(cfg.grid.horizon, steps)?;
    let control = VolControl::constant(&grid, ic.a);
    let noise = NoiseSource::new(cfg.mc.seed);
    let per_path = exec::try_map_range(ic.n_paths, |id| {
        let p = simulate_path(&control, &grid, &noise, id as u64)?;
        let b = p.series();
        let target = 0.5 * (b[steps] * b[steps] - p.qv_scalar(steps));
        let sum: f64 = (0..steps).map(|k| b[k] * (b[k + 1] - b[k])).sum();
        let errs = ic
            .levels
            .iter()
            .map(|&n| Ok((pathwise_integral(&b, &p, n)?[steps] - target).abs()))
            .collect::<gexp_core::Result<Vec<f64>>>()?;
        Ok(((sum - target).abs(), errs))
    })?;
    let n = ic.n_paths as f64;
    let grid_floor = per_path.iter().map(|(f, _)| f).sum::<f64>() / n;
    let rows: Vec<IntegrateRow> = ic
        .levels
        .iter()
        .enumerate()
        .map(|(j, &level)| IntegrateRow {
            level,
            mean_abs_error: per_path.iter().map(|(_, e)| e[j]).sum::<f64>() / n,
            max_abs_error: per_path.iter().map(|(_, e)| e[j]).fold(0.0, f64::max),
        })
        .collect();
    let pass = rows.windows(2).all(|w| w[1].mean_abs_error < w[0].mean_abs_error || w[1].mean_abs_error <= 2.0 * grid_floor);
    Ok(IntegrateReport { steps, n_paths: ic.n_paths, seed: cfg.mc.seed, rows, grid_floor, pass })
}

pub fn integrate(s: &Session) -> Result<bool> {
    let r = compute_integrate(&s.cfg)?;
    println!("{:>6} {:>14} {:>14}", "n", "mean |err|", "max |err|");
    for row in &r.rows {
        println!("{:>6} {:>14.4e} {:>14.4e}", row.level, row.mean_abs_error, row.max_abs_error);
    }
    println!("{:>6} {:>14.4e}", "grid", r.grid_floor);
    s.out.write_json("integrate.json", &r)?;
    println!("integrate: {}", verdict(r.pass));
    Ok(r.pass)
}

pub fn dispatch(s: &Session, op: Operation) -> Result<bool> {
    match op {
        Operation::Price => price(s),
        Operation::Hedge => hedge(s),
        Operation::Decompose => decompose(s),
        Operation::Verify => verify(s),
        Operation::Paste => paste_cmd(s),
        Operation::Integrate => integrate(s),
    }
}

pub fn run_operations(s: &Session) -> Result<bool> {
    if s.cfg.operations.is_empty() {
        bail!("config lists no operations");
    }
    let mut pass = true;
    for &op in &s.cfg.operations {
        pass &= dispatch(s, op)?;
    }
    Ok(pass)
}

pub fn acceptance(only: &[usize]) -> Result<bool> {
    let ids: Vec<usize> = if only.is_empty() { (1..=10).collect() } else { only.to_vec() };
    if let Some(bad) = ids.iter().find(|&&i| !(1..=10).contains(&i)) {
        bail!("no acceptance criterion {bad}");
    }
    let mut failed = 0;
    for id in ids {
        let r = gexp_core::acceptance::run(id);
        println!("{r}");
        failed += usize::from(!r.pass);
    }
    println!("{}", if failed == 0 { "all criteria pass".to_string() } else { format!("{failed} criteria failed") });
    Ok(failed == 0)
}
