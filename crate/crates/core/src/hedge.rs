//! Superhedging checks and the replicability classification.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::claims::Claim;
use crate::decompose::{check_symmetry, Bins, Decomposition, Gate, Strategy, SymmetryReport, ZSource};
use crate::dp::{dp_on, dp_value, ControlEstimate, LatticeConfig, ValueLattice};
use crate::error::{argument, Result};
use crate::exec;
use crate::mc::{paired_difference, terminal_values, Estimate, Moments};
use crate::paths::{simulate_path, NoiseSource};
use crate::scenarios::{ScenarioSet, VolControl};

/// Tail mass allowed below the band.
pub const TAIL_FRACTION: f64 = 1e-3;
/// Band constant `C` in `C (dx + sqrt(dt)) ||X||`.
pub const BAND_CONSTANT: f64 = 2.0;
/// Added to every hedging seed that collides with the extraction seed.
const FRESH_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgeConfig {
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default = "default_hist_bins")]
    pub hist_bins: usize,
}

fn default_hist_bins() -> usize {
    40
}

impl Default for HedgeConfig {
    fn default() -> Self {
        Self { n_paths: 10_000, seed: 2, hist_bins: default_hist_bins() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ControlHedge {
    pub control: String,
    /// `x + sum Z dB - X` at `T`.
    pub shortfall: Estimate,
    pub min: f64,
    pub max: f64,
    /// Fraction of paths with shortfall `>= -band`.
    pub covered: f64,
    /// Fraction of paths with `|shortfall| <= band`.
    pub replicated: f64,
    /// Binned `E[Z dB] - 3 SE`, must be `<= tol` for the gains to be a supermartingale.
    pub admissibility: Gate,
    pub pass: bool,
    #[serde(skip)]
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HedgeReport {
    pub claim: String,
    pub x: f64,
    pub dp_value: f64,
    pub source: ZSource,
    pub band: f64,
    /// Tolerance on the mean shortfall, on top of `3 SE`.
    pub mean_tol: f64,
    pub seed: u64,
    pub controls: Vec<ControlHedge>,
    pub pass: bool,
    /// Every control replicates within the band.
    pub replicable: bool,
    pub notes: Vec<String>,
}

/// `C (dx + sqrt(dt)) ||X||`.
pub fn hedge_band(lattice: &ValueLattice, norm_x: f64) -> f64 {
    let g = lattice.structure.grid();
    BAND_CONSTANT * (lattice.structure.dx() + g.dt().sqrt()) * norm_x
}

/// Runs `Z` from the decomposition on fresh paths starting from capital `x`.
pub fn superhedge_verify(claim: &Claim, set: &ScenarioSet, dec: &Decomposition, x: f64, cfg: &HedgeConfig) -> Result<HedgeReport> {
    let mut cfg = cfg.clone();
    if cfg.seed == dec.seed {
        cfg.seed = cfg.seed.wrapping_add(FRESH_SEED_OFFSET);
    }
    hedge_with(claim, set, &dec.strategy, dec.norm_x, x, &cfg)
}

/// Hedging run for any strategy.
pub fn hedge_with(claim: &Claim, set: &ScenarioSet, strategy: &Strategy, norm_x: f64, x: f64, cfg: &HedgeConfig) -> Result<HedgeReport> {
    if cfg.n_paths == 0 {
        return argument("hedging needs at least one path");
    }
    let lattice = strategy.lattice();
    let grid = *set.grid();
    if lattice.structure.grid() != &grid {
        return argument("strategy and scenario set are on different grids");
    }
    let n = grid.steps();
    let dp = lattice.root_value();
    let band = hedge_band(lattice, norm_x);
    let mean_tol = 10.0 * grid.dt() * norm_x;
    let bins = Bins::new(&grid, set.global_bounds().1);
    let mut notes = Vec::new();
    if x < dp - mean_tol {
        notes.push(format!("initial capital {x} is below the price {dp}; the check is expected to fail"));
    }
    notes.push("the lattice root is deterministic, so the prices at 0 and 0- coincide".into());

    let mut controls: Vec<VolControl> = set.pool().to_vec();
    controls.push(lattice.argmax_control()?);
    let noise = NoiseSource::new(cfg.seed);
    let mut out = Vec::with_capacity(controls.len());
    for c in &controls {
        let (samples, gains, err) = exec::chunked_fold(
            cfg.n_paths,
            || (Vec::new(), vec![Moments::default(); bins.len()], None::<crate::Error>),
            |acc, i| {
                if acc.2.is_some() {
                    return;
                }
                let r = (|| -> Result<f64> {
                    let p = simulate_path(c, &grid, &noise, i as u64)?;
                    let (e, d) = strategy.values_along(&p);
                    let z = strategy.z_along(&p, &e, &d)?;
                    let mut w = x;
                    for k in 0..n {
                        let g = z[k] * (p.b(k + 1) - p.b(k));
                        acc.1[bins.index(k, p.b(k))].push(g);
                        w += g;
                    }
                    Ok(w - claim.eval(p.b(n)))
                })();
                match r {
                    Ok(s) => acc.0.push(s),
                    Err(e) => acc.2 = Some(e),
                }
            },
            |a, b| {
                a.0.extend(b.0);
                for (u, v) in a.1.iter_mut().zip(&b.1) {
                    u.merge(v);
                }
                if a.2.is_none() {
                    a.2 = b.2;
                }
            },
        );
        if let Some(e) = err {
            return Err(e);
        }
        let est = Estimate::from_samples(&samples);
        let nn = samples.len() as f64;
        let covered = samples.iter().filter(|s| **s >= -band).count() as f64 / nn;
        let replicated = samples.iter().filter(|s| s.abs() <= band).count() as f64 / nn;
        let worst_gain = gains
            .iter()
            .filter(|m| m.n >= crate::decompose::MIN_BIN)
            .map(|m| {
                let e = m.estimate();
                e.mean - 3.0 * e.se
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let admissibility = Gate::le("binned E[Z dB] - 3 SE", worst_gain, mean_tol / n as f64);
        let pass = covered >= 1.0 - TAIL_FRACTION && est.mean >= -(3.0 * est.se + mean_tol);
        out.push(ControlHedge {
            control: c.label().to_string(),
            shortfall: est,
            min: samples.iter().copied().fold(f64::INFINITY, f64::min),
            max: samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            covered,
            replicated,
            admissibility,
            pass,
            samples,
        });
    }
    let pass = out.iter().all(|c| c.pass);
    let replicable = out.iter().all(|c| {
        c.replicated >= 1.0 - TAIL_FRACTION && c.shortfall.mean.abs() <= 3.0 * c.shortfall.se + mean_tol
    });
    Ok(HedgeReport {
        claim: claim.label.clone(),
        x,
        dp_value: dp,
        source: strategy.source,
        band,
        mean_tol,
        seed: cfg.seed,
        controls: out,
        pass,
        replicable,
        notes,
    })
}

impl HedgeReport {
    /// Histogram of shortfalls per control: `control, lo, hi, count`.
    pub fn write_histogram_csv<W: Write>(&self, out: W, bins: usize) -> Result<()> {
        let bins = bins.max(1);
        let lo = self.controls.iter().map(|c| c.min).fold(f64::INFINITY, f64::min);
        let hi = self.controls.iter().map(|c| c.max).fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["control", "lo", "hi", "count"])?;
        for c in &self.controls {
            let mut counts = vec![0usize; bins];
            for s in &c.samples {
                let b = (((s - lo) / width).floor() as usize).min(bins - 1);
                counts[b] += 1;
            }
            for (b, n) in counts.iter().enumerate() {
                let a = lo + b as f64 * width;
                w.write_record(&[c.control.clone(), a.to_string(), (a + width).to_string(), n.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `sup_P E^P[X]` as the lattice root.
pub fn conservative_price(claim: &Claim, set: &ScenarioSet, cfg: &LatticeConfig) -> Result<f64> {
    Ok(dp_value(claim, set, cfg)?.root_value())
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Replicability {
    Replicable { x: f64 },
    NotReplicable { low: ControlEstimate, high: ControlEstimate, symmetry_gap: f64 },
}

impl Replicability {
    pub fn is_replicable(&self) -> bool {
        matches!(self, Replicability::Replicable { .. })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicabilityReport {
    pub claim: String,
    pub classification: Replicability,
    pub symmetry: SymmetryReport,
    pub estimates: Vec<ControlEstimate>,
    /// Largest paired difference over its `3 SE`.
    pub max_separation: f64,
    pub expectations_agree: bool,
    /// Zero-K replication from `x = E_0(X)` with the lattice delta.
    pub replication_within_band: bool,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    pub lattice: LatticeConfig,
    pub n_paths: usize,
    pub seed: u64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self { lattice: LatticeConfig::default(), n_paths: 20_000, seed: 3 }
    }
}

/// Replicable iff `E(-X) = -E(X)` on the lattice and `E^P[X]` agrees across
/// the pool. The pool is extended by the lattice argmax controls of `X` and `-X`.
pub fn classify_replicable(claim: &Claim, set: &ScenarioSet, cfg: &ClassifyConfig) -> Result<ReplicabilityReport> {
    let lat = dp_value(claim, set, &cfg.lattice)?;
    let neg = dp_on(&lat.structure, &claim.payoff.negated(), "-X")?;
    let symmetry = check_symmetry(claim, set, &lat, 64, cfg.seed)?;

    let mut pool: Vec<VolControl> = set.pool().to_vec();
    pool.push(lat.argmax_control()?.with_label("argmax(X)"));
    pool.push(neg.argmax_control()?.with_label("argmax(-X)"));
    let grid = *set.grid();
    let noise = NoiseSource::new(cfg.seed);
    let samples = pool
        .iter()
        .map(|c| Ok(terminal_values(c, &grid, noise, cfg.n_paths)?.into_iter().map(|b| claim.eval(b)).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let estimates: Vec<ControlEstimate> = pool
        .iter()
        .zip(&samples)
        .map(|(c, s)| ControlEstimate { control: c.label().to_string(), estimate: Estimate::from_samples(s) })
        .collect();
    let mut max_separation = 0.0f64;
    let mut agree = true;
    let mut witness = (0, 0, 0.0f64);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            let d = paired_difference(&samples[i], &samples[j]);
            let tol = 3.0 * d.se + 1e-12 * (1.0 + d.mean.abs());
            if d.mean.abs() > tol {
                agree = false;
            }
            max_separation = max_separation.max(d.mean.abs() / tol);
            if d.mean.abs() > witness.2 {
                witness = (i, j, d.mean.abs());
            }
        }
    }

    let norm_x = dp_on(&lat.structure, &claim.payoff.abs_pow(1.0), "|X|")?.root_value();
    let hedge = hedge_with(
        claim,
        set,
        &Strategy::markovian(&lat, &claim.payoff),
        norm_x,
        lat.root_value(),
        &HedgeConfig { n_paths: cfg.n_paths.min(5000), seed: cfg.seed.wrapping_add(FRESH_SEED_OFFSET), hist_bins: 0 },
    )?;
    let replication_within_band = hedge.replicable;

    let classification = if symmetry.symmetric && agree {
        Replicability::Replicable { x: lat.root_value() }
    } else {
        let (i, j, _) = witness;
        let (lo, hi) = if estimates[i].estimate.mean <= estimates[j].estimate.mean { (i, j) } else { (j, i) };
        Replicability::NotReplicable {
            low: estimates[lo].clone(),
            high: estimates[hi].clone(),
            symmetry_gap: symmetry.gap,
        }
    };
    let consistent = symmetry.symmetric == agree && agree == replication_within_band;
    Ok(ReplicabilityReport {
        claim: claim.label.clone(),
        classification,
        symmetry,
        estimates,
        max_separation,
        expectations_agree: agree,
        replication_within_band,
        consistent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::Payoff;
    use crate::decompose::{extract_decomposition, DecomposeConfig};
    use crate::paths::TimeGrid;

    fn set(n: usize) -> ScenarioSet {
        ScenarioSet::interval(&TimeGrid::new(1.0, n).unwrap(), 1.0, 4.0).unwrap()
    }

    #[test]
    fn linear_claim_replicates_exactly() {
        let s = set(50);
        let c = Claim::new("B_T", Payoff::linear(1.0, 0.0));
        let lat = dp_value(&c, &s, &LatticeConfig::default()).unwrap();
        let dec = extract_decomposition(&c, &s, &lat, &DecomposeConfig { n_paths: 100, ..Default::default() }).unwrap();
        let r = superhedge_verify(&c, &s, &dec, 0.0, &HedgeConfig { n_paths: 500, seed: dec.seed, hist_bins: 10 }).unwrap();
        assert_ne!(r.seed, dec.seed);
        assert!(r.pass && r.replicable);
        for ch in &r.controls {
            assert!(ch.samples.iter().all(|s| s.abs() < 1e-12));
        }
    }

    #[test]
    fn square_superhedge() {
        let s = set(100);
        let c = Claim::new("B_T^2", Payoff::square());
        let lat = dp_value(&c, &s, &LatticeConfig::default()).unwrap();
        let dec = extract_decomposition(&c, &s, &lat, &DecomposeConfig { n_paths: 200, ..Default::default() }).unwrap();
        let cfg = HedgeConfig { n_paths: 5000, seed: 9, hist_bins: 20 };
        let r = superhedge_verify(&c, &s, &dec, 4.0, &cfg).unwrap();
        assert!(r.pass, "{r:#?}");
        let lo = r.controls.iter().find(|c| c.control == "const(1)").unwrap();
        assert!((lo.shortfall.mean - 3.0).abs() < 0.05);
        let r = superhedge_verify(&c, &s, &dec, 3.5, &cfg).unwrap();
        let hi = r.controls.iter().find(|c| c.control == "const(4)").unwrap();
        assert!(!hi.pass && (hi.shortfall.mean + 0.5).abs() < 0.05);
        assert!(!r.pass && !r.notes.is_empty());
        let mut buf = Vec::new();
        r.write_histogram_csv(&mut buf, 20).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 20 * r.controls.len());
    }

    #[test]
    fn prices() {
        let s = set(200);
        let cfg = LatticeConfig::default();
        assert!((conservative_price(&Claim::new("c", Payoff::constant(2.5)), &s, &cfg).unwrap() - 2.5).abs() < 1e-12);
        assert!((conservative_price(&Claim::new("sq", Payoff::square()), &s, &cfg).unwrap() - 4.0).abs() < 2e-2);
        assert!((conservative_price(&Claim::new("-sq", Payoff::square().negated()), &s, &cfg).unwrap() + 1.0).abs() < 2e-2);
    }

    #[test]
    fn classification() {
        let s = set(50);
        let cfg = ClassifyConfig { n_paths: 4000, ..Default::default() };
        let r = classify_replicable(&Claim::new("B_T", Payoff::linear(1.0, 0.0)), &s, &cfg).unwrap();
        assert!(r.consistent);
        assert!(matches!(r.classification, Replicability::Replicable { x } if x.abs() < 1e-12));
        let r = classify_replicable(&Claim::new("2B_T+7", Payoff::linear(2.0, 0.0).shifted(7.0)), &s, &cfg).unwrap();
        assert!(matches!(r.classification, Replicability::Replicable { x } if (x - 7.0).abs() < 1e-12), "{r:#?}");
        let r = classify_replicable(&Claim::new("B_T^2", Payoff::square()), &s, &cfg).unwrap();
        assert!(r.consistent, "{r:#?}");
        match r.classification {
            Replicability::NotReplicable { low, high, symmetry_gap } => {
                assert!((symmetry_gap - 3.0).abs() < 0.15);
                assert!((low.estimate.mean - 1.0).abs() < 0.1 && (high.estimate.mean - 4.0).abs() < 0.2);
            }
            _ => panic!("B_T^2 classified replicable"),
        }
    }
}
