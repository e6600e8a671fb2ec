use std::sync::Arc;

use gexp_core::claims::{Claim, Payoff};
use gexp_core::dp::*;
use gexp_core::paths::TimeGrid;
use gexp_core::scenarios::{Rule, ScenarioSet, SetKind, VolControl};
use proptest::prelude::*;

fn set(n: usize) -> ScenarioSet {
    ScenarioSet::interval(&TimeGrid::new(1.0, n).unwrap(), 1.0, 4.0).unwrap()
}

fn structure() -> Arc<Structure> {
    Arc::new(Structure::build(&set(30), &LatticeConfig::default()).unwrap())
}

fn payoff(kind: u8, k: f64, w: f64) -> Payoff {
    let p = match kind % 6 {
        0 => Payoff::Call { strike: k },
        1 => Payoff::Put { strike: k },
        2 => Payoff::square(),
        3 => Payoff::Digital { strike: k },
        4 => Payoff::linear(1.0, k),
        _ => Payoff::Abs { center: k },
    };
    p.scaled(w)
}

fn close(a: &[Vec<f64>], b: &[Vec<f64>], f: impl Fn(f64, f64) -> f64) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| f(*u, *v))).fold(f64::NEG_INFINITY, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn operator_axioms_nodewise(a in 0u8..6, b in 0u8..6, k1 in -1.0f64..1.0, k2 in -1.0f64..1.0, w1 in -2.0f64..2.0, w2 in -2.0f64..2.0, lambda in 0.0f64..3.0, c in -5.0f64..5.0, bump in 0.0f64..2.0) {
        let s = structure();
        let x = payoff(a, k1, w1);
        let y = payoff(b, k2, w2);
        let ex = dp_on(&s, &x, "x").unwrap();
        let ey = dp_on(&s, &y, "y").unwrap();
        let tol = 1e-12 * (1.0 + w1.abs() + w2.abs() + c.abs()) * 10.0;
        let sum = dp_on(&s, &x.plus(&y), "x+y").unwrap();
        let both: Vec<Vec<f64>> = ex.values.iter().zip(&ey.values).map(|(u, v)| u.iter().zip(v).map(|(p, q)| p + q).collect()).collect();
        prop_assert!(close(&sum.values, &both, |u, v| u - v) <= tol);
        let scaled = dp_on(&s, &x.scaled(lambda), "lx").unwrap();
        prop_assert!(close(&scaled.values, &ex.values, |u, v| (u - lambda * v).abs()) <= tol * (1.0 + lambda));
        let shifted = dp_on(&s, &x.shifted(c), "x+c").unwrap();
        prop_assert!(close(&shifted.values, &ex.values, |u, v| (u - v - c).abs()) <= tol);
        let above = dp_on(&s, &x.plus(&Payoff::Call { strike: k2 }.scaled(bump)), "x+").unwrap();
        prop_assert!(close(&ex.values, &above.values, |u, v| u - v) <= tol);
    }

    #[test]
    fn argmax_sits_at_the_endpoints(a in 0u8..6, k in -1.0f64..1.0, w in -2.0f64..2.0) {
        let lat = dp_on(&structure(), &payoff(a, k, w), "x").unwrap();
        prop_assert!(lat.argmax_at_endpoints());
    }

    #[test]
    fn time_consistency_random_pairs(a in 0u8..6, k in -1.0f64..1.0, s in 0usize..=30, t in 0usize..=30) {
        let lat = dp_on(&structure(), &payoff(a, k, 1.0), "x").unwrap();
        prop_assert!(check_time_consistency(&lat, s.min(t), s.max(t)).unwrap() <= LATTICE_TOL);
    }
}

#[test]
fn value_dominates_pool_estimates() {
    let s = set(50);
    let g = *s.grid();
    let s = s.with_pool(vec![
        VolControl::constant(&g, 1.0),
        VolControl::constant(&g, 2.5),
        VolControl::new("switch", &g, Rule::ThresholdSwitch { level: 0.0, below: 4.0, above: 1.0, abs: true }).unwrap(),
    ])
    .unwrap();
    for claim in gexp_core::claims::bundled_claims() {
        let v = dp_value(&claim, &s, &LatticeConfig::default()).unwrap().root_value();
        let r = mc_lower_bound(&claim, &s, v, 4000, 1).unwrap();
        for c in &r.per_control {
            assert!(v >= c.estimate.mean - 3.0 * c.estimate.se - 1e-2, "{} {} {:?}", claim.label, v, c);
        }
    }
}

#[test]
fn finer_control_mesh_never_lowers_the_value() {
    let g = TimeGrid::new(1.0, 40).unwrap();
    let high = Rule::HitSwitch { level: 0.5, before: 2.0, after: 4.0 };
    let claim = Claim::new("call", Payoff::Call { strike: 0.2 });
    let v = |m: usize| {
        let s = ScenarioSet::from_rules(SetKind::IntervalBounds, &g, Rule::Constant(1.0), high.clone(), vec![], m).unwrap();
        dp_value(&claim, &s, &LatticeConfig::default()).unwrap().root_value()
    };
    assert!(v(3) <= v(9) + 1e-2);
}

#[test]
fn dp_approaches_the_closed_form_at_first_order() {
    // ATM call under G with (1, 4): sqrt(4 / (2 pi))
    let exact = (4.0 / (2.0 * std::f64::consts::PI)).sqrt();
    let claim = Claim::new("call", Payoff::Call { strike: 0.0 });
    let errs: Vec<f64> = [50, 100, 200, 400]
        .iter()
        .map(|n| (dp_value(&claim, &set(*n), &LatticeConfig::default()).unwrap().root_value() - exact).abs())
        .collect();
    // C in |dp - exact| <= C dt
    let c: Vec<f64> = errs.iter().zip([50.0, 100.0, 200.0, 400.0]).map(|(e, n)| e * n).collect();
    for w in errs.windows(2) {
        assert!(w[1] * 1.98 <= w[0], "{errs:?}");
    }
    assert!(c.iter().all(|c| *c < 0.25), "{c:?}");
}
