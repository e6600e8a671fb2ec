use gexp_core::claims::{bundled_claims, Claim, Payoff};
use gexp_core::dp::{dp_value, mc_lower_bound, LatticeConfig};
use gexp_core::hedge::*;
use gexp_core::paths::TimeGrid;
use gexp_core::scenarios::{ScenarioSet, VolControl};

fn set() -> ScenarioSet {
    let s = ScenarioSet::interval(&TimeGrid::new(1.0, 40).unwrap(), 1.0, 4.0).unwrap();
    let g = *s.grid();
    s.with_pool(vec![VolControl::constant(&g, 1.0), VolControl::constant(&g, 2.0), VolControl::constant(&g, 4.0)]).unwrap()
}

#[test]
fn price_dominates_pool_estimates() {
    let s = set();
    for claim in bundled_claims() {
        let p = conservative_price(&claim, &s, &LatticeConfig::default()).unwrap();
        let r = mc_lower_bound(&claim, &s, p, 5000, 6).unwrap();
        for c in &r.per_control {
            assert!(p >= c.estimate.mean - 3.0 * c.estimate.se, "{}: {p} vs {:?}", claim.label, c);
        }
    }
}

#[test]
fn classification_scales() {
    let s = set();
    let cfg = ClassifyConfig { n_paths: 3000, ..Default::default() };
    for claim in [Claim::new("2B_T+7", Payoff::linear(2.0, 7.0)), Claim::new("B_T^2", Payoff::square()), Claim::new("3", Payoff::constant(3.0))] {
        let base = classify_replicable(&claim, &s, &cfg).unwrap();
        for lambda in [0.5, 3.0] {
            let r = classify_replicable(&claim.scaled(lambda), &s, &cfg).unwrap();
            assert_eq!(r.classification.is_replicable(), base.classification.is_replicable());
            if let (Replicability::Replicable { x }, Replicability::Replicable { x: y }) = (&base.classification, &r.classification) {
                assert!((y - lambda * x).abs() <= 1e-12 * (1.0 + x.abs()));
            }
            assert!((r.symmetry.gap - lambda * base.symmetry.gap).abs() <= 1e-12 * (1.0 + base.symmetry.gap.abs()));
        }
    }
}

#[test]
fn zero_capital_fails_for_a_convex_claim() {
    let s = set();
    let claim = Claim::new("call", Payoff::Call { strike: 0.0 });
    let lat = dp_value(&claim, &s, &LatticeConfig::default()).unwrap();
    let dec = gexp_core::decompose::extract_decomposition(&claim, &s, &lat, &Default::default()).unwrap();
    let ok = superhedge_verify(&claim, &s, &dec, lat.root_value(), &HedgeConfig::default()).unwrap();
    assert!(ok.pass, "{ok:#?}");
    assert!(ok.controls.iter().all(|c| c.admissibility.pass));
    let bad = superhedge_verify(&claim, &s, &dec, 0.0, &HedgeConfig::default()).unwrap();
    assert!(!bad.pass);
    let json = serde_json::to_value(&ok).unwrap();
    assert!(json["controls"].as_array().unwrap().len() == 4);
}
