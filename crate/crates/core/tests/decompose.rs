use gexp_core::claims::{Claim, Payoff};
use gexp_core::decompose::*;
use gexp_core::dp::{dp_value, LatticeConfig};
use gexp_core::paths::TimeGrid;
use gexp_core::scenarios::{ScenarioSet, VolControl};

fn set(n: usize, lo: f64, hi: f64) -> ScenarioSet {
    ScenarioSet::interval(&TimeGrid::new(1.0, n).unwrap(), lo, hi).unwrap()
}

#[test]
fn minimality_decays_toward_the_argmax_control() {
    let s = set(60, 1.0, 4.0);
    let s = s.clone().with_pool(vec![VolControl::constant(s.grid(), 1.0), VolControl::constant(s.grid(), 2.5)]).unwrap();
    let claim = Claim::new("B_T^2", Payoff::square());
    let lat = dp_value(&claim, &s, &LatticeConfig::default()).unwrap();
    let dec = extract_decomposition(&claim, &s, &lat, &DecomposeConfig { n_paths: 20_000, seed: 4, ..Default::default() }).unwrap();
    let k = |label: &str| dec.control(label).unwrap().k_terminal;
    let pools: [Vec<_>; 3] = [vec![k("const(1)")], vec![k("const(1)"), k("const(2.5)")], dec.controls.iter().map(|c| c.k_terminal).collect()];
    let mins: Vec<_> = pools.iter().map(|p| *p.iter().min_by(|a, b| a.mean.total_cmp(&b.mean)).unwrap()).collect();
    for w in mins.windows(2) {
        assert!(w[1].mean <= w[0].mean + 3.0 * w[0].se.max(w[1].se), "{mins:?}");
    }
    let band = MINIMALITY_BAND * dec.norm_x;
    assert!(mins[2].mean <= 3.0 * mins[2].se + band);
    let rep = verify_2bsde(&dec).unwrap();
    assert!(rep.pass, "{rep:#?}");
    assert!(rep.supermartingale.iter().all(|g| g.pass));
}

#[test]
fn dominated_case_has_no_residual_drift() {
    let s = set(50, 2.0, 2.0);
    for claim in [Claim::new("call", Payoff::Call { strike: 0.1 }), Claim::new("B_T^2", Payoff::square())] {
        let lat = dp_value(&claim, &s, &LatticeConfig::default()).unwrap();
        let dec = extract_decomposition(&claim, &s, &lat, &DecomposeConfig { n_paths: 10_000, ..Default::default() }).unwrap();
        let band = MINIMALITY_BAND * dec.norm_x;
        for c in &dec.controls {
            assert!(c.k_terminal.mean.abs() <= 3.0 * c.k_terminal.se + band, "{} {:?}", claim.label, c.k_terminal);
        }
        assert!(verify_2bsde(&dec).unwrap().pass);
    }
}

#[test]
fn bracket_and_delta_agree_at_grid_rate() {
    let claim = Claim::new("call", Payoff::Call { strike: 0.0 });
    let mut cs = Vec::new();
    for n in [50, 200] {
        let s = set(n, 1.0, 4.0);
        let lat = dp_value(&claim, &s, &LatticeConfig::default()).unwrap();
        let z = z_agreement(&claim, &lat, &VolControl::constant(s.grid(), 2.0), 400, 3).unwrap();
        assert!(z.rms <= z.constant * z.scale + 1e-15);
        cs.push(z);
    }
    // the constant stays bounded as the grid refines
    assert!(cs[1].constant <= 2.0 * cs[0].constant + 1.0, "{cs:?}");
}

#[test]
fn path_export_has_one_row_per_node() {
    let s = set(10, 1.0, 4.0);
    let claim = Claim::new("B_T^2", Payoff::square());
    let lat = dp_value(&claim, &s, &LatticeConfig::default()).unwrap();
    let dec = extract_decomposition(&claim, &s, &lat, &DecomposeConfig { n_paths: 20, keep_paths: 3, ..Default::default() }).unwrap();
    let mut buf = Vec::new();
    dec.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + dec.controls.len() * 3 * 11);
    assert!(text.starts_with("control,path_id,t,B,E,Z,K"));
    for c in &dec.controls {
        for p in &c.paths {
            assert_eq!(p.k[0], 0.0);
        }
    }
    let json = serde_json::to_string(&verify_2bsde(&dec).unwrap()).unwrap();
    assert!(json.contains("\"minimality\""));
}

#[test]
fn degenerate_variance_estimate_is_a_domain_error() {
    // zero-volatility path: the bracket cannot recover Z
    let s = set(10, 1e-12, 1e-12);
    let claim = Claim::new("B_T^2", Payoff::square());
    let lat = dp_value(&claim, &s, &LatticeConfig::default()).unwrap();
    let r = extract_decomposition(&claim, &s, &lat, &DecomposeConfig { source: ZSource::Bracket, n_paths: 10, ..Default::default() });
    assert!(matches!(r, Err(gexp_core::Error::Domain(_))), "{r:?}");
}
