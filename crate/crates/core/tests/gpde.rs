use gexp_core::claims::Payoff;
use gexp_core::gpde::*;
use gexp_core::paths::TimeGrid;
use proptest::prelude::*;

fn g14() -> GFunction {
    GFunction::new(1.0, 4.0).unwrap()
}

fn grid(scheme: Scheme) -> PDEGrid {
    PDEGrid::auto(&g14(), 1.0, 0.1).unwrap().with_scheme(scheme)
}

fn payoff(kind: u8, k: f64) -> Payoff {
    match kind % 5 {
        0 => Payoff::Call { strike: k },
        1 => Payoff::Put { strike: k },
        2 => Payoff::square(),
        3 => Payoff::Digital { strike: k },
        _ => Payoff::Abs { center: k },
    }
}

fn scheme(i: u8) -> Scheme {
    if i % 2 == 0 {
        Scheme::Explicit
    } else {
        Scheme::ImplicitSplitting
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn sublinear_and_homogeneous(a in 0u8..5, b in 0u8..5, k1 in -1.0f64..1.0, k2 in -1.0f64..1.0, w in -2.0f64..2.0, lambda in 0.0f64..3.0, s in 0u8..2) {
        let g = g14();
        let pg = grid(scheme(s));
        let f = payoff(a, k1).scaled(w);
        let h = payoff(b, k2);
        let uf = solve_g_pde(&g, &f, &pg).unwrap().root();
        let uh = solve_g_pde(&g, &h, &pg).unwrap().root();
        let ufh = solve_g_pde(&g, &f.plus(&h), &pg).unwrap().root();
        prop_assert!(ufh <= uf + uh + 10.0 * pg.dx() * pg.dx());
        let ul = solve_g_pde(&g, &f.scaled(lambda), &pg).unwrap().root();
        prop_assert!((ul - lambda * uf).abs() <= 1e-12 * (1.0 + uf.abs() * lambda));
    }

    #[test]
    fn monotone_and_shift_invariant(a in 0u8..5, k in -1.0f64..1.0, c in -3.0f64..3.0, bump in 0.0f64..2.0, s in 0u8..2) {
        let g = g14();
        let pg = grid(scheme(s));
        let f = payoff(a, k);
        let h = f.plus(&Payoff::Call { strike: k }.scaled(bump));
        let sf = solve_g_pde(&g, &f, &pg).unwrap();
        let sh = solve_g_pde(&g, &h, &pg).unwrap();
        for j in 0..sf.times().len() {
            for (x, y) in sf.slice(j).iter().zip(sh.slice(j)) {
                prop_assert!(x <= &(y + 1e-12));
            }
        }
        let shifted = solve_g_pde(&g, &f.shifted(c), &pg).unwrap().root();
        prop_assert!((shifted - sf.root() - c).abs() <= 1e-12 * (1.0 + c.abs() + sf.root().abs()));
    }
}

#[test]
fn degenerate_matches_heat_kernel() {
    let a = 2.0;
    let g = GFunction::new(a, a).unwrap();
    let pg = PDEGrid::auto(&g, 1.0, 0.05).unwrap();
    // E x^2 = aT, E (x + 1)^2 = aT + 1, E (3x - 1) = -1
    let cases = [
        (Payoff::square(), a),
        (Payoff::square().plus(&Payoff::linear(2.0, 1.0)), a + 1.0),
        (Payoff::linear(3.0, -1.0), -1.0),
    ];
    for (f, exact) in cases {
        let v = solve_g_pde(&g, &f, &pg).unwrap().root();
        assert!((v - exact).abs() < 1e-3, "{v} vs {exact}");
    }
}

#[test]
fn convex_payoffs_sit_at_maximal_variance() {
    let g = g14();
    let top = GFunction::new(4.0, 4.0).unwrap();
    let pg = PDEGrid::auto(&g, 1.0, 0.05).unwrap();
    for f in [Payoff::Call { strike: 0.3 }, Payoff::square(), Payoff::Abs { center: -0.2 }] {
        let u = solve_g_pde(&g, &f, &pg).unwrap().root();
        let v = solve_g_pde(&top, &f, &pg).unwrap().root();
        assert!((u - v).abs() < 1e-3, "{u} vs {v}");
    }
}

#[test]
fn refinement_cuts_error_by_three() {
    // convex quartic: u(0,0) = 3 a_high^2 T^2
    let g = g14();
    let exact = 3.0 * 16.0;
    let err = |dx: f64| {
        let pg = PDEGrid::auto(&g, 1.0, dx).unwrap();
        (solve_g_pde(&g, &Payoff::Quartic, &pg).unwrap().root() - exact).abs()
    };
    let (e1, e2) = (err(0.2), err(0.1));
    assert!(e2 * 3.0 <= e1, "{e1} -> {e2}");
}

#[test]
fn explicit_cfl_violation_is_reported() {
    let g = g14();
    let pg = PDEGrid::centered(6.0, 0.01, TimeGrid::new(1.0, 10).unwrap(), Scheme::Explicit).unwrap();
    assert!(matches!(solve_g_pde(&g, &Payoff::square(), &pg), Err(gexp_core::Error::Config(_))));
    let ok = solve_g_pde(&g, &Payoff::square(), &pg.with_scheme(Scheme::ImplicitSplitting)).unwrap().root();
    assert!((ok - 4.0).abs() < 1e-2);
}
