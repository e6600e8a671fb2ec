use gexp_core::acceptance::{random_control, random_paste_spec};
use gexp_core::paths::{simulate_path, NoiseSource, TimeGrid};
use gexp_core::scenarios::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid() -> TimeGrid {
    TimeGrid::new(1.0, 24).unwrap()
}

fn prefixes(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let g = grid();
    let mix = [VolControl::constant(&g, 1.0), VolControl::constant(&g, 4.0)];
    let noise = NoiseSource::new(seed);
    (0..n).map(|i| simulate_path(&mix[i % 2], &g, &noise, i as u64).unwrap().series()).collect()
}

fn same_cells(a: &VolControl, b: &VolControl, seed: u64) -> bool {
    prefixes(64, seed).iter().all(|p| a.levels_along(p) == b.levels_along(p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pasting_closure(seed in any::<u64>()) {
        let g = grid();
        let set = ScenarioSet::interval(&g, 1.0, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_paste_spec(&mut rng, &g, 1.0, 4.0, 1).unwrap();
        prop_assert!(contains(&set, &spec.base, MEMBERSHIP_TOL).unwrap());
        prop_assert!(contains(&set, &paste(&spec).unwrap(), MEMBERSHIP_TOL).unwrap());
    }

    #[test]
    fn pasting_identity(seed in any::<u64>()) {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = random_paste_spec(&mut rng, &g, 1.0, 4.0, 1).unwrap();
        spec.on_event = spec.base.clone();
        spec.off_event = spec.base.clone();
        prop_assert!(same_cells(&paste(&spec).unwrap(), &spec.base, seed));
    }

    #[test]
    fn pasting_associativity(t1 in 1usize..23, dt in 1usize..12, l1 in -1.0f64..1.0, l2 in -1.0f64..1.0, seed in any::<u64>()) {
        let g = grid();
        let t2 = (t1 + dt).min(24);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_control(&mut rng, &g, 1.0, 4.0, 0).unwrap();
        let b = random_control(&mut rng, &g, 1.0, 4.0, 0).unwrap();
        let c = random_control(&mut rng, &g, 1.0, 4.0, 0).unwrap();
        let e1 = Event::AboveAtBranch { level: l1 };
        let e2 = Event::AboveAtBranch { level: l2 };
        let at = |node: usize, base: &VolControl, ev: &Event, on: &VolControl, off: &VolControl| {
            paste(&PasteSpec {
                base: base.clone(),
                branch: Stopping::Fixed { node },
                event: ev.clone(),
                on_event: on.clone(),
                off_event: off.clone(),
            })
            .unwrap()
        };
        // t1 first, then t2
        let p1 = at(t1, &a, &e1, &b, &a);
        let left = at(t2, &p1, &e2, &c, &p1);
        // t2 inside each branch, then t1
        let on = at(t2, &b, &e2, &c, &b);
        let off = at(t2, &a, &e2, &c, &a);
        let right = at(t1, &a, &e1, &on, &off);
        prop_assert!(same_cells(&left, &right, seed));
    }

    #[test]
    fn upward_select_dominates_and_is_idempotent(cands in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 10), 1..6)) {
        let s = upward_select(&cands).unwrap();
        for c in &cands {
            prop_assert!(s.merged.iter().zip(c).all(|(m, v)| m >= v));
        }
        let again = upward_select(&[s.merged.clone(), s.merged.clone()]).unwrap();
        prop_assert_eq!(again.merged, s.merged);
    }
}

#[test]
fn out_of_bounds_paste_is_not_contained() {
    let g = grid();
    let set = ScenarioSet::interval(&g, 1.0, 4.0).unwrap();
    let p = paste(&PasteSpec {
        base: VolControl::constant(&g, 2.0),
        branch: Stopping::Fixed { node: 12 },
        event: Event::AboveAtBranch { level: 0.0 },
        on_event: VolControl::constant(&g, 5.0),
        off_event: VolControl::constant(&g, 2.0),
    })
    .unwrap();
    assert!(!contains(&set, &p, MEMBERSHIP_TOL).unwrap());
}
