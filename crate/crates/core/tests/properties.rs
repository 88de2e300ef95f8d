//! Randomized invariants: transform bookkeeping and rate-functional
//! algebra that must hold for arbitrary data, not just the fixtures.

use logdisp::dispersion::dispersion_flow;
use logdisp::field::{ComplexField, Cx, Grid};
use logdisp::skeleton::Control;
use proptest::prelude::*;

fn arb_field() -> impl Strategy<Value = ComplexField> {
    (prop::sample::select(vec![8usize, 16, 32]), 4.0f64..64.0).prop_flat_map(|(n, length)| {
        prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), n).prop_map(move |vals| {
            let grid = Grid::new(1, n, length).unwrap();
            let values = vals.into_iter().map(|(re, im)| Cx::new(re, im)).collect();
            ComplexField::new(grid, values).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parseval_ties_node_and_spectral_mass(f in arb_field()) {
        let l2 = f.l2_norm();
        let ld = f.grid().length().powi(f.grid().dim() as i32);
        let spectral: f64 = f
            .spectral_transform()
            .values()
            .iter()
            .map(|v| v.norm_sqr())
            .sum::<f64>()
            / ld;
        prop_assert!(
            (l2 * l2 - spectral).abs() <= 1e-12 * (1.0 + l2 * l2),
            "node mass {} vs spectral mass {spectral}",
            l2 * l2
        );
    }

    #[test]
    fn norms_are_absolutely_homogeneous(
        f in arb_field(),
        re in -3.0f64..3.0,
        im in -3.0f64..3.0,
    ) {
        let c = Cx::new(re, im);
        let scaled = ComplexField::new(
            f.grid().clone(),
            f.values().iter().map(|v| c * v).collect(),
        ).unwrap();
        let s = c.norm();
        for (a, b) in [
            (scaled.l2_norm(), s * f.l2_norm()),
            (scaled.x1_norm(), s * f.x1_norm()),
            (
                scaled.weighted_norm(1.0).unwrap(),
                s * f.weighted_norm(1.0).unwrap(),
            ),
        ] {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b), "{a} vs {b}");
        }
    }

    #[test]
    fn dispersion_flow_preserves_mass(f in arb_field(), chi in -2.0f64..2.0) {
        let out = dispersion_flow(&f, chi).unwrap();
        let (a, b) = (out.l2_norm(), f.l2_norm());
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b), "{a} vs {b}");
    }
}

proptest! {
    #[test]
    fn action_is_quadratic_in_the_control(
        values in prop::collection::vec(-5.0f64..5.0, 1..16),
        horizon in 0.1f64..4.0,
        c in -4.0f64..4.0,
    ) {
        let base = Control::new(horizon, values.clone()).unwrap().action();
        let scaled = Control::new(horizon, values.iter().map(|v| c * v).collect())
            .unwrap()
            .action();
        prop_assert!(
            (scaled - c * c * base).abs() <= 1e-12 * (1.0 + c * c * base),
            "{scaled} vs {}",
            c * c * base
        );
    }
}
