//! Inequalities between the surrogate bounds, checked on random posteriors.

use evimix::bounds::{
    exact_lib, measure_gap, mlb_u_bound, mlb_v_bound, mlb_z_bound, slb_bound, slb_minus_mlb_u, slb_minus_mlb_v,
    slb_minus_mlb_z, ComponentExpectations, Surrogate,
};
use evimix::harness::random_beta_posteriors;
use evimix::{GammaPosterior, RngStream};
use proptest::prelude::*;

fn posterior() -> impl Strategy<Value = GammaPosterior> {
    (-2.3f64..4.6, -2.3f64..4.6).prop_map(|(a, b)| GammaPosterior::new(a.exp(), b.exp()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn strong_bounds_never_exceed_the_weak_one(u in posterior(), v in posterior()) {
        let ce = ComponentExpectations::from_posteriors(&[u, v]);
        let slb = slb_bound(&ce);
        for (name, diff) in [
            ("u", slb_minus_mlb_u(&ce).unwrap()),
            ("v", slb_minus_mlb_v(&ce).unwrap()),
            ("z", slb_minus_mlb_z(&ce).unwrap()),
        ] {
            prop_assert!(diff >= -1e-12, "{name}: {diff}");
        }
        let tol = 1e-12 * slb.abs().max(1.0);
        prop_assert!(mlb_u_bound(&ce).unwrap() <= slb + tol);
        prop_assert!(mlb_v_bound(&ce).unwrap() <= slb + tol);
        prop_assert!(mlb_z_bound(&ce).unwrap() <= slb + tol);
    }

    #[test]
    fn differences_are_consistent_with_bounds(u in posterior(), v in posterior()) {
        let ce = ComponentExpectations::from_posteriors(&[u, v]);
        let slb = slb_bound(&ce);
        let scale = slb.abs().max(1.0) * 1e-12;
        prop_assert!((slb - mlb_u_bound(&ce).unwrap() - slb_minus_mlb_u(&ce).unwrap()).abs() <= scale);
        prop_assert!((slb - mlb_z_bound(&ce).unwrap() - slb_minus_mlb_z(&ce).unwrap()).abs() <= scale);
    }

    #[test]
    fn all_bounds_collapse_for_concentrated_posteriors(m in 0.5f64..50.0, r in 0.5f64..50.0) {
        let mean = vec![m, r];
        let ce = ComponentExpectations::point_mass(mean.clone()).unwrap();
        let lib = exact_lib(&mean).unwrap();
        prop_assert!((slb_bound(&ce) - lib).abs() < 1e-10);
        prop_assert!((mlb_z_bound(&ce).unwrap() - lib).abs() < 1e-10);
    }
}

/// The u-targeted bound lies below the weak bound on 10⁴ random
/// configurations drawn the same way as the harness sweep.
#[test]
fn mlb_u_below_slb_on_ten_thousand_configs() {
    let mut rng = RngStream::new(99, 0);
    for _ in 0..10_000 {
        let ce = ComponentExpectations::from_posteriors(&random_beta_posteriors([0.1, 100.0], &mut rng));
        assert!(mlb_u_bound(&ce).unwrap() <= slb_bound(&ce) + 1e-12 * slb_bound(&ce).abs().max(1.0));
        assert!(mlb_z_bound(&ce).unwrap() <= slb_bound(&ce) + 1e-12 * slb_bound(&ce).abs().max(1.0));
    }
}

#[test]
fn weak_bound_holds_in_expectation_on_model_scale_posteriors() {
    // ū = 2, v̄ = 8, the first component of the two-component model.
    let posteriors = [GammaPosterior::new(4.0, 2.0).unwrap(), GammaPosterior::new(16.0, 2.0).unwrap()];
    let slb = measure_gap(&posteriors, Surrogate::Slb, &mut RngStream::new(3, 1), 200_000).unwrap();
    let mlb = measure_gap(&posteriors, Surrogate::MlbZ, &mut RngStream::new(3, 2), 200_000).unwrap();
    assert!(slb.mean >= -3.0 * slb.stderr, "{slb:?}");
    assert!(mlb.mean >= slb.mean - 3.0 * slb.stderr.hypot(mlb.stderr), "{mlb:?} vs {slb:?}");
}

#[test]
fn strong_bounds_require_beta_components() {
    let ce = ComponentExpectations::point_mass(vec![2.0, 3.0, 4.0]).unwrap();
    assert!(mlb_u_bound(&ce).is_err());
    assert!(mlb_z_bound(&ce).is_err());
    assert!(slb_minus_mlb_z(&ce).is_err());
    assert!(slb_bound(&ce).is_finite());
}
