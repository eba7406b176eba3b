//! Identities and finite-difference checks for the special functions.

use evimix::special::{digamma, ln_gamma, trigamma};
use proptest::prelude::*;

const LN_2: f64 = std::f64::consts::LN_2;

/// Central difference with step scaled to `x`.
fn derivative(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-5 * x.max(1.0);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn digamma_is_the_derivative_of_ln_gamma(x in 0.05f64..500.0) {
        let fd = derivative(|t| ln_gamma(t).unwrap(), x);
        let psi = digamma(x).unwrap();
        prop_assert!((fd - psi).abs() <= 1e-6 * psi.abs().max(1.0), "x={x} fd={fd} psi={psi}");
    }

    #[test]
    fn trigamma_is_the_derivative_of_digamma(x in 0.05f64..500.0) {
        let fd = derivative(|t| digamma(t).unwrap(), x);
        let psi1 = trigamma(x).unwrap();
        prop_assert!((fd - psi1).abs() <= 1e-6 * psi1.max(1.0), "x={x} fd={fd} psi1={psi1}");
    }

    #[test]
    fn legendre_duplication(x in 0.01f64..1e4) {
        // ln Γ(2x) = (2x − 1) ln 2 − ½ ln π + ln Γ(x) + ln Γ(x + ½)
        let lhs = ln_gamma(2.0 * x).unwrap();
        let rhs = (2.0 * x - 1.0) * LN_2 - 0.5 * std::f64::consts::PI.ln()
            + ln_gamma(x).unwrap()
            + ln_gamma(x + 0.5).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0) * 10.0, "x={x} {lhs} vs {rhs}");
    }

    #[test]
    fn digamma_duplication(x in 0.01f64..1e4) {
        // ψ(2x) = ½ψ(x) + ½ψ(x + ½) + ln 2
        let lhs = digamma(2.0 * x).unwrap();
        let rhs = 0.5 * digamma(x).unwrap() + 0.5 * digamma(x + 0.5).unwrap() + LN_2;
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0) * 10.0, "x={x} {lhs} vs {rhs}");
    }

    #[test]
    fn trigamma_is_positive_and_decreasing(x in 0.01f64..1e5, dx in 1e-3f64..10.0) {
        let a = trigamma(x).unwrap();
        let b = trigamma(x + dx).unwrap();
        prop_assert!(a > 0.0 && b > 0.0 && b < a);
    }
}

#[test]
fn known_values() {
    assert!((digamma(1.0).unwrap() + 0.5772156649015329).abs() < 1e-14);
    assert!((trigamma(1.0).unwrap() - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-14);
    assert!((trigamma(0.5).unwrap() - std::f64::consts::PI.powi(2) / 2.0).abs() < 1e-13);
    assert!((ln_gamma(4.0).unwrap() - 6f64.ln()).abs() < 1e-14);
    assert!((ln_gamma(0.5).unwrap() - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-14);
    assert!((digamma(4.0).unwrap() - 1.2561176684318004).abs() < 1e-14);
    assert!((trigamma(4.0).unwrap() - 0.28382295573711532).abs() < 1e-14);
}
