//! The log-inverse-beta term and its analytically tractable lower bounds.
//!
//! For a component with shape vector `u`, the likelihood contains
//! `LIB(u) = ln Γ(Σ u_k) − Σ ln Γ(u_k)`, whose expectation under a Gamma
//! posterior has no closed form. Every surrogate here is a Taylor expansion
//! of `LIB` in `ln u` around the posterior means `ū`, evaluated in
//! expectation:
//!
//! * [`slb_bound`] is the first-order expansion. It satisfies the weak
//!   condition and is shared by every variable group.
//! * [`mlb_bound`] with [`Surrogate::MlbU`] / [`Surrogate::MlbV`] adds the
//!   cross term `ū v̄ ψ'(ū + v̄) (E[ln s] − ln s̄)`, where `s` is the partner
//!   of the target variable. Because `E[ln s] ≤ ln s̄` this can only lower
//!   the bound.
//! * [`mlb_z_bound`] is the full second-order expansion used when updating
//!   the indicator variables.
//!
//! The three strong-condition bounds are only defined for beta components
//! (K = 2).

use serde::{Deserialize, Serialize};

use crate::distributions::GammaPosterior;
use crate::error::{Error, Result};
use crate::special::{lgamma, psi, psi1, RngStream};

/// How the strong-condition shape update folds in the cross derivative.
///
/// `Literal` adds `ū v̄ ψ'(ū + v̄)` to the coefficient of `E[ln u]`, which is
/// what the auxiliary function for `u` gives when its cross term is written
/// in `ln u`. `Partner` instead weights it by the partner's log shift
/// `E[ln v] − ln v̄`, the coefficient of `E[ln u]` in the cross term of the
/// second-order bound. The literal form has no finite fixed point on
/// typical data and drives the shapes upward without limit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlbCoupling {
    #[default]
    Literal,
    Partner,
}

/// Which family of auxiliary functions drives inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundKind {
    /// One lower bound under the weak condition, shared by all variables.
    #[serde(rename = "slb", alias = "slb_weak")]
    SlbWeak,
    /// Separate lower bounds per variable group under the strong condition.
    #[serde(rename = "mlb", alias = "mlb_strong")]
    MlbStrong,
}

impl BoundKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundKind::SlbWeak => "slb",
            BoundKind::MlbStrong => "mlb",
        }
    }
}

impl std::fmt::Display for BoundKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BoundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slb" | "slb_weak" | "weak" => Ok(BoundKind::SlbWeak),
            "mlb" | "mlb_strong" | "strong" => Ok(BoundKind::MlbStrong),
            other => Err(Error::Parse(format!("unknown bound kind `{other}`"))),
        }
    }
}

/// A specific surrogate for the LIB term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surrogate {
    Slb,
    /// Strong-condition bound with `u` (dimension 0) as the variable.
    MlbU,
    /// Strong-condition bound with `v` (dimension 1) as the variable.
    MlbV,
    /// Strong-condition bound for the indicator variables.
    MlbZ,
}

impl Surrogate {
    pub fn kind(self) -> BoundKind {
        match self {
            Surrogate::Slb => BoundKind::SlbWeak,
            _ => BoundKind::MlbStrong,
        }
    }

    pub fn evaluate(self, ce: &ComponentExpectations) -> Result<f64> {
        match self {
            Surrogate::Slb => Ok(slb_bound(ce)),
            Surrogate::MlbU => mlb_bound(ce, 0),
            Surrogate::MlbV => mlb_bound(ce, 1),
            Surrogate::MlbZ => mlb_z_bound(ce),
        }
    }
}

/// Posterior moments of one component's shape vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentExpectations {
    mean: Vec<f64>,
    mean_log: Vec<f64>,
    var_log: Vec<f64>,
}

impl ComponentExpectations {
    pub fn new(mean: Vec<f64>, mean_log: Vec<f64>, var_log: Vec<f64>) -> Result<Self> {
        let k = mean.len();
        if k < 2 || mean_log.len() != k || var_log.len() != k {
            return Err(Error::invalid("component expectations", "need K >= 2 equal-length vectors"));
        }
        for d in 0..k {
            if !(mean[d].is_finite() && mean[d] > 0.0) {
                return Err(Error::invalid("component expectations", format!("mean[{d}] = {}", mean[d])));
            }
            if !(var_log[d].is_finite() && var_log[d] >= 0.0) {
                return Err(Error::invalid("component expectations", format!("var_log[{d}] = {}", var_log[d])));
            }
            // Jensen, with a few ulps of slack for point-mass inputs.
            let ln_mean = mean[d].ln();
            if !(mean_log[d] <= ln_mean + 4.0 * f64::EPSILON * ln_mean.abs().max(1.0)) {
                return Err(Error::invalid(
                    "component expectations",
                    format!("mean_log[{d}] = {} exceeds ln(mean) = {ln_mean}", mean_log[d]),
                ));
            }
        }
        Ok(Self {
            mean,
            mean_log,
            var_log,
        })
    }

    /// Moments of independent Gamma posteriors, one per dimension.
    pub fn from_posteriors(posteriors: &[GammaPosterior]) -> Self {
        Self {
            mean: posteriors.iter().map(GammaPosterior::mean).collect(),
            mean_log: posteriors.iter().map(GammaPosterior::mean_log).collect(),
            var_log: posteriors.iter().map(GammaPosterior::var_log).collect(),
        }
    }

    /// A point mass at `mean`: zero log-variance and `E[ln u] = ln ū`.
    pub fn point_mass(mean: Vec<f64>) -> Result<Self> {
        let mean_log = mean.iter().map(|m| m.ln()).collect();
        let var_log = vec![0.0; mean.len()];
        Self::new(mean, mean_log, var_log)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn mean_log(&self) -> &[f64] {
        &self.mean_log
    }

    pub fn var_log(&self) -> &[f64] {
        &self.var_log
    }

    /// `E[ln u_k] − ln ū_k`, never positive.
    pub fn log_shift(&self, k: usize) -> f64 {
        self.mean_log[k] - self.mean[k].ln()
    }

    /// `E[(ln u_k − ln ū_k)²] = Var[ln u_k] + (E[ln u_k] − ln ū_k)²`
    pub fn second_moment_log(&self, k: usize) -> f64 {
        let s = self.log_shift(k);
        self.var_log[k] + s * s
    }

    fn require_beta(&self, func: &'static str) -> Result<()> {
        if self.dim() == 2 {
            Ok(())
        } else {
            Err(Error::UnsupportedDimension { func, k: self.dim() })
        }
    }
}

/// `ln Γ(Σ u_k) − Σ ln Γ(u_k)`.
pub fn exact_lib(u: &[f64]) -> Result<f64> {
    if u.is_empty() || u.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::domain("exact_lib", format!("shape parameters must be > 0, got {u:?}")));
    }
    Ok(lib_unchecked(u))
}

pub(crate) fn lib_unchecked(u: &[f64]) -> f64 {
    let total: f64 = u.iter().sum();
    lgamma(total) - u.iter().map(|&x| lgamma(x)).sum::<f64>()
}

/// Coefficients `ū_k [ψ(Σ_j ū_j) − ψ(ū_k)]` multiplying `E[ln u_k]` in the
/// weak-condition bound.
pub fn slb_coefficients(mean: &[f64]) -> Vec<f64> {
    let psi_total = psi(mean.iter().sum());
    mean.iter().map(|&m| m * (psi_total - psi(m))).collect()
}

/// First-order (weak-condition) lower bound on `E[LIB(u)]`.
pub fn slb_bound(ce: &ComponentExpectations) -> f64 {
    let coef = slb_coefficients(&ce.mean);
    let mut bound = lib_unchecked(&ce.mean);
    for (k, c) in coef.iter().enumerate() {
        bound += c * ce.log_shift(k);
    }
    bound
}

/// `ū v̄ ψ'(ū + v̄)`, the cross-derivative weight of the beta LIB term.
pub fn cross_weight(mean: &[f64]) -> f64 {
    mean[0] * mean[1] * psi1(mean[0] + mean[1])
}

/// Strong-condition bound with dimension `target` (0 for `u`, 1 for `v`) as
/// the variable. Beta components only.
pub fn mlb_bound(ce: &ComponentExpectations, target: usize) -> Result<f64> {
    ce.require_beta("mlb_bound")?;
    if target > 1 {
        return Err(Error::domain("mlb_bound", format!("target dimension {target} is not 0 or 1")));
    }
    Ok(slb_bound(ce) + cross_weight(&ce.mean) * ce.log_shift(1 - target))
}

/// Strong-condition bound with `u` as the variable.
pub fn mlb_u_bound(ce: &ComponentExpectations) -> Result<f64> {
    mlb_bound(ce, 0)
}

/// Strong-condition bound with `v` as the variable.
pub fn mlb_v_bound(ce: &ComponentExpectations) -> Result<f64> {
    mlb_bound(ce, 1)
}

/// Second-order strong-condition bound used for the indicator update.
pub fn mlb_z_bound(ce: &ComponentExpectations) -> Result<f64> {
    ce.require_beta("mlb_z_bound")?;
    Ok(slb_bound(ce) - second_order_terms(ce))
}

/// `L_SLB − L_MLB_z`, written as the negated second-order correction.
fn second_order_terms(ce: &ComponentExpectations) -> f64 {
    let (u, v) = (ce.mean[0], ce.mean[1]);
    let psi1_total = psi1(u + v);
    let quad_u = 0.5 * u * u * (psi1_total - psi1(u)) * ce.second_moment_log(0);
    let quad_v = 0.5 * v * v * (psi1_total - psi1(v)) * ce.second_moment_log(1);
    let cross = u * v * psi1_total * ce.log_shift(0) * ce.log_shift(1);
    -(quad_u + quad_v + cross)
}

/// `L_SLB − L_MLB` for the target dimension: `−ū v̄ ψ'(ū + v̄)(E[ln s] − ln s̄)`
/// with `s` the other dimension.
pub fn slb_minus_mlb(ce: &ComponentExpectations, target: usize) -> Result<f64> {
    ce.require_beta("slb_minus_mlb")?;
    if target > 1 {
        return Err(Error::domain("slb_minus_mlb", format!("target dimension {target} is not 0 or 1")));
    }
    Ok(-cross_weight(&ce.mean) * ce.log_shift(1 - target))
}

pub fn slb_minus_mlb_u(ce: &ComponentExpectations) -> Result<f64> {
    slb_minus_mlb(ce, 0)
}

pub fn slb_minus_mlb_v(ce: &ComponentExpectations) -> Result<f64> {
    slb_minus_mlb(ce, 1)
}

/// `L_SLB − L_MLB_z`.
pub fn slb_minus_mlb_z(ce: &ComponentExpectations) -> Result<f64> {
    ce.require_beta("slb_minus_mlb_z")?;
    Ok(second_order_terms(ce))
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Running mean and variance (Welford).
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub(crate) fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub(crate) fn mean(&self) -> f64 {
        self.mean
    }

    pub(crate) fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

/// Minimum number of draws accepted by [`measure_gap`].
pub const MIN_GAP_DRAWS: usize = 1_000;

/// Monte Carlo estimate of `E_q[LIB(u)] − bound`, with `u_k` drawn from the
/// independent Gamma posteriors.
pub fn measure_gap(
    posteriors: &[GammaPosterior],
    which: Surrogate,
    rng: &mut RngStream,
    draws: usize,
) -> Result<GapEstimate> {
    if draws < MIN_GAP_DRAWS {
        return Err(Error::domain("measure_gap", format!("need at least {MIN_GAP_DRAWS} draws, got {draws}")));
    }
    let ce = ComponentExpectations::from_posteriors(posteriors);
    let bound = which.evaluate(&ce)?;
    let mut stats = RunningStats::default();
    let mut u = vec![0.0; posteriors.len()];
    for _ in 0..draws {
        for (slot, q) in u.iter_mut().zip(posteriors) {
            // Guard against underflow for very small shapes.
            *slot = q.sample(rng).max(f64::MIN_POSITIVE);
        }
        stats.push(lib_unchecked(&u) - bound);
    }
    Ok(GapEstimate {
        mean: stats.mean(),
        stderr: stats.stderr(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gamma(a: f64, b: f64) -> GammaPosterior {
        GammaPosterior::new(a, b).unwrap()
    }

    #[test]
    fn exact_lib_examples() {
        assert!(exact_lib(&[1.0, 1.0]).unwrap().abs() < 1e-15);
        assert!((exact_lib(&[2.0, 2.0]).unwrap() - 6f64.ln()).abs() < 1e-13);
        // 40-digit reference for ln Γ(19) − ln Γ(4) − ln Γ(12) − ln Γ(3)
        assert!((exact_lib(&[4.0, 12.0, 3.0]).unwrap() - 16.408230712371167427).abs() < 1e-11);
        assert!(exact_lib(&[1.0, 0.0]).is_err());
        assert!(exact_lib(&[]).is_err());
    }

    #[test]
    fn all_bounds_exact_at_expansion_point() {
        let ce = ComponentExpectations::point_mass(vec![2.5, 7.0]).unwrap();
        let lib = exact_lib(&[2.5, 7.0]).unwrap();
        assert_eq!(slb_bound(&ce), lib);
        assert_eq!(mlb_u_bound(&ce).unwrap(), lib);
        assert_eq!(mlb_v_bound(&ce).unwrap(), lib);
        assert_eq!(mlb_z_bound(&ce).unwrap(), lib);

        let ce3 = ComponentExpectations::point_mass(vec![4.0, 12.0, 3.0]).unwrap();
        assert_eq!(slb_bound(&ce3), exact_lib(&[4.0, 12.0, 3.0]).unwrap());
    }

    #[test]
    fn slb_approaches_lib_for_concentrated_posteriors() {
        // Gamma(a, a / m) has mean m and Var[ln u] ≈ 1/a.
        let post = [gamma(1e9, 1e9 / 2.0), gamma(1e9, 1e9 / 8.0)];
        let ce = ComponentExpectations::from_posteriors(&post);
        let lib = exact_lib(&[2.0, 8.0]).unwrap();
        assert!((slb_bound(&ce) - lib).abs() < 1e-6);
    }

    #[test]
    fn slb_closed_form_example() {
        // q(u) = Gamma(4, 2), q(v) = Gamma(16, 2): ū = 2, v̄ = 8.
        let post = [gamma(4.0, 2.0), gamma(16.0, 2.0)];
        let ce = ComponentExpectations::from_posteriors(&post);
        let (u, v) = (2.0f64, 8.0f64);
        let want = lgamma(u + v) - lgamma(u) - lgamma(v)
            + u * (psi(u + v) - psi(u)) * (psi(4.0) - 2f64.ln() - u.ln())
            + v * (psi(u + v) - psi(v)) * (psi(16.0) - 2f64.ln() - v.ln());
        assert!((slb_bound(&ce) - want).abs() < 1e-12);

        let gap = measure_gap(&post, Surrogate::Slb, &mut RngStream::new(1, 0), 1_000_000).unwrap();
        assert!(gap.mean >= -3.0 * gap.stderr, "weak condition violated: {gap:?}");
    }

    #[test]
    fn mlb_difference_example() {
        // ū = v̄ = 2, q(v) = Gamma(4, 2), E[ln u] = ln ū.
        // ū v̄ ψ'(4) (ln 2 + ln 2 − ψ(4)) = 0.14778853474726349504
        let ce = ComponentExpectations::new(
            vec![2.0, 2.0],
            vec![2f64.ln(), psi(4.0) - 2f64.ln()],
            vec![0.0, psi1(4.0)],
        )
        .unwrap();
        let want = 0.14778853474726349504;
        assert!((slb_minus_mlb_u(&ce).unwrap() - want).abs() < 1e-12);
        assert!((slb_bound(&ce) - mlb_u_bound(&ce).unwrap() - want).abs() < 1e-12);
        // The v-targeted bound looks at E[ln u], which sits on ln ū.
        assert_eq!(slb_minus_mlb_v(&ce).unwrap(), 0.0);
        assert_eq!(mlb_v_bound(&ce).unwrap(), slb_bound(&ce));
    }

    #[test]
    fn mlb_z_hand_assembled() {
        let (a, b) = (3.0, 1.5);
        let post = [gamma(a, b), gamma(a, b)];
        let ce = ComponentExpectations::from_posteriors(&post);
        let m = a / b;
        let shift = psi(a) - b.ln() - m.ln();
        let second = psi1(a) + shift * shift;
        let slb = lgamma(2.0 * m) - 2.0 * lgamma(m) + 2.0 * m * (psi(2.0 * m) - psi(m)) * shift;
        let want = slb
            + 2.0 * 0.5 * m * m * (psi1(2.0 * m) - psi1(m)) * second
            + m * m * psi1(2.0 * m) * shift * shift;
        assert!((mlb_z_bound(&ce).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn strong_bounds_reject_dirichlet_components() {
        let ce = ComponentExpectations::point_mass(vec![1.0, 2.0, 3.0]).unwrap();
        for r in [mlb_u_bound(&ce), mlb_v_bound(&ce), mlb_z_bound(&ce), slb_minus_mlb_u(&ce), slb_minus_mlb_z(&ce)] {
            assert!(matches!(r, Err(Error::UnsupportedDimension { k: 3, .. })));
        }
        let beta = ComponentExpectations::point_mass(vec![1.0, 2.0]).unwrap();
        assert!(mlb_bound(&beta, 2).is_err());
    }

    #[test]
    fn expectations_validation() {
        assert!(ComponentExpectations::new(vec![1.0], vec![0.0], vec![0.0]).is_err());
        assert!(ComponentExpectations::new(vec![1.0, 2.0], vec![0.1, 0.0], vec![0.0, 0.0]).is_err());
        assert!(ComponentExpectations::new(vec![1.0, -2.0], vec![0.0, 0.0], vec![0.0, 0.0]).is_err());
        assert!(ComponentExpectations::new(vec![1.0, 2.0], vec![-0.1, 0.0], vec![-1.0, 0.0]).is_err());
    }

    #[test]
    fn gap_vanishes_for_point_mass() {
        let post = [gamma(1e12, 1e12 / 3.0), gamma(1e12, 1e12 / 5.0)];
        for which in [Surrogate::Slb, Surrogate::MlbU, Surrogate::MlbV, Surrogate::MlbZ] {
            let gap = measure_gap(&post, which, &mut RngStream::new(2, 0), 2_000).unwrap();
            assert!(gap.mean.abs() < 1e-6, "{which:?}: {gap:?}");
        }
        assert!(measure_gap(&post, Surrogate::Slb, &mut RngStream::new(2, 0), 10).is_err());
    }

    #[test]
    fn gap_ordering_on_a_fixed_config() {
        let post = [gamma(2.0, 1.0), gamma(3.0, 0.5)];
        let slb = measure_gap(&post, Surrogate::Slb, &mut RngStream::new(3, 0), 20_000).unwrap();
        let mlb = measure_gap(&post, Surrogate::MlbZ, &mut RngStream::new(3, 1), 20_000).unwrap();
        assert!(slb.mean >= -3.0 * slb.stderr);
        let combined = (slb.stderr.powi(2) + mlb.stderr.powi(2)).sqrt();
        assert!(mlb.mean >= slb.mean - 3.0 * combined);
    }
}
