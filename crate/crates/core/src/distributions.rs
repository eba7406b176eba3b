//! Log-densities, samplers and closed-form KL divergences for the Beta,
//! Dirichlet, Gamma and categorical distributions.
//!
//! Beta variables are handled as two-dimensional Dirichlet variables
//! throughout, so `beta_log_pdf(x, u, v)` is `dirichlet_log_pdf([x, 1 - x], [u, v])`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{lgamma, psi, psi1, RngStream};

/// Tolerance on `Σx = 1` for simplex arguments.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Tolerance on `Σw = 1` for categorical weights.
pub const WEIGHTS_TOL: f64 = 1e-9;

/// Variational posterior `Gamma(shape, rate)` over one positive shape
/// parameter of a mixture component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPosterior {
    shape: f64,
    rate: f64,
}

impl GammaPosterior {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0 && rate.is_finite() && rate > 0.0) {
            return Err(Error::domain(
                "GammaPosterior::new",
                format!("shape and rate must be finite and > 0, got ({shape}, {rate})"),
            ));
        }
        Ok(Self { shape, rate })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// E[u] = a / b
    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    /// E[ln u] = ψ(a) − ln b
    pub fn mean_log(&self) -> f64 {
        psi(self.shape) - self.rate.ln()
    }

    /// Var[ln u] = ψ'(a)
    pub fn var_log(&self) -> f64 {
        psi1(self.shape)
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - lgamma(self.shape) + (self.shape - 1.0) * x.ln()
            - self.rate * x
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        standard_gamma(self.shape, rng) / self.rate
    }
}

/// Dirichlet posterior over the mixture weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletWeights {
    concentration: Vec<f64>,
}

impl DirichletWeights {
    pub fn new(concentration: Vec<f64>) -> Result<Self> {
        check_positive_vec("DirichletWeights::new", &concentration)?;
        Ok(Self { concentration })
    }

    pub fn symmetric(len: usize, c: f64) -> Result<Self> {
        Self::new(vec![c; len])
    }

    pub fn concentration(&self) -> &[f64] {
        &self.concentration
    }

    pub fn len(&self) -> usize {
        self.concentration.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concentration.is_empty()
    }

    /// Posterior mean of the weights, c_i / Σc.
    pub fn mean(&self) -> Vec<f64> {
        let total: f64 = self.concentration.iter().sum();
        self.concentration.iter().map(|c| c / total).collect()
    }

    /// E[ln π_i] = ψ(c_i) − ψ(Σc)
    pub fn expect_log(&self) -> Vec<f64> {
        let total: f64 = self.concentration.iter().sum();
        let psi_total = psi(total);
        self.concentration.iter().map(|&c| psi(c) - psi_total).collect()
    }

    pub fn log_pdf(&self, weights: &[f64]) -> f64 {
        dirichlet_log_pdf_unchecked(weights, &self.concentration)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        dirichlet_draw(&self.concentration, rng)
    }
}

fn check_positive_vec(func: &'static str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::domain(func, "parameter vector is empty"));
    }
    if let Some(bad) = v.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::domain(func, format!("parameters must be finite and > 0, got {bad}")));
    }
    Ok(())
}

fn check_simplex(func: &'static str, x: &[f64]) -> Result<()> {
    if x.len() < 2 {
        return Err(Error::domain(func, "simplex point needs at least 2 coordinates"));
    }
    if let Some(bad) = x.iter().find(|c| !(c.is_finite() && **c > 0.0 && **c < 1.0)) {
        return Err(Error::domain(func, format!("coordinate {bad} is not interior to (0, 1)")));
    }
    let sum: f64 = x.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::domain(func, format!("coordinates sum to {sum}, not 1")));
    }
    Ok(())
}

/// ln Beta(x; u, v) for `0 < x < 1`.
pub fn beta_log_pdf(x: f64, u: f64, v: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::domain("beta_log_pdf", format!("x = {x} is not in (0, 1)")));
    }
    check_positive_vec("beta_log_pdf", &[u, v])?;
    Ok(lgamma(u + v) - lgamma(u) - lgamma(v) + (u - 1.0) * x.ln() + (v - 1.0) * (1.0 - x).ln())
}

/// ln Dir(x; u) for an interior simplex point `x`.
pub fn dirichlet_log_pdf(x: &[f64], u: &[f64]) -> Result<f64> {
    check_simplex("dirichlet_log_pdf", x)?;
    check_positive_vec("dirichlet_log_pdf", u)?;
    if x.len() != u.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: x.len(),
        });
    }
    Ok(dirichlet_log_pdf_unchecked(x, u))
}

pub(crate) fn dirichlet_log_pdf_unchecked(x: &[f64], u: &[f64]) -> f64 {
    let total: f64 = u.iter().sum();
    let mut lp = lgamma(total);
    for (&xk, &uk) in x.iter().zip(u) {
        lp += (uk - 1.0) * xk.ln() - lgamma(uk);
    }
    lp
}

/// Marsaglia–Tsang draw from Gamma(shape, 1). Shapes below one are boosted
/// via `Gamma(a) = Gamma(a + 1) · U^{1/a}`.
pub(crate) fn standard_gamma(shape: f64, rng: &mut RngStream) -> f64 {
    if shape < 1.0 {
        let boost = rng.uniform_open().powf(1.0 / shape);
        return standard_gamma(shape + 1.0, rng) * boost;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let t = 1.0 + c * z;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = rng.uniform_open();
        let z2 = z * z;
        if u < 1.0 - 0.0331 * z2 * z2 || u.ln() < 0.5 * z2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

fn dirichlet_draw(u: &[f64], rng: &mut RngStream) -> Vec<f64> {
    let mut draws: Vec<f64> = u.iter().map(|&a| standard_gamma(a, rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter_mut().for_each(|g| *g /= total);
    } else {
        // All gammas underflowed (tiny shapes); fall back to the largest shape.
        let arg = u
            .iter()
            .enumerate()
            .fold(0, |best, (i, a)| if *a > u[best] { i } else { best });
        draws.iter_mut().enumerate().for_each(|(i, g)| *g = if i == arg { 1.0 } else { 0.0 });
    }
    draws
}

/// Draw from Gamma(shape, rate).
pub fn sample_gamma(shape: f64, rate: f64, rng: &mut RngStream) -> Result<f64> {
    Ok(GammaPosterior::new(shape, rate)?.sample(rng))
}

/// Draw from Dir(u), built from normalized gamma draws.
pub fn sample_dirichlet(u: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
    check_positive_vec("sample_dirichlet", u)?;
    Ok(dirichlet_draw(u, rng))
}

/// Draw from Beta(u, v) as the first coordinate of a Dir([u, v]) draw.
pub fn sample_beta(u: f64, v: f64, rng: &mut RngStream) -> Result<f64> {
    Ok(sample_dirichlet(&[u, v], rng)?[0])
}

/// Draw an index from a probability vector.
pub fn sample_categorical(weights: &[f64], rng: &mut RngStream) -> Result<usize> {
    if weights.is_empty() {
        return Err(Error::domain("sample_categorical", "weights are empty"));
    }
    if let Some(bad) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::domain("sample_categorical", format!("invalid weight {bad}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHTS_TOL {
        return Err(Error::domain("sample_categorical", format!("weights sum to {total}")));
    }
    Ok(categorical_draw(weights, rng))
}

pub(crate) fn categorical_draw(weights: &[f64], rng: &mut RngStream) -> usize {
    let target = rng.uniform_open() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    // Rounding left `target` past the last cumulative sum.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(weights.len() - 1)
}

/// KL(q ‖ p) between two Gamma distributions.
pub fn gamma_kl(q: &GammaPosterior, p: &GammaPosterior) -> f64 {
    let (a1, b1) = (q.shape, q.rate);
    let (a2, b2) = (p.shape, p.rate);
    let kl = (a1 - a2) * psi(a1) - lgamma(a1) + lgamma(a2) + a2 * (b1.ln() - b2.ln())
        + a1 * (b2 - b1) / b1;
    kl.max(0.0)
}

/// KL(q ‖ p) between two Dirichlet distributions of equal length.
pub fn dirichlet_kl(q: &DirichletWeights, p: &DirichletWeights) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    let q_total: f64 = q.concentration.iter().sum();
    let p_total: f64 = p.concentration.iter().sum();
    let psi_q_total = psi(q_total);
    let mut kl = lgamma(q_total) - lgamma(p_total);
    for (&a, &b) in q.concentration.iter().zip(&p.concentration) {
        kl += lgamma(b) - lgamma(a) + (a - b) * (psi(a) - psi_q_total);
    }
    Ok(kl.max(0.0))
}
