//! Coordinate-ascent engine for the surrogate objective.
//!
//! The variational family is `q(Z) q(U) q(π)` with a categorical factor per
//! observation, an independent Gamma factor per shape parameter and a
//! Dirichlet factor over the weights. Each sweep updates the
//! responsibilities, then the shape posteriors, then the weights, and records
//! the surrogate objective.
//!
//! Under [`BoundKind::SlbWeak`] all three updates maximize the same
//! surrogate. Under [`BoundKind::MlbStrong`] the responsibility update uses
//! the second-order bound and each shape parameter uses the bound that
//! treats it as the variable, so there is no single objective being
//! ascended. The trace then records the responsibility-update bound as the
//! per-iteration scalar.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bounds::{
    cross_weight, mlb_z_bound, slb_bound, slb_coefficients, BoundKind, ComponentExpectations, MlbCoupling,
};
use crate::distributions::{dirichlet_kl, gamma_kl, DirichletWeights, GammaPosterior};
use crate::error::{Error, Result};
use crate::evaluation::elbo_monte_carlo;
use crate::mixtures::{log_sum_exp, Dataset, MixtureSpec};
use crate::special::RngStream;

/// Lower clamp on the coefficient of `E[ln u]` in the shape update.
pub const COEFFICIENT_FLOOR: f64 = 1e-10;

/// Components whose total responsibility falls below this fraction of N
/// keep their prior-valued shape posteriors.
pub const DEGENERATE_FRACTION: f64 = 1e-8;

const ROW_SUM_TOL: f64 = 1e-9;

/// Relative drop in the surrogate that counts as a decrease rather than
/// round-off.
pub const DECREASE_REL_TOL: f64 = 1e-8;

/// Conjugate prior hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Priors {
    /// Shape a₀ of the Gamma prior on every shape parameter.
    pub gamma_shape: f64,
    /// Rate b₀ of the Gamma prior on every shape parameter.
    pub gamma_rate: f64,
    /// Symmetric Dirichlet concentration c₀ on the weights.
    pub weight_concentration: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            gamma_shape: 1.0,
            gamma_rate: 0.01,
            weight_concentration: 1e-3,
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma_shape", self.gamma_shape),
            ("gamma_rate", self.gamma_rate),
            ("weight_concentration", self.weight_concentration),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid("priors", format!("{name} = {v} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn shape_prior(&self) -> GammaPosterior {
        GammaPosterior::new(self.gamma_shape, self.gamma_rate).expect("validated priors")
    }

    pub fn weight_prior(&self, components: usize) -> DirichletWeights {
        DirichletWeights::symmetric(components, self.weight_concentration).expect("validated priors")
    }
}

/// Iteration control for [`run_evi`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub max_iters: usize,
    /// Stop once `|ΔL̃| / |L̃|` falls below this.
    pub rel_tol: f64,
    /// When set, every trace record also carries a Monte Carlo estimate of
    /// the original objective with this many draws.
    #[serde(default)]
    pub mc_elbo_draws: Option<usize>,
    /// Shape-update coefficient used under [`BoundKind::MlbStrong`].
    #[serde(default)]
    pub mlb_coupling: MlbCoupling,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-6,
            mc_elbo_draws: None,
            mlb_coupling: MlbCoupling::Literal,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("run config", "max_iters must be >= 1"));
        }
        if !(self.rel_tol.is_finite() && self.rel_tol > 0.0) {
            return Err(Error::invalid("run config", format!("rel_tol = {} must be > 0", self.rel_tol)));
        }
        if let Some(d) = self.mc_elbo_draws {
            if d < crate::evaluation::MIN_ELBO_DRAWS {
                return Err(Error::invalid("run config", format!("mc_elbo_draws = {d} is too small")));
            }
        }
        Ok(())
    }
}

/// One row of a convergence trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub surrogate: f64,
    pub mc_elbo: Option<f64>,
    pub mc_elbo_stderr: Option<f64>,
}

/// Parameters of the factorized posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    components: usize,
    dim: usize,
    /// N × I, row-major.
    responsibilities: Vec<f64>,
    /// I × K, row-major.
    shape_posteriors: Vec<GammaPosterior>,
    weight_posterior: DirichletWeights,
    bound_kind: BoundKind,
    mlb_coupling: MlbCoupling,
    priors: Priors,
}

impl VariationalState {
    /// Assemble a state from its parts, checking every invariant.
    pub fn from_parts(
        responsibilities: Vec<Vec<f64>>,
        shape_posteriors: Vec<Vec<GammaPosterior>>,
        weight_posterior: DirichletWeights,
        bound_kind: BoundKind,
        priors: Priors,
    ) -> Result<Self> {
        priors.validate()?;
        let components = weight_posterior.len();
        if shape_posteriors.len() != components {
            return Err(Error::invalid("state", "shape posterior rows do not match components"));
        }
        let dim = shape_posteriors.first().map_or(0, Vec::len);
        if dim < 2 || shape_posteriors.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("state", "shape posterior rows must share a length K >= 2"));
        }
        if responsibilities.iter().any(|r| r.len() != components) {
            return Err(Error::invalid("state", "responsibility rows do not match components"));
        }
        let state = Self {
            components,
            dim,
            responsibilities: responsibilities.into_iter().flatten().collect(),
            shape_posteriors: shape_posteriors.into_iter().flatten().collect(),
            weight_posterior,
            bound_kind,
            mlb_coupling: MlbCoupling::Literal,
            priors,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.responsibilities.len() / self.components
    }

    pub fn is_empty(&self) -> bool {
        self.responsibilities.is_empty()
    }

    pub fn bound_kind(&self) -> BoundKind {
        self.bound_kind
    }

    pub fn priors(&self) -> &Priors {
        &self.priors
    }

    /// The same posterior tagged with a different bound kind.
    pub fn with_bound_kind(&self, kind: BoundKind) -> Self {
        Self {
            bound_kind: kind,
            ..self.clone()
        }
    }

    pub fn mlb_coupling(&self) -> MlbCoupling {
        self.mlb_coupling
    }

    /// The same posterior with a different strong-condition shape update.
    pub fn with_mlb_coupling(&self, coupling: MlbCoupling) -> Self {
        Self {
            mlb_coupling: coupling,
            ..self.clone()
        }
    }

    pub fn responsibilities(&self, n: usize) -> &[f64] {
        &self.responsibilities[n * self.components..(n + 1) * self.components]
    }

    pub fn shape_posteriors(&self, i: usize) -> &[GammaPosterior] {
        &self.shape_posteriors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight_posterior(&self) -> &DirichletWeights {
        &self.weight_posterior
    }

    /// Σ_n r_ni for every component.
    pub fn component_totals(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.components];
        for row in self.responsibilities.chunks_exact(self.components) {
            totals.iter_mut().zip(row).for_each(|(t, r)| *t += r);
        }
        totals
    }

    pub fn expectations(&self, i: usize) -> ComponentExpectations {
        ComponentExpectations::from_posteriors(self.shape_posteriors(i))
    }

    /// Posterior means of the weights and shape parameters.
    pub fn point_estimate(&self) -> MixtureSpec {
        let mut weights = self.weight_posterior.mean();
        // Renormalize so the sum lands within MixtureSpec's tolerance.
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let shapes = (0..self.components)
            .map(|i| self.shape_posteriors(i).iter().map(GammaPosterior::mean).collect())
            .collect();
        MixtureSpec::new(weights, shapes).expect("posterior means satisfy mixture invariants")
    }

    /// The state with components relabelled: component `i` of the result is
    /// component `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.components];
        if perm.len() != self.components
            || perm.iter().any(|&p| p >= self.components || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid("permutation", format!("{perm:?}")));
        }
        let responsibilities = (0..self.len())
            .flat_map(|n| {
                let row = self.responsibilities(n);
                perm.iter().map(move |&p| row[p])
            })
            .collect();
        let shape_posteriors = perm.iter().flat_map(|&p| self.shape_posteriors(p).iter().copied()).collect();
        let c = self.weight_posterior.concentration();
        let weight_posterior = DirichletWeights::new(perm.iter().map(|&p| c[p]).collect())?;
        Ok(Self {
            responsibilities,
            shape_posteriors,
            weight_posterior,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (n, row) in self.responsibilities.chunks_exact(self.components).enumerate() {
            if row.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                return Err(Error::invalid("state", format!("responsibility row {n} has invalid entries")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid("state", format!("responsibility row {n} sums to {sum}")));
            }
        }
        if self.bound_kind == BoundKind::MlbStrong && self.dim != 2 {
            return Err(Error::UnsupportedDimension {
                func: "strong-condition inference",
                k: self.dim,
            });
        }
        Ok(())
    }

    /// The LIB surrogate used for component `i` in the responsibility
    /// update and the reported objective.
    fn lib_surrogate(&self, i: usize) -> f64 {
        let ce = self.expectations(i);
        match self.bound_kind {
            BoundKind::SlbWeak => slb_bound(&ce),
            BoundKind::MlbStrong => mlb_z_bound(&ce).expect("dimension checked on construction"),
        }
    }
}

fn check_data(state: &VariationalState, data: &Dataset) -> Result<()> {
    if data.dim() != state.dim {
        return Err(Error::DimensionMismatch {
            expected: state.dim,
            actual: data.dim(),
        });
    }
    if data.len() != state.len() {
        return Err(Error::invalid(
            "state",
            format!("state covers {} observations, dataset has {}", state.len(), data.len()),
        ));
    }
    Ok(())
}

/// Initial state: each responsibility row is a draw from a flat Dirichlet,
/// shape posteriors equal the prior and the weight posterior is `c₀` plus
/// the column sums of the responsibilities.
pub fn init_state(
    data: &Dataset,
    components: usize,
    priors: Priors,
    bound_kind: BoundKind,
    rng: &mut RngStream,
) -> Result<VariationalState> {
    priors.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if components == 0 {
        return Err(Error::invalid("state", "need at least one component"));
    }
    if data.len() < components {
        return Err(Error::invalid(
            "state",
            format!("{} observations for {components} components", data.len()),
        ));
    }
    if bound_kind == BoundKind::MlbStrong && data.dim() != 2 {
        return Err(Error::UnsupportedDimension {
            func: "strong-condition inference",
            k: data.dim(),
        });
    }
    let n = data.len();
    let mut responsibilities = Vec::with_capacity(n * components);
    for _ in 0..n {
        if components == 1 {
            responsibilities.push(1.0);
            continue;
        }
        // Flat Dirichlet row via normalized exponentials.
        let row: Vec<f64> = (0..components).map(|_| -rng.uniform_open().ln()).collect();
        let total: f64 = row.iter().sum();
        responsibilities.extend(row.iter().map(|e| e / total));
    }
    let prior = priors.shape_prior();
    let mut state = VariationalState {
        components,
        dim: data.dim(),
        responsibilities,
        shape_posteriors: vec![prior; components * data.dim()],
        weight_posterior: priors.weight_prior(components),
        bound_kind,
        mlb_coupling: MlbCoupling::Literal,
        priors,
    };
    state.weight_posterior = weights_from_totals(&state.component_totals(), &priors)?;
    Ok(state)
}

fn weights_from_totals(totals: &[f64], priors: &Priors) -> Result<DirichletWeights> {
    DirichletWeights::new(totals.iter().map(|t| priors.weight_concentration + t).collect())
}

/// Responsibility update: `ln ρ_ni = E[ln π_i] + B_i + Σ_k (ū_ik − 1) ln x_nk`,
/// normalized per row, with `B_i` the LIB surrogate selected by the bound kind.
pub fn update_responsibilities(state: &VariationalState, data: &Dataset) -> Result<VariationalState> {
    check_data(state, data)?;
    let i_count = state.components;
    let e_log_pi = state.weight_posterior.expect_log();
    let bound: Vec<f64> = (0..i_count).map(|i| state.lib_surrogate(i)).collect();
    let means: Vec<Vec<f64>> = (0..i_count)
        .map(|i| state.shape_posteriors(i).iter().map(GammaPosterior::mean).collect())
        .collect();
    let mut responsibilities = Vec::with_capacity(state.responsibilities.len());
    let mut log_rho = vec![0.0; i_count];
    for n in 0..data.len() {
        let log_x = data.log_row(n);
        for (i, slot) in log_rho.iter_mut().enumerate() {
            let data_term: f64 = means[i].iter().zip(log_x).map(|(m, lx)| (m - 1.0) * lx).sum();
            *slot = e_log_pi[i] + bound[i] + data_term;
        }
        let norm = log_sum_exp(&log_rho);
        responsibilities.extend(log_rho.iter().map(|l| (l - norm).exp()));
    }
    Ok(VariationalState {
        responsibilities,
        ..state.clone()
    })
}

/// Coefficients of `E[ln u_ik]` in the bound that treats `u_ik` as the
/// variable, floored at [`COEFFICIENT_FLOOR`].
pub fn shape_coefficients(ce: &ComponentExpectations, kind: BoundKind, coupling: MlbCoupling) -> Vec<f64> {
    let mut coef = slb_coefficients(ce.mean());
    if kind == BoundKind::MlbStrong {
        let w = cross_weight(ce.mean());
        match coupling {
            MlbCoupling::Literal => coef.iter_mut().for_each(|c| *c += w),
            MlbCoupling::Partner => {
                coef[0] += w * ce.log_shift(1);
                coef[1] += w * ce.log_shift(0);
            }
        }
    }
    coef.iter_mut().for_each(|c| *c = c.max(COEFFICIENT_FLOOR));
    coef
}

/// Shape-posterior update: `a* = a₀ + Σ_n r_ni C_ik` and
/// `b* = b₀ − Σ_n r_ni ln x_nk`, with `C_ik` from [`shape_coefficients`]
/// evaluated at the current posterior means.
pub fn update_shape_posteriors(state: &VariationalState, data: &Dataset) -> Result<VariationalState> {
    check_data(state, data)?;
    let (i_count, k_count) = (state.components, state.dim);
    let totals = state.component_totals();
    // Σ_n r_ni ln x_nk
    let mut weighted_log = vec![0.0; i_count * k_count];
    for n in 0..data.len() {
        let r = state.responsibilities(n);
        let log_x = data.log_row(n);
        for i in 0..i_count {
            for k in 0..k_count {
                weighted_log[i * k_count + k] += r[i] * log_x[k];
            }
        }
    }
    let priors = state.priors;
    let threshold = DEGENERATE_FRACTION * data.len() as f64;
    let mut shape_posteriors = Vec::with_capacity(state.shape_posteriors.len());
    for i in 0..i_count {
        if totals[i] < threshold {
            shape_posteriors.extend(std::iter::repeat(priors.shape_prior()).take(k_count));
            continue;
        }
        let coef = shape_coefficients(&state.expectations(i), state.bound_kind, state.mlb_coupling);
        for k in 0..k_count {
            let shape = priors.gamma_shape + totals[i] * coef[k];
            let rate = priors.gamma_rate - weighted_log[i * k_count + k];
            shape_posteriors.push(GammaPosterior::new(shape, rate)?);
        }
    }
    Ok(VariationalState {
        shape_posteriors,
        ..state.clone()
    })
}

/// Weight update: `c*_i = c₀ + Σ_n r_ni`.
pub fn update_weights(state: &VariationalState) -> Result<VariationalState> {
    Ok(VariationalState {
        weight_posterior: weights_from_totals(&state.component_totals(), &state.priors)?,
        ..state.clone()
    })
}

/// The surrogate objective
/// `Σ_n Σ_i r_ni [E ln π_i + B_i + Σ_k (ū_ik − 1) ln x_nk − ln r_ni] − KL(q(π)‖p(π)) − Σ KL(q(u_ik)‖p(u_ik))`.
pub fn surrogate_objective(state: &VariationalState, data: &Dataset) -> Result<f64> {
    check_data(state, data)?;
    let i_count = state.components;
    let e_log_pi = state.weight_posterior.expect_log();
    let bound: Vec<f64> = (0..i_count).map(|i| state.lib_surrogate(i)).collect();
    let means: Vec<Vec<f64>> = (0..i_count)
        .map(|i| state.shape_posteriors(i).iter().map(GammaPosterior::mean).collect())
        .collect();
    let mut total = 0.0;
    for n in 0..data.len() {
        let r = state.responsibilities(n);
        let log_x = data.log_row(n);
        for i in 0..i_count {
            if r[i] <= 0.0 {
                continue;
            }
            let data_term: f64 = means[i].iter().zip(log_x).map(|(m, lx)| (m - 1.0) * lx).sum();
            total += r[i] * (e_log_pi[i] + bound[i] + data_term - r[i].ln());
        }
    }
    total -= dirichlet_kl(&state.weight_posterior, &state.priors.weight_prior(i_count))?;
    let prior = state.priors.shape_prior();
    total -= state.shape_posteriors.iter().map(|q| gamma_kl(q, &prior)).sum::<f64>();
    Ok(total)
}

/// One full sweep: responsibilities, then shape posteriors, then weights.
pub fn sweep(state: &VariationalState, data: &Dataset) -> Result<VariationalState> {
    let state = update_responsibilities(state, data)?;
    let state = update_shape_posteriors(&state, data)?;
    update_weights(&state)
}

/// Initialize and run coordinate ascent.
pub fn run_evi(
    data: &Dataset,
    components: usize,
    priors: Priors,
    bound_kind: BoundKind,
    rng: &mut RngStream,
    config: &RunConfig,
) -> Result<(VariationalState, Vec<TraceRecord>)> {
    let init = init_state(data, components, priors, bound_kind, rng)?;
    run_from(init, data, rng, config)
}

/// Run coordinate ascent from a given initial state.
///
/// The initial responsibilities are first turned into shape and weight
/// posteriors, since a prior-valued state is symmetric across components.
/// A decrease in the surrogate never stops the run; only the relative change
/// test or `max_iters` does.
pub fn run_from(
    init: VariationalState,
    data: &Dataset,
    rng: &mut RngStream,
    config: &RunConfig,
) -> Result<(VariationalState, Vec<TraceRecord>)> {
    config.validate()?;
    init.validate()?;
    let init = init.with_mlb_coupling(config.mlb_coupling);
    let mut state = update_weights(&update_shape_posteriors(&init, data)?)?;
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut mc_rng = rng.derive(0x4d43);
    for iteration in 1..=config.max_iters {
        state = sweep(&state, data)?;
        let surrogate = surrogate_objective(&state, data)?;
        if !surrogate.is_finite() {
            return Err(Error::invalid("state", format!("surrogate became {surrogate} at iteration {iteration}")));
        }
        let (mc_elbo, mc_elbo_stderr) = match config.mc_elbo_draws {
            Some(draws) => {
                let est = elbo_monte_carlo(&state, data, &mut mc_rng, draws)?;
                (Some(est.mean), Some(est.stderr))
            }
            None => (None, None),
        };
        let previous = trace.last().map(|r| r.surrogate);
        trace.push(TraceRecord {
            iteration,
            surrogate,
            mc_elbo,
            mc_elbo_stderr,
        });
        if let Some(prev) = previous {
            let scale = prev.abs().max(f64::MIN_POSITIVE);
            let change = (surrogate - prev) / scale;
            // A genuine drop is recorded, not treated as convergence.
            if change >= -DECREASE_REL_TOL && change.abs() < config.rel_tol {
                break;
            }
        }
    }
    Ok((state, trace))
}

/// Positions `t` in the trace where `surrogate[t] < surrogate[t − 1] − tol`.
pub fn detect_nonmonotonicity(trace: &[TraceRecord], tol: f64) -> Vec<usize> {
    trace
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].surrogate < w[0].surrogate - tol)
        .map(|(t, _)| t + 1)
        .collect()
}

/// Like [`detect_nonmonotonicity`], with the tolerance scaled by the
/// magnitude of the preceding value: a drop counts when it exceeds
/// `rel_tol · |surrogate[t − 1]|`.
pub fn detect_relative_decreases(trace: &[TraceRecord], rel_tol: f64) -> Vec<usize> {
    trace
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].surrogate < w[0].surrogate - rel_tol * w[0].surrogate.abs())
        .map(|(t, _)| t + 1)
        .collect()
}

/// Trace as CSV with columns `iter,surrogate,mc_elbo,mc_elbo_stderr`.
pub fn trace_to_csv(trace: &[TraceRecord]) -> String {
    let mut out = String::from("iter,surrogate,mc_elbo,mc_elbo_stderr\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in trace {
        writeln!(out, "{},{},{},{}", r.iteration, r.surrogate, opt(r.mc_elbo), opt(r.mc_elbo_stderr)).unwrap();
    }
    out
}
