//! Monte Carlo evaluation of fitted posteriors and paired SLB-vs-MLB
//! comparisons.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{lib_unchecked, BoundKind, GapEstimate, RunningStats};
use crate::distributions::{standard_gamma, GammaPosterior};
use crate::error::{Error, Result};
use crate::inference::{detect_relative_decreases, init_state, run_from, Priors, RunConfig, VariationalState};
use crate::mixtures::{generate_dataset, log_sum_exp, Dataset, MixtureSpec, CLAMP_EPS};
use crate::special::{lgamma, RngStream};

pub const MIN_ELBO_DRAWS: usize = 1_000;
pub const MIN_KL_DRAWS: usize = 1_000;

/// Default number of draws for the ELBO estimate.
pub const DEFAULT_ELBO_DRAWS: usize = 10_000;
/// Default number of draws for the KL estimate.
pub const DEFAULT_KL_DRAWS: usize = 100_000;

/// A surrogate drop larger than this fraction of its magnitude marks an
/// MLB round as non-convergent.
pub const NONMONOTONE_REL_TOL: f64 = 1e-8;

/// `ln G` for `G ~ Gamma(shape, 1)`, stable for tiny shapes.
fn log_standard_gamma(shape: f64, rng: &mut RngStream) -> f64 {
    if shape < 1.0 {
        standard_gamma(shape + 1.0, rng).ln() + rng.uniform_open().ln() / shape
    } else {
        standard_gamma(shape, rng).ln()
    }
}

/// Monte Carlo estimate of `E_q[ln p(X, θ) − ln q(θ)]`, with the indicator
/// variables summed out of the likelihood. Each draw samples the weights and
/// every shape parameter from the posterior.
///
/// The estimator ignores the state's bound kind.
pub fn elbo_monte_carlo(
    state: &VariationalState,
    data: &Dataset,
    rng: &mut RngStream,
    draws: usize,
) -> Result<GapEstimate> {
    if draws < MIN_ELBO_DRAWS {
        return Err(Error::domain("elbo_monte_carlo", format!("need at least {MIN_ELBO_DRAWS} draws, got {draws}")));
    }
    if data.dim() != state.dim() || data.len() != state.len() {
        return Err(Error::invalid("state", "state and dataset disagree in shape"));
    }
    let (i_count, k_count) = (state.components(), state.dim());
    let priors = state.priors();
    let shape_prior = priors.shape_prior();
    let conc = state.weight_posterior().concentration();
    let c_total: f64 = conc.iter().sum();
    let q_pi_norm = lgamma(c_total) - conc.iter().map(|&c| lgamma(c)).sum::<f64>();
    let c0 = priors.weight_concentration;
    let p_pi_norm = lgamma(c0 * i_count as f64) - i_count as f64 * lgamma(c0);

    let mut stats = RunningStats::default();
    let mut log_pi = vec![0.0; i_count];
    let mut u = vec![0.0; i_count * k_count];
    let mut norm = vec![0.0; i_count];
    let mut terms = vec![0.0; i_count];
    for _ in 0..draws {
        // π via log-gamma draws so that near-empty components stay finite.
        for (lp, &c) in log_pi.iter_mut().zip(conc) {
            *lp = log_standard_gamma(c, rng);
        }
        let lse = log_sum_exp(&log_pi);
        log_pi.iter_mut().for_each(|lp| *lp -= lse);

        let mut value = 0.0;
        // ln p(π) − ln q(π); with one component π ≡ 1 and both terms vanish.
        if i_count > 1 {
            for (lp, &c) in log_pi.iter().zip(conc) {
                value += (c0 - 1.0) * lp - (c - 1.0) * lp;
            }
            value += p_pi_norm - q_pi_norm;
        }
        for i in 0..i_count {
            for (k, q) in state.shape_posteriors(i).iter().enumerate() {
                let x = q.sample(rng).max(f64::MIN_POSITIVE);
                u[i * k_count + k] = x;
                value += shape_prior.log_pdf(x) - q.log_pdf(x);
            }
            norm[i] = log_pi[i] + lib_unchecked(&u[i * k_count..(i + 1) * k_count]);
        }
        for n in 0..data.len() {
            let log_x = data.log_row(n);
            for i in 0..i_count {
                let shapes = &u[i * k_count..(i + 1) * k_count];
                terms[i] = norm[i] + shapes.iter().zip(log_x).map(|(s, lx)| (s - 1.0) * lx).sum::<f64>();
            }
            value += log_sum_exp(&terms);
        }
        stats.push(value);
    }
    Ok(GapEstimate {
        mean: stats.mean(),
        stderr: stats.stderr(),
    })
}

/// Posterior means of the weights and shape parameters.
pub fn point_estimate(state: &VariationalState) -> MixtureSpec {
    state.point_estimate()
}

/// Monte Carlo estimate of `KL(p(·|truth) ‖ p(·|estimate))` using draws
/// from the true mixture.
pub fn kl_true_vs_estimated(
    truth: &MixtureSpec,
    estimate: &MixtureSpec,
    rng: &mut RngStream,
    draws: usize,
) -> Result<GapEstimate> {
    if truth.dim() != estimate.dim() {
        return Err(Error::DimensionMismatch {
            expected: truth.dim(),
            actual: estimate.dim(),
        });
    }
    if draws < MIN_KL_DRAWS {
        return Err(Error::domain("kl_true_vs_estimated", format!("need at least {MIN_KL_DRAWS} draws, got {draws}")));
    }
    let mut stats = RunningStats::default();
    let mut x = vec![0.0; truth.dim()];
    for _ in 0..draws {
        let i = crate::distributions::categorical_draw(truth.weights(), rng);
        let gammas: Vec<f64> = truth.shapes()[i].iter().map(|&a| standard_gamma(a, rng)).collect();
        let total: f64 = gammas.iter().sum();
        for (slot, g) in x.iter_mut().zip(&gammas) {
            *slot = (g / total).clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
        }
        let s: f64 = x.iter().sum();
        x.iter_mut().for_each(|c| *c /= s);
        stats.push(truth.log_density_unchecked(&x) - estimate.log_density_unchecked(&x));
    }
    Ok(GapEstimate {
        mean: stats.mean(),
        stderr: stats.stderr(),
    })
}

/// Settings shared by every round of [`compare_methods`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparisonSettings {
    pub run: RunConfig,
    pub elbo_draws: usize,
    pub kl_draws: usize,
}

impl Default for ComparisonSettings {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            elbo_draws: DEFAULT_ELBO_DRAWS,
            kl_draws: DEFAULT_KL_DRAWS,
        }
    }
}

/// Outcome of one paired round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    /// Monte Carlo ELBO per observation.
    pub l_slb: Option<f64>,
    pub l_mlb: Option<f64>,
    pub l_slb_stderr: Option<f64>,
    pub l_mlb_stderr: Option<f64>,
    pub kl_slb: Option<f64>,
    pub kl_mlb: Option<f64>,
    pub slb_iterations: usize,
    pub mlb_iterations: usize,
    /// Iterations at which the MLB surrogate decreased.
    pub mlb_decreases: Vec<usize>,
    /// Excluded from the summary statistics.
    pub excluded: bool,
    pub error: Option<String>,
}

impl RoundResult {
    pub fn delta_l(&self) -> Option<f64> {
        Some(self.l_slb? - self.l_mlb?)
    }

    pub fn delta_kl(&self) -> Option<f64> {
        Some(self.kl_slb? - self.kl_mlb?)
    }
}

/// Mean, standard deviation and quartiles of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            count: n,
            mean,
            std,
            min: sorted[0],
            q25: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q75: quantile(&sorted, 0.75),
            max: sorted[n - 1],
        })
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Paired SLB-vs-MLB comparison over several rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rounds: usize,
    pub n: usize,
    pub per_round: Vec<RoundResult>,
    /// Rounds left out of the summaries: MLB non-convergence or failure.
    pub excluded_rounds: usize,
    pub delta_l: Option<Summary>,
    pub delta_kl: Option<Summary>,
    pub l_slb: Option<Summary>,
    pub l_mlb: Option<Summary>,
}

impl ComparisonReport {
    fn assemble(n: usize, per_round: Vec<RoundResult>) -> Self {
        let included: Vec<&RoundResult> = per_round.iter().filter(|r| !r.excluded).collect();
        let collect = |f: fn(&RoundResult) -> Option<f64>| included.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
        Self {
            rounds: per_round.len(),
            n,
            excluded_rounds: per_round.len() - included.len(),
            delta_l: Summary::of(&collect(RoundResult::delta_l)),
            delta_kl: Summary::of(&collect(RoundResult::delta_kl)),
            l_slb: Summary::of(&collect(|r| r.l_slb)),
            l_mlb: Summary::of(&collect(|r| r.l_mlb)),
            per_round,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per round.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "round,l_slb,l_mlb,kl_slb,kl_mlb,delta_l,delta_kl,slb_iterations,mlb_iterations,mlb_decreases,excluded\n",
        );
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for r in &self.per_round {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.round,
                opt(r.l_slb),
                opt(r.l_mlb),
                opt(r.kl_slb),
                opt(r.kl_mlb),
                opt(r.delta_l()),
                opt(r.delta_kl()),
                r.slb_iterations,
                r.mlb_iterations,
                r.mlb_decreases.len(),
                r.excluded
            )
            .unwrap();
        }
        out
    }

    /// Box-plot summary: quartiles of the per-observation ELBO for each method.
    pub fn quartiles_csv(&self) -> String {
        let mut out = String::from("series,count,min,q25,median,q75,max\n");
        for (name, s) in [
            ("l_slb", &self.l_slb),
            ("l_mlb", &self.l_mlb),
            ("delta_l", &self.delta_l),
            ("delta_kl", &self.delta_kl),
        ] {
            if let Some(s) = s {
                writeln!(out, "{name},{},{},{},{},{},{}", s.count, s.min, s.q25, s.median, s.q75, s.max).unwrap();
            }
        }
        out
    }
}

/// Run one paired round: fresh data, a shared initialization, one SLB and
/// one MLB run, then ELBO and KL estimates with common random numbers.
pub fn compare_round(
    truth: &MixtureSpec,
    n: usize,
    priors: Priors,
    settings: &ComparisonSettings,
    round: usize,
    rng: &RngStream,
) -> RoundResult {
    let mut result = RoundResult {
        round,
        l_slb: None,
        l_mlb: None,
        l_slb_stderr: None,
        l_mlb_stderr: None,
        kl_slb: None,
        kl_mlb: None,
        slb_iterations: 0,
        mlb_iterations: 0,
        mlb_decreases: Vec::new(),
        excluded: true,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let mut data_rng = rng.derive(0);
        let data = generate_dataset(truth, n, &mut data_rng)?;
        let mut init_rng = rng.derive(1);
        let init = init_state(&data, truth.components(), priors, BoundKind::SlbWeak, &mut init_rng)?;

        let (slb, slb_trace) = run_from(init.clone(), &data, &mut rng.derive(2), &settings.run)?;
        result.slb_iterations = slb_trace.len();
        let (mlb, mlb_trace) =
            run_from(init.with_bound_kind(BoundKind::MlbStrong), &data, &mut rng.derive(2), &settings.run)?;
        result.mlb_iterations = mlb_trace.len();
        result.mlb_decreases = detect_relative_decreases(&mlb_trace, NONMONOTONE_REL_TOL);

        let per_obs = 1.0 / data.len() as f64;
        let l_slb = elbo_monte_carlo(&slb, &data, &mut rng.derive(3), settings.elbo_draws)?;
        let l_mlb = elbo_monte_carlo(&mlb, &data, &mut rng.derive(3), settings.elbo_draws)?;
        result.l_slb = Some(l_slb.mean * per_obs);
        result.l_mlb = Some(l_mlb.mean * per_obs);
        result.l_slb_stderr = Some(l_slb.stderr * per_obs);
        result.l_mlb_stderr = Some(l_mlb.stderr * per_obs);

        let kl_slb = kl_true_vs_estimated(truth, &slb.point_estimate(), &mut rng.derive(4), settings.kl_draws)?;
        let kl_mlb = kl_true_vs_estimated(truth, &mlb.point_estimate(), &mut rng.derive(4), settings.kl_draws)?;
        result.kl_slb = Some(kl_slb.mean);
        result.kl_mlb = Some(kl_mlb.mean);
        result.excluded = !result.mlb_decreases.is_empty();
        Ok(())
    })();
    if let Err(e) = outcome {
        result.error = Some(e.to_string());
        result.excluded = true;
    }
    result
}

/// Paired comparison of the two bound kinds over `rounds` independent
/// datasets of size `n` drawn from `truth`. Round `r` uses the stream
/// `rng.derive(r)`, so the report does not depend on scheduling.
pub fn compare_methods(
    truth: &MixtureSpec,
    n: usize,
    rounds: usize,
    priors: Priors,
    settings: &ComparisonSettings,
    rng: &RngStream,
) -> Result<ComparisonReport> {
    if rounds == 0 {
        return Err(Error::invalid("comparison", "rounds must be >= 1"));
    }
    if truth.dim() != 2 {
        return Err(Error::UnsupportedDimension {
            func: "compare_methods",
            k: truth.dim(),
        });
    }
    if n < truth.components() {
        return Err(Error::invalid("comparison", format!("n = {n} is smaller than the component count")));
    }
    priors.validate()?;
    settings.run.validate()?;
    let per_round: Vec<RoundResult> = (0..rounds)
        .into_par_iter()
        .map(|r| compare_round(truth, n, priors, settings, r, &rng.derive(r as u64)))
        .collect();
    Ok(ComparisonReport::assemble(n, per_round))
}

/// Expected log-likelihood per observation under a point estimate; handy
/// for sanity checks against the ELBO.
pub fn mean_log_likelihood(spec: &MixtureSpec, data: &Dataset) -> f64 {
    data.rows().map(|x| spec.log_density_unchecked(x)).sum::<f64>() / data.len() as f64
}

/// Sum of `gamma_kl` terms for the shape posteriors of a state, exposed for
/// exact ELBO checks in degenerate cases.
pub fn shape_kl_total(state: &VariationalState) -> f64 {
    let prior = state.priors().shape_prior();
    (0..state.components())
        .flat_map(|i| state.shape_posteriors(i).to_vec())
        .map(|q: GammaPosterior| crate::distributions::gamma_kl(&q, &prior))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::DirichletWeights;

    fn model_a() -> MixtureSpec {
        MixtureSpec::beta(vec![0.3, 0.7], &[(2.0, 8.0), (15.0, 4.0)]).unwrap()
    }

    #[test]
    fn kl_of_identical_mixtures_is_zero() {
        let spec = model_a();
        let kl = kl_true_vs_estimated(&spec, &spec, &mut RngStream::new(1, 0), 100_000).unwrap();
        assert!(kl.mean.abs() <= 3.0 * kl.stderr.max(1e-15));
        assert!(kl.stderr < 1e-3);
    }

    #[test]
    fn kl_detects_perturbation() {
        let spec = model_a();
        let doubled = MixtureSpec::new(
            spec.weights().to_vec(),
            spec.shapes().iter().map(|r| r.iter().map(|s| 2.0 * s).collect()).collect(),
        )
        .unwrap();
        let kl = kl_true_vs_estimated(&spec, &doubled, &mut RngStream::new(2, 0), 20_000).unwrap();
        assert!(kl.mean > 3.0 * kl.stderr, "{kl:?}");
    }

    #[test]
    fn kl_is_label_free() {
        let spec = model_a();
        let est = MixtureSpec::beta(vec![0.35, 0.65], &[(2.5, 7.0), (14.0, 4.5)]).unwrap();
        let a = kl_true_vs_estimated(&spec, &est, &mut RngStream::new(3, 0), 5_000).unwrap();
        let b = kl_true_vs_estimated(&spec, &est.permuted(&[1, 0]).unwrap(), &mut RngStream::new(3, 0), 5_000).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_dimension_mismatch() {
        let spec = model_a();
        let dmm = MixtureSpec::new(vec![1.0], vec![vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            kl_true_vs_estimated(&spec, &dmm, &mut RngStream::new(0, 0), 1_000),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn point_estimate_of_prior_state() {
        let priors = Priors::default();
        let state = VariationalState::from_parts(
            vec![vec![0.5, 0.5]; 4],
            vec![vec![priors.shape_prior(); 2]; 2],
            priors.weight_prior(2),
            BoundKind::SlbWeak,
            priors,
        )
        .unwrap();
        let est = point_estimate(&state);
        assert_eq!(est.weights(), &[0.5, 0.5]);
        for row in est.shapes() {
            for s in row {
                assert!((s - priors.gamma_shape / priors.gamma_rate).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn elbo_ignores_bound_kind_tag() {
        let data = generate_dataset(&model_a(), 50, &mut RngStream::new(1, 0)).unwrap();
        let post = GammaPosterior::new(30.0, 5.0).unwrap();
        let state = VariationalState::from_parts(
            vec![vec![0.3, 0.7]; 50],
            vec![vec![post; 2]; 2],
            DirichletWeights::new(vec![15.0, 35.0]).unwrap(),
            BoundKind::SlbWeak,
            Priors::default(),
        )
        .unwrap();
        let a = elbo_monte_carlo(&state, &data, &mut RngStream::new(9, 0), 1_000).unwrap();
        let b = elbo_monte_carlo(&state.with_bound_kind(BoundKind::MlbStrong), &data, &mut RngStream::new(9, 0), 1_000)
            .unwrap();
        assert_eq!(a, b);
        assert!(elbo_monte_carlo(&state, &data, &mut RngStream::new(9, 0), 10).is_err());
    }

    #[test]
    fn summary_quartiles() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.min, s.q25, s.median, s.q75, s.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert_eq!(s.mean, 3.0);
        assert!((s.std - 2.5f64.sqrt()).abs() < 1e-12);
        assert!(Summary::of(&[]).is_none());
    }
}
