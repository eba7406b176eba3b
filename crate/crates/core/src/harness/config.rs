//! Experiment configuration in TOML, plus the named model presets.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bounds::BoundKind;
use crate::error::{Error, Result};
use crate::evaluation::{ComparisonSettings, MIN_ELBO_DRAWS, MIN_KL_DRAWS};
use crate::inference::{Priors, RunConfig};
use crate::mixtures::MixtureSpec;

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 3] = ["model-a-bmm", "model-b-bmm", "model-b-dmm"];

/// Built-in generating models.
///
/// * `model-a-bmm`: π = [0.3, 0.7], (u, v) = (2, 8) and (15, 4).
/// * `model-b-bmm`: π = [0.3, 0.4, 0.3], (10, 2), (2, 12) and (10, 10).
/// * `model-b-dmm`: π = [0.35, 0.65], u = [4, 12, 3] and [10, 6, 2].
pub fn preset(name: &str) -> Option<MixtureSpec> {
    let spec = match name {
        "model-a-bmm" => MixtureSpec::beta(vec![0.3, 0.7], &[(2.0, 8.0), (15.0, 4.0)]),
        "model-b-bmm" => MixtureSpec::beta(vec![0.3, 0.4, 0.3], &[(10.0, 2.0), (2.0, 12.0), (10.0, 10.0)]),
        "model-b-dmm" => MixtureSpec::new(vec![0.35, 0.65], vec![vec![4.0, 12.0, 3.0], vec![10.0, 6.0, 2.0]]),
        _ => return None,
    };
    Some(spec.expect("preset parameters are valid"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    TraceStudy,
    Comparison,
    BoundSweep,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::TraceStudy => "trace-study",
            ExperimentKind::Comparison => "comparison",
            ExperimentKind::BoundSweep => "bound-sweep",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trace-study" => Ok(ExperimentKind::TraceStudy),
            "comparison" => Ok(ExperimentKind::Comparison),
            "bound-sweep" => Ok(ExperimentKind::BoundSweep),
            other => Err(Error::Parse(format!("unknown experiment kind `{other}`"))),
        }
    }
}

/// An explicit generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub weights: Vec<f64>,
    /// One shape vector per component.
    pub shapes: Vec<Vec<f64>>,
}

/// Convergence-trace study: repeated runs on fresh data, one trace per
/// bound kind and round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSettings {
    pub n: usize,
    pub rounds: usize,
    /// Bound kinds to run. Empty means every kind the model supports.
    pub bounds: Vec<BoundKind>,
    pub run: RunConfig,
}

impl Default for TraceSettings {
    fn default() -> Self {
        Self {
            n: 400,
            rounds: 10,
            bounds: Vec::new(),
            run: RunConfig::default(),
        }
    }
}

/// Paired SLB-vs-MLB comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparisonConfig {
    pub n: usize,
    pub rounds: usize,
    pub elbo_draws: usize,
    pub kl_draws: usize,
    pub run: RunConfig,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        let settings = ComparisonSettings::default();
        Self {
            n: 2000,
            rounds: 20,
            elbo_draws: settings.elbo_draws,
            kl_draws: settings.kl_draws,
            run: settings.run,
        }
    }
}

impl ComparisonConfig {
    pub fn settings(&self) -> ComparisonSettings {
        ComparisonSettings {
            run: self.run,
            elbo_draws: self.elbo_draws,
            kl_draws: self.kl_draws,
        }
    }
}

/// Random-configuration sweep over the bound inequalities and gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    /// Configurations checked for the closed-form inequalities.
    pub configs: usize,
    /// Configurations whose gaps are measured by Monte Carlo.
    pub gap_configs: usize,
    pub gap_draws: usize,
    /// Shapes and rates are drawn log-uniformly from this interval.
    pub param_range: [f64; 2],
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            configs: 100_000,
            gap_configs: 1_000,
            gap_draws: 10_000,
            param_range: [0.1, 100.0],
        }
    }
}

/// A complete experiment description.
///
/// Exactly one of `model` (a preset name) and `truth` must be given for the
/// trace study and the comparison; the bound sweep needs neither. Only the
/// section matching `kind` is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthConfig>,
    #[serde(default)]
    pub priors: Priors,
    #[serde(default)]
    pub trace: TraceSettings,
    #[serde(default)]
    pub comparison: ComparisonConfig,
    #[serde(default)]
    pub sweep: SweepSettings,
}

impl ExperimentConfig {
    /// A config with every section at its default.
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            seed: 0,
            model: None,
            output: None,
            truth: None,
            priors: Priors::default(),
            trace: TraceSettings::default(),
            comparison: ComparisonConfig::default(),
            sweep: SweepSettings::default(),
        }
    }

    /// The generating model, if the experiment has one.
    pub fn truth_spec(&self) -> Result<Option<MixtureSpec>> {
        match (&self.model, &self.truth) {
            (Some(_), Some(_)) => Err(config_err("model", "give either `model` or `[truth]`, not both")),
            (Some(name), None) => preset(name).map(Some).ok_or_else(|| {
                config_err("model", format!("unknown preset `{name}`; expected one of {}", PRESET_NAMES.join(", ")))
            }),
            (None, Some(t)) => {
                validate_truth(t)?;
                MixtureSpec::new(t.weights.clone(), t.shapes.clone())
                    .map(Some)
                    .map_err(|e| config_err("truth", e.to_string()))
            }
            (None, None) => Ok(None),
        }
    }

    /// Check every field the chosen kind will use.
    pub fn validate(&self) -> Result<()> {
        check_priors(&self.priors)?;
        let truth = self.truth_spec()?;
        match self.kind {
            ExperimentKind::TraceStudy => {
                let truth = truth.ok_or_else(|| config_err("model", "a trace study needs `model` or `[truth]`"))?;
                let t = &self.trace;
                check_sizes("trace", t.n, t.rounds, &truth)?;
                check_run("trace.run", &t.run)?;
                if truth.dim() != 2 && t.bounds.contains(&BoundKind::MlbStrong) {
                    return Err(config_err(
                        "trace.bounds",
                        format!("the strong-condition bounds need K = 2, the model has K = {}", truth.dim()),
                    ));
                }
            }
            ExperimentKind::Comparison => {
                let truth = truth.ok_or_else(|| config_err("model", "a comparison needs `model` or `[truth]`"))?;
                let c = &self.comparison;
                check_sizes("comparison", c.n, c.rounds, &truth)?;
                if truth.dim() != 2 {
                    return Err(config_err("model", format!("the comparison needs K = 2, the model has K = {}", truth.dim())));
                }
                check_run("comparison.run", &c.run)?;
                if c.elbo_draws < MIN_ELBO_DRAWS {
                    return Err(config_err("comparison.elbo_draws", format!("must be at least {MIN_ELBO_DRAWS}")));
                }
                if c.kl_draws < MIN_KL_DRAWS {
                    return Err(config_err("comparison.kl_draws", format!("must be at least {MIN_KL_DRAWS}")));
                }
            }
            ExperimentKind::BoundSweep => {
                let s = &self.sweep;
                if s.configs == 0 {
                    return Err(config_err("sweep.configs", "must be at least 1"));
                }
                if s.gap_configs > 0 && s.gap_draws < crate::bounds::MIN_GAP_DRAWS {
                    return Err(config_err(
                        "sweep.gap_draws",
                        format!("must be at least {}", crate::bounds::MIN_GAP_DRAWS),
                    ));
                }
                let [lo, hi] = s.param_range;
                if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
                    return Err(config_err("sweep.param_range", format!("[{lo}, {hi}] is not a positive interval")));
                }
            }
        }
        Ok(())
    }

    /// Bound kinds the trace study runs, after applying the default.
    pub fn trace_bounds(&self) -> Result<Vec<BoundKind>> {
        if !self.trace.bounds.is_empty() {
            return Ok(self.trace.bounds.clone());
        }
        let dim = self.truth_spec()?.map_or(2, |t| t.dim());
        Ok(if dim == 2 {
            vec![BoundKind::SlbWeak, BoundKind::MlbStrong]
        } else {
            vec![BoundKind::SlbWeak]
        })
    }

    /// TOML text of this config. Parsing it gives back an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parse and validate a TOML experiment description. Defaults are filled
/// in for everything not given.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    config.validate()?;
    if config.kind == ExperimentKind::TraceStudy {
        config.trace.bounds = config.trace_bounds()?;
    }
    Ok(config)
}

fn config_err(field: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        detail: detail.into(),
    }
}

fn validate_truth(t: &TruthConfig) -> Result<()> {
    for (i, w) in t.weights.iter().enumerate() {
        if !(w.is_finite() && *w > 0.0) {
            return Err(config_err(&format!("truth.weights[{i}]"), format!("{w} is not a positive weight")));
        }
    }
    for (i, row) in t.shapes.iter().enumerate() {
        for (k, u) in row.iter().enumerate() {
            if !(u.is_finite() && *u > 0.0) {
                return Err(config_err(&format!("truth.shapes[{i}][{k}]"), format!("{u} is not a positive shape")));
            }
        }
    }
    Ok(())
}

fn check_priors(p: &Priors) -> Result<()> {
    for (field, v) in [
        ("priors.gamma_shape", p.gamma_shape),
        ("priors.gamma_rate", p.gamma_rate),
        ("priors.weight_concentration", p.weight_concentration),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(config_err(field, format!("{v} must be positive")));
        }
    }
    Ok(())
}

fn check_sizes(section: &str, n: usize, rounds: usize, truth: &MixtureSpec) -> Result<()> {
    if rounds == 0 {
        return Err(config_err(&format!("{section}.rounds"), "must be at least 1"));
    }
    if n < truth.components() {
        return Err(config_err(
            &format!("{section}.n"),
            format!("{n} is smaller than the {} components", truth.components()),
        ));
    }
    Ok(())
}

fn check_run(section: &str, run: &RunConfig) -> Result<()> {
    if run.max_iters == 0 {
        return Err(config_err(&format!("{section}.max_iters"), "must be at least 1"));
    }
    if !(run.rel_tol.is_finite() && run.rel_tol > 0.0) {
        return Err(config_err(&format!("{section}.rel_tol"), format!("{} must be positive", run.rel_tol)));
    }
    if let Some(d) = run.mc_elbo_draws {
        if d < MIN_ELBO_DRAWS {
            return Err(config_err(&format!("{section}.mc_elbo_draws"), format!("must be at least {MIN_ELBO_DRAWS}")));
        }
    }
    Ok(())
}
