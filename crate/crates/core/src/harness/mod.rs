//! Experiment orchestration.
//!
//! An [`ExperimentConfig`] names one of three experiments:
//!
//! * a trace study, which runs the engine on fresh datasets and records the
//!   surrogate at every iteration, flagging any decrease;
//! * a paired comparison of the two bound kinds (see
//!   [`compare_methods`](crate::evaluation::compare_methods));
//! * a bound sweep, which checks the closed-form bound inequalities on
//!   random posteriors and measures the Monte Carlo gaps of both bounds.
//!
//! Rounds run in parallel, but round `r` always draws from the stream
//! `RngStream::new(seed, 0).derive(r)`, and files are written by a single
//! writer after all rounds finish. The same config therefore produces
//! byte-identical files whatever the thread count.

mod config;
mod output;

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    measure_gap, slb_minus_mlb_u, slb_minus_mlb_v, slb_minus_mlb_z, BoundKind, ComponentExpectations, Surrogate,
};
use crate::distributions::GammaPosterior;
use crate::error::{Error, Result};
use crate::evaluation::{compare_methods, ComparisonReport, NONMONOTONE_REL_TOL};
use crate::inference::{detect_relative_decreases, init_state, run_from, trace_to_csv, Priors, RunConfig, TraceRecord};
use crate::mixtures::{generate_dataset, MixtureSpec};
use crate::special::RngStream;

pub use config::{
    parse_config, preset, ComparisonConfig, ExperimentConfig, ExperimentKind, SweepSettings, TraceSettings,
    TruthConfig, PRESET_NAMES,
};
pub use output::{Assertion, FileEntry, Manifest, OutputWriter, CONFIG_DIALECT, MANIFEST_FORMAT, MANIFEST_NAME};

/// Environment variable that overrides [`DEFAULT_OUTPUT_ROOT`].
pub const OUTPUT_ROOT_ENV: &str = "EVIMIX_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "evimix-out";

/// Slack allowed by the closed-form inequality sweep.
pub const INEQUALITY_TOL: f64 = 1e-12;
/// Fraction of configurations whose strong-condition gap must not fall
/// below the weak-condition gap.
pub const GAP_ORDERING_FRACTION: f64 = 0.99;
/// Configurations per parallel chunk of the inequality sweep.
const SWEEP_CHUNK: usize = 1_000;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Exit status for an error: config and parse problems are distinguished
/// from failures during the run.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Parse(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Where a config's files go when it does not name a directory.
pub fn default_output_dir(config: &ExperimentConfig) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from);
    let model = match (&config.model, config.kind) {
        (Some(name), _) => name.as_str(),
        (None, ExperimentKind::BoundSweep) => "beta",
        (None, _) => "custom",
    };
    root.join(format!("{}-{}-seed{}", config.kind.as_str(), model, config.seed))
}

/// What a finished experiment produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.manifest.passed {
            EXIT_OK
        } else {
            EXIT_ASSERTION
        }
    }
}

/// Validate `config`, run it and write every output file, the manifest last.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Outcome> {
    config.validate()?;
    let dir = config.output.clone().unwrap_or_else(|| default_output_dir(config));
    let rng = RngStream::new(config.seed, 0);
    let mut echo = config.clone();
    echo.output = None;
    if echo.kind == ExperimentKind::TraceStudy {
        echo.trace.bounds = config.trace_bounds()?;
    }

    // Compute first so a failed run leaves no partial directory behind.
    let (files, assertions) = match config.kind {
        ExperimentKind::TraceStudy => {
            let truth = config.truth_spec()?.expect("validated");
            let study = trace_study(&truth, &config.trace, &echo.trace.bounds, config.priors, &rng)?;
            let assertions = study.assertions();
            (study.files(), assertions)
        }
        ExperimentKind::Comparison => {
            let truth = config.truth_spec()?.expect("validated");
            let c = &config.comparison;
            let report = compare_methods(&truth, c.n, c.rounds, config.priors, &c.settings(), &rng)?;
            let assertions = comparison_assertions(&report);
            let files = vec![
                ("comparison.json".to_string(), report.to_json() + "\n"),
                ("comparison.csv".to_string(), report.to_csv()),
                ("comparison_quartiles.csv".to_string(), report.quartiles_csv()),
            ];
            (files, assertions)
        }
        ExperimentKind::BoundSweep => {
            let report = bound_sweep(&config.sweep, &rng)?;
            let assertions = report.assertions();
            (report.files(), assertions)
        }
    };

    let mut writer = OutputWriter::create(&dir)?;
    writer.write("config.toml", &echo.to_toml())?;
    for (name, contents) in &files {
        writer.write(name, contents)?;
    }
    let manifest = writer.finish(config.kind.as_str(), config.seed, assertions)?;
    Ok(Outcome { dir, manifest })
}

fn comparison_assertions(report: &ComparisonReport) -> Vec<Assertion> {
    let describe = |s: &Option<crate::evaluation::Summary>| match s {
        Some(s) => format!("mean {} over {} rounds", s.mean, s.count),
        None => format!("no usable rounds ({} of {} excluded)", report.excluded_rounds, report.rounds),
    };
    vec![
        Assertion {
            name: "delta_l_positive".into(),
            passed: report.delta_l.as_ref().is_some_and(|s| s.mean > 0.0),
            detail: describe(&report.delta_l),
        },
        Assertion {
            name: "delta_kl_negative".into(),
            passed: report.delta_kl.as_ref().is_some_and(|s| s.mean < 0.0),
            detail: describe(&report.delta_kl),
        },
    ]
}

/// One run within a trace study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRun {
    pub bound: BoundKind,
    pub round: usize,
    pub iterations: usize,
    /// False when the run hit `max_iters`.
    pub converged: bool,
    pub final_surrogate: f64,
    /// 1-based iterations where the surrogate dropped by more than the
    /// relative tolerance.
    pub decreases: Vec<usize>,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

/// Result of [`trace_study`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStudy {
    pub n: usize,
    pub rounds: usize,
    pub decrease_rel_tol: f64,
    /// Ordered by round, then by bound kind as requested.
    pub runs: Vec<TraceRun>,
}

impl TraceStudy {
    /// Rounds in which the given bound kind's surrogate decreased.
    pub fn nonmonotone_rounds(&self, bound: BoundKind) -> Vec<usize> {
        self.runs
            .iter()
            .filter(|r| r.bound == bound && !r.decreases.is_empty())
            .map(|r| r.round)
            .collect()
    }

    fn kinds(&self) -> Vec<BoundKind> {
        let mut kinds = Vec::new();
        for r in &self.runs {
            if !kinds.contains(&r.bound) {
                kinds.push(r.bound);
            }
        }
        kinds
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("bound,round,iterations,converged,decreases,first_decrease,final_surrogate\n");
        for r in &self.runs {
            let first = r.decreases.first().map_or_else(String::new, |t| t.to_string());
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.bound,
                r.round,
                r.iterations,
                r.converged,
                r.decreases.len(),
                first,
                r.final_surrogate
            )
            .unwrap();
        }
        out
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct PerKind {
            bound: BoundKind,
            rounds: usize,
            nonmonotone_rounds: Vec<usize>,
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            n: usize,
            rounds: usize,
            decrease_rel_tol: f64,
            kinds: Vec<PerKind>,
            runs: &'a [TraceRun],
        }
        let kinds = self
            .kinds()
            .into_iter()
            .map(|bound| PerKind {
                bound,
                rounds: self.rounds,
                nonmonotone_rounds: self.nonmonotone_rounds(bound),
            })
            .collect();
        let summary = Summary {
            n: self.n,
            rounds: self.rounds,
            decrease_rel_tol: self.decrease_rel_tol,
            kinds,
            runs: &self.runs,
        };
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"
    }

    fn files(&self) -> Vec<(String, String)> {
        let mut files: Vec<(String, String)> = self
            .runs
            .iter()
            .map(|r| (format!("traces/{}-round{:03}.csv", r.bound, r.round), trace_to_csv(&r.trace)))
            .collect();
        files.push(("trace_summary.json".into(), self.summary_json()));
        files.push(("trace_summary.csv".into(), self.summary_csv()));
        files
    }

    /// The weak-condition surrogate must never decrease.
    fn assertions(&self) -> Vec<Assertion> {
        if !self.kinds().contains(&BoundKind::SlbWeak) {
            return Vec::new();
        }
        let bad = self.nonmonotone_rounds(BoundKind::SlbWeak);
        vec![Assertion {
            name: "slb_monotone".into(),
            passed: bad.is_empty(),
            detail: if bad.is_empty() {
                format!("no decreases in {} rounds", self.rounds)
            } else {
                format!("decreases in rounds {bad:?}")
            },
        }]
    }
}

/// Run every requested bound kind on `settings.rounds` fresh datasets.
///
/// Within a round all kinds share the dataset and the initial
/// responsibilities. Decreases are detected relative to the previous value
/// with tolerance [`NONMONOTONE_REL_TOL`].
pub fn trace_study(
    truth: &MixtureSpec,
    settings: &TraceSettings,
    bounds: &[BoundKind],
    priors: Priors,
    rng: &RngStream,
) -> Result<TraceStudy> {
    let per_round: Vec<Vec<TraceRun>> = (0..settings.rounds)
        .into_par_iter()
        .map(|round| {
            trace_round(truth, settings.n, bounds, priors, &settings.run, &rng.derive(round as u64), round)
                .map_err(|e| Error::Round {
                    round,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    Ok(TraceStudy {
        n: settings.n,
        rounds: settings.rounds,
        decrease_rel_tol: NONMONOTONE_REL_TOL,
        runs: per_round.into_iter().flatten().collect(),
    })
}

fn trace_round(
    truth: &MixtureSpec,
    n: usize,
    bounds: &[BoundKind],
    priors: Priors,
    run: &RunConfig,
    rng: &RngStream,
    round: usize,
) -> Result<Vec<TraceRun>> {
    let data = generate_dataset(truth, n, &mut rng.derive(0))?;
    let init = init_state(&data, truth.components(), priors, BoundKind::SlbWeak, &mut rng.derive(1))?;
    bounds
        .iter()
        .map(|&bound| {
            let (_, trace) = run_from(init.with_bound_kind(bound), &data, &mut rng.derive(2), run)?;
            Ok(TraceRun {
                bound,
                round,
                iterations: trace.len(),
                converged: trace.len() < run.max_iters,
                final_surrogate: trace.last().map_or(f64::NAN, |r| r.surrogate),
                decreases: detect_relative_decreases(&trace, NONMONOTONE_REL_TOL),
                trace,
            })
        })
        .collect()
}

/// Minimum of a difference over the sweep and how many configurations
/// fell below `−INEQUALITY_TOL`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub min: f64,
    pub violations: usize,
}

impl InequalityCheck {
    fn empty() -> Self {
        Self {
            min: f64::INFINITY,
            violations: 0,
        }
    }

    fn push(&mut self, x: f64) {
        // NaN counts as a violation.
        if !(x >= -INEQUALITY_TOL) {
            self.violations += 1;
        }
        self.min = self.min.min(x);
    }

    fn merge(self, other: Self) -> Self {
        Self {
            min: self.min.min(other.min),
            violations: self.violations + other.violations,
        }
    }
}

/// Measured gaps for one random posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub shape: [f64; 2],
    pub rate: [f64; 2],
    pub slb_gap: f64,
    pub slb_stderr: f64,
    pub mlb_z_gap: f64,
    pub mlb_z_stderr: f64,
}

impl GapRow {
    /// The weak-condition gap is non-negative up to three standard errors.
    pub fn weak_condition_holds(&self) -> bool {
        self.slb_gap >= -3.0 * self.slb_stderr
    }

    /// The strong-condition gap is at least the weak one, up to three
    /// combined standard errors of the two independent estimates.
    pub fn ordering_holds(&self) -> bool {
        let se = self.slb_stderr.hypot(self.mlb_z_stderr);
        self.mlb_z_gap >= self.slb_gap - 3.0 * se
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub configs: usize,
    pub param_range: [f64; 2],
    pub slb_minus_mlb_u: InequalityCheck,
    pub slb_minus_mlb_v: InequalityCheck,
    pub slb_minus_mlb_z: InequalityCheck,
    pub gap_draws: usize,
    pub gap_rows: Vec<GapRow>,
}

impl SweepReport {
    pub fn inequality_violations(&self) -> usize {
        self.slb_minus_mlb_u.violations + self.slb_minus_mlb_v.violations + self.slb_minus_mlb_z.violations
    }

    pub fn weak_condition_failures(&self) -> usize {
        self.gap_rows.iter().filter(|r| !r.weak_condition_holds()).count()
    }

    /// Fraction of gap configurations where the ordering holds; 1 when no
    /// gaps were measured.
    pub fn ordering_fraction(&self) -> f64 {
        if self.gap_rows.is_empty() {
            return 1.0;
        }
        self.gap_rows.iter().filter(|r| r.ordering_holds()).count() as f64 / self.gap_rows.len() as f64
    }

    fn assertions(&self) -> Vec<Assertion> {
        let mut out = vec![Assertion {
            name: "bound_inequalities".into(),
            passed: self.inequality_violations() == 0,
            detail: format!(
                "{} violations in {} configurations; minima u {} v {} z {}",
                self.inequality_violations(),
                self.configs,
                self.slb_minus_mlb_u.min,
                self.slb_minus_mlb_v.min,
                self.slb_minus_mlb_z.min
            ),
        }];
        if !self.gap_rows.is_empty() {
            let failures = self.weak_condition_failures();
            out.push(Assertion {
                name: "weak_condition".into(),
                passed: failures == 0,
                detail: format!("{failures} of {} gap estimates below -3 stderr", self.gap_rows.len()),
            });
            let fraction = self.ordering_fraction();
            out.push(Assertion {
                name: "gap_ordering".into(),
                passed: fraction >= GAP_ORDERING_FRACTION,
                detail: format!(
                    "ordering holds in {} of {} configurations",
                    self.gap_rows.iter().filter(|r| r.ordering_holds()).count(),
                    self.gap_rows.len()
                ),
            });
        }
        out
    }

    pub fn gaps_csv(&self) -> String {
        let mut out = String::from("config,shape_u,rate_u,shape_v,rate_v,slb_gap,slb_stderr,mlb_z_gap,mlb_z_stderr\n");
        for (j, r) in self.gap_rows.iter().enumerate() {
            writeln!(
                out,
                "{j},{},{},{},{},{},{},{},{}",
                r.shape[0], r.rate[0], r.shape[1], r.rate[1], r.slb_gap, r.slb_stderr, r.mlb_z_gap, r.mlb_z_stderr
            )
            .unwrap();
        }
        out
    }

    fn files(&self) -> Vec<(String, String)> {
        #[derive(Serialize)]
        struct Summary<'a> {
            configs: usize,
            param_range: [f64; 2],
            slb_minus_mlb_u: &'a InequalityCheck,
            slb_minus_mlb_v: &'a InequalityCheck,
            slb_minus_mlb_z: &'a InequalityCheck,
            gap_configs: usize,
            gap_draws: usize,
            weak_condition_failures: usize,
            ordering_fraction: f64,
        }
        let summary = Summary {
            configs: self.configs,
            param_range: self.param_range,
            slb_minus_mlb_u: &self.slb_minus_mlb_u,
            slb_minus_mlb_v: &self.slb_minus_mlb_v,
            slb_minus_mlb_z: &self.slb_minus_mlb_z,
            gap_configs: self.gap_rows.len(),
            gap_draws: self.gap_draws,
            weak_condition_failures: self.weak_condition_failures(),
            ordering_fraction: self.ordering_fraction(),
        };
        vec![
            ("sweep.json".into(), serde_json::to_string_pretty(&summary).expect("sweep serializes") + "\n"),
            ("gaps.csv".into(), self.gaps_csv()),
        ]
    }
}

/// Gamma posteriors for `u` and `v` with shapes and rates log-uniform on
/// `range`.
pub fn random_beta_posteriors(range: [f64; 2], rng: &mut RngStream) -> [GammaPosterior; 2] {
    let (lo, hi) = (range[0].ln(), range[1].ln());
    let mut draw = || (lo + (hi - lo) * rng.uniform_open()).exp();
    let mut pair = || GammaPosterior::new(draw(), draw()).expect("positive parameters");
    [pair(), pair()]
}

/// Check the closed-form inequalities on `settings.configs` random
/// posteriors (stream `rng.derive(0)`), then measure the SLB and
/// second-order MLB gaps on `settings.gap_configs` more (stream
/// `rng.derive(1)`), each estimate with its own stream.
pub fn bound_sweep(settings: &SweepSettings, rng: &RngStream) -> Result<SweepReport> {
    let ineq_rng = rng.derive(0);
    let chunks = settings.configs.div_ceil(SWEEP_CHUNK);
    let checks = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut stream = ineq_rng.derive(c as u64);
            let count = SWEEP_CHUNK.min(settings.configs - c * SWEEP_CHUNK);
            let mut acc = [InequalityCheck::empty(); 3];
            for _ in 0..count {
                let ce = ComponentExpectations::from_posteriors(&random_beta_posteriors(settings.param_range, &mut stream));
                acc[0].push(slb_minus_mlb_u(&ce)?);
                acc[1].push(slb_minus_mlb_v(&ce)?);
                acc[2].push(slb_minus_mlb_z(&ce)?);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold([InequalityCheck::empty(); 3], |a, b| [a[0].merge(b[0]), a[1].merge(b[1]), a[2].merge(b[2])]);

    let gap_rng = rng.derive(1);
    let gap_rows = (0..settings.gap_configs)
        .into_par_iter()
        .map(|j| {
            let stream = gap_rng.derive(j as u64);
            let posteriors = random_beta_posteriors(settings.param_range, &mut stream.derive(0));
            let slb = measure_gap(&posteriors, Surrogate::Slb, &mut stream.derive(1), settings.gap_draws)?;
            let mlb = measure_gap(&posteriors, Surrogate::MlbZ, &mut stream.derive(2), settings.gap_draws)?;
            Ok(GapRow {
                shape: [posteriors[0].shape(), posteriors[1].shape()],
                rate: [posteriors[0].rate(), posteriors[1].rate()],
                slb_gap: slb.mean,
                slb_stderr: slb.stderr,
                mlb_z_gap: mlb.mean,
                mlb_z_stderr: mlb.stderr,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SweepReport {
        configs: settings.configs,
        param_range: settings.param_range,
        slb_minus_mlb_u: checks[0],
        slb_minus_mlb_v: checks[1],
        slb_minus_mlb_z: checks[2],
        gap_draws: settings.gap_draws,
        gap_rows,
    })
}
