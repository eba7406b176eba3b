//! End-to-end properties of the coordinate-ascent engine and the Monte Carlo
//! evaluators on the built-in models.

use evimix::evaluation::{elbo_monte_carlo, kl_true_vs_estimated, mean_log_likelihood, shape_kl_total};
use evimix::harness::preset;
use evimix::inference::{
    detect_nonmonotonicity, init_state, run_evi, run_from, surrogate_objective, update_responsibilities,
    update_shape_posteriors, update_weights,
};
use evimix::mixtures::generate_dataset;
use evimix::{
    BoundKind, Dataset, DirichletWeights, GammaPosterior, MixtureSpec, Priors, RngStream, RunConfig,
    VariationalState,
};
use proptest::prelude::*;

fn model_a() -> MixtureSpec {
    preset("model-a-bmm").unwrap()
}

fn model_a_fit(n: usize, seed: u64) -> (Dataset, VariationalState) {
    let rng = RngStream::new(seed, 0);
    let data = generate_dataset(&model_a(), n, &mut rng.derive(0)).unwrap();
    let (state, trace) = run_evi(
        &data,
        2,
        Priors::default(),
        BoundKind::SlbWeak,
        &mut rng.derive(1),
        &RunConfig::default(),
    )
    .unwrap();
    assert!(trace.len() < RunConfig::default().max_iters, "seed {seed} did not converge");
    (data, state)
}

/// Index of the component whose posterior means are closest to (2, 8).
fn light_component(state: &VariationalState) -> usize {
    let dist = |i: usize| {
        let m: Vec<f64> = state.shape_posteriors(i).iter().map(GammaPosterior::mean).collect();
        (m[0] - 2.0).abs() + (m[1] - 8.0).abs()
    };
    if dist(0) <= dist(1) {
        0
    } else {
        1
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rates_never_fall_below_the_prior(seed in any::<u64>(), mlb in any::<bool>()) {
        let kind = if mlb { BoundKind::MlbStrong } else { BoundKind::SlbWeak };
        let rng = RngStream::new(seed, 0);
        let data = generate_dataset(&model_a(), 150, &mut rng.derive(0)).unwrap();
        let priors = Priors::default();
        let mut state = init_state(&data, 2, priors, kind, &mut rng.derive(1)).unwrap();
        for _ in 0..15 {
            state = update_weights(&update_shape_posteriors(&update_responsibilities(&state, &data).unwrap(), &data).unwrap()).unwrap();
            for i in 0..2 {
                for q in state.shape_posteriors(i) {
                    prop_assert!(q.rate() >= priors.gamma_rate);
                }
            }
            for n in 0..data.len() {
                let s: f64 = state.responsibilities(n).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn component_permutation_commutes_with_inference(seed in any::<u64>()) {
        let truth = preset("model-b-bmm").unwrap();
        let rng = RngStream::new(seed, 0);
        let data = generate_dataset(&truth, 200, &mut rng.derive(0)).unwrap();
        let init = init_state(&data, 3, Priors::default(), BoundKind::SlbWeak, &mut rng.derive(1)).unwrap();
        let config = RunConfig { max_iters: 40, ..RunConfig::default() };
        let perm = [2, 0, 1];
        let (plain, _) = run_from(init.clone(), &data, &mut rng.derive(2), &config).unwrap();
        let (permuted, _) = run_from(init.permuted(&perm).unwrap(), &data, &mut rng.derive(2), &config).unwrap();
        let expected = plain.permuted(&perm).unwrap();
        for i in 0..3 {
            for (a, b) in permuted.shape_posteriors(i).iter().zip(expected.shape_posteriors(i)) {
                prop_assert!((a.shape() - b.shape()).abs() <= 1e-9 * b.shape());
                prop_assert!((a.rate() - b.rate()).abs() <= 1e-9 * b.rate());
            }
        }
        for n in (0..data.len()).step_by(17) {
            for (a, b) in permuted.responsibilities(n).iter().zip(expected.responsibilities(n)) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn single_component_converges_quickly() {
    let truth = MixtureSpec::beta(vec![1.0], &[(3.0, 5.0)]).unwrap();
    for seed in 0..5 {
        let rng = RngStream::new(seed, 0);
        let data = generate_dataset(&truth, 500, &mut rng.derive(0)).unwrap();
        let (state, trace) =
            run_evi(&data, 1, Priors::default(), BoundKind::SlbWeak, &mut rng.derive(1), &RunConfig::default())
                .unwrap();
        assert!(trace.len() <= 200, "seed {seed}: {} iterations", trace.len());
        assert!(detect_nonmonotonicity(&trace, 1e-8 * trace[0].surrogate.abs()).is_empty());
        let m: Vec<f64> = state.shape_posteriors(0).iter().map(GammaPosterior::mean).collect();
        assert!((m[0] / 3.0 - 1.0).abs() < 0.2 && (m[1] / 5.0 - 1.0).abs() < 0.2, "{m:?}");
    }
}

#[test]
fn model_a_recovers_weights_and_assignments() {
    for seed in [1, 2] {
        let (data, state) = model_a_fit(2000, seed);
        let light = light_component(&state);
        let heavy = 1 - light;
        let mean_r: f64 = (0..data.len()).map(|n| state.responsibilities(n)[heavy]).sum::<f64>() / data.len() as f64;
        assert!((mean_r - 0.7).abs() < 0.05, "mean responsibility {mean_r}");
        let w = state.weight_posterior().mean();
        assert!((w[light] - 0.3).abs() < 0.05 && (w[heavy] - 0.7).abs() < 0.05, "{w:?}");
        // Hard assignments agree with the generating labels for most points.
        let latent = data.latent().unwrap();
        let agree = (0..data.len())
            .filter(|&n| {
                let r = state.responsibilities(n);
                let pick = if r[heavy] > r[light] { 1 } else { 0 };
                pick == latent[n]
            })
            .count();
        assert!(agree as f64 / data.len() as f64 > 0.9, "{agree} of {}", data.len());
    }
}

#[test]
fn model_a_recovers_the_light_component_shapes() {
    let (_, state) = model_a_fit(2000, 3);
    let q = state.shape_posteriors(light_component(&state));
    let (u, v) = (q[0].mean(), q[1].mean());
    assert!((u / 2.0 - 1.0).abs() < 0.15 && (v / 8.0 - 1.0).abs() < 0.15, "({u}, {v})");
}

#[test]
fn point_estimate_is_close_in_kl() {
    let (_, state) = model_a_fit(2000, 4);
    let kl = kl_true_vs_estimated(&model_a(), &state.point_estimate(), &mut RngStream::new(4, 9), 100_000).unwrap();
    assert!(kl.mean < 0.05, "{kl:?}");
}

#[test]
fn surrogate_lies_below_the_monte_carlo_elbo() {
    for seed in [5, 6] {
        let (data, state) = model_a_fit(400, seed);
        let surrogate = surrogate_objective(&state, &data).unwrap();
        let elbo = elbo_monte_carlo(&state, &data, &mut RngStream::new(seed, 7), 10_000).unwrap();
        assert!(surrogate <= elbo.mean + 3.0 * elbo.stderr, "surrogate {surrogate} vs {elbo:?}");
    }
}

#[test]
fn elbo_stderr_shrinks_with_draws() {
    let (data, state) = model_a_fit(400, 8);
    let small = elbo_monte_carlo(&state, &data, &mut RngStream::new(1, 0), 1_000).unwrap();
    let large = elbo_monte_carlo(&state, &data, &mut RngStream::new(1, 1), 4_000).unwrap();
    let ratio = small.stderr / large.stderr;
    assert!((ratio / 2.0 - 1.0).abs() < 0.2, "ratio {ratio}");
}

/// With one component and a posterior concentrated at `ū`, the ELBO is the
/// log-likelihood at `ū` minus the KL of the shape posteriors.
#[test]
fn near_point_mass_elbo_matches_the_likelihood() {
    let truth = MixtureSpec::beta(vec![1.0], &[(3.0, 5.0)]).unwrap();
    let data = generate_dataset(&truth, 300, &mut RngStream::new(12, 0)).unwrap();
    let scale = 1e7;
    let state = VariationalState::from_parts(
        vec![vec![1.0]; data.len()],
        vec![vec![GammaPosterior::new(3.0 * scale, scale).unwrap(), GammaPosterior::new(5.0 * scale, scale).unwrap()]],
        DirichletWeights::new(vec![1.0 + data.len() as f64]).unwrap(),
        BoundKind::SlbWeak,
        Priors::default(),
    )
    .unwrap();
    let expected = data.len() as f64 * mean_log_likelihood(&truth, &data) - shape_kl_total(&state);
    let elbo = elbo_monte_carlo(&state, &data, &mut RngStream::new(12, 1), 2_000).unwrap();
    assert!((elbo.mean - expected).abs() < 1e-3 + 3.0 * elbo.stderr, "{elbo:?} vs {expected}");
}
