mod support;

use ultradeco::jump::{
    back_react, back_react_level, empirical_survival, estimate_survival_mc, first_step_distribution,
    post_transition_state, sample_ensemble, sample_first_click, survival, FirstClickSampler,
};
use ultradeco::models::{
    analytic_survival_two_site, analytic_survival_von_neumann, build_photon_detector, build_two_site,
    build_von_neumann, FieldState, PhotonDetectorParams, TwoSiteParams, VonNeumannParams,
};
use ultradeco::ode::uniform_grid;
use ultradeco::reduction::{compute_reduced, evolve_diagonal, KMode};
use ultradeco::{ComplexOperator, Error, Execution, IntegratorConfig, ReducedModel};

fn tight() -> IntegratorConfig {
    IntegratorConfig::rk45(1e-12, 1e-14)
}

fn von_neumann(probs: &[f64], g: f64, gamma: f64) -> (VonNeumannParams, ReducedModel, ComplexOperator) {
    let p = VonNeumannParams::new(probs.len(), g, gamma);
    let red = compute_reduced(&build_von_neumann(&p).unwrap(), KMode::Resonant).unwrap();
    let rho = p.state_from_probabilities(probs).unwrap();
    (p, red, rho)
}

#[test]
fn two_site_survival_at_unit_time() {
    let p = TwoSiteParams::from_chi(1.0, 1.0, 200.0);
    let red = compute_reduced(&build_two_site(&p).unwrap(), KMode::Resonant).unwrap();
    let tl = back_react_level(&red, &TwoSiteParams::initial_state(), 0, &[0.0, 0.5, 1.0], &tight()).unwrap();
    assert!((tl.states[2].trace().re - 0.7198).abs() < 1e-3);
}

#[test]
fn decoupled_two_site_never_clicks() {
    let p = TwoSiteParams::new(1.0, 0.0, 10.0);
    let spec = build_two_site(&p).unwrap();
    // g = 0 leaves no coupled pair, so Γ₀ = 0
    let red = compute_reduced(&spec, KMode::Resonant).unwrap();
    let s = survival(&back_react_level(&red, &TwoSiteParams::initial_state(), 0, &uniform_grid(20.0, 21), &tight()).unwrap());
    assert!(s.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn von_neumann_conditional_state_is_frozen() {
    let (_, red, rho) = von_neumann(&[0.1, 0.2, 0.7], 1.0, 20.0);
    let tl = back_react_level(&red, &rho, 0, &uniform_grid(100.0, 201), &IntegratorConfig::default()).unwrap();
    let worst = tl
        .normalized()
        .into_iter()
        .map(|s| s.unwrap().max_abs_diff(&rho))
        .fold(0.0, f64::max);
    assert!(worst <= 1e-9, "{worst}");
}

#[test]
fn von_neumann_survival_for_any_state() {
    let (p, red, _) = von_neumann(&[0.5, 0.5], 1.0, 10.0);
    let mut r = support::rng(11);
    for _ in 0..5 {
        let rho = support::random_state(&mut r, 2);
        let s = survival(&back_react_level(&red, &rho, 0, &uniform_grid(30.0, 61), &tight()).unwrap());
        for (t, v) in s.times.iter().zip(&s.values) {
            assert!((v - analytic_survival_von_neumann(p.chi(), *t)).abs() < 1e-8);
        }
    }
}

#[test]
fn log_derivative_of_survival_is_the_loss_rate() {
    let spec = support::random_spec(3);
    let red = compute_reduced(&spec, KMode::Exact).unwrap();
    let mut r = support::rng(4);
    let rho0 = support::random_state(&mut r, spec.dim());
    let h = 1e-3;
    let grid = uniform_grid(2.0, 2001);
    let tl = back_react_level(&red, &rho0, 0, &grid, &tight()).unwrap();
    let gamma = red.gamma(0);
    let log_s: Vec<f64> = tl.states.iter().map(|s| s.trace().re.ln()).collect();
    for k in (1..grid.len() - 1).step_by(50) {
        let fd = (log_s[k + 1] - log_s[k - 1]) / (2.0 * h);
        let rho = &tl.states[k];
        let exact = -(gamma.trace_product(rho) + rho.trace_product(&gamma.adjoint())).re / rho.trace().re;
        assert!((fd - exact).abs() <= 1e-4 * exact.abs(), "t = {}: {fd} vs {exact}", grid[k]);
    }
}

#[test]
fn normalized_state_stays_physical() {
    for seed in 20..30 {
        let spec = support::random_spec(seed);
        let red = compute_reduced(&spec, KMode::Resonant).unwrap();
        let mut r = support::rng(seed);
        let rho0 = support::random_state(&mut r, spec.dim());
        for mu in 0..spec.num_levels() {
            let tl = back_react_level(&red, &rho0, mu, &uniform_grid(3.0, 31), &IntegratorConfig::default()).unwrap();
            for s in tl.normalized().into_iter().flatten() {
                assert!((s.trace().re - 1.0).abs() < 1e-12);
                assert!(s.min_eigenvalue() > -1e-10);
            }
        }
    }
}

#[test]
fn first_step_of_a_pointer_state() {
    let (p, red, _) = von_neumann(&[1.0, 0.0, 0.0], 1.0, 10.0);
    let rho = p.state_from_probabilities(&[1.0, 0.0, 0.0]).unwrap();
    let d = first_step_distribution(&red, &rho, 0, 200.0, &tight()).unwrap();
    assert!((d.probabilities[1] - 1.0).abs() < 1e-6);
    assert!(d.probabilities[2].abs() < 1e-12 && d.probabilities[3].abs() < 1e-12);
}

#[test]
fn two_site_escape_is_total() {
    let p = TwoSiteParams::from_chi(1.0, 1.0, 100.0);
    let red = compute_reduced(&build_two_site(&p).unwrap(), KMode::Resonant).unwrap();
    let d = first_step_distribution(&red, &TwoSiteParams::initial_state(), 0, 40.0, &tight()).unwrap();
    assert!(d.warnings.is_empty());
    assert!((d.probabilities[1] - 1.0).abs() < 1e-6, "{:?}", d);
    assert!((d.escape_total + d.remainder - 1.0).abs() < 1e-9);
}

#[test]
fn post_states_of_the_reference_devices() {
    let (_, red, rho) = von_neumann(&[0.36, 0.64], 1.0, 10.0);
    for mu in 1..=2 {
        let post = post_transition_state(&red, &rho, 0, mu).unwrap();
        assert!(post.max_abs_diff(&ComplexOperator::basis_projector(2, mu - 1)) < 1e-15);
    }
    let s1 = ComplexOperator::basis_projector(2, 0);
    assert!(matches!(post_transition_state(&red, &s1, 0, 2), Err(Error::ForbiddenTransition { .. })));

    let det = build_photon_detector(&PhotonDetectorParams::new(0.1, 10.0, FieldState::Fock { n: 2 })).unwrap();
    let red = compute_reduced(&det.spec, KMode::Resonant).unwrap();
    let post = post_transition_state(&red, &det.field, 0, 1).unwrap();
    assert!(post.max_abs_diff(&ComplexOperator::basis_projector(21, 1)) < 1e-15);
    let vacuum = ComplexOperator::basis_projector(21, 0);
    assert!(post_transition_state(&red, &vacuum, 0, 1).is_err());
}

#[test]
fn mean_first_click_time_is_inverse_escape_rate() {
    let (p, red, rho) = von_neumann(&[0.36, 0.64], 1.0, 10.0);
    let sampler = FirstClickSampler::new(&red, &rho, 0, 400.0, &IntegratorConfig::default()).unwrap();
    let n = 100_000;
    let trs = sample_ensemble(&sampler, 99, n, Execution::Parallel).unwrap();
    let times: Vec<f64> = trs.iter().map(|t| t.first_click().unwrap().time).collect();
    let mean = times.iter().sum::<f64>() / n as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let want = 1.0 / (2.0 * p.chi());
    assert!((mean - want).abs() <= 3.0 * se, "mean {mean}, want {want} +- {se}");
}

#[test]
fn same_seed_same_trajectory() {
    let (_, red, rho) = von_neumann(&[0.36, 0.64], 1.0, 10.0);
    let a = sample_first_click(&red, &rho, 0, 17, 100.0, &IntegratorConfig::default()).unwrap();
    let b = sample_first_click(&red, &rho, 0, 17, 100.0, &IntegratorConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.seed, 17);
}

#[test]
fn empirical_survival_of_von_neumann() {
    let (p, red, rho) = von_neumann(&[0.5, 0.5], 1.0, 10.0);
    let grid = uniform_grid(30.0, 61);
    let est = estimate_survival_mc(&red, &rho, 0, 100_000, 5, &grid, &IntegratorConfig::default(), Execution::Parallel)
        .unwrap();
    let max_ci = est.ci_halfwidth.iter().cloned().fold(0.0, f64::max);
    let sup = grid
        .iter()
        .zip(&est.p_emp)
        .map(|(t, p_emp)| (p_emp - analytic_survival_von_neumann(p.chi(), *t)).abs())
        .fold(0.0, f64::max);
    assert!(sup <= 3.0 * max_ci, "{sup} vs {max_ci}");
}

#[test]
fn empirical_survival_of_two_site() {
    let p = TwoSiteParams::from_chi(1.0, 1.0, 100.0);
    let red = compute_reduced(&build_two_site(&p).unwrap(), KMode::Resonant).unwrap();
    let grid = uniform_grid(6.0, 13);
    let n = 100_000;
    let est = estimate_survival_mc(&red, &TwoSiteParams::initial_state(), 0, n, 8, &grid, &IntegratorConfig::default(), Execution::Parallel)
        .unwrap();
    for (t, p_emp) in grid.iter().zip(&est.p_emp) {
        let want = analytic_survival_two_site(1.0, 1.0, *t);
        let sigma = (want * (1.0 - want) / n as f64).sqrt();
        assert!((p_emp - want).abs() <= 3.0 * sigma + 1e-12, "t = {t}: {p_emp} vs {want}");
    }
}

#[test]
fn censored_runs_survive_to_the_horizon() {
    let (_, red, rho) = von_neumann(&[0.5, 0.5], 0.1, 10.0);
    let sampler = FirstClickSampler::new(&red, &rho, 0, 5.0, &IntegratorConfig::default()).unwrap();
    let trs = sample_ensemble(&sampler, 1, 2000, Execution::Sequential).unwrap();
    let censored = trs.iter().filter(|t| t.censored).count();
    assert!(censored > 0 && censored < trs.len());
    assert_eq!(censored, trs.iter().filter(|t| t.events.is_empty()).count());
    let est = empirical_survival(&trs, &[0.0, 5.0]);
    assert_eq!(est.p_emp[0], 1.0);
    assert!((est.p_emp[1] - censored as f64 / 2000.0).abs() < 1e-15);
    // censoring probability e^{-2χ t_max}
    let want = (-2.0 * 0.001 * 5.0f64).exp();
    assert!((sampler.censoring_probability() - want).abs() < 1e-9);
}

#[test]
fn first_step_agrees_with_late_rate_equation_populations() {
    let (_, red, rho) = von_neumann(&[0.36, 0.64], 1.0, 10.0);
    let d = first_step_distribution(&red, &rho, 0, 200.0, &tight()).unwrap();
    let mut diag0 = vec![ComplexOperator::zeros(2); 3];
    diag0[0] = rho.clone();
    let tl = evolve_diagonal(&red, &diag0, &uniform_grid(100.0, 11), &tight()).unwrap();
    let last = tl.populations().pop().unwrap();
    let ratio_rate = last[1] / last[2];
    let ratio_pi = d.probabilities[1] / d.probabilities[2];
    assert!((ratio_rate - ratio_pi).abs() < 1e-8);
}

#[test]
fn back_react_scalar_closed_form_with_free_dynamics() {
    // Γ = χ·I commutes with every H: trace e^{-2χt}, state rotated by H
    let mut r = support::rng(77);
    let h = support::random_hermitian(&mut r, 3, 1.0);
    let rho = support::random_state(&mut r, 3);
    let chi = 0.4;
    let gamma = ComplexOperator::identity(3).scale_re(chi);
    let tl = back_react(&gamma, &rho, &h, &uniform_grid(2.0, 5), &tight()).unwrap();
    for (t, s) in tl.times.iter().zip(&tl.states) {
        let u = h.matrix().map(|z| z * ultradeco::operator::c(0.0, -t)).exp();
        let want = ComplexOperator::from_matrix(&u * rho.matrix() * u.adjoint()).unwrap().scale_re((-2.0 * chi * t).exp());
        assert!(s.max_abs_diff(&want) < 1e-10);
    }
}

#[test]
fn pure_conditional_state_stays_positive_at_default_tolerances() {
    let p = TwoSiteParams::from_chi(1.0, 1.0, 100.0);
    let red = compute_reduced(&build_two_site(&p).unwrap(), KMode::Resonant).unwrap();
    let tl = back_react_level(&red, &TwoSiteParams::initial_state(), 0, &uniform_grid(10.0, 101), &IntegratorConfig::default())
        .unwrap();
    for rho in tl.normalized().into_iter().flatten() {
        assert!(rho.min_eigenvalue() > -1e-12, "{}", rho.min_eigenvalue());
    }
    let free = TwoSiteParams::new(1.0, 0.0, 10.0);
    let red = compute_reduced(&build_two_site(&free).unwrap(), KMode::Resonant).unwrap();
    let s = survival(&back_react_level(&red, &TwoSiteParams::initial_state(), 0, &uniform_grid(50.0, 51), &IntegratorConfig::default()).unwrap());
    assert!(s.values.iter().all(|v| (v - 1.0).abs() < 1e-14));
}
