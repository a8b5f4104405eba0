use msbif_core::dissipativity::{check_dissipative, dissipativity_constants, r_q, CertificateStatus, DEFAULT_RADIUS};
use msbif_core::equilibria::{continue_branches, find_equilibria, solve_equilibrium, NEWTON_MAX_ITER, NEWTON_TOL};
use msbif_core::linalg::max_real_eigenvalue;
use msbif_core::moments::{analyze, build_moment_system, lambda_max_ms, linearize, markov_tail, TailInputs, TailKind};
use msbif_core::sweep::{detect_crossings, run_sweep, CrossingField};
use msbif_core::validate::CIR_MU_ROOT;
use msbif_core::{builtin, DenseMatrix, ModelConfig, ModelError};

const D1: f64 = 1e-3;
const D2: f64 = 1e-3;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn pitchfork_variants_at_upper_branch() {
    let (gamma, sigma) = (0.25f64, 0.1f64);
    let x = gamma.sqrt();
    let a = -2.0 * gamma;
    // (variant, B, Γ): the linearized noise of σ, σx and σx² at x*.
    let cases = [
        ("additive", 0.0, sigma),
        ("linear", sigma, sigma * x),
        ("quadratic", 2.0 * sigma * x, sigma * x * x),
    ];
    for (variant, b, g) in cases {
        let model = builtin("pitchfork", Some(variant), None).unwrap();
        let r = analyze(&model, &[x], D1, D2).unwrap();
        let growth = 2.0 * a + b * b;
        // The spectrum of 𝔸 holds both the second-moment rate and `A` itself.
        assert!(close(r.lambda_max_a, growth.max(a), 1e-12), "{variant}: {}", r.lambda_max_a);
        assert!(close(r.beta_sq.unwrap(), -g * g / growth, 1e-12), "{variant}");
        assert!(close(r.mu, 2.0 * a + D1 + (1.0 + D2) * b * b, 1e-12), "{variant}");
        assert!(r.linear_ms_stable && r.nonlinear_ms_stable);
    }
}

#[test]
fn pitchfork_zero_branch_is_unstable_past_the_bifurcation() {
    let model = builtin("pitchfork", Some("additive"), None).unwrap();
    let r = analyze(&model, &[0.0], D1, D2).unwrap();
    assert!(r.lambda_max_a > 0.0);
    assert_eq!(r.beta_sq, None);
    assert!(!r.linear_ms_stable && !r.nonlinear_ms_stable);
}

#[test]
fn lorenz_linearization_and_equilibria() {
    let model = builtin("lorenz", None, None).unwrap();
    let (rho, b, s) = (10.0, 8.0 / 3.0, 10.0);
    let j = model.jac_drift(&[0.0; 3]);
    let expected = DenseMatrix::from_rows(&[&[-s, s, 0.0], &[rho, -1.0, 0.0], &[0.0, 0.0, -b]]);
    assert!(j.sub(&expected).max_abs() < 1e-12);

    let x = solve_equilibrium(&model, &[5.0, 5.0, 8.0], NEWTON_TOL, NEWTON_MAX_ITER).unwrap();
    let k = (b * (rho - 1.0)).sqrt();
    assert!(close(x[0], k, 1e-10) && close(x[1], k, 1e-10) && close(x[2], rho - 1.0, 1e-10));
    assert!(model.check_equilibrium(&x, 1e-10));
    assert_eq!(find_equilibria(&model).len(), 3);
}

#[test]
fn reduced_growth_rate_matches_full_spectrum() {
    for (name, variant, dim, x) in [
        ("lorenz", "nonlinear", None, vec![0.0; 3]),
        ("bistable2d", "multiplicative", None, vec![1.0, 0.0]),
        ("allen_cahn", "default", Some(8), vec![0.5f64.sqrt(); 8]),
    ] {
        let model = builtin(name, Some(variant), dim).unwrap();
        let lin = linearize(&model, &x).unwrap();
        let ms = build_moment_system(&lin).unwrap();
        let fast = lambda_max_ms(&ms).unwrap();
        let full = max_real_eigenvalue(&ms.big_a).unwrap();
        assert!(close(fast, full, 1e-9 * (1.0 + full.abs())), "{name}: {fast} vs {full}");
    }
}

#[test]
fn cir_mu_root_from_sweep() {
    let model = builtin("cir", None, None).unwrap();
    let rows = run_sweep(&model, "sigma", (0.4, 0.7), 31, D1, D2).unwrap();
    let events = detect_crossings(&model, &rows, CrossingField::Mu, D1, D2);
    assert_eq!(events.len(), 1);
    assert!(close(events[0].param_value, CIR_MU_ROOT, 1e-7), "{}", events[0].param_value);
}

#[test]
fn transcritical_exchange_of_stability() {
    let model = builtin("transcritical", None, None).unwrap();
    let branches = continue_branches(&model, "gamma", (-0.5, 0.5), 21, &[]).unwrap();
    let zero = branches.iter().find(|b| b.id == "zero").unwrap();
    for p in &zero.points {
        if p.param_value < -1e-9 {
            assert!(p.det_stable, "gamma = {}", p.param_value);
        } else if p.param_value > 1e-9 {
            assert!(!p.det_stable, "gamma = {}", p.param_value);
        }
    }
}

#[test]
fn sweep_flags_are_nested() {
    for (name, variant, param, range) in [
        ("pitchfork", "linear", "gamma", (-1.0, 1.0)),
        ("fold", "additive", "gamma", (0.01, 1.0)),
        ("bistable2d", "multiplicative", "gamma", (-1.0, 1.0)),
    ] {
        let model = builtin(name, Some(variant), None).unwrap();
        let rows = run_sweep(&model, param, range, 41, D1, D2).unwrap();
        assert!(!rows.is_empty());
        for r in &rows {
            assert!(!r.nonlinear_ms_stable || r.linear_ms_stable, "{name} at {}", r.param_value);
            assert_eq!(r.beta_sq.is_some(), r.linear_ms_stable, "{name} at {}", r.param_value);
        }
    }
}

#[test]
fn certificate_then_tail_bound() {
    let model = builtin("pitchfork", Some("additive"), None).unwrap();
    let meta = dissipativity_constants(&model, 2.0).unwrap();
    let cert = check_dissipative(&model, 2.0, meta.alpha2, meta.alpha3, None, DEFAULT_RADIUS, 2048, 7).unwrap();
    assert_eq!(cert.status, CertificateStatus::Certified);

    let rq = r_q(1.0, 1.0, 1.0);
    assert!(close(rq, (-1f64).exp(), 1e-15));
    let tail = markov_tail(
        TailKind::Dissipative,
        &TailInputs {
            epsilon: 0.1,
            r_q: Some(rq),
            norm_x0: Some(0.0),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(close(tail.rho, 3.6788, 1e-4));
    assert!(close(tail.bound_value, 0.1, 1e-12));
}

#[test]
fn config_round_trip_and_errors() {
    let cfg = ModelConfig::from_json(r#"{"model":"cir","params":{"sigma":0.3}}"#).unwrap();
    let model = cfg.build().unwrap();
    assert_eq!(model.param("sigma"), Some(0.3));
    assert!(matches!(builtin("nope", None, None), Err(ModelError::UnknownModel(_))));
    assert!(ModelConfig::from_json(r#"{"model":"cir","extra":1}"#).is_err());
    assert!(builtin("pitchfork", Some("cubic"), None).is_err());
}
