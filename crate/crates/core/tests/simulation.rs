use msbif_core::builtin;
use msbif_core::linalg::DenseMatrix;
use msbif_core::moments::Linearization;
use msbif_core::simulate::{mc_moments, tamed_em, write_paths_csv, SimConfig};

fn ou() -> Linearization {
    Linearization {
        x_star: vec![0.0],
        a: DenseMatrix::from_rows(&[&[-1.0]]),
        b: vec![DenseMatrix::from_rows(&[&[0.0]])],
        gamma: vec![vec![0.5]],
        lambda: vec![0.0],
    }
}

#[test]
fn ou_second_moment_matches_closed_form() {
    let cfg = SimConfig {
        dt: 1e-3,
        n_paths: 4000,
        seed: 11,
        output_stride: 250,
        ..SimConfig::new(vec![1.0], 1.0)
    };
    let ens = tamed_em(&ou(), &cfg).unwrap();
    let est = mc_moments(&ens).unwrap();
    for (k, &t) in est.times.iter().enumerate() {
        let decay = (-2.0 * t).exp();
        let exact = decay + 0.125 * (1.0 - decay);
        let se = est.second_moment_norm_se[k].max(1e-12);
        assert!(
            (est.second_moment_norm[k] - exact).abs() < 4.0 * se + 5e-3,
            "t = {t}: {} vs {exact}",
            est.second_moment_norm[k]
        );
    }
}

#[test]
fn same_seed_same_bytes() {
    let model = builtin("bistable2d", None, None).unwrap();
    let cfg = SimConfig {
        n_paths: 6,
        seed: 42,
        radius: 1e-3,
        output_stride: 10,
        ..SimConfig::new(vec![1.0, 0.0], 2.0)
    };
    let render = |cfg: &SimConfig| {
        let mut buf = Vec::new();
        write_paths_csv(&tamed_em(&model, cfg).unwrap(), &mut buf).unwrap();
        buf
    };
    let first = render(&cfg);
    assert_eq!(first, render(&cfg));
    assert_ne!(first, render(&SimConfig { seed: 43, ..cfg.clone() }));

    let text = String::from_utf8(first).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,path_id,x_1,x_2"));
    // 201 steps at stride 10 keep t = 0, 0.1, …, 2.0.
    assert_eq!(lines.count(), 6 * 21);
}

#[test]
fn stiff_drift_is_tamed_and_stays_finite() {
    // Plain Euler–Maruyama overflows from x0 = 30 at this step size (30 - 0.05·30³ ≈ -1320, …).
    let model = builtin("pitchfork", Some("additive"), None).unwrap();
    let cfg = SimConfig {
        dt: 0.05,
        n_paths: 8,
        seed: 3,
        ..SimConfig::new(vec![30.0], 5.0)
    };
    let ens = tamed_em(&model, &cfg).unwrap();
    assert!(ens.diverged.iter().all(|d| !d));
    assert!(ens.states.iter().all(|v| v.is_finite()));
    let last = ens.times.len() - 1;
    assert!((0..8).all(|p| ens.state(p, last)[0].abs() < 2.0));
}

#[test]
fn rejects_bad_configs() {
    let model = builtin("pitchfork", None, None).unwrap();
    for cfg in [
        SimConfig { dt: 0.0, ..SimConfig::new(vec![0.5], 1.0) },
        SimConfig { n_paths: 0, ..SimConfig::new(vec![0.5], 1.0) },
        SimConfig { output_stride: 0, ..SimConfig::new(vec![0.5], 1.0) },
        SimConfig::new(vec![0.5], 0.001),
    ] {
        assert!(tamed_em(&model, &cfg).is_err());
    }
}
