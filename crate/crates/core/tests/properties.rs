use msbif_core::dissipativity::{check_dissipative, r_q};
use msbif_core::linalg::{kron, max_real_eigenvalue, solve_linear, unvec_square, vec, SymmetricIndexMap};
use msbif_core::moments::{build_moment_system, lambda_max_ms, stationary_moments, Linearization};
use msbif_core::{builtin, DenseMatrix};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |data| DenseMatrix::from_col_major(rows, cols, data).unwrap())
}

fn linear_system() -> impl Strategy<Value = Linearization> {
    (1usize..=3, 1usize..=2).prop_flat_map(|(d, m)| {
        (
            matrix(d, d),
            prop::collection::vec(matrix(d, d), m),
            prop::collection::vec(prop::collection::vec(-0.5f64..0.5, d), m),
        )
            .prop_map(move |(a, b, gamma)| Linearization {
                x_star: vec![0.0; d],
                a: a.scale(0.5).sub(&DenseMatrix::identity(d).scale(1.5)),
                b: b.into_iter().map(|b| b.scale(0.35)).collect(),
                gamma,
                lambda: vec![0.0; d],
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vec_of_triple_product(n in 1usize..4, k in 1usize..4, seed in matrix(3, 3)) {
        let a = DenseMatrix::from_col_major(n, n, seed.as_slice()[..n * n].to_vec()).unwrap();
        let x = DenseMatrix::from_col_major(n, k, (0..n * k).map(|i| (i as f64).sin()).collect()).unwrap();
        let b = DenseMatrix::from_col_major(k, k, (0..k * k).map(|i| (i as f64 + 0.5).cos()).collect()).unwrap();
        let lhs = vec(&a.matmul(&x).matmul(&b));
        let rhs = kron(&b.transpose(), &a).matvec(&vec(&x));
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_map_round_trip(m in matrix(4, 4), mean in prop::collection::vec(-1.0f64..1.0, 4)) {
        let sym = m.add(&m.transpose());
        let mut full = vec(&sym);
        full.extend(&mean);
        let map = SymmetricIndexMap::new(4);
        let reduced = map.restrict(&full);
        prop_assert_eq!(reduced.len(), 10 + 4);
        prop_assert_eq!(map.expand(&reduced), full);
    }

    #[test]
    fn reduced_and_full_moment_systems_agree(lin in linear_system()) {
        let ms = build_moment_system(&lin).unwrap();
        let d = lin.dim();
        let full = max_real_eigenvalue(&ms.big_a).unwrap();
        let fast = lambda_max_ms(&ms).unwrap();
        prop_assert!((full - fast).abs() < 1e-9 * (1.0 + full.abs()), "{} vs {}", full, fast);
        if full < -1e-6 {
            let (_, beta_sq) = stationary_moments(&ms).unwrap();
            let neg_s: Vec<f64> = ms.s.iter().map(|v| -v).collect();
            let q = solve_linear(&ms.big_a, &neg_s).unwrap();
            let p = unvec_square(&q[..d * d], d);
            let trace: f64 = (0..d).map(|i| p[(i, i)]).sum();
            prop_assert!((beta_sq - trace).abs() < 1e-9 * (1.0 + trace.abs()));
            prop_assert!(beta_sq >= -1e-12);
        }
    }

    #[test]
    fn moment_constant_is_monotone(q in 1.0f64..4.0, a2 in 0.1f64..5.0, a3 in 0.0f64..5.0, bump in 0.01f64..1.0) {
        prop_assert!(r_q(q, a2, a3 + bump) >= r_q(q, a2, a3));
        prop_assert!(r_q(q, a2 + bump, a3) <= r_q(q, a2, a3));
    }

    #[test]
    fn certificate_monotone_in_alpha3(a3 in 0.0f64..0.2, bump in 0.0f64..1.0, seed in 0u64..100) {
        let model = builtin("pitchfork", Some("additive"), None).unwrap();
        let lo = check_dissipative(&model, 2.0, 1.0, a3, None, 5.0, 256, seed).unwrap();
        let hi = check_dissipative(&model, 2.0, 1.0, a3 + bump, None, 5.0, 256, seed).unwrap();
        prop_assert!(hi.max_violation <= lo.max_violation);
        prop_assert!(!lo.holds() || hi.holds());
    }
}
