//! Affine-noise linearization at an equilibrium and the linear ODE for its
//! first and second moments.
//!
//! With `Y = X - x*` the linearization is `dY = A Y dt + Σ_i (B_i Y + Γ_i) dW_i`.
//! Stacking `Q = [vec P; M]` with `P = E[Y Yᵀ]`, `M = E[Y]` gives `Q' = 𝔸 Q + S`.

use serde::Serialize;

use crate::error::{AnalysisError, LinalgError};
use crate::linalg::{
    is_symmetric, kron_accumulate, max_real_eigenvalue, reduce_moment_system, solve_linear, symmetric_eigenvalues,
    DenseMatrix, SymmetricIndexMap,
};
use crate::model::{ModelSpec, Sde};
use crate::simulate::{simulate_coupled, SimConfig};

pub const DEFAULT_DELTA: f64 = 1e-3;

/// Below this `|λ_max(𝔸)|` the stationary solve is refused as ill-conditioned.
pub const BOUNDARY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub x_star: Vec<f64>,
    pub a: DenseMatrix,
    pub b: Vec<DenseMatrix>,
    pub gamma: Vec<Vec<f64>>,
    /// Constant drift term; zero for linearizations about an equilibrium.
    pub lambda: Vec<f64>,
}

impl Linearization {
    pub fn dim(&self) -> usize {
        self.x_star.len()
    }
}

impl Sde for Linearization {
    fn dim(&self) -> usize {
        self.x_star.len()
    }

    fn noise_dim(&self) -> usize {
        self.b.len()
    }

    fn drift(&self, y: &[f64], out: &mut [f64]) {
        self.a.matvec_into(y, out);
        for (o, l) in out.iter_mut().zip(&self.lambda) {
            *o += l;
        }
    }

    fn diffusion(&self, y: &[f64], g: &mut DenseMatrix) {
        for (i, (b, gam)) in self.b.iter().zip(&self.gamma).enumerate() {
            let col = g.col_mut(i);
            b.matvec_into(y, col);
            for (c, v) in col.iter_mut().zip(gam) {
                *c += v;
            }
        }
    }

    fn is_affine(&self) -> bool {
        true
    }
}

/// `A = DF(x*)`, `B_i = DG_i(x*)`, `Γ_i = G_i(x*)`, `Λ = 0`.
pub fn linearize(model: &ModelSpec, x_star: &[f64]) -> Result<Linearization, AnalysisError> {
    if x_star.len() != model.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: model.dim(),
            found: x_star.len(),
        }
        .into());
    }
    let g = model.diffusion_matrix(x_star);
    Ok(Linearization {
        x_star: x_star.to_vec(),
        a: model.jac_drift(x_star),
        b: model.jac_diffusion(x_star),
        gamma: (0..model.noise_dim()).map(|i| g.col(i).to_vec()).collect(),
        lambda: vec![0.0; model.dim()],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedSystem {
    pub a: DenseMatrix,
    pub s: Vec<f64>,
    pub map: SymmetricIndexMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentSystem {
    pub dim: usize,
    pub big_a: DenseMatrix,
    pub s: Vec<f64>,
    pub reduced: Option<ReducedSystem>,
}

impl MomentSystem {
    pub fn full_size(&self) -> usize {
        self.big_a.rows()
    }

    pub fn reduced_size(&self) -> Option<usize> {
        self.reduced.as_ref().map(|r| r.a.rows())
    }
}

/// Assembles `𝔸` and `S`:
///
/// ```text
/// 𝔸 = [ I⊗A + A⊗I + Σ B_i⊗B_i    I⊗Λ + Λ⊗I + Σ (Γ_i⊗B_i + B_i⊗Γ_i) ]
///     [ 0                         A                                  ]
/// S = [ Σ (Γ_i⊗I) Γ_i ; Λ ]
/// ```
pub fn build_moment_system(lin: &Linearization) -> Result<MomentSystem, LinalgError> {
    let d = lin.dim();
    let d2 = d * d;
    let n = d2 + d;
    if lin.a.rows() != d || lin.a.cols() != d || lin.b.len() != lin.gamma.len() {
        return Err(LinalgError::DimensionMismatch {
            expected: d,
            found: lin.a.rows(),
        });
    }
    let eye = DenseMatrix::identity(d);
    let lam = DenseMatrix::column(&lin.lambda);
    let mut big_a = DenseMatrix::zeros(n, n);
    kron_accumulate(&mut big_a, 0, 0, &eye, &lin.a, 1.0);
    kron_accumulate(&mut big_a, 0, 0, &lin.a, &eye, 1.0);
    kron_accumulate(&mut big_a, 0, d2, &eye, &lam, 1.0);
    kron_accumulate(&mut big_a, 0, d2, &lam, &eye, 1.0);
    let mut s = vec![0.0; n];
    for (b, g) in lin.b.iter().zip(&lin.gamma) {
        if b.rows() != d || b.cols() != d || g.len() != d {
            return Err(LinalgError::DimensionMismatch {
                expected: d,
                found: b.rows(),
            });
        }
        let gcol = DenseMatrix::column(g);
        kron_accumulate(&mut big_a, 0, 0, b, b, 1.0);
        kron_accumulate(&mut big_a, 0, d2, &gcol, b, 1.0);
        kron_accumulate(&mut big_a, 0, d2, b, &gcol, 1.0);
        // (Γ⊗I)Γ = vec(Γ Γᵀ)
        for j in 0..d {
            for i in 0..d {
                s[j * d + i] += g[i] * g[j];
            }
        }
    }
    big_a.set_block(d2, d2, &lin.a);
    s[d2..].copy_from_slice(&lin.lambda);

    let map = SymmetricIndexMap::new(d);
    let (ra, rs) = reduce_moment_system(&big_a, &s, &map)?;
    Ok(MomentSystem {
        dim: d,
        big_a,
        s,
        reduced: Some(ReducedSystem { a: ra, s: rs, map }),
    })
}

fn max_real_eig_any(m: &DenseMatrix) -> Result<f64, LinalgError> {
    if m.rows() == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    if is_symmetric(m, 1e-13) {
        Ok(symmetric_eigenvalues(m)?.last().copied().unwrap_or(f64::NEG_INFINITY))
    } else {
        max_real_eigenvalue(m)
    }
}

/// Largest real part over the spectrum of the (reduced) moment matrix.
///
/// `𝔸` is block upper triangular, so its spectrum is that of the second-moment
/// block together with that of `A`. When the second-moment block is symmetric
/// up to the `√2` scaling of the off-diagonal slots, the symmetric solver is used.
pub fn lambda_max_ms(ms: &MomentSystem) -> Result<f64, LinalgError> {
    let d = ms.dim;
    let Some(red) = &ms.reduced else {
        return max_real_eigenvalue(&ms.big_a);
    };
    let nr = red.map.reduced_size();
    let mut upper = red.a.block(0, 0, nr, nr);
    let weight: Vec<f64> = (0..nr)
        .map(|s| {
            let (r, c) = red.map.representative(s);
            if r == c {
                1.0
            } else {
                std::f64::consts::SQRT_2
            }
        })
        .collect();
    let unscaled = upper.clone();
    for j in 0..nr {
        for i in 0..nr {
            upper[(i, j)] *= weight[i] / weight[j];
        }
    }
    let second = if is_symmetric(&upper, 1e-13) {
        symmetric_eigenvalues(&upper)?.last().copied().unwrap_or(f64::NEG_INFINITY)
    } else {
        max_real_eigenvalue(&unscaled)?
    };
    let mean = max_real_eig_any(&red.a.block(nr, nr, d, d))?;
    Ok(second.max(mean))
}

/// Stationary moments `Q∞ = -𝔸⁻¹ S` (full indexing) and `β² = tr P∞`.
pub fn stationary_moments(ms: &MomentSystem) -> Result<(Vec<f64>, f64), AnalysisError> {
    let lam = lambda_max_ms(ms)?;
    stationary_moments_with(ms, lam)
}

/// As [`stationary_moments`], reusing an already computed `λ_max(𝔸)`.
pub fn stationary_moments_with(ms: &MomentSystem, lambda_max: f64) -> Result<(Vec<f64>, f64), AnalysisError> {
    if !(lambda_max < 0.0) || lambda_max.abs() < BOUNDARY_TOL {
        return Err(AnalysisError::NotMeanSquareStable { lambda_max });
    }
    let d = ms.dim;
    let q = match &ms.reduced {
        Some(red) => {
            let rhs: Vec<f64> = red.s.iter().map(|v| -v).collect();
            red.map.expand(&solve_linear(&red.a, &rhs)?)
        }
        None => {
            let rhs: Vec<f64> = ms.s.iter().map(|v| -v).collect();
            solve_linear(&ms.big_a, &rhs)?
        }
    };
    let beta_sq = (0..d).map(|i| q[i * d + i]).sum();
    Ok((q, beta_sq))
}

/// `Σ_i ‖B_i‖_F²`.
pub fn dg_tensor_norm_sq(lin: &Linearization) -> f64 {
    lin.b.iter().map(|b| b.as_slice().iter().map(|v| v * v).sum::<f64>()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MuReport {
    pub mu: f64,
    /// Largest real part of the spectrum of `DF(x*)`.
    pub lambda_max_df: f64,
    pub dg_tensor_norm_sq: f64,
    /// `DF(x*)` is far from normal, so the error bound behind `mu` is strained.
    pub nonnormality_warning: bool,
}

/// `μ = 2 λ_max(DF(x*)) + δ₁ + (1 + δ₂) Σ_i ‖DG_i(x*)‖_F²`.
pub fn compute_mu(model: &ModelSpec, x_star: &[f64], delta1: f64, delta2: f64) -> Result<MuReport, AnalysisError> {
    let lin = linearize(model, x_star)?;
    mu_from_linearization(&lin, delta1, delta2)
}

pub fn mu_from_linearization(lin: &Linearization, delta1: f64, delta2: f64) -> Result<MuReport, AnalysisError> {
    if !(delta1 > 0.0 && delta2 > 0.0) {
        return Err(AnalysisError::InvalidArgument("delta1 and delta2 must be positive".into()));
    }
    let lambda_max_df = max_real_eig_any(&lin.a)?;
    let dg = dg_tensor_norm_sq(lin);
    let skew = lin.a.sub(&lin.a.transpose()).norm_fro();
    Ok(MuReport {
        mu: 2.0 * lambda_max_df + delta1 + (1.0 + delta2) * dg,
        lambda_max_df,
        dg_tensor_norm_sq: dg,
        nonnormality_warning: skew > 1e-8 * lin.a.norm_fro(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub x_star: Vec<f64>,
    pub det_lambda_max: f64,
    pub lambda_max_a: f64,
    pub beta_sq: Option<f64>,
    pub mu: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub dg_tensor_norm_sq: f64,
    pub linear_ms_stable: bool,
    pub nonlinear_ms_stable: bool,
    pub nonnormality_warning: bool,
    pub system_size: usize,
    pub reduced_size: usize,
}

impl StabilityReport {
    pub fn beta(&self) -> Option<f64> {
        self.beta_sq.map(f64::sqrt)
    }
}

/// Full per-equilibrium analysis: moment system, `λ_max(𝔸)`, `β²`, `μ`.
pub fn analyze(model: &ModelSpec, x_star: &[f64], delta1: f64, delta2: f64) -> Result<StabilityReport, AnalysisError> {
    let lin = linearize(model, x_star)?;
    let ms = build_moment_system(&lin)?;
    let lambda_max_a = lambda_max_ms(&ms)?;
    let beta_sq = match stationary_moments_with(&ms, lambda_max_a) {
        Ok((_, b)) => Some(b),
        Err(AnalysisError::NotMeanSquareStable { .. }) | Err(AnalysisError::Linalg(LinalgError::SingularMatrix { .. })) => {
            None
        }
        Err(e) => return Err(e),
    };
    let mu = mu_from_linearization(&lin, delta1, delta2)?;
    let linear_ms_stable = lambda_max_a < 0.0;
    Ok(StabilityReport {
        x_star: x_star.to_vec(),
        det_lambda_max: mu.lambda_max_df,
        lambda_max_a,
        beta_sq,
        mu: mu.mu,
        delta1,
        delta2,
        dg_tensor_norm_sq: mu.dg_tensor_norm_sq,
        linear_ms_stable,
        nonlinear_ms_stable: linear_ms_stable && mu.mu < 0.0,
        nonnormality_warning: mu.nonnormality_warning,
        system_size: ms.full_size(),
        reduced_size: ms.reduced_size().unwrap_or(ms.full_size()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TailKind {
    /// `P(‖X(t)‖^{2q} > ρ) ≤ (R_q + ‖X₀‖^{2q}) / ρ` for all `t`.
    Dissipative,
    /// `P(‖Y(t)‖² > ρ) ≤ (2β² + δ)/ρ + 2ε/ρ` for large `t`.
    Stationary,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TailInputs {
    /// Threshold; for the dissipative kind it defaults to the smallest admissible value.
    pub rho: Option<f64>,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub r_q: Option<f64>,
    pub norm_x0: Option<f64>,
    /// Moment order; 1 when absent.
    pub q: Option<f64>,
    pub beta_sq: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailBound {
    pub rho: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub bound_value: f64,
}

pub fn markov_tail(kind: TailKind, inp: &TailInputs) -> Result<TailBound, AnalysisError> {
    if !(inp.epsilon > 0.0 && inp.epsilon < 1.0) {
        return Err(AnalysisError::InvalidArgument("epsilon must lie in (0, 1)".into()));
    }
    match kind {
        TailKind::Dissipative => {
            let (Some(r_q), Some(x0)) = (inp.r_q, inp.norm_x0) else {
                return Err(AnalysisError::MissingInputs("dissipative tail needs R_q and |X0|".into()));
            };
            let q = inp.q.unwrap_or(1.0);
            let numer = r_q + x0.powf(2.0 * q);
            let rho = inp.rho.unwrap_or(numer / inp.epsilon);
            if !(rho > 0.0) {
                return Err(AnalysisError::InvalidArgument("rho must be positive".into()));
            }
            Ok(TailBound {
                rho,
                epsilon: inp.epsilon,
                delta: inp.delta.unwrap_or(0.0),
                bound_value: numer / rho,
            })
        }
        TailKind::Stationary => {
            let (Some(beta_sq), Some(delta), Some(rho)) = (inp.beta_sq, inp.delta, inp.rho) else {
                return Err(AnalysisError::MissingInputs("stationary tail needs beta^2, delta and rho".into()));
            };
            if !(rho > 0.0 && delta > 0.0) {
                return Err(AnalysisError::InvalidArgument("rho and delta must be positive".into()));
            }
            Ok(TailBound {
                rho,
                epsilon: inp.epsilon,
                delta,
                bound_value: (2.0 * beta_sq + delta) / rho + 2.0 * inp.epsilon / rho,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearizationError {
    pub times: Vec<f64>,
    /// Ensemble mean of `‖Z(t)‖²`, `Z = (X - x*) - Ỹ`.
    pub mean_sq: Vec<f64>,
    pub standard_error: Vec<f64>,
    /// Paths discarded because either system diverged.
    pub diverged: usize,
}

/// Estimates `E‖Z(t)‖²` by driving the nonlinear SDE (from `cfg.x0`) and its
/// linearization (from `cfg.x0 - x*`) with the same Brownian increments.
pub fn coupled_linearization_error(
    model: &ModelSpec,
    x_star: &[f64],
    cfg: &SimConfig,
) -> Result<LinearizationError, AnalysisError> {
    let lin = linearize(model, x_star)?;
    let centered: Vec<f64> = cfg.x0.iter().zip(x_star).map(|(a, b)| a - b).collect();
    let ens = simulate_coupled(&[(model as &dyn Sde, cfg.x0.clone()), (&lin as &dyn Sde, centered)], cfg)?;
    let (nl, li) = (&ens[0], &ens[1]);
    let keep: Vec<usize> = (0..cfg.n_paths).filter(|&p| !nl.diverged[p] && !li.diverged[p]).collect();
    let n = keep.len();
    let mut mean_sq = Vec::with_capacity(nl.times.len());
    let mut se = Vec::with_capacity(nl.times.len());
    for k in 0..nl.times.len() {
        let vals: Vec<f64> = keep
            .iter()
            .map(|&p| {
                let y = nl.state(p, k);
                let yl = li.state(p, k);
                (0..y.len()).map(|i| (y[i] - x_star[i] - yl[i]).powi(2)).sum()
            })
            .collect();
        let (m, s) = crate::simulate::mean_and_se(&vals);
        mean_sq.push(m);
        se.push(if n >= 2 { s } else { f64::NAN });
    }
    Ok(LinearizationError {
        times: nl.times.clone(),
        mean_sq,
        standard_error: se,
        diverged: cfg.n_paths - n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;

    fn scalar_lin(a: f64, b: f64, g: f64) -> Linearization {
        Linearization {
            x_star: vec![0.0],
            a: DenseMatrix::from_rows(&[&[a]]),
            b: vec![DenseMatrix::from_rows(&[&[b]])],
            gamma: vec![vec![g]],
            lambda: vec![0.0],
        }
    }

    #[test]
    fn scalar_block_formula() {
        let ms = build_moment_system(&scalar_lin(-1.3, 0.4, 0.7)).unwrap();
        let expected = DenseMatrix::from_rows(&[&[2.0 * -1.3 + 0.16, 2.0 * 0.4 * 0.7], &[0.0, -1.3]]);
        assert!(ms.big_a.sub(&expected).max_abs() < 1e-15);
        assert!((ms.s[0] - 0.49).abs() < 1e-15);
        assert_eq!(ms.s[1], 0.0);
        assert_eq!(ms.reduced_size(), Some(2));
    }

    #[test]
    fn scalar_lambda_and_beta() {
        let ms = build_moment_system(&scalar_lin(-1.0, 0.0, 1.0)).unwrap();
        assert_eq!(lambda_max_ms(&ms).unwrap(), -1.0);
        let (a, b, g) = (-0.8, 0.5, 0.3);
        let ms = build_moment_system(&scalar_lin(a, b, g)).unwrap();
        let (_, beta_sq) = stationary_moments(&ms).unwrap();
        assert!((beta_sq - g * g / (-2.0 * a - b * b)).abs() < 1e-12);
    }

    #[test]
    fn pitchfork_examples() {
        let m = builtin("pitchfork", Some("additive"), None).unwrap();
        let lin = linearize(&m, &[0.5]).unwrap();
        assert_eq!(lin.a[(0, 0)], -0.5);
        assert_eq!(lin.b[0][(0, 0)], 0.0);
        assert_eq!(lin.gamma[0], vec![0.1]);
        let r = analyze(&m, &[0.5], DEFAULT_DELTA, DEFAULT_DELTA).unwrap();
        assert!((r.beta_sq.unwrap() - 0.01).abs() < 1e-12);
        assert!((r.mu + 0.999).abs() < 1e-12);

        let lm = builtin("pitchfork", Some("linear"), None).unwrap();
        let ms = build_moment_system(&linearize(&lm, &[0.0]).unwrap()).unwrap();
        assert!((lambda_max_ms(&ms).unwrap() - 0.51).abs() < 1e-12);
        let r = analyze(&lm, &[0.5], DEFAULT_DELTA, DEFAULT_DELTA).unwrap();
        assert!((r.beta_sq.unwrap() - 0.01 * 0.25 / (1.0 - 0.01)).abs() < 1e-12);

        let qm = builtin("pitchfork", Some("quadratic"), None).unwrap();
        let mu = compute_mu(&qm, &[0.5], DEFAULT_DELTA, DEFAULT_DELTA).unwrap();
        assert!((mu.dg_tensor_norm_sq - 0.01).abs() < 1e-15);
        assert!((mu.mu + 0.98899).abs() < 1e-12);
    }

    #[test]
    fn unstable_has_no_beta() {
        let lm = builtin("pitchfork", Some("linear"), None).unwrap();
        let ms = build_moment_system(&linearize(&lm, &[0.0]).unwrap()).unwrap();
        assert!(matches!(
            stationary_moments(&ms),
            Err(AnalysisError::NotMeanSquareStable { .. })
        ));
    }

    #[test]
    fn lorenz_sizes_and_nonnormality() {
        let m = builtin("lorenz", None, None).unwrap();
        let k = (8.0f64 / 3.0 * 9.0).sqrt();
        let r = analyze(&m, &[k, k, 9.0], DEFAULT_DELTA, DEFAULT_DELTA).unwrap();
        assert_eq!((r.system_size, r.reduced_size), (12, 9));
        assert!(r.nonnormality_warning);
        assert!(r.linear_ms_stable);
    }

    #[test]
    fn symmetric_shortcut_agrees_with_general_solver() {
        let m = builtin("allen_cahn", None, Some(6)).unwrap();
        let x = vec![0.5f64.sqrt(); 6];
        let ms = build_moment_system(&linearize(&m, &x).unwrap()).unwrap();
        let fast = lambda_max_ms(&ms).unwrap();
        let slow = max_real_eigenvalue(&ms.reduced.as_ref().unwrap().a).unwrap();
        assert!((fast - slow).abs() < 1e-9 * slow.abs().max(1.0), "{fast} vs {slow}");
    }

    #[test]
    fn tail_examples() {
        let r1 = crate::dissipativity::moment_bound(1.0, 1.0, 1.0, 0.0, 0.0).unwrap().r_q;
        let t = markov_tail(
            TailKind::Dissipative,
            &TailInputs {
                epsilon: 0.1,
                r_q: Some(r1),
                norm_x0: Some(0.0),
                ..Default::default()
            },
        )
        .unwrap();
        assert!((t.rho - 3.6787944).abs() < 1e-6);
        let s = markov_tail(
            TailKind::Stationary,
            &TailInputs {
                rho: Some(1.0),
                epsilon: 0.005,
                delta: Some(0.01),
                beta_sq: Some(0.01),
                ..Default::default()
            },
        )
        .unwrap();
        assert!((s.bound_value - 0.04).abs() < 1e-15);
        assert!(matches!(
            markov_tail(TailKind::Stationary, &TailInputs { epsilon: 0.1, ..Default::default() }),
            Err(AnalysisError::MissingInputs(_))
        ));
    }
}
