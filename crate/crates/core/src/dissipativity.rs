//! Sampled dissipativity certificates, the dissipative moment bound `R_q`,
//! and explicit constants for the second-moment bounds of the Taylor remainders.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::AnalysisError;
use crate::model::{norm, DissipativityMeta, InvariantDomain, LyapunovWeights, ModelSpec, Sde};

pub const DEFAULT_RADIUS: f64 = 10.0;
pub const DEFAULT_SAMPLES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateStatus {
    Certified,
    Violated,
    /// The inequality holds on the model's invariant domain only.
    DomainRestricted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DissipativityCertificate {
    pub p: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub test_radius: f64,
    pub n_samples: usize,
    /// `max v(x)` over the samples.
    pub max_violation: f64,
    pub status: CertificateStatus,
    /// Worst `<x,F> + (p-1)/2 |G|² - alpha1 (1 + |x|²)`, when `alpha1` was supplied.
    pub monotone_max_violation: Option<f64>,
}

impl DissipativityCertificate {
    pub fn holds(&self) -> bool {
        self.status != CertificateStatus::Violated
    }
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut k = 2u64;
    while primes.len() < n {
        if primes.iter().take_while(|&&p| p * p <= k).all(|&p| !k.is_multiple_of(p)) {
            primes.push(k);
        }
        k += 1;
    }
    primes
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Deterministic points in the `d`-ball: Halton coordinates drive the radius
/// (`r u^{1/d}`) and a direction through the normal inverse CDF. The sequence
/// starts at index `1 + seed * n`, then 64-ish axis points are appended.
pub fn ball_samples(d: usize, radius: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let primes = first_primes(d + 1);
    let normal = Normal::standard();
    let mut out = Vec::with_capacity(n + 64);
    let start = 1 + seed.wrapping_mul(n as u64);
    for k in 0..n as u64 {
        let idx = start + k;
        let u0 = radical_inverse(idx, primes[0]);
        let dir: Vec<f64> = (0..d)
            .map(|i| {
                let u = radical_inverse(idx, primes[i + 1]).clamp(1e-12, 1.0 - 1e-12);
                normal.inverse_cdf(u)
            })
            .collect();
        let len = norm(&dir);
        let r = radius * u0.powf(1.0 / d as f64);
        out.push(if len > 0.0 { dir.iter().map(|v| v * r / len).collect() } else { vec![0.0; d] });
    }
    let per_axis = (32 / d).max(1);
    for i in 0..d {
        for j in 1..=per_axis {
            let t = radius * j as f64 / per_axis as f64;
            for sign in [1.0, -1.0] {
                let mut x = vec![0.0; d];
                x[i] = sign * t;
                out.push(x);
            }
        }
    }
    out
}

/// `Σ_r w_r (x_r - c_r) F_r + (p-1)/2 Σ_r w_r |G_r·|²`: half the generator of
/// the (weighted) squared norm, with the Itô term scaled for moment order `p`.
fn generator_term(model: &ModelSpec, x: &[f64], p: f64, lyap: Option<&LyapunovWeights>) -> f64 {
    let f = model.drift_vec(x);
    let g = model.diffusion_matrix(x);
    let mut total = 0.0;
    for r in 0..x.len() {
        let (w, c) = lyap.map_or((1.0, 0.0), |l| (l.weights[r], l.shift[r]));
        let row_sq: f64 = (0..g.cols()).map(|j| g[(r, j)] * g[(r, j)]).sum();
        total += w * ((x[r] - c) * f[r] + 0.5 * (p - 1.0) * row_sq);
    }
    total
}

fn lyapunov_value(x: &[f64], lyap: Option<&LyapunovWeights>) -> f64 {
    lyap.map_or_else(|| x.iter().map(|v| v * v).sum(), |l| l.value(x))
}

/// Sample points in original coordinates, mapped into the invariant domain and
/// through the Lyapunov change of variables when the model has one.
fn domain_samples(model: &ModelSpec, radius: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = model.dim();
    let lyap = model.lyapunov();
    let scale = lyap
        .as_ref()
        .map_or(1.0, |l| l.weights.iter().cloned().fold(0.0, f64::max).sqrt());
    let mut pts = ball_samples(d, radius * scale, n, seed);
    if let Some(l) = &lyap {
        for x in &mut pts {
            for r in 0..d {
                x[r] = x[r] / l.weights[r].sqrt() + l.shift[r];
            }
        }
    }
    match model.invariant_domain() {
        Some(InvariantDomain::PositiveCone) => {
            for x in &mut pts {
                x.iter_mut().for_each(|v| *v = v.abs());
            }
        }
        Some(InvariantDomain::BoundedFirstCoordinate) => {
            let bound = model.lorenz_dissipativity_bound().unwrap_or(f64::INFINITY);
            pts.retain(|x| x[0] * x[0] <= bound);
        }
        None => {}
    }
    pts
}

/// Evaluates `v(x) = <x,F> + (p-1)/2 |G|_F² + α₂|x|² - α₃` on a deterministic
/// sample of the ball (in Lyapunov coordinates for models that carry them).
/// A certificate is numerical evidence on the sample, not a proof.
pub fn check_dissipative(
    model: &ModelSpec,
    p: f64,
    alpha2: f64,
    alpha3: f64,
    alpha1: Option<f64>,
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<DissipativityCertificate, AnalysisError> {
    if !(p >= 2.0) || !(radius > 0.0) || !(alpha2 > 0.0) || !(alpha3 >= 0.0) {
        return Err(AnalysisError::InvalidArgument(
            "need p >= 2, radius > 0, alpha2 > 0, alpha3 >= 0".into(),
        ));
    }
    let lyap = model.lyapunov();
    let pts = domain_samples(model, radius, n_samples, seed);
    let mut worst = f64::NEG_INFINITY;
    let mut worst_mono = f64::NEG_INFINITY;
    for x in &pts {
        let gen = generator_term(model, x, p, lyap.as_ref());
        worst = worst.max(gen + alpha2 * lyapunov_value(x, lyap.as_ref()) - alpha3);
        if let Some(a1) = alpha1 {
            let plain = generator_term(model, x, p, None);
            worst_mono = worst_mono.max(plain - a1 * (1.0 + x.iter().map(|v| v * v).sum::<f64>()));
        }
    }
    let tol = 1e-12 * alpha3.max(1.0);
    let status = if worst > tol {
        CertificateStatus::Violated
    } else if model.invariant_domain().is_some() {
        CertificateStatus::DomainRestricted
    } else {
        CertificateStatus::Certified
    };
    Ok(DissipativityCertificate {
        p,
        alpha2,
        alpha3,
        test_radius: radius,
        n_samples: pts.len(),
        max_violation: worst,
        status,
        monotone_max_violation: alpha1.map(|_| worst_mono),
    })
}

/// Grid search over `α₂ ∈ {2⁻⁶, …, 2⁴}` for models without closed-form constants:
/// the largest `α₂` whose worst case over the sample sits strictly inside the
/// ball (so the quadratic term wins further out), with the smallest `α₃` that
/// covers the sample.
pub fn search_constants(model: &ModelSpec, p: f64, radius: f64, n_samples: usize, seed: u64) -> Option<(f64, f64)> {
    let lyap = model.lyapunov();
    let pts = domain_samples(model, radius, n_samples, seed);
    let gens: Vec<(f64, f64)> = pts
        .iter()
        .map(|x| (generator_term(model, x, p, lyap.as_ref()), lyapunov_value(x, lyap.as_ref())))
        .collect();
    let outer = gens.iter().map(|g| g.1).fold(0.0, f64::max);
    for e in (-6..=4).rev() {
        let alpha2 = 2f64.powi(e);
        let (mut best, mut at) = (f64::NEG_INFINITY, 0.0);
        for &(g, v) in &gens {
            let h = g + alpha2 * v;
            if h > best {
                best = h;
                at = v;
            }
        }
        if at < 0.81 * outer {
            return Some((alpha2, best.max(0.0)));
        }
    }
    None
}

/// Constants from model metadata when present, otherwise from [`search_constants`].
pub fn dissipativity_constants(model: &ModelSpec, p: f64) -> Option<DissipativityMeta> {
    model.dissipativity_meta(p).or_else(|| {
        search_constants(model, p, DEFAULT_RADIUS, DEFAULT_SAMPLES, 0).map(|(alpha2, alpha3)| DissipativityMeta {
            p,
            alpha1: None,
            alpha2,
            alpha3,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentBound {
    pub bound: f64,
    pub r_q: f64,
}

/// `R₁ = α₃/(e α₂)` and `R_q = (1/(q e)) (2α₃/α₂)^q ((q-1)/q)^{q-1}` for `q > 1`.
pub fn r_q(q: f64, alpha2: f64, alpha3: f64) -> f64 {
    if q == 1.0 {
        alpha3 / (std::f64::consts::E * alpha2)
    } else {
        (2.0 * alpha3 / alpha2).powf(q) * ((q - 1.0) / q).powf(q - 1.0) / (q * std::f64::consts::E)
    }
}

/// Bound on `E‖X(t)‖^{2q}` for a dissipative SDE:
/// `‖X₀‖^{2q} e^{-q α₂ t} + R_q`, with rate `2α₂` when `q = 1`.
pub fn moment_bound(q: f64, alpha2: f64, alpha3: f64, norm_x0: f64, t: f64) -> Result<MomentBound, AnalysisError> {
    if !(q >= 1.0) || !(alpha2 > 0.0) || !(alpha3 >= 0.0) || !(t >= 0.0) || !(norm_x0 >= 0.0) {
        return Err(AnalysisError::InvalidArgument(
            "need q >= 1, alpha2 > 0, alpha3 >= 0, t >= 0, |X0| >= 0".into(),
        ));
    }
    let rate = if q == 1.0 { 2.0 * alpha2 } else { q * alpha2 };
    let r = r_q(q, alpha2, alpha3);
    Ok(MomentBound {
        bound: norm_x0.powf(2.0 * q) * (-rate * t).exp() + r,
        r_q: r,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RemainderBound {
    pub k_xstar: f64,
    /// Channel constants before taking the maximum.
    pub k_drift: f64,
    pub k_diffusion: f64,
    pub q1: f64,
    pub q2: f64,
    pub r_q1: f64,
    pub r_q2: f64,
    pub bound_f: f64,
    pub bound_g: f64,
}

/// One channel of the remainder constant for growth `c (1 + |x|^q)` of the
/// second derivative at distance `|x*|` from the origin.
///
/// With `C = max(1, 2^{2q-1})`:
/// `|R|² ≤ (2c²/3)(1 + C(|x*|^{2q} + 1)) (1 + |Y|^{2q+4})`, and
/// `E|Y|^P ≤ 2^{P-1}(E|X|^P + |x*|^P)` with `P = 2q + 4` gives the factor
/// `2^{2q+3}(1 + |x*|^{2q+4})` in front of `1 + R_{q+2} + |X₀|^{2(q+2)}`.
fn remainder_channel(c: f64, q: f64, xs: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    let cq = 1f64.max(2f64.powf(2.0 * q - 1.0));
    let k_pp = 2.0 * c * c / 3.0 * (1.0 + cq * (xs.powf(2.0 * q) + 1.0));
    k_pp * 2f64.powf(2.0 * q + 3.0) * (1.0 + xs.powf(2.0 * q + 4.0))
}

/// Second-moment bounds on the drift and diffusion Taylor remainders:
/// `K (1 + R_{q+2} + ‖X₀‖^{2(q+2)})` for each channel, sharing `K = max(K_F, K_G)`.
pub fn remainder_bounds(model: &ModelSpec, x_star: &[f64], norm_x0: f64) -> Result<RemainderBound, AnalysisError> {
    let meta = model
        .remainder_meta()
        .ok_or_else(|| AnalysisError::MissingRemainderMeta(model.name().to_string()))?;
    let diss = dissipativity_constants(model, 2.0)
        .ok_or_else(|| AnalysisError::MissingInputs(format!("no dissipativity constants for `{}`", model.name())))?;
    let xs = norm(x_star);
    let k_drift = remainder_channel(meta.c1, meta.q1, xs);
    let k_diffusion = model.noise_dim() as f64 * remainder_channel(meta.c2, meta.q2, xs);
    let k = k_drift.max(k_diffusion);
    let r1 = r_q(meta.q1 + 2.0, diss.alpha2, diss.alpha3);
    let r2 = r_q(meta.q2 + 2.0, diss.alpha2, diss.alpha3);
    Ok(RemainderBound {
        k_xstar: k,
        k_drift,
        k_diffusion,
        q1: meta.q1,
        q2: meta.q2,
        r_q1: r1,
        r_q2: r2,
        bound_f: k * (1.0 + r1 + norm_x0.powf(2.0 * (meta.q1 + 2.0))),
        bound_g: k * (1.0 + r2 + norm_x0.powf(2.0 * (meta.q2 + 2.0))),
    })
}
