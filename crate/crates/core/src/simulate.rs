//! Tamed Euler–Maruyama simulation and Monte Carlo moment estimates.
//!
//! Every path owns a ChaCha8 stream selected by its index, so the draws of a
//! path do not depend on how paths are scheduled across threads.

use std::io::{self, Write};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::SimError;
use crate::linalg::DenseMatrix;
use crate::model::Sde;

/// Paths whose norm exceeds this are flagged diverged and frozen.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub t_end: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Initial point, or the center of the initial ball when `radius > 0`.
    pub x0: Vec<f64>,
    pub radius: f64,
    pub output_stride: usize,
    pub taming: bool,
}

impl SimConfig {
    pub fn new(x0: Vec<f64>, t_end: f64) -> Self {
        Self {
            t_end,
            dt: 0.01,
            n_paths: 5,
            seed: 0,
            x0,
            radius: 0.0,
            output_stride: 1,
            taming: true,
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(SimError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= self.dt) || !self.t_end.is_finite() {
            return Err(SimError::InvalidConfig(format!("need T >= dt, got T = {}", self.t_end)));
        }
        if self.n_paths == 0 {
            return Err(SimError::InvalidConfig("n_paths must be at least 1".into()));
        }
        if self.output_stride == 0 {
            return Err(SimError::InvalidConfig("output_stride must be at least 1".into()));
        }
        if !(self.radius >= 0.0) || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidConfig("initial condition must be finite with radius >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathEnsemble {
    pub times: Vec<f64>,
    pub dim: usize,
    pub n_paths: usize,
    /// Path-major: `states[(path * times.len() + k) * dim + i]`. Entries after a
    /// divergence are NaN.
    pub states: Vec<f64>,
    pub diverged: Vec<bool>,
    pub master_seed: u64,
}

impl PathEnsemble {
    pub fn state(&self, path: usize, k: usize) -> &[f64] {
        let start = (path * self.times.len() + k) * self.dim;
        &self.states[start..start + self.dim]
    }
}

/// Standard normal draws from a per-path ChaCha stream by inverse CDF.
struct GaussianStream {
    rng: ChaCha8Rng,
    normal: Normal,
}

impl GaussianStream {
    fn new(seed: u64, path: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path as u64);
        Self {
            rng,
            normal: Normal::standard(),
        }
    }

    /// Uniform on the open interval (0, 1) with 53 random bits.
    fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    fn gaussian(&mut self) -> f64 {
        let u = self.uniform();
        self.normal.inverse_cdf(u)
    }
}

/// Simulates one SDE; see [`simulate_coupled`].
pub fn tamed_em<S: Sde + ?Sized>(sde: &S, cfg: &SimConfig) -> Result<PathEnsemble, SimError> {
    let sys: &dyn Sde = &DynRef(sde);
    let mut out = simulate_coupled(&[(sys, cfg.x0.clone())], cfg)?;
    Ok(out.remove(0))
}

struct DynRef<'a, S: ?Sized>(&'a S);

impl<S: Sde + ?Sized> Sde for DynRef<'_, S> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn noise_dim(&self) -> usize {
        self.0.noise_dim()
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.0.drift(x, out)
    }
    fn diffusion(&self, x: &[f64], out: &mut DenseMatrix) {
        self.0.diffusion(x, out)
    }
    fn is_affine(&self) -> bool {
        self.0.is_affine()
    }
}

/// Simulates several systems driven by the same Brownian increments.
///
/// Each system starts from its own center plus a common offset drawn uniformly
/// from the ball of radius `cfg.radius`. The update is
/// `X ← X + Δt F/(1 + Δt‖F‖) + G ΔW`, with the taming denominator dropped for
/// affine systems or when `cfg.taming` is off.
pub fn simulate_coupled(systems: &[(&dyn Sde, Vec<f64>)], cfg: &SimConfig) -> Result<Vec<PathEnsemble>, SimError> {
    cfg.validate()?;
    let Some((first, _)) = systems.first() else {
        return Err(SimError::InvalidConfig("no systems to simulate".into()));
    };
    let m = first.noise_dim();
    let ball_dim = first.dim();
    for (s, c) in systems {
        if s.noise_dim() != m {
            return Err(SimError::InvalidConfig("coupled systems need equal noise dimension".into()));
        }
        if c.len() != s.dim() || s.dim() != ball_dim {
            return Err(SimError::InvalidConfig(format!(
                "initial point has length {}, system dimension is {}",
                c.len(),
                s.dim()
            )));
        }
    }
    let n_steps = cfg.n_steps();
    let recorded: Vec<usize> = (0..=n_steps)
        .filter(|k| k % cfg.output_stride == 0 || *k == n_steps)
        .collect();
    let times: Vec<f64> = recorded.iter().map(|&k| k as f64 * cfg.dt).collect();
    let n_rec = recorded.len();
    let sqrt_dt = cfg.dt.sqrt();

    let per_path: Vec<Vec<(Vec<f64>, bool)>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut stream = GaussianStream::new(cfg.seed, path);
            let offset = if cfg.radius > 0.0 {
                ball_offset(&mut stream, ball_dim, cfg.radius)
            } else {
                vec![0.0; ball_dim]
            };
            let mut xs: Vec<Vec<f64>> = systems
                .iter()
                .map(|(_, c)| c.iter().zip(&offset).map(|(a, b)| a + b).collect())
                .collect();
            let mut bufs: Vec<(Vec<f64>, DenseMatrix)> = systems
                .iter()
                .map(|(s, _)| (vec![0.0; s.dim()], DenseMatrix::zeros(s.dim(), m)))
                .collect();
            let mut recs: Vec<Vec<f64>> = systems.iter().map(|(s, _)| Vec::with_capacity(n_rec * s.dim())).collect();
            let mut diverged = vec![false; systems.len()];
            let mut dw = vec![0.0; m];
            let mut next_rec = 0;
            for k in 0..=n_steps {
                if next_rec < n_rec && recorded[next_rec] == k {
                    for (i, x) in xs.iter().enumerate() {
                        if diverged[i] {
                            recs[i].extend(std::iter::repeat_n(f64::NAN, x.len()));
                        } else {
                            recs[i].extend_from_slice(x);
                        }
                    }
                    next_rec += 1;
                }
                if k == n_steps {
                    break;
                }
                for w in dw.iter_mut() {
                    *w = sqrt_dt * stream.gaussian();
                }
                for (i, (sys, _)) in systems.iter().enumerate() {
                    if diverged[i] {
                        continue;
                    }
                    let x = &mut xs[i];
                    let (f, g) = &mut bufs[i];
                    sys.drift(x, f);
                    sys.diffusion(x, g);
                    let factor = if cfg.taming && !sys.is_affine() {
                        let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                        cfg.dt / (1.0 + cfg.dt * fnorm)
                    } else {
                        cfg.dt
                    };
                    for (r, xr) in x.iter_mut().enumerate() {
                        let mut noise = 0.0;
                        for (j, w) in dw.iter().enumerate() {
                            noise += g[(r, j)] * w;
                        }
                        *xr += factor * f[r] + noise;
                    }
                    let nrm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if !nrm.is_finite() || nrm > DIVERGENCE_LIMIT {
                        diverged[i] = true;
                    }
                }
            }
            recs.into_iter().zip(diverged).collect()
        })
        .collect();

    let mut out: Vec<PathEnsemble> = systems
        .iter()
        .map(|(s, _)| PathEnsemble {
            times: times.clone(),
            dim: s.dim(),
            n_paths: cfg.n_paths,
            states: Vec::with_capacity(cfg.n_paths * n_rec * s.dim()),
            diverged: Vec::with_capacity(cfg.n_paths),
            master_seed: cfg.seed,
        })
        .collect();
    for path in per_path {
        for (ens, (rec, div)) in out.iter_mut().zip(path) {
            ens.states.extend(rec);
            ens.diverged.push(div);
        }
    }
    Ok(out)
}

fn ball_offset(stream: &mut GaussianStream, d: usize, radius: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..d).map(|_| stream.gaussian()).collect();
    let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = radius * stream.uniform().powf(1.0 / d as f64);
    if len == 0.0 {
        return vec![0.0; d];
    }
    dir.iter().map(|v| v * r / len).collect()
}

/// Sample mean and standard error (sample standard deviation over `√n`).
pub fn mean_and_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub times: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    pub mean_se: Vec<Vec<f64>>,
    /// Estimates of `E‖X(t)‖²`.
    pub second_moment_norm: Vec<f64>,
    pub second_moment_norm_se: Vec<f64>,
    /// Column-major `E[X Xᵀ]` per time.
    pub second_moment_matrix: Vec<Vec<f64>>,
    pub second_moment_matrix_se: Vec<Vec<f64>>,
    /// Paths used (non-diverged).
    pub n_used: usize,
}

/// Per-time sample moments over the non-diverged paths.
pub fn mc_moments(ens: &PathEnsemble) -> Result<MomentEstimate, SimError> {
    let keep: Vec<usize> = (0..ens.n_paths).filter(|&p| !ens.diverged[p]).collect();
    if keep.len() < 2 {
        return Err(SimError::TooFewPaths(keep.len()));
    }
    let d = ens.dim;
    let mut est = MomentEstimate {
        times: ens.times.clone(),
        mean: Vec::new(),
        mean_se: Vec::new(),
        second_moment_norm: Vec::new(),
        second_moment_norm_se: Vec::new(),
        second_moment_matrix: Vec::new(),
        second_moment_matrix_se: Vec::new(),
        n_used: keep.len(),
    };
    let mut buf = vec![0.0; keep.len()];
    for k in 0..ens.times.len() {
        let mut mean = Vec::with_capacity(d);
        let mut mean_se = Vec::with_capacity(d);
        for i in 0..d {
            for (b, &p) in buf.iter_mut().zip(&keep) {
                *b = ens.state(p, k)[i];
            }
            let (m, s) = mean_and_se(&buf);
            mean.push(m);
            mean_se.push(s);
        }
        for (b, &p) in buf.iter_mut().zip(&keep) {
            *b = ens.state(p, k).iter().map(|v| v * v).sum();
        }
        let (m2, s2) = mean_and_se(&buf);
        let mut mat = vec![0.0; d * d];
        let mut mat_se = vec![0.0; d * d];
        for j in 0..d {
            for i in 0..d {
                for (b, &p) in buf.iter_mut().zip(&keep) {
                    let x = ens.state(p, k);
                    *b = x[i] * x[j];
                }
                let (m, s) = mean_and_se(&buf);
                mat[j * d + i] = m;
                mat_se[j * d + i] = s;
            }
        }
        est.mean.push(mean);
        est.mean_se.push(mean_se);
        est.second_moment_norm.push(m2);
        est.second_moment_norm_se.push(s2);
        est.second_moment_matrix.push(mat);
        est.second_moment_matrix_se.push(mat_se);
    }
    Ok(est)
}

/// Writes `t,path_id,x_1,...,x_d`, one row per (path, recorded time), path-major.
pub fn write_paths_csv<W: Write>(ens: &PathEnsemble, mut w: W) -> io::Result<()> {
    let mut header = String::from("t,path_id");
    for i in 1..=ens.dim {
        header.push_str(&format!(",x_{i}"));
    }
    writeln!(w, "{header}")?;
    let mut line = String::new();
    for p in 0..ens.n_paths {
        for (k, t) in ens.times.iter().enumerate() {
            line.clear();
            line.push_str(&format!("{t:.16e},{p}"));
            for v in ens.state(p, k) {
                line.push_str(&format!(",{v:.16e}"));
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;

    struct Still;
    impl Sde for Still {
        fn dim(&self) -> usize {
            2
        }
        fn noise_dim(&self) -> usize {
            1
        }
        fn drift(&self, _: &[f64], out: &mut [f64]) {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        fn diffusion(&self, _: &[f64], g: &mut DenseMatrix) {
            g.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_coefficients_stay_put() {
        let mut cfg = SimConfig::new(vec![0.3, -1.0], 1.0);
        cfg.n_paths = 3;
        let ens = tamed_em(&Still, &cfg).unwrap();
        assert_eq!(ens.times.len(), 101);
        for p in 0..3 {
            for k in 0..ens.times.len() {
                assert_eq!(ens.state(p, k), &[0.3, -1.0]);
            }
        }
        let est = mc_moments(&ens).unwrap();
        assert!(est.mean_se.iter().flatten().all(|s| *s == 0.0));
    }

    #[test]
    fn deterministic_pitchfork_settles() {
        let m = builtin("pitchfork", None, None).unwrap().with_param("sigma", 0.0).unwrap();
        let mut cfg = SimConfig::new(vec![0.9], 20.0);
        cfg.n_paths = 1;
        let ens = tamed_em(&m, &cfg).unwrap();
        let last = ens.state(0, ens.times.len() - 1)[0];
        assert!((last - 0.5).abs() < 1e-4);
    }

    #[test]
    fn uniforms_are_open_interval_and_reproducible() {
        let mut a = GaussianStream::new(7, 3);
        let mut b = GaussianStream::new(7, 3);
        let mut c = GaussianStream::new(7, 4);
        let xa: Vec<f64> = (0..100).map(|_| a.gaussian()).collect();
        let xb: Vec<f64> = (0..100).map(|_| b.gaussian()).collect();
        let xc: Vec<f64> = (0..100).map(|_| c.gaussian()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        for _ in 0..1000 {
            let u = a.uniform();
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn stride_and_too_few_paths() {
        let m = builtin("pitchfork", None, None).unwrap();
        let mut cfg = SimConfig::new(vec![0.5], 1.0);
        cfg.output_stride = 30;
        cfg.n_paths = 1;
        let ens = tamed_em(&m, &cfg).unwrap();
        assert_eq!(ens.times.len(), 5);
        assert!((ens.times[4] - 1.0).abs() < 1e-12);
        assert_eq!(mc_moments(&ens).unwrap_err(), SimError::TooFewPaths(1));
    }

    #[test]
    fn ball_start_is_within_radius() {
        let m = builtin("lorenz", None, None).unwrap();
        let mut cfg = SimConfig::new(vec![1.0, 2.0, 3.0], 0.01);
        cfg.radius = 1e-6;
        cfg.n_paths = 20;
        let ens = tamed_em(&m, &cfg).unwrap();
        for p in 0..20 {
            let x = ens.state(p, 0);
            let r = ((x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2) + (x[2] - 3.0).powi(2)).sqrt();
            assert!(r <= 1e-6 && r > 0.0);
        }
    }

    #[test]
    fn csv_layout() {
        let mut cfg = SimConfig::new(vec![0.3, -1.0], 0.02);
        cfg.n_paths = 2;
        let ens = tamed_em(&Still, &cfg).unwrap();
        let mut out = Vec::new();
        write_paths_csv(&ens, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,path_id,x_1,x_2");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[4].starts_with("0.0000000000000000e0,1,"));
    }
}
