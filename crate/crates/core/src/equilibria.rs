//! Deterministic equilibria: Newton solves, one-parameter continuation through
//! folds, and stability classification from the spectrum of `DF`.

use serde::Serialize;

use crate::error::{EquilibriumError, LinalgError, ModelError};
use crate::linalg::{determinant, max_real_eigenvalue, solve_linear, DenseMatrix};
use crate::model::{norm, ModelSpec, Sde};

pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITER: usize = 50;

/// Points closer than this are treated as the same equilibrium.
pub const MERGE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumPoint {
    pub x_star: Vec<f64>,
    pub param_value: f64,
    pub branch_id: String,
    pub det_lambda_max: f64,
    pub det_stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Branch {
    pub id: String,
    pub points: Vec<EquilibriumPoint>,
    /// Parameter values of the turning points that bound this branch.
    pub fold_params: Vec<f64>,
    /// States at those turning points, in the same order.
    pub fold_states: Vec<Vec<f64>>,
    /// Set when continuation lost the branch before reaching the end of the range.
    pub truncated: bool,
}

/// Newton's method with residual backtracking on `F(x) = 0`.
pub fn solve_equilibrium(model: &ModelSpec, x0: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>, EquilibriumError> {
    let d = model.dim();
    if x0.len() != d {
        return Err(LinalgError::DimensionMismatch { expected: d, found: x0.len() }.into());
    }
    if x0.iter().any(|v| !v.is_finite()) || !(tol > 0.0) {
        return Err(LinalgError::InvalidArgument("newton needs finite x0 and tol > 0".into()).into());
    }
    let mut x = x0.to_vec();
    let mut f = model.drift_vec(&x);
    let mut r = norm(&f);
    for _ in 0..max_iter {
        if r <= tol {
            return Ok(x);
        }
        let j = model.jac_drift(&x);
        let neg_f: Vec<f64> = f.iter().map(|v| -v).collect();
        let dx = match solve_linear(&j, &neg_f) {
            Ok(dx) => dx,
            Err(LinalgError::SingularMatrix { .. }) => return Err(EquilibriumError::SingularJacobian),
            Err(e) => return Err(e.into()),
        };
        let mut lambda = 1.0;
        let (mut xt, mut ft, mut rt);
        loop {
            xt = x.iter().zip(&dx).map(|(a, b)| a + lambda * b).collect::<Vec<_>>();
            ft = model.drift_vec(&xt);
            rt = norm(&ft);
            if rt < r || lambda < 1.0 / 1024.0 {
                break;
            }
            lambda *= 0.5;
        }
        if !rt.is_finite() {
            break;
        }
        x = xt;
        f = ft;
        r = rt;
    }
    if r <= tol {
        Ok(x)
    } else {
        Err(EquilibriumError::NoConvergence {
            iterations: max_iter,
            residual: r,
        })
    }
}

/// Solves for an equilibrium at `param = value` and classifies it.
pub fn newton(
    model: &ModelSpec,
    param: Option<(&str, f64)>,
    x0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<EquilibriumPoint, EquilibriumError> {
    let (m, value) = match param {
        Some((name, v)) => (model.with_param(name, v)?, v),
        None => (model.clone(), f64::NAN),
    };
    let x = solve_equilibrium(&m, x0, tol, max_iter)?;
    let (det_lambda_max, det_stable) = det_classify(&m, &x)?;
    Ok(EquilibriumPoint {
        x_star: x,
        param_value: value,
        branch_id: String::new(),
        det_lambda_max,
        det_stable,
    })
}

/// Largest real part of the spectrum of `DF(x)`, and whether it is negative.
pub fn det_classify(model: &ModelSpec, x: &[f64]) -> Result<(f64, bool), LinalgError> {
    let lam = max_real_eigenvalue(&model.jac_drift(x))?;
    Ok((lam, lam < 0.0))
}

/// `n` equally spaced values from `lo` to `hi`, both included.
pub fn parameter_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo];
    }
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Use the model's closed-form equilibria when it has them.
    pub use_analytic: bool,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            tol: NEWTON_TOL,
            max_iter: NEWTON_MAX_ITER,
            use_analytic: true,
        }
    }
}

/// Continues equilibria in `param` over `range` on an `n_steps`-point grid.
///
/// Seeds are points at the start of the range; when empty, the model's analytic
/// equilibria are used if available, otherwise a coarse grid in `[-2, 2]^d`.
pub fn continue_branches(
    model: &ModelSpec,
    param: &str,
    range: (f64, f64),
    n_steps: usize,
    seeds: &[Vec<f64>],
) -> Result<Vec<Branch>, ModelError> {
    continue_branches_with(model, param, range, n_steps, seeds, &ContinuationOptions::default())
}

pub fn continue_branches_with(
    model: &ModelSpec,
    param: &str,
    range: (f64, f64),
    n_steps: usize,
    seeds: &[Vec<f64>],
    opts: &ContinuationOptions,
) -> Result<Vec<Branch>, ModelError> {
    if model.param(param).is_none() {
        return Err(ModelError::UnknownParameter {
            model: model.name().to_string(),
            param: param.to_string(),
        });
    }
    if !(range.0.is_finite() && range.1.is_finite()) || n_steps < 2 {
        return Err(ModelError::InvalidConfig("continuation needs a finite range and at least 2 steps".into()));
    }
    let grid = parameter_grid(range.0, range.1, n_steps);
    if seeds.is_empty() && opts.use_analytic && model.equilibria().is_some() {
        return analytic_branches(model, param, &grid);
    }
    let start = model.with_param(param, grid[0])?;
    let seeds = if seeds.is_empty() { grid_seeds(start.dim()) } else { seeds.to_vec() };
    let mut starts: Vec<Vec<f64>> = Vec::new();
    for s in &seeds {
        if s.len() != start.dim() {
            return Err(ModelError::InvalidConfig(format!(
                "seed has length {}, model dimension is {}",
                s.len(),
                start.dim()
            )));
        }
        if let Ok(x) = solve_equilibrium(&start, s, opts.tol, opts.max_iter) {
            if !starts.iter().any(|y| dist(y, &x) <= 1e-6 * (1.0 + norm(&x))) {
                starts.push(x);
            }
        }
    }

    let tracer = Tracer {
        model,
        param,
        grid: &grid,
        opts,
        dp: (grid[grid.len() - 1] - grid[0]).abs() / (grid.len() - 1) as f64,
    };
    let mut segments: Vec<Segment> = Vec::new();
    for x0 in starts {
        for seg in tracer.trace(x0) {
            merge_segment(&mut segments, seg);
        }
    }

    let mut out = Vec::new();
    for (i, seg) in segments.into_iter().enumerate() {
        let id = format!("b{i}");
        let mut points = Vec::with_capacity(seg.points.len());
        let mut sorted = seg.points;
        sorted.sort_by_key(|(k, _)| *k);
        for (k, x) in sorted {
            let m = model.with_param(param, grid[k])?;
            let (lam, stable) = det_classify(&m, &x).unwrap_or((f64::NAN, false));
            points.push(EquilibriumPoint {
                x_star: x,
                param_value: grid[k],
                branch_id: id.clone(),
                det_lambda_max: lam,
                det_stable: stable,
            });
        }
        let mut folds = seg.folds;
        folds.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (fold_params, fold_states) = folds.into_iter().unzip();
        out.push(Branch {
            id,
            points,
            fold_params,
            fold_states,
            truncated: seg.truncated,
        });
    }
    Ok(out)
}

fn analytic_branches(model: &ModelSpec, param: &str, grid: &[f64]) -> Result<Vec<Branch>, ModelError> {
    let mut branches: Vec<Branch> = Vec::new();
    for &p in grid {
        let m = model.with_param(param, p)?;
        for (label, x) in m.equilibria().unwrap_or_default() {
            let (lam, stable) = det_classify(&m, &x).unwrap_or((f64::NAN, false));
            let point = EquilibriumPoint {
                x_star: x,
                param_value: p,
                branch_id: label.clone(),
                det_lambda_max: lam,
                det_stable: stable,
            };
            match branches.iter_mut().find(|b| b.id == label) {
                Some(b) => b.points.push(point),
                None => branches.push(Branch {
                    id: label,
                    points: vec![point],
                    fold_params: Vec::new(),
                    fold_states: Vec::new(),
                    truncated: false,
                }),
            }
        }
    }
    Ok(branches)
}

/// Equilibria at the model's current parameters: the closed-form list when the
/// model has one, otherwise distinct Newton limits from a coarse seed grid,
/// labelled `e0`, `e1`, … in order of discovery.
pub fn find_equilibria(model: &ModelSpec) -> Vec<(String, Vec<f64>)> {
    if let Some(eqs) = model.equilibria() {
        return eqs;
    }
    let mut found: Vec<Vec<f64>> = Vec::new();
    for s in grid_seeds(model.dim()) {
        if let Ok(x) = solve_equilibrium(model, &s, NEWTON_TOL, NEWTON_MAX_ITER) {
            if !found.iter().any(|y| dist(y, &x) <= 1e-6 * (1.0 + norm(&x))) {
                found.push(x);
            }
        }
    }
    found.into_iter().enumerate().map(|(i, x)| (format!("e{i}"), x)).collect()
}

fn grid_seeds(d: usize) -> Vec<Vec<f64>> {
    let free = d.min(3);
    let levels = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let count = 5usize.pow(free as u32);
    (0..count)
        .map(|mut idx| {
            let mut x = vec![0.0; d];
            for xi in x.iter_mut().take(free) {
                *xi = levels[idx % 5];
                idx /= 5;
            }
            x
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// A monotone-in-parameter piece of a solution curve, keyed by grid index.
#[derive(Debug, Clone)]
struct Segment {
    points: Vec<(usize, Vec<f64>)>,
    folds: Vec<Fold>,
    truncated: bool,
}

/// Fold location: parameter value and state.
type Fold = (f64, Vec<f64>);

fn merge_segment(segments: &mut Vec<Segment>, seg: Segment) {
    for existing in segments.iter_mut() {
        // Crossing branches share one point; the same branch shares at least two.
        let shared = seg
            .points
            .iter()
            .filter(|(k, x)| {
                existing
                    .points
                    .iter()
                    .any(|(k2, y)| k == k2 && dist(x, y) <= MERGE_TOL * (1.0 + norm(x)))
            })
            .count();
        if shared >= seg.points.len().min(2) && shared > 0 {
            for (k, x) in seg.points {
                let taken = existing
                    .points
                    .iter()
                    .any(|(k2, y)| *k2 == k && dist(&x, y) <= MERGE_TOL * (1.0 + norm(&x)));
                if !taken {
                    existing.points.push((k, x));
                }
            }
            for f in seg.folds {
                if !existing.folds.iter().any(|g| (f.0 - g.0).abs() <= 1e-9 * (1.0 + f.0.abs())) {
                    existing.folds.push(f);
                }
            }
            existing.truncated &= seg.truncated;
            return;
        }
    }
    segments.push(seg);
}

enum Excursion {
    /// Reached the next grid value; `fold` is set when the curve turned on the way.
    Landed { index: usize, x: Vec<f64>, fold: Option<Fold> },
    /// Turned at a fold and then left the range without meeting a grid value.
    FoldExit(Fold),
    Lost,
}

const MAX_FOLDS: usize = 32;
const MAX_ARC_STEPS: usize = 20_000;

struct Tracer<'a> {
    model: &'a ModelSpec,
    param: &'a str,
    grid: &'a [f64],
    opts: &'a ContinuationOptions,
    dp: f64,
}

impl Tracer<'_> {
    fn at(&self, p: f64) -> ModelSpec {
        self.model.with_param(self.param, p).expect("parameter validated")
    }

    fn newton_at(&self, p: f64, x0: &[f64]) -> Option<Vec<f64>> {
        solve_equilibrium(&self.at(p), x0, self.opts.tol, self.opts.max_iter).ok()
    }

    fn det(&self, x: &[f64], p: f64) -> f64 {
        determinant(&self.at(p).jac_drift(x)).unwrap_or(0.0)
    }

    fn jac_param(&self, x: &[f64], p: f64) -> Vec<f64> {
        let h = f64::EPSILON.cbrt() * p.abs().max(1.0);
        let fp = self.at(p + h).drift_vec(x);
        let fm = self.at(p - h).drift_vec(x);
        fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }

    /// `[[DF, F_p], [row]]`, the bordered Jacobian of the extended system.
    fn bordered(&self, z: &[f64], row: &[f64]) -> DenseMatrix {
        let d = z.len() - 1;
        let p = z[d];
        let x = &z[..d];
        let jx = self.at(p).jac_drift(x);
        let jp = self.jac_param(x, p);
        let mut m = DenseMatrix::zeros(d + 1, d + 1);
        m.set_block(0, 0, &jx);
        for i in 0..d {
            m[(i, d)] = jp[i];
        }
        for (j, r) in row.iter().enumerate() {
            m[(d, j)] = *r;
        }
        m
    }

    /// Unit tangent of the solution curve at `z`, oriented along `orient`.
    fn tangent(&self, z: &[f64], orient: &[f64]) -> Option<Vec<f64>> {
        let n = z.len();
        let m = self.bordered(z, orient);
        let mut rhs = vec![0.0; n];
        rhs[n - 1] = 1.0;
        let t = solve_linear(&m, &rhs).ok()?;
        let len = norm(&t);
        (len.is_finite() && len > 0.0).then(|| t.iter().map(|v| v / len).collect())
    }

    /// Newton on `F(x, p) = 0`, `t·(z - base) = ds`.
    fn corrector(&self, base: &[f64], t: &[f64], ds: f64) -> Option<Vec<f64>> {
        let n = base.len();
        let d = n - 1;
        let mut z: Vec<f64> = base.iter().zip(t).map(|(b, ti)| b + ds * ti).collect();
        for _ in 0..30 {
            let f = self.at(z[d]).drift_vec(&z[..d]);
            let arc: f64 = t.iter().zip(z.iter().zip(base)).map(|(ti, (zi, bi))| ti * (zi - bi)).sum::<f64>() - ds;
            if norm(&f) <= self.opts.tol && arc.abs() <= self.opts.tol * (1.0 + ds.abs()) {
                return Some(z);
            }
            let m = self.bordered(&z, t);
            let mut rhs: Vec<f64> = f.iter().map(|v| -v).collect();
            rhs.push(-arc);
            let dz = solve_linear(&m, &rhs).ok()?;
            for (zi, di) in z.iter_mut().zip(&dz) {
                *zi += di;
            }
            if z.iter().any(|v| !v.is_finite()) {
                return None;
            }
        }
        let f = self.at(z[d]).drift_vec(&z[..d]);
        (norm(&f) <= self.opts.tol * 100.0).then_some(z)
    }

    fn trace(&self, x0: Vec<f64>) -> Vec<Segment> {
        let n = self.grid.len();
        let mut segments = Vec::new();
        let mut cur = Segment {
            points: vec![(0, x0)],
            folds: Vec::new(),
            truncated: false,
        };
        let mut dir: isize = 1;
        let mut k = 0usize;
        let mut folds = 0;
        loop {
            let next = k as isize + dir;
            if next < 0 || next >= n as isize {
                segments.push(cur);
                break;
            }
            let next = next as usize;
            let x_k = cur.points.last().expect("segment nonempty").1.clone();
            let p_k = self.grid[k];
            let p_next = self.grid[next];
            let prev = (cur.points.len() >= 2).then(|| {
                let (kp, xp) = &cur.points[cur.points.len() - 2];
                (self.grid[*kp], xp.clone())
            });

            let predictor = match &prev {
                Some((p_prev, x_prev)) => {
                    let w = (p_next - p_k) / (p_k - p_prev);
                    x_k.iter().zip(x_prev).map(|(a, b)| a + w * (a - b)).collect::<Vec<_>>()
                }
                None => self.tangent_predictor(&x_k, p_k, p_next),
            };
            let step_len = {
                let dx = dist(&predictor, &x_k);
                (dx * dx + (p_next - p_k).powi(2)).sqrt()
            };
            let accepted = self.newton_at(p_next, &predictor).filter(|x_new| {
                dist(x_new, &predictor) <= 0.3 * step_len + 1e-9 * (1.0 + norm(x_new))
                    && self.det(x_new, p_next).signum() == self.det(&x_k, p_k).signum()
            });
            if let Some(x_new) = accepted {
                cur.points.push((next, x_new));
                k = next;
                continue;
            }

            let orient = match &prev {
                Some((p_prev, x_prev)) => {
                    let mut o: Vec<f64> = x_k.iter().zip(x_prev).map(|(a, b)| a - b).collect();
                    o.push(p_k - p_prev);
                    o
                }
                None => {
                    let mut o = vec![0.0; x_k.len()];
                    o.push(dir as f64);
                    o
                }
            };
            match self.excursion(&x_k, p_k, &orient, dir, next) {
                Excursion::Landed { index, x, fold: None } => {
                    cur.points.push((index, x));
                    k = index;
                }
                Excursion::Landed { index, x, fold: Some(pf) } => {
                    cur.folds.push(pf.clone());
                    segments.push(cur);
                    cur = Segment {
                        points: vec![(index, x)],
                        folds: vec![pf],
                        truncated: false,
                    };
                    dir = -dir;
                    k = index;
                    folds += 1;
                    if folds >= MAX_FOLDS {
                        cur.truncated = true;
                        segments.push(cur);
                        break;
                    }
                }
                Excursion::FoldExit(pf) => {
                    cur.folds.push(pf);
                    segments.push(cur);
                    break;
                }
                Excursion::Lost => {
                    cur.truncated = true;
                    segments.push(cur);
                    break;
                }
            }
        }
        segments
    }

    fn tangent_predictor(&self, x: &[f64], p: f64, p_next: f64) -> Vec<f64> {
        let j = self.at(p).jac_drift(x);
        let fp: Vec<f64> = self.jac_param(x, p).iter().map(|v| -v).collect();
        match solve_linear(&j, &fp) {
            Ok(dxdp) => x.iter().zip(&dxdp).map(|(a, b)| a + (p_next - p).clamp(-1.0, 1.0) * b).collect(),
            Err(_) => x.to_vec(),
        }
    }

    /// Pseudo-arclength steps from `(x, p)` until the next grid value is reached,
    /// rounding at most one fold on the way.
    fn excursion(&self, x: &[f64], p: f64, orient: &[f64], dir: isize, target: usize) -> Excursion {
        let d = x.len();
        let (lo, hi) = (self.grid[0].min(self.grid[self.grid.len() - 1]), self.grid[0].max(self.grid[self.grid.len() - 1]));
        let increasing = self.grid[self.grid.len() - 1] >= self.grid[0];
        let mut z: Vec<f64> = x.to_vec();
        z.push(p);
        let Some(mut t) = self.tangent(&z, orient) else {
            return Excursion::Lost;
        };
        let ds_max = 0.25 * self.dp;
        let mut ds = ds_max;
        let mut det_z = self.det(&z[..d], z[d]);
        let mut dir = dir;
        let mut target = target;
        let mut fold: Option<Fold> = None;
        for _ in 0..MAX_ARC_STEPS {
            let Some(z_new) = self.corrector(&z, &t, ds) else {
                ds *= 0.5;
                if ds < 1e-8 * ds_max {
                    return Excursion::Lost;
                }
                continue;
            };
            let Some(t_new) = self.tangent(&z_new, &t) else {
                // landed on a singular point of the curve; try a different step
                ds *= 0.37;
                if ds < 1e-8 * ds_max {
                    return Excursion::Lost;
                }
                continue;
            };
            let det_new = self.det(&z_new[..d], z_new[d]);
            let mut anchor = z.clone();
            if fold.is_none() && t_new[d] * t[d] < 0.0 {
                let zf = self.refine_fold(&z, &t, ds, det_z, t[d]);
                let pf = zf[d];
                fold = Some((pf, zf[..d].to_vec()));
                dir = -dir;
                // first grid value strictly beyond the fold in the new direction
                let grid_dir = if increasing { dir } else { -dir };
                let candidate = if grid_dir > 0 {
                    self.grid.iter().position(|&g| g > pf)
                } else {
                    self.grid.iter().rposition(|&g| g < pf)
                };
                match candidate {
                    Some(j) => target = j,
                    None => return Excursion::FoldExit((pf, zf[..d].to_vec())),
                }
                anchor = zf;
            }
            let p_target = self.grid[target];
            let moving_up = (z_new[d] - anchor[d]) > 0.0;
            let passed = if moving_up {
                anchor[d] <= p_target && z_new[d] >= p_target
            } else {
                anchor[d] >= p_target && z_new[d] <= p_target
            };
            if passed && z_new[d] != anchor[d] {
                let w = (p_target - anchor[d]) / (z_new[d] - anchor[d]);
                let guess: Vec<f64> = (0..d).map(|i| anchor[i] + w * (z_new[i] - anchor[i])).collect();
                let Some(xl) = self.newton_at(p_target, &guess) else {
                    return Excursion::Lost;
                };
                if dist(&xl, &guess) > 0.5 * ds_max.max(dist(&z_new[..d], &anchor[..d])) + 1e-9 {
                    return Excursion::Lost;
                }
                return Excursion::Landed { index: target, x: xl, fold };
            }
            let margin = 2.0 * self.dp;
            if z_new[d] < lo - margin || z_new[d] > hi + margin {
                return match fold {
                    Some(f) => Excursion::FoldExit(f),
                    None => Excursion::Lost,
                };
            }
            z = z_new;
            t = t_new;
            det_z = det_new;
            ds = (ds * 1.5).min(ds_max);
        }
        Excursion::Lost
    }

    /// Bisection in arclength for the turning point between `z` and `z + ds·t`.
    ///
    /// The sign of `det DF` decides the bracket; when the determinant does not
    /// change sign (degenerate folds) the parameter component of the tangent does.
    fn refine_fold(&self, z: &[f64], t: &[f64], ds: f64, det_z: f64, tp_z: f64) -> Vec<f64> {
        let d = z.len() - 1;
        let end = self.corrector(z, t, ds);
        let use_det = end
            .as_ref()
            .map(|e| self.det(&e[..d], e[d]).signum() != det_z.signum())
            .unwrap_or(false);
        let side = |zm: &[f64]| -> bool {
            if use_det {
                self.det(&zm[..d], zm[d]).signum() == det_z.signum()
            } else {
                self.tangent(zm, t).map(|tm| tm[d] * tp_z > 0.0).unwrap_or(false)
            }
        };
        let (mut a, mut b) = (0.0, ds);
        let mut best = end.unwrap_or_else(|| z.to_vec());
        for _ in 0..80 {
            let mid = 0.5 * (a + b);
            let Some(zm) = self.corrector(z, t, mid) else {
                break;
            };
            if side(&zm) {
                a = mid;
            } else {
                b = mid;
            }
            best = zm;
            if b - a <= 1e-15 * ds.abs().max(1e-300) {
                break;
            }
        }
        best
    }
}
