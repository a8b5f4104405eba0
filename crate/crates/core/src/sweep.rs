//! Parameter sweeps: continue equilibria, analyse each one, and locate where
//! the mean-square stability indicators change sign.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::equilibria::{continue_branches, det_classify, newton, NEWTON_MAX_ITER, NEWTON_TOL};
use crate::error::ModelError;
use crate::model::{ModelSpec, Sde};
use crate::moments::analyze;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param_name: String,
    pub param_value: f64,
    pub branch_id: String,
    pub x_star: Vec<f64>,
    pub det_lambda_max: f64,
    /// Absent when the per-row analysis failed.
    pub lambda_max_a: Option<f64>,
    /// Absent unless the linearization is mean-square stable.
    pub beta_sq: Option<f64>,
    pub mu: Option<f64>,
    pub det_stable: bool,
    pub linear_ms_stable: bool,
    pub nonlinear_ms_stable: bool,
    /// The row sits on a turning point of the branch rather than on the grid.
    pub at_fold: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossingField {
    LambdaMaxA,
    Mu,
}

impl CrossingField {
    fn of(self, row: &SweepRow) -> Option<f64> {
        match self {
            CrossingField::LambdaMaxA => row.lambda_max_a,
            CrossingField::Mu => row.mu,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CrossingField::LambdaMaxA => "lambda_max_A",
            CrossingField::Mu => "mu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingEvent {
    pub branch_id: String,
    pub field: CrossingField,
    pub param_value: f64,
    pub bracket: (f64, f64),
    /// False when re-solving the equilibrium failed inside the bracket
    /// (typically next to a fold); the bracket is the last one reached.
    pub refined: bool,
}

fn analyse_row(
    model: &ModelSpec,
    param: &str,
    value: f64,
    branch_id: &str,
    x_star: Vec<f64>,
    det_lambda_max: f64,
    det_stable: bool,
    delta1: f64,
    delta2: f64,
) -> SweepRow {
    let report = model.with_param(param, value).ok().and_then(|m| analyze(&m, &x_star, delta1, delta2).ok());
    SweepRow {
        param_name: param.to_string(),
        param_value: value,
        branch_id: branch_id.to_string(),
        x_star,
        det_lambda_max,
        lambda_max_a: report.as_ref().map(|r| r.lambda_max_a),
        beta_sq: report.as_ref().and_then(|r| r.beta_sq),
        mu: report.as_ref().map(|r| r.mu),
        det_stable,
        linear_ms_stable: report.as_ref().is_some_and(|r| r.linear_ms_stable),
        nonlinear_ms_stable: report.as_ref().is_some_and(|r| r.nonlinear_ms_stable),
        at_fold: false,
    }
}

/// Equilibria and their moment analysis over `n_steps` grid points of `range`,
/// one row per (parameter value, branch), sorted by branch then parameter.
/// A branch that ends at a fold also gets a row at the fold itself, so that
/// sign changes between the last grid value and the fold can be bracketed.
/// Failures of a single row leave its optional fields empty.
pub fn run_sweep(
    model: &ModelSpec,
    param: &str,
    range: (f64, f64),
    n_steps: usize,
    delta1: f64,
    delta2: f64,
) -> Result<Vec<SweepRow>, ModelError> {
    let branches = continue_branches(model, param, range, n_steps, &[])?;
    let mut jobs: Vec<(f64, &str, Vec<f64>, f64, bool, bool)> = Vec::new();
    for b in &branches {
        for pt in &b.points {
            jobs.push((pt.param_value, &b.id, pt.x_star.clone(), pt.det_lambda_max, pt.det_stable, false));
        }
        for (&p, x) in b.fold_params.iter().zip(&b.fold_states) {
            let m = model.with_param(param, p)?;
            let (lam, stable) = det_classify(&m, x).unwrap_or((f64::NAN, false));
            jobs.push((p, &b.id, x.clone(), lam, stable, true));
        }
    }
    let mut rows: Vec<SweepRow> = jobs
        .into_par_iter()
        .map(|(p, id, x, lam, stable, at_fold)| SweepRow {
            at_fold,
            ..analyse_row(model, param, p, id, x, lam, stable, delta1, delta2)
        })
        .collect();
    rows.sort_by(|a, b| a.branch_id.cmp(&b.branch_id).then(a.param_value.total_cmp(&b.param_value)));
    Ok(rows)
}

/// Field value at `p` after re-solving the equilibrium from `guess`.
fn field_at(
    model: &ModelSpec,
    param: &str,
    p: f64,
    guess: &[f64],
    field: CrossingField,
    delta1: f64,
    delta2: f64,
) -> Option<(f64, Vec<f64>)> {
    let pt = newton(model, Some((param, p)), guess, NEWTON_TOL, NEWTON_MAX_ITER).ok()?;
    let row = analyse_row(model, param, p, "", pt.x_star, pt.det_lambda_max, pt.det_stable, delta1, delta2);
    field.of(&row).map(|v| (v, row.x_star))
}

fn crosses(a: f64, b: f64) -> bool {
    (a < 0.0 && b >= 0.0) || (a >= 0.0 && b < 0.0)
}

/// Sign changes of `field` along each branch, refined by bisection that
/// re-solves the equilibrium at every midpoint until the bracket is below
/// `1e-8 (1 + |p|)`; the reported location interpolates the final bracket.
pub fn detect_crossings(
    model: &ModelSpec,
    rows: &[SweepRow],
    field: CrossingField,
    delta1: f64,
    delta2: f64,
) -> Vec<CrossingEvent> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let mut end = start + 1;
        while end < rows.len() && rows[end].branch_id == rows[start].branch_id {
            end += 1;
        }
        let branch = &rows[start..end];
        for pair in branch.windows(2) {
            let (lo_row, hi_row) = (&pair[0], &pair[1]);
            let (Some(f_lo), Some(f_hi)) = (field.of(lo_row), field.of(hi_row)) else {
                continue;
            };
            if crosses(f_lo, f_hi) {
                out.push(refine(model, lo_row, hi_row, f_lo, f_hi, field, delta1, delta2));
            }
        }
        start = end;
    }
    out
}

fn refine(
    model: &ModelSpec,
    lo_row: &SweepRow,
    hi_row: &SweepRow,
    f_lo: f64,
    f_hi: f64,
    field: CrossingField,
    delta1: f64,
    delta2: f64,
) -> CrossingEvent {
    let param = lo_row.param_name.as_str();
    let (mut lo, mut hi) = (lo_row.param_value, hi_row.param_value);
    let (mut flo, mut fhi) = (f_lo, f_hi);
    let (mut x_lo, mut x_hi) = (lo_row.x_star.clone(), hi_row.x_star.clone());
    // Next to a fold both roots are close; start Newton from the regular side
    // and reject iterates that land on the other sheet.
    let regular = match (lo_row.at_fold, hi_row.at_fold) {
        (true, false) => Some(hi_row),
        (false, true) => Some(lo_row),
        _ => None,
    };
    let mut refined = true;
    while (hi - lo).abs() > 1e-8 * (1.0 + lo.abs().max(hi.abs())) {
        let mid = 0.5 * (lo + hi);
        let guess: Vec<f64> = match regular {
            Some(r) if std::ptr::eq(r, lo_row) => x_lo.clone(),
            Some(_) => x_hi.clone(),
            None => x_lo.iter().zip(&x_hi).map(|(a, b)| 0.5 * (a + b)).collect(),
        };
        let solved = field_at(model, param, mid, &guess, field, delta1, delta2).filter(|(_, xm)| {
            regular.is_none_or(|r| {
                model
                    .with_param(param, mid)
                    .ok()
                    .and_then(|m| det_classify(&m, xm).ok())
                    .is_some_and(|(lam, _)| lam.signum() == r.det_lambda_max.signum())
            })
        });
        match solved {
            Some((fm, xm)) => {
                if crosses(flo, fm) {
                    hi = mid;
                    fhi = fm;
                    x_hi = xm;
                } else {
                    lo = mid;
                    flo = fm;
                    x_lo = xm;
                }
            }
            None => {
                refined = false;
                break;
            }
        }
    }
    let t = if refined && fhi != flo { (flo / (flo - fhi)).clamp(0.0, 1.0) } else { 0.5 };
    CrossingEvent {
        branch_id: lo_row.branch_id.clone(),
        field,
        param_value: lo + t * (hi - lo),
        bracket: (lo, hi),
        refined,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `sweep.csv`: metadata comments, a header and one line per row.
pub fn write_sweep_csv<W: Write>(
    rows: &[SweepRow],
    model: &ModelSpec,
    delta1: f64,
    delta2: f64,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "# model={}, variant={}, delta1={delta1}, delta2={delta2}", model.name(), model.variant())?;
    let coords: Vec<String> = (1..=model.dim()).map(|i| format!("x_{i}")).collect();
    writeln!(
        w,
        "param_name,param_value,branch_id,{},det_lambda_max,lambda_max_A,beta_sq,mu,det_stable,linear_ms_stable,nonlinear_ms_stable",
        coords.join(",")
    )?;
    for r in rows {
        let xs: Vec<String> = r.x_star.iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.param_name,
            r.param_value,
            r.branch_id,
            xs.join(","),
            r.det_lambda_max,
            opt(r.lambda_max_a),
            opt(r.beta_sq),
            opt(r.mu),
            u8::from(r.det_stable),
            u8::from(r.linear_ms_stable),
            u8::from(r.nonlinear_ms_stable)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;
    use crate::moments::DEFAULT_DELTA as D;

    #[test]
    fn pitchfork_additive_rows() {
        let m = builtin("pitchfork", Some("additive"), None).unwrap();
        let rows = run_sweep(&m, "gamma", (0.05, 1.0), 96, D, D).unwrap();
        let plus: Vec<_> = rows.iter().filter(|r| r.branch_id == "plus").collect();
        assert_eq!(plus.len(), 96);
        for r in plus {
            assert!((r.x_star[0] - r.param_value.sqrt()).abs() < 1e-10);
            assert!(r.lambda_max_a.unwrap() < 0.0 && r.mu.unwrap() < 0.0);
            let want = 0.01 / (4.0 * r.param_value);
            assert!((r.beta_sq.unwrap() - want).abs() < 1e-10 * want.max(1.0));
            assert!(r.nonlinear_ms_stable);
        }
        for r in &rows {
            assert!(!r.nonlinear_ms_stable || r.linear_ms_stable);
            assert_eq!(r.linear_ms_stable, r.lambda_max_a.is_some_and(|l| l < 0.0));
        }
        let zero: Vec<_> = rows.iter().filter(|r| r.branch_id == "zero").collect();
        assert!(zero.iter().all(|r| r.beta_sq.is_none()));
        assert!(rows.windows(2).all(|w| (w[0].branch_id.as_str(), w[0].param_value)
            <= (w[1].branch_id.as_str(), w[1].param_value)));
    }

    #[test]
    fn linear_noise_boundary() {
        let m = builtin("pitchfork", Some("linear"), None).unwrap();
        let rows = run_sweep(&m, "gamma", (-0.2, 0.2), 96, D, D).unwrap();
        let zero: Vec<_> = rows.into_iter().filter(|r| r.branch_id == "zero").collect();
        let ev = detect_crossings(&m, &zero, CrossingField::LambdaMaxA, D, D);
        assert_eq!(ev.len(), 1);
        assert!(ev[0].refined);
        assert!((ev[0].param_value + 0.005).abs() < 1e-8, "{:?}", ev[0]);
        assert!(ev[0].bracket.1 - ev[0].bracket.0 <= 1e-8 * 1.2);
    }

    #[test]
    fn additive_mu_crossing_and_resolution_independence() {
        let m = builtin("pitchfork", Some("additive"), None).unwrap();
        let mut found = Vec::new();
        for n in [96, 192] {
            let rows = run_sweep(&m, "gamma", (1e-5, 0.01), n, D, D).unwrap();
            let ev = detect_crossings(&m, &rows, CrossingField::Mu, D, D);
            let plus: Vec<_> = ev.iter().filter(|e| e.branch_id == "plus").collect();
            assert_eq!(plus.len(), 1);
            assert!((plus[0].param_value - 2.5e-4).abs() < 1e-8);
            found.push(plus[0].param_value);
        }
        assert!((found[0] - found[1]).abs() < 1e-7);
    }

    #[test]
    fn monotone_field_has_no_crossing() {
        let m = builtin("pitchfork", Some("additive"), None).unwrap();
        let rows = run_sweep(&m, "gamma", (0.05, 1.0), 20, D, D).unwrap();
        let plus: Vec<_> = rows.into_iter().filter(|r| r.branch_id == "plus").collect();
        assert!(detect_crossings(&m, &plus, CrossingField::LambdaMaxA, D, D).is_empty());
    }

    #[test]
    fn csv_layout() {
        let m = builtin("pitchfork", Some("additive"), None).unwrap();
        let rows = run_sweep(&m, "gamma", (-0.1, 0.1), 3, D, D).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &m, D, D, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "# model=pitchfork, variant=additive, delta1=0.001, delta2=0.001");
        assert_eq!(
            lines[1],
            "param_name,param_value,branch_id,x_1,det_lambda_max,lambda_max_A,beta_sq,mu,det_stable,linear_ms_stable,nonlinear_ms_stable"
        );
        assert_eq!(lines.len(), 2 + rows.len());
        // zero branch at gamma = 0.1 is unstable: beta_sq absent
        let unstable = lines.iter().find(|l| l.starts_with("gamma,0.1,zero,")).unwrap();
        assert_eq!(unstable.split(',').nth(6), Some(""));
        assert!(unstable.ends_with(",0,0,0"));
    }
}
