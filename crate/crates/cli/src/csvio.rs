//! Readers for the two CSV layouts the tool writes: `sweep.csv` and `paths.csv`.

use std::collections::BTreeMap;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub param_value: f64,
    pub branch_id: String,
    pub x: Vec<f64>,
    pub lambda_max_a: Option<f64>,
    pub beta_sq: Option<f64>,
    pub nonlinear_ms_stable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTable {
    pub param_name: String,
    pub dim: usize,
    pub points: Vec<SweepPoint>,
}

impl SweepTable {
    /// Points grouped by branch, each sorted by parameter.
    pub fn branches(&self) -> BTreeMap<&str, Vec<&SweepPoint>> {
        let mut out: BTreeMap<&str, Vec<&SweepPoint>> = BTreeMap::new();
        for p in &self.points {
            out.entry(p.branch_id.as_str()).or_default().push(p);
        }
        for v in out.values_mut() {
            v.sort_by(|a, b| a.param_value.total_cmp(&b.param_value));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathsTable {
    pub dim: usize,
    /// `(t, x_1)` per path id.
    pub paths: BTreeMap<usize, Vec<(f64, f64)>>,
}

fn schema(msg: impl Into<String>) -> CliError {
    CliError::SchemaMismatch(msg.into())
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn number(field: &str, line: usize) -> Result<f64, CliError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| schema(format!("line {}: `{field}` is not a number", line + 1)))
}

fn optional(field: &str, line: usize) -> Result<Option<f64>, CliError> {
    if field.trim().is_empty() {
        Ok(None)
    } else {
        number(field, line).map(Some)
    }
}

/// Which layout a CSV has, judged from its header.
pub fn detect_kind(text: &str) -> Option<&'static str> {
    let (_, header) = data_lines(text).next()?;
    if header.starts_with("param_name,") {
        Some("bifurcation")
    } else if header.starts_with("t,path_id") {
        Some("paths")
    } else {
        None
    }
}

pub fn parse_sweep(text: &str) -> Result<SweepTable, CliError> {
    let mut lines = data_lines(text);
    let (_, header) = lines.next().ok_or_else(|| schema("missing header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let tail = [
        "det_lambda_max",
        "lambda_max_A",
        "beta_sq",
        "mu",
        "det_stable",
        "linear_ms_stable",
        "nonlinear_ms_stable",
    ];
    if cols.len() < 3 + 1 + tail.len() || cols[..3] != ["param_name", "param_value", "branch_id"] {
        return Err(schema("not a sweep table header"));
    }
    let dim = cols.len() - 3 - tail.len();
    if cols[cols.len() - tail.len()..] != tail || (0..dim).any(|i| cols[3 + i] != format!("x_{}", i + 1)) {
        return Err(schema("unexpected sweep columns"));
    }
    let mut table = SweepTable {
        param_name: String::new(),
        dim,
        points: Vec::new(),
    };
    for (n, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(schema(format!("line {}: expected {} fields, got {}", n + 1, cols.len(), f.len())));
        }
        table.param_name = f[0].to_string();
        let x = (0..dim).map(|i| number(f[3 + i], n)).collect::<Result<_, _>>()?;
        let t = 3 + dim;
        table.points.push(SweepPoint {
            param_value: number(f[1], n)?,
            branch_id: f[2].to_string(),
            x,
            lambda_max_a: optional(f[t + 1], n)?,
            beta_sq: optional(f[t + 2], n)?,
            nonlinear_ms_stable: f[t + 6].trim() == "1",
        });
    }
    Ok(table)
}

pub fn parse_paths(text: &str) -> Result<PathsTable, CliError> {
    let mut lines = data_lines(text);
    let (_, header) = lines.next().ok_or_else(|| schema("missing header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[..2] != ["t", "path_id"] {
        return Err(schema("not a paths table header"));
    }
    let mut table = PathsTable {
        dim: cols.len() - 2,
        paths: BTreeMap::new(),
    };
    for (n, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(schema(format!("line {}: expected {} fields, got {}", n + 1, cols.len(), f.len())));
        }
        let id: usize = f[1]
            .trim()
            .parse()
            .map_err(|_| schema(format!("line {}: bad path id", n + 1)))?;
        table.paths.entry(id).or_default().push((number(f[0], n)?, number(f[2], n)?));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SWEEP: &str = "# model=pitchfork, variant=additive, delta1=0.001, delta2=0.001
param_name,param_value,branch_id,x_1,det_lambda_max,lambda_max_A,beta_sq,mu,det_stable,linear_ms_stable,nonlinear_ms_stable
gamma,0.5,plus,0.7,-1,-1,0.005,-1.9,1,1,1
gamma,0.25,plus,0.5,-0.5,-0.5,0.01,-0.99,1,1,1
gamma,0.25,zero,0,0.25,0.5,,0.5,0,0,0
";

    #[test]
    fn sweep_round_trip() {
        let t = parse_sweep(SWEEP).unwrap();
        assert_eq!(t.dim, 1);
        assert_eq!(t.param_name, "gamma");
        assert_eq!(t.points.len(), 3);
        assert_eq!(t.points[2].beta_sq, None);
        let b = t.branches();
        assert_eq!(b["plus"][0].param_value, 0.25);
        assert_eq!(detect_kind(SWEEP), Some("bifurcation"));
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(parse_sweep("a,b\n1,2\n"), Err(CliError::SchemaMismatch(_))));
        assert!(matches!(parse_paths(SWEEP), Err(CliError::SchemaMismatch(_))));
        let bad = SWEEP.replace("0.005,", "");
        assert!(parse_sweep(&bad).is_err());
    }

    #[test]
    fn paths_grouping() {
        let text = "t,path_id,x_1\n0,0,1.0\n0,1,2.0\n0.1,0,1.5\n0.1,1,2.5\n";
        let t = parse_paths(text).unwrap();
        assert_eq!(t.paths.len(), 2);
        assert_eq!(t.paths[&1], vec![(0.0, 2.0), (0.1, 2.5)]);
        assert_eq!(detect_kind(text), Some("paths"));
    }
}
