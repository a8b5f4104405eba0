use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msbif(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msbif"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn msbif_threads(dir: &Path, threads: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msbif"))
        .current_dir(dir)
        .env("MSBIF_THREADS", threads)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Splits text into numbers and the literal text between them, so two SVGs can
/// be compared structurally with a tolerance on coordinates.
fn tokens(s: &str) -> Vec<Result<f64, String>> {
    let mut out = Vec::new();
    let mut lit = String::new();
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        let starts_number = c.is_ascii_digit() || (c == '-' && chars.peek().is_some_and(|n| n.is_ascii_digit()));
        if !starts_number {
            lit.push(c);
            continue;
        }
        if !lit.is_empty() {
            out.push(Err(std::mem::take(&mut lit)));
        }
        let mut num = c.to_string();
        while let Some(&n) = chars.peek() {
            if n.is_ascii_digit() || n == '.' {
                num.push(n);
                chars.next();
            } else {
                break;
            }
        }
        out.push(Ok(num.parse().unwrap()));
    }
    if !lit.is_empty() {
        out.push(Err(lit));
    }
    out
}

#[test]
fn help_and_bad_input_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let help = msbif(dir.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    for cmd in ["analyze", "sweep", "simulate", "validate", "render"] {
        assert!(stdout(&help).contains(cmd));
    }

    let unknown = msbif(dir.path(), &["analyze", "--model", "duffing"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(!unknown.stderr.is_empty());

    let bad_flag = msbif(dir.path(), &["simulate", "--paths", "many"]);
    assert_eq!(bad_flag.status.code(), Some(1));

    fs::write(dir.path().join("junk.csv"), "a,b,c\n1,2,3\n").unwrap();
    let render = msbif(dir.path(), &["render", "--input", "junk.csv", "--out", "junk.svg"]);
    assert_eq!(render.status.code(), Some(1));
    assert!(!dir.path().join("junk.svg").exists());
}

#[test]
fn analyze_reports_closed_form_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = msbif(dir.path(), &["analyze", "--model", "pitchfork", "--variant", "additive", "--equilibrium", "+"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["dissipativity"]["status"], "certified");
    let eqs = json["equilibria"].as_array().unwrap();
    assert_eq!(eqs.len(), 1);
    let st = &eqs[0]["stability"];
    assert!((st["beta_sq"].as_f64().unwrap() - 0.01).abs() < 1e-12);
    assert!((st["mu"].as_f64().unwrap() + 0.999).abs() < 1e-12);
    assert_eq!(st["nonlinear_ms_stable"], true);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"model":"pitchfork","variant":"additive","params":{"gamma":0.25,"sigma":0.2}}"#,
    )
    .unwrap();
    let out = msbif(dir.path(), &["analyze", "--config", "cfg.json", "--param", "gamma=1", "--equilibrium", "plus"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // σ²/(4γ) with σ from the file and γ from the flag.
    let beta_sq = json["equilibria"][0]["stability"]["beta_sq"].as_f64().unwrap();
    assert!((beta_sq - 0.01).abs() < 1e-12, "{beta_sq}");

    fs::write(dir.path().join("bad.json"), r#"{"model":"pitchfork","colour":"red"}"#).unwrap();
    assert_eq!(msbif(dir.path(), &["analyze", "--config", "bad.json"]).status.code(), Some(1));
}

#[test]
fn simulate_defaults_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["simulate", "--model", "pitchfork", "--variant", "additive", "--seed", "42"];
    let a = msbif_threads(dir.path(), "1", &[&base[..], &["--out", "a.csv"]].concat());
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let b = msbif_threads(dir.path(), "4", &[&base[..], &["--out", "b.csv", "--svg", "b.svg"]].concat());
    assert_eq!(b.status.code(), Some(0));
    let (a, b) = (fs::read(dir.path().join("a.csv")).unwrap(), fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(a, b);

    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,path_id,x_1"));
    let rows: Vec<&str> = lines.collect();
    // T = 100, dt = 0.01 at stride 1: 10001 rows for each of 5 paths.
    assert_eq!(rows.len(), 5 * 10_001);
    for id in 0..5 {
        assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some(&id.to_string())).count(), 10_001);
    }

    let svg = fs::read_to_string(dir.path().join("b.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="path""#).count(), 5);
}

#[test]
fn cir_near_zero_stays_finite() {
    let dir = tempfile::tempdir().unwrap();
    let out = msbif(
        dir.path(),
        &["simulate", "--model", "cir", "--param", "sigma=0.57", "--paths", "20", "--T", "20", "--seed", "5"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    assert!(!text.contains("NaN") && !text.contains("inf"));
}

#[test]
fn sweep_and_golden_bifurcation_figure() {
    let dir = tempfile::tempdir().unwrap();
    let out = msbif(
        dir.path(),
        &[
            "sweep", "--model", "pitchfork", "--variant", "additive", "--sweep-param", "gamma", "--from", "0.05", "--to",
            "1", "--steps", "96", "--svg", "fig.svg",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(csv.starts_with("# model=pitchfork, variant=additive"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3 * 96);

    let got = fs::read_to_string(dir.path().join("fig.svg")).unwrap();
    assert_eq!(got.matches(r#"class="branch""#).count(), 3);
    assert_eq!(got.matches(r#"class="band""#).count(), 2);

    let golden = include_str!("golden/pitchfork_additive.svg");
    let (g, w) = (tokens(&got), tokens(golden));
    assert_eq!(g.len(), w.len());
    for (a, b) in g.iter().zip(&w) {
        match (a, b) {
            (Ok(x), Ok(y)) => assert!((x - y).abs() <= 0.011, "{x} vs {y}"),
            (a, b) => assert_eq!(a, b),
        }
    }

    // Rendering the CSV afterwards gives the same figure.
    let out = msbif(dir.path(), &["render", "--input", "sweep.csv", "--out", "again.svg"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(dir.path().join("again.svg")).unwrap(), got);
}

#[test]
fn render_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("empty.csv"),
        "param_name,param_value,branch_id,x_1,det_lambda_max,lambda_max_A,beta_sq,mu,det_stable,linear_ms_stable,nonlinear_ms_stable\n",
    )
    .unwrap();
    let out = msbif(dir.path(), &["render", "--input", "empty.csv", "--out", "empty.svg"]);
    assert_eq!(out.status.code(), Some(0));
    let svg = fs::read_to_string(dir.path().join("empty.svg")).unwrap();
    assert!(svg.contains(r#"class="frame""#));
    assert!(!svg.contains("polyline") && !svg.contains("polygon"));

    let mut paths = String::from("t,path_id,x_1\n");
    for id in 0..5 {
        for k in 0..4 {
            paths.push_str(&format!("{},{id},{}\n", k as f64 * 0.5, (id + k) as f64 * 0.1));
        }
    }
    fs::write(dir.path().join("p.csv"), paths).unwrap();
    let out = msbif(dir.path(), &["render", "--input", "p.csv", "--kind", "paths", "--out", "p.svg"]);
    assert_eq!(out.status.code(), Some(0));
    let svg = fs::read_to_string(dir.path().join("p.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 5);

    let out = msbif(dir.path(), &["render", "--input", "p.csv", "--kind", "bifurcation", "--out", "x.svg"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn quick_validation_and_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let ok = msbif(dir.path(), &["validate", "--quick"]);
    let text = stdout(&ok);
    assert_eq!(ok.status.code(), Some(0), "{text}");
    assert!(text.lines().any(|l| l.starts_with("PASS [12]")));
    assert!(!text.contains("FAIL"));

    let bad = msbif(dir.path(), &["validate", "--quick", "--force-beta-sq", "0.1"]);
    assert_eq!(bad.status.code(), Some(3));
    let all = format!("{}{}", stdout(&bad), String::from_utf8_lossy(&bad.stderr));
    assert!(all.lines().any(|l| l.starts_with("FAIL [1]")), "{all}");
}
