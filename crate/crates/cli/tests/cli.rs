use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn truthfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_truthfed"))
        .args(args)
        .env_remove("TRUTHFED_OUT")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = r#"{"T": 200, "N": 4, "d": 2, "K": 4, "gamma": 0.5, "seeds": [1, 2]}"#;

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn oracle_with_zero_trials_is_vacuous() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let r = truthfed(&["oracle", "--trials", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let report: String = fs::read_to_string(out.join("oracle_report.json")).unwrap();
    assert!(report.contains("\"checks\": 0"));
    assert!(!String::from_utf8_lossy(&r.stdout).contains("FAIL"));
}

#[test]
fn oracle_exit_code_tracks_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let r = truthfed(&[
        "oracle", "--trials", "30", "--max-clients", "10", "--gamma", "0.001", "--out",
        out.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&r.stdout);
    let expected = if stdout.contains("FAIL") { 2 } else { 0 };
    assert_eq!(r.status.code(), Some(expected), "{stdout}");
}

#[test]
fn missing_config_names_path() {
    let r = truthfed(&["run", "--config", "/definitely/not/here.json", "--out", "/tmp/unused-truthfed"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("/definitely/not/here.json"));
}

#[test]
fn bad_config_field_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"T": 100, "temperature": 3}"#);
    let r = truthfed(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("temperature"));

    let cfg = write_config(tmp.path(), r#"{"epsilon": -1}"#);
    let r = truthfed(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("epsilon"));
}

#[test]
fn dc_matches_two_step_evaluation() {
    let r = truthfed(&["dc", "--T", "6250", "--N", "25", "--d", "5", "--lambda", "1", "--beta", "0.5"]);
    assert_eq!(r.status.code(), Some(0));
    let got: f64 = String::from_utf8_lossy(&r.stdout).trim().parse().unwrap();
    let t = 6250f64;
    let rr = (5.0 * (1.0 + t / 5.0).ln()).ceil();
    let want = t / (625.0 * 5.0 * t.ln())
        - (t * t / (625.0 * 5.0 * rr * t.ln())).sqrt() * (1.0 - (-1.0f64).exp()) * 0.5f64.ln();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn beta_bound_prints_formula() {
    let r = truthfed(&["beta-bound", "--t", "100", "--L", "1", "--lambda", "1", "--d", "5"]);
    assert_eq!(r.status.code(), Some(0));
    let got: f64 = String::from_utf8_lossy(&r.stdout).trim().parse().unwrap();
    assert!((got - 21f64.powi(-5)).abs() < 1e-15);
}

#[test]
fn run_is_reproducible_and_guards_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let r = truthfed(&["run", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
        assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.iter().any(|(p, _)| p == Path::new("aggregate.csv")));
    assert!(ta.iter().any(|(p, _)| p == Path::new("truth_fedban/seed_2.csv")));
    assert_eq!(ta, tb);

    let again = truthfed(&["run", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let forced = truthfed(&["run", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap(), "--force"]);
    assert_eq!(forced.status.code(), Some(0));
    assert_eq!(tree(&a), tb);
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("o");
    let r = truthfed(&[
        "run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--mechanism", "select_all", "--seed", "9", "--T", "50",
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = fs::read_to_string(out.join("select_all/seed_9.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 50 * 4);
    assert!(!out.join("select_all/seed_1.csv").exists());
}

#[test]
fn output_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("env-out");
    let r = Command::new(env!("CARGO_BIN_EXE_truthfed"))
        .args(["oracle", "--trials", "2"])
        .env("TRUTHFED_OUT", &out)
        .output()
        .unwrap();
    assert!(matches!(r.status.code(), Some(0 | 2)));
    assert!(out.join("oracle_report.json").exists());
}

#[test]
fn compare_micro_macro_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let c = cfg.to_str().unwrap();
    let dir = |n: &str| tmp.path().join(n).to_str().unwrap().to_string();

    let r = truthfed(&["compare", "--config", c, "--out", &dir("cmp"), "--mechanisms", "truth_fedban,none"]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let agg = fs::read_to_string(tmp.path().join("cmp/aggregate.csv")).unwrap();
    assert!(agg.starts_with("step,variant,metric,mean,std"));
    assert!(agg.contains(",none,"));
    assert!(tmp.path().join("cmp/plots/cumulative_regret.svg").exists());

    let r = truthfed(&["micro", "--config", c, "--out", &dir("mic"), "--client", "1", "--factors", "0.5,2"]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let micro = fs::read_to_string(tmp.path().join("mic/micro.csv")).unwrap();
    assert_eq!(micro.lines().count(), 4);

    let r = truthfed(&["macro", "--config", c, "--out", &dir("mac"), "--ratios", "0,0.5"]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(tmp.path().join("mac/cells/under_0.5.csv").exists());
    assert!(tmp.path().join("mac/macro.csv").exists());
}
