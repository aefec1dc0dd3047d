//! End-to-end runs of the `gsdu` binary on small ensembles.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
name = "small"
seed = 11

[aggregator]
kind = "linear_z"
felicity = { type = "log" }
gamma = 1.0

[plan]
kind = "exponential"
slope = 1.0

[pair]
kind = "sign-loss"

[solver]
paths = 3000
steps = 20

[oracles]
closed_form = true
pde = false

[output]
dir = "unused"
"#;

fn gsdu(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsdu"))
        .args(args)
        .current_dir(cwd)
        .env("GSDU_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn solve_writes_outputs_and_reproduces() {
    let dir = setup();
    let o = gsdu(&["solve", "small.toml", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "solution_coarse.csv", "solution_fine.csv", "solve.json"] {
        assert!(dir.path().join("run").join(f).is_file(), "missing {f}");
    }
    let o = gsdu(&["reproduce", "run/manifest.json"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["pass"], true);
}

#[test]
fn tampered_manifest_is_refused() {
    let dir = setup();
    assert_eq!(code(&gsdu(&["closed-form", "small.toml", "--out", "run"], dir.path())), 0);
    let path = dir.path().join("run/manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    m["config"]["seed"] = 12.into();
    std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(code(&gsdu(&["reproduce", "run/manifest.json"], dir.path())), 5);
}

#[test]
fn closed_form_table_has_the_documented_columns() {
    let dir = setup();
    assert_eq!(code(&gsdu(&["closed-form", "small.toml", "--out", "run"], dir.path())), 0);
    let text = std::fs::read_to_string(dir.path().join("run/closed_form.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,filtration,U,V,formula_id");
    assert!(text.lines().count() > 2);
    assert!(!text.contains('\r'));
}

#[test]
fn schema_and_io_errors_have_distinct_codes() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), format!("{SMALL}\nbogus = 1\n")).unwrap();
    let o = gsdu(&["solve", "bad.toml"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    let o = gsdu(&["solve", "missing.toml"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.toml"));
}

#[test]
fn neutrality_flags_and_report_merge() {
    let dir = setup();
    let common = ["--aggregator", "linear-z:1", "--plan", "b", "--paths", "3000", "--steps", "20", "--seed", "4"];
    for pair in ["sign-loss", "anticipation"] {
        let mut args = vec!["neutrality", "--pair", pair, "--out"];
        let out = format!("runs/{pair}");
        args.push(&out);
        args.extend(common);
        let o = gsdu(&args, dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(dir.path().join(&out).join("neutrality_profile.csv").is_file());
    }
    let o = gsdu(&["report", "runs"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let merged = std::fs::read_to_string(dir.path().join("runs/merged.csv")).unwrap();
    assert!(merged.starts_with("aggregator,pair,t,"));
    assert!(merged.contains("sign-loss") && merged.contains("anticipation"));
    // linear-z loses neutrality under both pairs
    assert!(!merged.contains(",neutral-consistent,"));
}

#[test]
fn neutrality_without_a_seed_is_a_schema_error() {
    let dir = setup();
    let o = gsdu(&["neutrality", "--aggregator", "expected-utility", "--paths", "1000"], dir.path());
    assert_eq!(code(&o), 2);
}
