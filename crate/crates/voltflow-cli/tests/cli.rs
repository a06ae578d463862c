//! End-to-end tests against the compiled binary: artifacts, exit
//! codes, and determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::tempdir;

fn voltflow(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_voltflow"));
    cmd.args(args);
    cmd
}

fn run(args: &[&str]) -> Output {
    voltflow(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Data rows of a table; `#` headers must include schema and a 64-hex
/// scenario hash.
fn table_rows(path: &Path, schema: &str) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).expect("table exists");
    assert!(
        text.starts_with(&format!("# schema {schema}\n")),
        "{} lacks schema header: {}",
        path.display(),
        text.lines().next().unwrap_or("")
    );
    let hash_line = text.lines().nth(1).expect("hash line");
    let hash = hash_line.strip_prefix("# scenario ").expect("scenario hash header");
    assert_eq!(hash.len(), 64, "hash is sha-256 hex");
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1) // column header
        .map(|l| l.split('\t').map(str::to_owned).collect())
        .collect()
}

fn objective_column(path: &Path) -> Vec<f64> {
    table_rows(path, "trajectory/v1")
        .iter()
        .map(|row| row[1].parse().expect("objective parses"))
        .collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("manifest.json")).expect("manifest exists");
    serde_json::from_str(&text).expect("manifest is JSON")
}

#[test]
fn run_fig3_writes_two_converged_trajectories() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = run(&["run", "fig3", "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let mut names: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "conditions.tsv",
            "manifest.json",
            "trajectory-gradient.tsv",
            "trajectory-pseudo-gradient.tsv"
        ]
    );

    for file in ["trajectory-gradient.tsv", "trajectory-pseudo-gradient.tsv"] {
        let obj = objective_column(&dir.join(file));
        assert!(obj.len() > 2, "{file} holds a trajectory");
        for w in obj.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{file}: objective rose {} -> {}", w[0], w[1]);
        }
    }

    let m = manifest(&dir);
    let runs = m["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    for r in runs {
        assert_eq!(r["converged"], serde_json::json!(true), "{r}");
    }
    assert!(m["conditions"]["c1_holds"].as_bool().unwrap());

    let summary = stdout(&out);
    assert!(summary.contains("converged in"), "summary reports steps: {summary}");
    assert!(summary.contains("F ="), "summary reports the objective: {summary}");
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = run(&["run", "fig3", "--out", dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    }
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        let left = fs::read(a.join(&name)).unwrap();
        let right = fs::read(b.join(&name)).unwrap();
        assert_eq!(left, right, "{name:?} differs between runs");
    }
}

#[test]
fn run_respects_physics_override() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = run(&["run", "fig3", "--physics", "nonlinear", "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert_eq!(manifest(&dir)["physics"], serde_json::json!("nonlinear"));
}

#[test]
fn malformed_scenario_fails_without_partial_outputs() {
    let tmp = tempdir().unwrap();
    let scenario = tmp.path().join("broken.toml");
    fs::write(&scenario, "schema = \"scenario/v1\"\n[network\n").unwrap();
    let dir = tmp.path().join("out");
    let out = run(&["run", scenario.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("malformed"));
    assert!(!dir.exists(), "no partial outputs on parse errors");
}

#[test]
fn unknown_scenario_name_fails() {
    let out = run(&["run", "no-such-scenario"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("voltflow list"));
}

#[test]
fn run_and_sweep_reject_each_others_scenarios() {
    let out = run(&["run", "fig6-pseudo-rates"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("voltflow sweep"));

    let out = run(&["sweep", "fig3"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("voltflow run"));
}

#[test]
fn numerical_failure_exits_two_without_outputs() {
    let tmp = tempdir().unwrap();
    let scenario = tmp.path().join("collapse.toml");
    fs::write(
        &scenario,
        r#"schema = "scenario/v1"
physics = "nonlinear"

[network]
source = "builtin:sce42"
load_multiplier = 50.0

[curves]
deadband = 0.04
threshold_offset = 0.08

[[runs]]
law = "droop"
"#,
    )
    .unwrap();
    let dir = tmp.path().join("out");
    let out = run(&["run", scenario.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(!dir.exists(), "no outputs on numerical failure");
}

#[test]
fn list_names_all_bundled_scenarios() {
    let out = run(&["list"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for name in
        ["fig3", "fig4-range", "fig5-gradient-rates", "fig6-pseudo-rates", "conditions-sweep"]
    {
        assert!(text.contains(name), "list output lacks {name}: {text}");
    }
}

#[test]
fn describe_fig4_cites_threshold_range() {
    let out = run(&["describe", "fig4"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("0.03") && text.contains("0.18"), "{text}");

    let out = run(&["describe", "no-such-scenario"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn check_reports_conditions_on_stdout() {
    let out = run(&["check", "builtin:sce42"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("# network "));
    assert!(text.contains("# schema conditions/v1"));
    for key in ["alpha_max", "c1_margin", "c1_holds", "c2_bound", "c3_bound"] {
        assert!(text.contains(key), "missing {key}: {text}");
    }

    let out = run(&["check", "no-such-file.toml"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn sweep_fig6_emits_one_row_per_stepsize() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = run(&["sweep", "fig6-pseudo-rates", "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let rows = table_rows(&dir.join("sweep-pseudo-gradient.tsv"), "sweep/v1");
    assert_eq!(rows.len(), 22, "0.05..1.10 by 0.05");
    for row in &rows {
        assert_eq!(row[1], "true", "all stepsizes converge at plot tolerance: {row:?}");
        assert_eq!(row[6], "-", "no per-point failures: {row:?}");
    }

    // bigger stepsizes settle faster until the loop starts to ring
    let onset = rows.iter().position(|r| r[4] != "-").expect("ringing appears on the grid");
    let steps: Vec<usize> = rows[..onset].iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(onset >= 5, "a usable ringing-free prefix exists");
    assert!(steps.windows(2).all(|w| w[1] <= w[0]), "steps not monotone: {steps:?}");

    let m = manifest(&dir);
    assert_eq!(m["sweep"]["points"], serde_json::json!(22));
    assert_eq!(m["sweep"]["kind"], serde_json::json!("stepsize"));
    // the scenario documents how step counts are measured
    assert!(m["notes"]["convergence"].as_str().unwrap().contains("1e-4"));
}

#[test]
fn env_var_sets_default_output_directory() {
    let tmp = tempdir().unwrap();
    let out = voltflow(&["run", "fig3"])
        .env("VOLTFLOW_OUT", tmp.path())
        .output()
        .expect("binary runs");
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(tmp.path().join("fig3").join("manifest.json").is_file());
}

#[test]
fn relative_network_paths_resolve_against_the_scenario_file() {
    let tmp = tempdir().unwrap();
    let net_src = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .parent()
        .unwrap()
        .join("voltflow-core/data/sce42.toml");
    fs::copy(net_src, tmp.path().join("local-net.toml")).unwrap();
    let scenario = tmp.path().join("local.toml");
    fs::write(
        &scenario,
        r#"schema = "scenario/v1"
physics = "linear"

[network]
source = "local-net.toml"

[curves]
deadband = 0.0
threshold_offset = 0.08

[[runs]]
law = "droop"
"#,
    )
    .unwrap();
    let dir = tmp.path().join("out");
    let out = run(&["run", scenario.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let m = manifest(&dir);
    assert_eq!(m["runs"][0]["law"], serde_json::json!("droop"));
    assert_eq!(m["runs"][0]["converged"], serde_json::json!(true));
}
