//! Turns results into tables, a manifest, and files on disk.
//!
//! Every table opens with `# schema <name>/v1` and `# scenario <hash>`
//! so downstream consumers can verify provenance; floats print at
//! {:.12e} for byte-stable comparisons.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use voltflow_core::analysis::{largest_stable, ConditionReport, SweepPoint};
use voltflow_core::dynamics::Trajectory;
use voltflow_core::netmodel::BusId;

use crate::exec::{RunOutcome, RunResults, SweepResults, ThresholdRow};
use crate::scenario::{LoadedScenario, Tolerances};

pub const MANIFEST_SCHEMA: &str = "manifest/v1";

fn e(x: f64) -> String {
    format!("{x:.12e}")
}

fn opt_e(x: Option<f64>) -> String {
    x.map(e).unwrap_or_else(|| "-".to_owned())
}

fn opt_n(x: Option<usize>) -> String {
    x.map(|v| v.to_string()).unwrap_or_else(|| "-".to_owned())
}

/// Failure strings may carry solver messages; keep them on one tab-free
/// line so the table stays parseable.
fn sanitize(s: &str) -> String {
    s.replace(['\t', '\n'], " ")
}

pub fn trajectory_table(
    hash: &str,
    law: &str,
    stepsize: Option<f64>,
    buses: &[BusId],
    traj: &Trajectory,
) -> String {
    let mut out = String::new();
    out.push_str("# schema trajectory/v1\n");
    out.push_str(&format!("# scenario {hash}\n"));
    out.push_str(&format!("# law {law}\n"));
    out.push_str(&format!("# stepsize {}\n", opt_e(stepsize)));
    out.push('t');
    out.push_str("\tobjective");
    for b in buses {
        out.push_str(&format!("\tq_{b}"));
    }
    for b in buses {
        out.push_str(&format!("\tv_{b}"));
    }
    out.push('\n');
    for (t, state) in traj.states.iter().enumerate() {
        out.push_str(&t.to_string());
        out.push('\t');
        out.push_str(&e(traj.objective[t]));
        for x in state.q.iter().chain(state.v.iter()) {
            out.push('\t');
            out.push_str(&e(*x));
        }
        out.push('\n');
    }
    out
}

pub fn sweep_table(hash: &str, law: &str, points: &[SweepPoint]) -> String {
    let mut out = String::new();
    out.push_str("# schema sweep/v1\n");
    out.push_str(&format!("# scenario {hash}\n"));
    out.push_str(&format!("# law {law}\n"));
    out.push_str("gamma\tconverged\tsteps\toscillating\tovershoot\tfinal_objective\tfailure\n");
    for p in points {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e(p.gamma),
            p.converged,
            opt_n(p.steps),
            p.oscillating,
            opt_n(p.overshoot),
            opt_e(p.final_objective),
            p.failure.as_deref().map(sanitize).unwrap_or_else(|| "-".to_owned()),
        ));
    }
    out
}

pub fn threshold_table(hash: &str, rows: &[ThresholdRow]) -> String {
    let mut out = String::new();
    out.push_str("# schema threshold/v1\n");
    out.push_str(&format!("# scenario {hash}\n"));
    out.push_str(
        "offset\talpha_max\tc1_margin\tc2_bound\tc3_bound\t\
         onset_gradient\tlargest_gradient\tonset_pseudo\tlargest_pseudo\tratio\tfactor\n",
    );
    for r in rows {
        let ratio = match (r.largest_gradient, r.largest_pseudo) {
            (Some(g), Some(p)) if p > 0.0 => Some(g / p),
            _ => None,
        };
        let factor = ratio.map(|x| (x / r.report.alpha_max).max(r.report.alpha_max / x));
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e(r.offset),
            e(r.report.alpha_max),
            e(r.report.c1_margin),
            e(r.report.c2_bound),
            e(r.report.c3_bound),
            opt_e(r.onset_gradient),
            opt_e(r.largest_gradient),
            opt_e(r.onset_pseudo),
            opt_e(r.largest_pseudo),
            opt_e(ratio),
            opt_e(factor),
        ));
    }
    out
}

pub fn conditions_sweep_table(hash: &str, rows: &[(f64, ConditionReport)]) -> String {
    let mut out = String::new();
    out.push_str("# schema conditions-sweep/v1\n");
    out.push_str(&format!("# scenario {hash}\n"));
    out.push_str(
        "offset\talpha_max\tlambda_max_curvature\tc1_margin\tc1_holds\tc2_bound\tc3_bound\n",
    );
    for (offset, rep) in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e(*offset),
            e(rep.alpha_max),
            e(rep.lambda_max_curvature),
            e(rep.c1_margin),
            rep.c1_holds,
            e(rep.c2_bound),
            e(rep.c3_bound),
        ));
    }
    out
}

/// The single-design condition report with the scenario hash inserted
/// after the schema line.
pub fn conditions_file(hash: &str, report: &ConditionReport) -> String {
    let table = report.to_table();
    let (schema_line, rest) = table.split_once('\n').expect("report starts with schema line");
    format!("{schema_line}\n# scenario {hash}\n{rest}")
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub schema: &'static str,
    pub scenario: ScenarioMeta<'a>,
    pub network: NetworkMeta<'a>,
    pub physics: &'static str,
    pub seed: u64,
    pub tolerances: &'a Tolerances,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditions: Option<ConditionsMeta>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<RunMeta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepMeta>,
    pub notes: &'a BTreeMap<String, String>,
    pub files: Vec<String>,
}

#[derive(Serialize)]
pub struct ScenarioMeta<'a> {
    pub name: &'a str,
    pub hash: &'a str,
    pub description: &'a str,
}

#[derive(Serialize)]
pub struct NetworkMeta<'a> {
    pub source: &'a str,
    pub hash: String,
    pub buses: usize,
    pub control_buses: Vec<u32>,
    pub load_multiplier: f64,
}

#[derive(Serialize)]
pub struct ConditionsMeta {
    pub alpha_max: f64,
    pub lambda_max_curvature: f64,
    pub c1_margin: f64,
    pub c1_holds: bool,
    pub c2_bound: f64,
    pub c3_bound: f64,
}

impl From<&ConditionReport> for ConditionsMeta {
    fn from(r: &ConditionReport) -> Self {
        ConditionsMeta {
            alpha_max: r.alpha_max,
            lambda_max_curvature: r.lambda_max_curvature,
            c1_margin: r.c1_margin,
            c1_holds: r.c1_holds,
            c2_bound: r.c2_bound,
            c3_bound: r.c3_bound,
        }
    }
}

#[derive(Serialize)]
pub struct RunMeta {
    pub law: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stepsize: Option<f64>,
    pub file: String,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub oscillating: bool,
    pub final_objective: f64,
}

#[derive(Serialize)]
pub struct SweepMeta {
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub law: Option<&'static str>,
    pub file: String,
    pub points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged_points: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub largest_stable: Option<f64>,
}

fn base_meta<'a>(
    loaded: &'a LoadedScenario,
    net_text_hash: String,
    n_buses: usize,
    control: &[BusId],
    physics: &'static str,
    seed: u64,
) -> Manifest<'a> {
    Manifest {
        schema: MANIFEST_SCHEMA,
        scenario: ScenarioMeta {
            name: &loaded.name,
            hash: &loaded.hash,
            description: loaded.scenario.description.trim(),
        },
        network: NetworkMeta {
            source: &loaded.scenario.network.source,
            hash: net_text_hash,
            buses: n_buses,
            control_buses: control.iter().map(|b| b.0).collect(),
            load_multiplier: loaded.scenario.network.load_multiplier,
        },
        physics,
        seed,
        tolerances: &loaded.scenario.tolerances,
        conditions: None,
        runs: Vec::new(),
        sweep: None,
        notes: &loaded.scenario.notes,
        files: Vec::new(),
    }
}

/// File name per run: `trajectory-<law>.tsv`, suffixed with the run
/// index when one law appears more than once.
fn run_file_names(outcomes: &[RunOutcome]) -> Vec<String> {
    outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let dup = outcomes.iter().enumerate().any(|(j, p)| j != i && p.law == o.law);
            if dup {
                format!("trajectory-{}-{}.tsv", o.law.name(), i + 1)
            } else {
                format!("trajectory-{}.tsv", o.law.name())
            }
        })
        .collect()
}

/// Renders every artifact of a `run` invocation as (name, content).
pub fn render_runs(
    loaded: &LoadedScenario,
    net_text_hash: String,
    n_buses: usize,
    results: &RunResults,
) -> (Vec<(String, String)>, String) {
    let mut files = Vec::new();
    let names = run_file_names(&results.outcomes);
    let mut manifest = base_meta(
        loaded,
        net_text_hash,
        n_buses,
        &results.control_buses,
        results.physics.name(),
        results.seed,
    );
    manifest.conditions = Some((&results.report).into());
    for (o, name) in results.outcomes.iter().zip(&names) {
        files.push((
            name.clone(),
            trajectory_table(&loaded.hash, o.law.name(), o.stepsize, &results.control_buses, &o.traj),
        ));
        manifest.runs.push(RunMeta {
            law: o.law.name(),
            stepsize: o.stepsize,
            file: name.clone(),
            converged: o.traj.converged_at.is_some(),
            steps: o.traj.steps_to_converge(),
            oscillating: o.traj.oscillating,
            final_objective: o.traj.final_objective(),
        });
    }
    files.push(("conditions.tsv".to_owned(), conditions_file(&loaded.hash, &results.report)));
    manifest.files = files.iter().map(|(n, _)| n.clone()).collect();
    manifest.files.push("manifest.json".to_owned());
    let json = manifest_json(&manifest);
    files.push(("manifest.json".to_owned(), json.clone()));
    (files, json)
}

/// Renders every artifact of a `sweep` invocation as (name, content).
pub fn render_sweep(
    loaded: &LoadedScenario,
    net_text_hash: String,
    n_buses: usize,
    control: &[BusId],
    physics: &'static str,
    seed: u64,
    results: &SweepResults,
) -> (Vec<(String, String)>, String) {
    let mut manifest = base_meta(loaded, net_text_hash, n_buses, control, physics, seed);
    let (file_name, content, meta) = match results {
        SweepResults::Stepsize { law, report, points } => {
            manifest.conditions = Some(report.into());
            let name = format!("sweep-{}.tsv", law.name());
            let meta = SweepMeta {
                kind: results.kind_name(),
                law: Some(law.name()),
                file: name.clone(),
                points: points.len(),
                converged_points: Some(points.iter().filter(|p| p.converged).count()),
                largest_stable: largest_stable(points),
            };
            (name, sweep_table(&loaded.hash, law.name(), points), meta)
        }
        SweepResults::Threshold(rows) => {
            let name = "threshold-range.tsv".to_owned();
            let meta = SweepMeta {
                kind: results.kind_name(),
                law: None,
                file: name.clone(),
                points: rows.len(),
                converged_points: None,
                largest_stable: None,
            };
            (name, threshold_table(&loaded.hash, rows), meta)
        }
        SweepResults::Conditions(rows) => {
            let name = "conditions-sweep.tsv".to_owned();
            let meta = SweepMeta {
                kind: results.kind_name(),
                law: None,
                file: name.clone(),
                points: rows.len(),
                converged_points: None,
                largest_stable: None,
            };
            (name, conditions_sweep_table(&loaded.hash, rows), meta)
        }
    };
    manifest.sweep = Some(meta);
    manifest.files = vec![file_name.clone(), "manifest.json".to_owned()];
    let json = manifest_json(&manifest);
    let files = vec![(file_name, content), ("manifest.json".to_owned(), json.clone())];
    (files, json)
}

fn manifest_json(m: &Manifest) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("manifest serializes");
    s.push('\n');
    s
}

pub fn write_files(dir: &Path, files: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    for (name, content) in files {
        let path = dir.join(name);
        fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
