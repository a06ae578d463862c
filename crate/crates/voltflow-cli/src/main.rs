//! Command-line front end: scenario-driven volt/var experiments on
//! radial feeders.

mod exec;
mod output;
mod scenario;

use std::env;
use std::path::PathBuf;
use std::process;

use anyhow::anyhow;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use voltflow_core::analysis::SweepPoint;

use exec::{ExecError, RunResults, SweepResults};
use scenario::{CurveSpec, GridSpec, LoadedScenario, PhysicsChoice, Q0Spec};

#[derive(Parser)]
#[command(
    name = "voltflow",
    version,
    about = "Local volt/var control experiments on radial distribution feeders",
    after_help = "Output tables are tab-separated with a `# schema` and `# scenario <hash>` \
                  header; a manifest.json accompanies every run. The default output directory \
                  is $VOLTFLOW_OUT (or ./voltflow-out) plus the scenario name."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario's closed-loop simulations and write trajectory tables
    Run {
        /// Scenario file path, or the name of a bundled scenario
        scenario: String,
        /// Output directory (default: $VOLTFLOW_OUT or ./voltflow-out, plus the scenario name)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the scenario's physics model
        #[arg(long, value_enum)]
        physics: Option<PhysicsChoice>,
        /// Seed for randomized initial setpoints
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads for parallel sections (default: all processors)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Evaluate the stability conditions for a network, no simulation
    Check {
        /// Network file path, or builtin:<name>
        network: String,
        /// Nominal voltage the curves regulate toward [p.u.]
        #[arg(long, default_value_t = 1.0)]
        v_nom: f64,
        /// Total deadband width around nominal [p.u.]
        #[arg(long, default_value_t = 0.04)]
        deadband: f64,
        /// Saturation threshold distance from nominal [p.u.]
        #[arg(long, default_value_t = 0.08)]
        threshold_offset: f64,
    },
    /// Run a scenario's parameter sweep and write the sweep table
    Sweep {
        /// Scenario file path, or the name of a bundled scenario
        scenario: String,
        /// Output directory (default: $VOLTFLOW_OUT or ./voltflow-out, plus the scenario name)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the scenario's physics model
        #[arg(long, value_enum)]
        physics: Option<PhysicsChoice>,
        /// Seed for randomized initial setpoints
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads for sweep points (default: all processors)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// List the bundled scenarios
    List,
    /// Show a bundled scenario's description and parameters
    Describe {
        /// Bundled scenario name (unique prefixes accepted)
        name: String,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            process::exit(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(ExecError::Config(e)) => {
            eprintln!("error: {e:#}");
            process::exit(1);
        }
        Err(ExecError::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            process::exit(2);
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), ExecError> {
    match cli.cmd {
        Cmd::Run { scenario, out, physics, seed, jobs } => {
            run_cmd(&scenario, out, physics, seed, jobs)
        }
        Cmd::Sweep { scenario, out, physics, seed, jobs } => {
            sweep_cmd(&scenario, out, physics, seed, jobs)
        }
        Cmd::Check { network, v_nom, deadband, threshold_offset } => {
            check_cmd(&network, v_nom, deadband, threshold_offset)
        }
        Cmd::List => {
            list_cmd();
            Ok(())
        }
        Cmd::Describe { name } => describe_cmd(&name),
    }
}

fn init_jobs(jobs: Option<usize>) {
    if let Some(n) = jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn out_dir(flag: Option<PathBuf>, scenario_name: &str) -> PathBuf {
    match flag {
        Some(dir) => dir,
        None => env::var_os("VOLTFLOW_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("voltflow-out"))
            .join(scenario_name),
    }
}

fn load(arg: &str) -> Result<(LoadedScenario, voltflow_core::netmodel::FeederNetwork, String), ExecError> {
    let loaded = scenario::resolve(arg).map_err(ExecError::Config)?;
    let (net, net_text) = scenario::load_network_source(
        &loaded.scenario.network.source,
        loaded.dir.as_deref(),
        loaded.scenario.network.power_factor_default,
    )
    .map_err(ExecError::Config)?;
    let net_hash = scenario::sha256_hex(net_text.as_bytes());
    Ok((loaded, net, net_hash))
}

fn run_cmd(
    arg: &str,
    out: Option<PathBuf>,
    physics: Option<PhysicsChoice>,
    seed: u64,
    jobs: Option<usize>,
) -> Result<(), ExecError> {
    let (loaded, net, net_hash) = load(arg)?;
    if loaded.scenario.sweep.is_some() {
        return Err(ExecError::config(anyhow!(
            "scenario `{}` defines a sweep; use `voltflow sweep`",
            loaded.name
        )));
    }
    init_jobs(jobs);
    let results = exec::execute_runs(&loaded, &net, physics, seed)?;
    let (files, _) = output::render_runs(&loaded, net_hash, net.n(), &results);
    let dir = out_dir(out, &loaded.name);
    output::write_files(&dir, &files).map_err(ExecError::Config)?;
    print_run_summary(&loaded, &results, &files, &dir);
    Ok(())
}

fn sweep_cmd(
    arg: &str,
    out: Option<PathBuf>,
    physics: Option<PhysicsChoice>,
    seed: u64,
    jobs: Option<usize>,
) -> Result<(), ExecError> {
    let (loaded, net, net_hash) = load(arg)?;
    if loaded.scenario.sweep.is_none() {
        return Err(ExecError::config(anyhow!(
            "scenario `{}` defines [[runs]]; use `voltflow run`",
            loaded.name
        )));
    }
    init_jobs(jobs);
    let results = exec::execute_sweep(&loaded, &net, physics, seed)?;
    let physics_name = physics
        .or(loaded.scenario.physics)
        .unwrap_or(PhysicsChoice::Nonlinear)
        .name();
    let (files, _) = output::render_sweep(
        &loaded,
        net_hash,
        net.n(),
        &net.control_buses(),
        physics_name,
        seed,
        &results,
    );
    let dir = out_dir(out, &loaded.name);
    output::write_files(&dir, &files).map_err(ExecError::Config)?;
    print_sweep_summary(&loaded, &results, &files, &dir);
    Ok(())
}

fn check_cmd(network: &str, v_nom: f64, deadband: f64, threshold_offset: f64) -> Result<(), ExecError> {
    let (net, text) = scenario::load_network_source(network, None, None).map_err(ExecError::Config)?;
    let spec = CurveSpec {
        v_nom,
        deadband,
        threshold_offset: Some(threshold_offset),
        alpha: None,
    };
    let ctrls = exec::build_controllers(&net, &spec, None).map_err(ExecError::Config)?;
    let report = exec::conditions_for(&net, &ctrls)?;
    print!("# network {}\n{}", scenario::sha256_hex(text.as_bytes()), report.to_table());
    Ok(())
}

fn list_cmd() {
    for (name, text) in scenario::BUNDLED {
        let summary = toml::from_str::<toml::Table>(text)
            .ok()
            .and_then(|t| t.get("description")?.as_str().map(str::to_owned))
            .and_then(|d| d.trim().lines().next().map(str::to_owned))
            .unwrap_or_default();
        println!("{name}\t{summary}");
    }
}

fn grid_desc(g: &GridSpec) -> String {
    format!("{}..{} step {}", g.start, g.stop, g.step)
}

fn describe_cmd(name: &str) -> Result<(), ExecError> {
    let (name, _text) = scenario::find_bundled(name)
        .map_err(ExecError::Config)?
        .ok_or_else(|| {
            ExecError::config(anyhow!("unknown bundled scenario `{name}`; see `voltflow list`"))
        })?;
    let loaded = scenario::resolve(name)?;
    let sc = &loaded.scenario;
    println!("{name}  (scenario hash {})", loaded.hash);
    println!();
    println!("{}", sc.description.trim());
    println!();
    println!(
        "network: {} (load multiplier {})",
        sc.network.source, sc.network.load_multiplier
    );
    if let Some(p) = sc.physics {
        println!("physics: {}", p.name());
    }
    let c = &sc.curves;
    let design = match (c.threshold_offset, c.alpha) {
        (Some(o), _) => format!("threshold_offset {o}"),
        (_, Some(a)) => format!("alpha {a}"),
        _ => "design swept per offset".to_owned(),
    };
    println!("curves: v_nom {}, deadband {}, {design}", c.v_nom, c.deadband);
    let t = &sc.tolerances;
    println!(
        "tolerances: conv_tol {:e}, max_steps {}, flow_tol {:e}",
        t.conv_tol, t.max_steps, t.flow_tol
    );
    for run in &sc.runs {
        let step = match (run.stepsize, run.stepsize_factor) {
            (Some(s), _) => format!(", stepsize {s}"),
            (_, Some(f)) => format!(", stepsize_factor {f}"),
            _ => String::new(),
        };
        println!("run: {}{step}", run.law.name());
    }
    if let Some(sweep) = &sc.sweep {
        let mut parts = Vec::new();
        if let Some(law) = sweep.law {
            parts.push(format!("law {}", law.name()));
        }
        if let Some(g) = &sweep.gamma {
            parts.push(format!("gamma {}", grid_desc(g)));
        }
        if let Some(g) = &sweep.offsets {
            parts.push(format!("offsets {}", grid_desc(g)));
        }
        if let Some(g) = &sweep.gamma_gradient {
            parts.push(format!("gamma_gradient {}", grid_desc(g)));
        }
        if let Some(g) = &sweep.gamma_pseudo {
            parts.push(format!("gamma_pseudo {}", grid_desc(g)));
        }
        let kind = match sweep.kind {
            scenario::SweepKind::Stepsize => "stepsize",
            scenario::SweepKind::ThresholdRange => "threshold-range",
            scenario::SweepKind::Conditions => "conditions",
        };
        println!("sweep: {kind}; {}", parts.join(", "));
    }
    for (key, value) in &sc.notes {
        println!("note {key}: {value}");
    }
    Ok(())
}

fn print_run_summary(
    loaded: &LoadedScenario,
    results: &RunResults,
    files: &[(String, String)],
    dir: &std::path::Path,
) {
    let r = &results.report;
    println!("scenario {} ({})", loaded.name, &loaded.hash[..12]);
    println!(
        "network {}: {} control buses, physics {}, seed {}{}",
        loaded.scenario.network.source,
        results.control_buses.len(),
        results.physics.name(),
        results.seed,
        match &loaded.scenario.init.q0 {
            Q0Spec::Named(n) => format!(", q0 {n}"),
            Q0Spec::Values(_) => ", q0 explicit".to_owned(),
        }
    );
    println!(
        "conditions: alpha_max {:.4e}, c1 margin {:+.4e} ({}), c2 {:.4e}, c3 {:.4e}",
        r.alpha_max,
        r.c1_margin,
        if r.c1_holds { "holds" } else { "VIOLATED" },
        r.c2_bound,
        r.c3_bound
    );
    for o in &results.outcomes {
        let step = o.stepsize.map(|s| format!(" stepsize {s:.4e}")).unwrap_or_default();
        let status = match o.traj.steps_to_converge() {
            Some(n) => format!("converged in {n} steps"),
            None if o.traj.oscillating => "oscillating, did not converge".to_owned(),
            None => format!("did not converge in {} steps", o.traj.states.len() - 1),
        };
        println!(
            "run {}{step}: {status}, F = {:.6e}",
            o.law.name(),
            o.traj.final_objective()
        );
    }
    println!("wrote {} files to {}", files.len(), dir.display());
}

fn first_dirty(points: &[SweepPoint]) -> Option<f64> {
    points
        .iter()
        .find(|p| !p.converged || p.overshoot.is_some())
        .map(|p| p.gamma)
}

fn print_sweep_summary(
    loaded: &LoadedScenario,
    results: &SweepResults,
    files: &[(String, String)],
    dir: &std::path::Path,
) {
    println!("scenario {} ({})", loaded.name, &loaded.hash[..12]);
    match results {
        SweepResults::Stepsize { law, report, points } => {
            println!(
                "stepsize sweep, {} law, {} points; c2 {:.4e}, c3 {:.4e}",
                law.name(),
                points.len(),
                report.c2_bound,
                report.c3_bound
            );
            let conv = points.iter().filter(|p| p.converged).count();
            println!(
                "converged {conv}/{}, ringing onset {}",
                points.len(),
                first_dirty(points).map(|g| format!("{g:.4}")).unwrap_or_else(|| "none".to_owned())
            );
            if let Some((best_steps, best_gamma)) = points
                .iter()
                .filter_map(|p| p.steps.map(|s| (s, p.gamma)))
                .min_by_key(|(s, _)| *s)
            {
                println!("fastest: {best_steps} steps at gamma {best_gamma:.4}");
            }
        }
        SweepResults::Threshold(rows) => {
            println!("threshold-range sweep, {} offsets", rows.len());
            for row in rows {
                let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".to_owned());
                println!(
                    "offset {:.2}: alpha_max {:.3e}, largest clean gamma g={} p={}",
                    row.offset,
                    row.report.alpha_max,
                    opt(row.largest_gradient),
                    opt(row.largest_pseudo)
                );
            }
        }
        SweepResults::Conditions(rows) => {
            println!("conditions sweep, {} offsets", rows.len());
            for (offset, rep) in rows {
                println!(
                    "offset {:.2}: alpha_max {:.3e}, c1 margin {:+.3e} ({}), c2 {:.3e}, c3 {:.3e}",
                    offset,
                    rep.alpha_max,
                    rep.c1_margin,
                    if rep.c1_holds { "holds" } else { "VIOLATED" },
                    rep.c2_bound,
                    rep.c3_bound
                );
            }
        }
    }
    println!("wrote {} files to {}", files.len(), dir.display());
}
