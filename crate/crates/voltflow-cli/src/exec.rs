//! Builds the experiment objects a scenario describes and runs them.

use anyhow::{anyhow, bail, Result};
use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use voltflow_core::analysis::{check_conditions, sweep_stepsize, ConditionReport, SweepLaw, SweepPoint};
use voltflow_core::control::{ControllerSet, DroopCurve};
use voltflow_core::dynamics::{simulate, ClosedLoop, ControlLaw, SimOptions, Trajectory};
use voltflow_core::netmodel::{BusId, FeederNetwork};
use voltflow_core::powerflow::{FlowOptions, InjectionProfile};

use crate::scenario::{
    CurveSpec, LawChoice, LoadedScenario, PhysicsChoice, Q0Spec, SweepKind, SweepLawChoice,
    Tolerances,
};

/// Failure classes mapped to distinct exit codes by the front end.
pub enum ExecError {
    /// Bad input: scenario, network, or flags.
    Config(anyhow::Error),
    /// The math gave up: solver divergence, eigensolver exhaustion.
    Numerical(anyhow::Error),
}

impl ExecError {
    pub fn config(e: impl Into<anyhow::Error>) -> Self {
        ExecError::Config(e.into())
    }

    pub fn numerical(e: impl Into<anyhow::Error>) -> Self {
        ExecError::Numerical(e.into())
    }
}

impl From<anyhow::Error> for ExecError {
    fn from(e: anyhow::Error) -> Self {
        ExecError::Config(e)
    }
}

pub struct RunOutcome {
    pub law: LawChoice,
    pub stepsize: Option<f64>,
    pub traj: Trajectory,
}

pub struct RunResults {
    pub physics: PhysicsChoice,
    pub seed: u64,
    pub control_buses: Vec<BusId>,
    pub report: ConditionReport,
    pub outcomes: Vec<RunOutcome>,
}

pub struct ThresholdRow {
    pub offset: f64,
    pub report: ConditionReport,
    /// First ringing/non-converging stepsize per law, and the largest
    /// clean one below it.
    pub onset_gradient: Option<f64>,
    pub largest_gradient: Option<f64>,
    pub onset_pseudo: Option<f64>,
    pub largest_pseudo: Option<f64>,
}

pub enum SweepResults {
    Stepsize {
        law: SweepLawChoice,
        report: ConditionReport,
        points: Vec<SweepPoint>,
    },
    Threshold(Vec<ThresholdRow>),
    Conditions(Vec<(f64, ConditionReport)>),
}

impl SweepResults {
    pub fn kind_name(&self) -> &'static str {
        match self {
            SweepResults::Stepsize { .. } => "stepsize",
            SweepResults::Threshold(_) => "threshold-range",
            SweepResults::Conditions(_) => "conditions",
        }
    }
}

/// Curves for every controllable bus per the scenario's [curves] table;
/// `offset_override` substitutes the threshold offset (sweep use).
pub fn build_controllers(
    net: &FeederNetwork,
    c: &CurveSpec,
    offset_override: Option<f64>,
) -> Result<ControllerSet> {
    let control = net.control_buses();
    if control.is_empty() {
        bail!("network has no controllable buses (no inverter entries)");
    }
    if let Some(offset) = offset_override.or(c.threshold_offset) {
        return ControllerSet::threshold_design(net, c.v_nom, c.deadband, offset)
            .map_err(|e| anyhow!("curve design: {e}"));
    }
    let alpha = c.alpha.expect("validation guarantees threshold_offset or alpha");
    let mut curves = Vec::with_capacity(control.len());
    for &b in &control {
        let (lo, hi) = net
            .bus(b)
            .map_err(|e| anyhow!("curve design: {e}"))?
            .q_limits
            .expect("control bus has limits");
        curves.push(
            DroopCurve::new(alpha, c.v_nom, c.deadband, lo, hi)
                .map_err(|e| anyhow!("curve design at bus {b}: {e}"))?,
        );
    }
    ControllerSet::new(control, curves).map_err(|e| anyhow!("curve design: {e}"))
}

pub fn conditions_for(net: &FeederNetwork, ctrls: &ControllerSet) -> Result<ConditionReport, ExecError> {
    let im = net.build_impedance_matrices();
    let x_eff = im.x_effective(ctrls.buses()).map_err(ExecError::config)?;
    check_conditions(ctrls, &x_eff).map_err(ExecError::numerical)
}

fn sim_options(t: &Tolerances) -> SimOptions {
    let mut opts = SimOptions::default();
    opts.max_steps = t.max_steps;
    opts.conv_tol = t.conv_tol;
    opts.conv_window = t.conv_window;
    opts
}

fn initial_q(spec: &Q0Spec, ctrls: &ControllerSet, seed: u64) -> Result<DVector<f64>> {
    match spec {
        Q0Spec::Named(n) if n == "zero" => Ok(DVector::zeros(ctrls.len())),
        Q0Spec::Named(_) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(DVector::from_iterator(
                ctrls.len(),
                (0..ctrls.len()).map(|i| {
                    let (lo, hi) = ctrls.curve(i).limits();
                    rng.random_range(lo..hi)
                }),
            ))
        }
        Q0Spec::Values(v) => {
            if v.len() != ctrls.len() {
                bail!("init.q0 has {} values but the network has {} controls", v.len(), ctrls.len());
            }
            Ok(DVector::from_vec(v.clone()))
        }
    }
}

fn resolve_stepsize(run: &crate::scenario::RunSpec, report: &ConditionReport) -> Option<f64> {
    match run.law {
        LawChoice::Droop => None,
        LawChoice::Gradient => {
            Some(run.stepsize.unwrap_or_else(|| {
                run.stepsize_factor.expect("validated") * report.c2_bound
            }))
        }
        LawChoice::PseudoGradient => {
            Some(run.stepsize.unwrap_or_else(|| {
                run.stepsize_factor.expect("validated") * report.c3_bound
            }))
        }
    }
}

fn control_law(law: LawChoice, stepsize: Option<f64>) -> ControlLaw {
    match law {
        LawChoice::Droop => ControlLaw::Droop,
        LawChoice::Gradient => ControlLaw::Gradient { stepsize: stepsize.expect("resolved") },
        LawChoice::PseudoGradient => {
            ControlLaw::PseudoGradient { stepsize: stepsize.expect("resolved") }
        }
    }
}

pub fn execute_runs(
    loaded: &LoadedScenario,
    net: &FeederNetwork,
    physics_override: Option<PhysicsChoice>,
    seed: u64,
) -> Result<RunResults, ExecError> {
    let sc = &loaded.scenario;
    let physics = physics_override.or(sc.physics).unwrap_or(PhysicsChoice::Nonlinear);
    let ctrls = build_controllers(net, &sc.curves, None)?;
    let report = conditions_for(net, &ctrls)?;
    let inj = InjectionProfile::from_network(net, sc.network.load_multiplier)
        .map_err(ExecError::config)?;
    let flow_opts = FlowOptions { tol: sc.tolerances.flow_tol, ..FlowOptions::default() };
    let lp = ClosedLoop::new(net, &ctrls, inj, physics.mode(), flow_opts)
        .map_err(ExecError::numerical)?;
    let q0 = initial_q(&sc.init.q0, &ctrls, seed)?;
    let opts = sim_options(&sc.tolerances);
    let mut outcomes = Vec::new();
    for run in &sc.runs {
        let stepsize = resolve_stepsize(run, &report);
        let traj = simulate(&lp, control_law(run.law, stepsize), &q0, &opts)
            .map_err(|e| ExecError::numerical(anyhow!("{} run: {e}", run.law.name())))?;
        outcomes.push(RunOutcome { law: run.law, stepsize, traj });
    }
    Ok(RunResults {
        physics,
        seed,
        control_buses: ctrls.buses().to_vec(),
        report,
        outcomes,
    })
}

/// Walks `gammas` in order and returns (first stepsize whose run fails
/// to converge or rings on the way down, largest clean stepsize before
/// it). Simulation errors count as onsets: a stepsize that breaks the
/// solver is certainly past the stable range.
fn ringing_onset(
    lp: &ClosedLoop,
    gammas: &[f64],
    law: SweepLawChoice,
    q0: &DVector<f64>,
    opts: &SimOptions,
) -> (Option<f64>, Option<f64>) {
    let mut largest = None;
    for &g in gammas {
        let law = match law {
            SweepLawChoice::Gradient => ControlLaw::Gradient { stepsize: g },
            SweepLawChoice::PseudoGradient => ControlLaw::PseudoGradient { stepsize: g },
        };
        let clean = match simulate(lp, law, q0, opts) {
            Ok(traj) => traj.converged_at.is_some() && traj.first_overshoot().is_none(),
            Err(_) => false,
        };
        if !clean {
            return (Some(g), largest);
        }
        largest = Some(g);
    }
    (None, largest)
}

pub fn execute_sweep(
    loaded: &LoadedScenario,
    net: &FeederNetwork,
    physics_override: Option<PhysicsChoice>,
    seed: u64,
) -> Result<SweepResults, ExecError> {
    let sc = &loaded.scenario;
    let sweep = sc.sweep.as_ref().expect("caller checked");
    let physics = physics_override.or(sc.physics).unwrap_or(PhysicsChoice::Nonlinear);
    let opts = sim_options(&sc.tolerances);
    let flow_opts = FlowOptions { tol: sc.tolerances.flow_tol, ..FlowOptions::default() };
    match sweep.kind {
        SweepKind::Stepsize => {
            let law = sweep.law.expect("validated");
            let ctrls = build_controllers(net, &sc.curves, None)?;
            let report = conditions_for(net, &ctrls)?;
            let inj = InjectionProfile::from_network(net, sc.network.load_multiplier)
                .map_err(ExecError::config)?;
            let lp = ClosedLoop::new(net, &ctrls, inj, physics.mode(), flow_opts)
                .map_err(ExecError::numerical)?;
            let q0 = initial_q(&sc.init.q0, &ctrls, seed)?;
            let grid = sweep.gamma.as_ref().expect("validated").values();
            let core_law = match law {
                SweepLawChoice::Gradient => SweepLaw::Gradient,
                SweepLawChoice::PseudoGradient => SweepLaw::PseudoGradient,
            };
            let points = sweep_stepsize(&lp, core_law, &grid, &q0, &opts);
            Ok(SweepResults::Stepsize { law, report, points })
        }
        SweepKind::ThresholdRange => {
            let offsets = sweep.offsets.as_ref().expect("validated").values();
            let gg = sweep.gamma_gradient.as_ref().expect("validated").values();
            let gp = sweep.gamma_pseudo.as_ref().expect("validated").values();
            let inj = InjectionProfile::from_network(net, sc.network.load_multiplier)
                .map_err(ExecError::config)?;
            let rows = offsets
                .par_iter()
                .map(|&offset| {
                    let ctrls = build_controllers(net, &sc.curves, Some(offset))?;
                    let report = conditions_for(net, &ctrls).map_err(|e| match e {
                        ExecError::Config(e) | ExecError::Numerical(e) => e,
                    })?;
                    let lp = ClosedLoop::new(net, &ctrls, inj.clone(), physics.mode(), flow_opts)
                        .map_err(|e| anyhow!("offset {offset}: {e}"))?;
                    let q0 = initial_q(&sc.init.q0, &ctrls, seed)?;
                    let (onset_gradient, largest_gradient) =
                        ringing_onset(&lp, &gg, SweepLawChoice::Gradient, &q0, &opts);
                    let (onset_pseudo, largest_pseudo) =
                        ringing_onset(&lp, &gp, SweepLawChoice::PseudoGradient, &q0, &opts);
                    Ok(ThresholdRow {
                        offset,
                        report,
                        onset_gradient,
                        largest_gradient,
                        onset_pseudo,
                        largest_pseudo,
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(ExecError::Numerical)?;
            Ok(SweepResults::Threshold(rows))
        }
        SweepKind::Conditions => {
            let offsets = sweep.offsets.as_ref().expect("validated").values();
            let mut rows = Vec::new();
            for offset in offsets {
                let ctrls = build_controllers(net, &sc.curves, Some(offset))?;
                rows.push((offset, conditions_for(net, &ctrls)?));
            }
            Ok(SweepResults::Conditions(rows))
        }
    }
}
