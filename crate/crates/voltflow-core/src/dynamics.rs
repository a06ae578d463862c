//! Closed-loop discrete-time simulation of local volt/var control.
//!
//! Three update laws act on the control buses:
//!
//! * droop: `q(t+1) = f(v(t))` — each inverter jumps straight to its
//!   curve value;
//! * gradient: a projected subgradient step on the aggregate objective,
//!   using only the locally measured voltage;
//! * pseudo-gradient: a convex combination `(1-γ) q + γ f(v)`, clamped
//!   to the limits, which recovers the droop law at `γ = 1`.
//!
//! Voltages come from either the linearized model (exact for the
//! analysis results) or the nonlinear branch-flow solver. The simulator
//! records the objective along the trajectory and flags convergence
//! (small steps over a window) or sustained oscillation (steps that
//! stay large while the best objective stops improving).

use nalgebra::DVector;
use thiserror::Error;

use crate::analysis;
use crate::control::{ControllerSet, CurveError};
use crate::netmodel::{FeederNetwork, NetworkError};
use crate::powerflow::{
    build_linear_model, solve_distflow, FlowError, FlowOptions, InjectionProfile,
    ReducedLinearModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhysicsMode {
    Linear,
    Nonlinear,
}

/// Control law selector; the incremental laws carry their stepsize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlLaw {
    Droop,
    Gradient { stepsize: f64 },
    PseudoGradient { stepsize: f64 },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("stepsize must be positive and finite, got {0}")]
    BadStepsize(f64),
    #[error("physics solver failed at step {step}: {source}")]
    Physics {
        step: usize,
        #[source]
        source: FlowError,
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Analysis(Box<crate::analysis::AnalysisError>),
}

/// One step of the droop law: evaluate every curve at its bus voltage.
pub fn step_droop(ctrls: &ControllerSet, v: &DVector<f64>) -> DVector<f64> {
    ctrls.evaluate_all(v)
}

/// One projected subgradient step with the locally measured voltages.
pub fn step_gradient(
    ctrls: &ControllerSet,
    q: &DVector<f64>,
    v: &DVector<f64>,
    stepsize: f64,
) -> DVector<f64> {
    let g = ctrls.subgradient_all(q, v);
    ctrls.project_all(&(q - stepsize * g))
}

/// One pseudo-gradient step: move a fraction of the way towards the
/// curve value, then clamp.
pub fn step_pseudo_gradient(
    ctrls: &ControllerSet,
    q: &DVector<f64>,
    v: &DVector<f64>,
    stepsize: f64,
) -> DVector<f64> {
    let target = ctrls.evaluate_all(v);
    let mixed = (1.0 - stepsize) * q + stepsize * target;
    ctrls.project_all(&mixed)
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub max_steps: usize,
    pub conv_tol: f64,
    /// Consecutive small steps required before declaring convergence.
    pub conv_window: usize,
    /// Steps ignored before oscillation detection may trigger.
    pub osc_transient: usize,
    /// Steps without relative shrinkage of the update norm that, combined
    /// with large updates and a non-monotone objective, count as
    /// sustained oscillation.
    pub osc_stall: usize,
    /// Update norms above `osc_factor * conv_tol` count as large.
    pub osc_factor: f64,
}

/// Relative shrinkage of the update norm below which a step does not
/// count as progress for oscillation detection. Any geometrically
/// converging run clears this over an `osc_stall` window; a limit cycle
/// revisits the same norms and cannot.
const OSC_REL_IMPROVE: f64 = 1e-3;

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            max_steps: 500,
            conv_tol: 1e-8,
            conv_window: 5,
            osc_transient: 20,
            osc_stall: 50,
            osc_factor: 10.0,
        }
    }
}

/// State of the control buses at one time step.
#[derive(Debug, Clone)]
pub struct ControlState {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

/// Recorded closed-loop run. `states[t]` holds the setpoints applied at
/// step `t` and the voltages they produce; `objective[t]` evaluates the
/// aggregate objective at `states[t].q` with the linearized model.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<ControlState>,
    pub objective: Vec<f64>,
    pub deltas: Vec<f64>,
    pub converged_at: Option<usize>,
    pub oscillating: bool,
}

impl Trajectory {
    /// Index of the first state of the quiet window, when converged.
    pub fn steps_to_converge(&self) -> Option<usize> {
        self.converged_at
    }

    pub fn final_state(&self) -> &ControlState {
        self.states.last().expect("trajectory holds at least the initial state")
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective.last().expect("trajectory holds at least the initial state")
    }

    /// First step whose update direction reverses against the previous
    /// one (negative inner product), i.e. the onset of overshoot. `None`
    /// for trajectories that approach their end point from one side.
    pub fn first_overshoot(&self) -> Option<usize> {
        self.states.windows(3).position(|w| {
            let d1 = &w[1].q - &w[0].q;
            let d2 = &w[2].q - &w[1].q;
            d1.dot(&d2) < 0.0
        })
    }
}

/// A feeder, its uncontrolled injections, and the inverter curves,
/// bound together with a choice of physics.
///
/// The reduced linear model is built once here; under linear physics it
/// is the voltage map itself, under nonlinear physics it still provides
/// the objective and the stability analysis quantities.
#[derive(Debug, Clone)]
pub struct ClosedLoop<'a> {
    net: &'a FeederNetwork,
    ctrls: &'a ControllerSet,
    physics: PhysicsMode,
    flow_opts: FlowOptions,
    base_inj: InjectionProfile,
    reduced: ReducedLinearModel,
    ctrl_indices: Vec<usize>,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(
        net: &'a FeederNetwork,
        ctrls: &'a ControllerSet,
        base_inj: InjectionProfile,
        physics: PhysicsMode,
        flow_opts: FlowOptions,
    ) -> Result<Self, SimError> {
        let model = build_linear_model(net, &base_inj)?;
        let reduced = model.reduced(ctrls.buses())?;
        let ctrl_indices = ctrls
            .buses()
            .iter()
            .map(|&b| net.index_of(b))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { net, ctrls, physics, flow_opts, base_inj, reduced, ctrl_indices })
    }

    pub fn controller(&self) -> &ControllerSet {
        self.ctrls
    }

    pub fn network(&self) -> &FeederNetwork {
        self.net
    }

    pub fn physics(&self) -> PhysicsMode {
        self.physics
    }

    pub fn reduced(&self) -> &ReducedLinearModel {
        &self.reduced
    }

    pub fn base_injections(&self) -> &InjectionProfile {
        &self.base_inj
    }

    /// Control-bus voltages produced by the chosen physics for the
    /// given setpoints.
    pub fn voltages(&self, q: &DVector<f64>) -> Result<DVector<f64>, SimError> {
        if q.len() != self.ctrls.len() {
            return Err(SimError::Dimension { expected: self.ctrls.len(), got: q.len() });
        }
        match self.physics {
            PhysicsMode::Linear => Ok(self.reduced.voltage(q)?),
            PhysicsMode::Nonlinear => {
                let inj = self.base_inj.with_added_q(&self.ctrl_indices, q);
                let sol = solve_distflow(self.net, &inj, &self.flow_opts)?;
                Ok(DVector::from_iterator(
                    self.ctrl_indices.len(),
                    self.ctrl_indices.iter().map(|&i| sol.v[i]),
                ))
            }
        }
    }

    /// Aggregate objective at `q`, always with the linearized model.
    pub fn objective(&self, q: &DVector<f64>) -> Result<f64, SimError> {
        analysis::objective(self.ctrls, &self.reduced.x_eff, &self.reduced.v_tilde, q)
            .map_err(|e| SimError::Analysis(Box::new(e)))
    }
}

/// Runs a control law from `q0` (projected onto the limits) until it
/// converges, oscillates, or `max_steps` is exhausted.
pub fn simulate(
    loop_: &ClosedLoop,
    law: ControlLaw,
    q0: &DVector<f64>,
    opts: &SimOptions,
) -> Result<Trajectory, SimError> {
    let m = loop_.controller().len();
    if q0.len() != m {
        return Err(SimError::Dimension { expected: m, got: q0.len() });
    }
    match law {
        ControlLaw::Gradient { stepsize } | ControlLaw::PseudoGradient { stepsize } => {
            if !(stepsize > 0.0) || !stepsize.is_finite() {
                return Err(SimError::BadStepsize(stepsize));
            }
        }
        ControlLaw::Droop => {}
    }

    let mut q = loop_.controller().project_all(q0);
    let mut v = loop_
        .voltages(&q)
        .map_err(|e| physics_error(e, 0))?;

    let mut states = vec![ControlState { q: q.clone(), v: v.clone() }];
    let mut objective = vec![loop_.objective(&q)?];
    let mut deltas = Vec::new();

    let mut best_objective = objective[0];
    let mut objective_non_monotone = false;
    let mut best_delta = f64::INFINITY;
    let mut best_delta_step = 0usize;
    let mut quiet_streak = 0usize;
    let mut converged_at = None;
    let mut oscillating = false;

    for t in 0..opts.max_steps {
        let q_next = match law {
            ControlLaw::Droop => step_droop(loop_.controller(), &v),
            ControlLaw::Gradient { stepsize } => step_gradient(loop_.controller(), &q, &v, stepsize),
            ControlLaw::PseudoGradient { stepsize } => {
                step_pseudo_gradient(loop_.controller(), &q, &v, stepsize)
            }
        };
        let delta = (&q_next - &q).amax();
        let v_next = loop_
            .voltages(&q_next)
            .map_err(|e| physics_error(e, t + 1))?;

        q = q_next;
        v = v_next;
        let f = loop_.objective(&q)?;
        states.push(ControlState { q: q.clone(), v: v.clone() });
        objective.push(f);
        deltas.push(delta);
        let step = t + 1;

        if f < best_objective {
            best_objective = f;
        } else if step >= opts.osc_transient {
            objective_non_monotone = true;
        }
        if delta < best_delta * (1.0 - OSC_REL_IMPROVE) {
            best_delta = delta;
            best_delta_step = step;
        }

        if delta < opts.conv_tol {
            quiet_streak += 1;
            if quiet_streak >= opts.conv_window {
                converged_at = Some(step - quiet_streak);
                break;
            }
        } else {
            quiet_streak = 0;
            if objective_non_monotone
                && step >= opts.osc_transient
                && delta > opts.osc_factor * opts.conv_tol
                && step.saturating_sub(best_delta_step) >= opts.osc_stall
            {
                oscillating = true;
                break;
            }
        }
    }

    Ok(Trajectory { states, objective, deltas, converged_at, oscillating })
}

fn physics_error(e: SimError, step: usize) -> SimError {
    match e {
        SimError::Flow(source) => SimError::Physics { step, source },
        other => other,
    }
}
