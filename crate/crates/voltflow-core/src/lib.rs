//! Simulation and analysis of inverter-based local volt/var control on
//! radial distribution feeders.
//!
//! The crate is organised in dependency order:
//!
//! * [`netmodel`] — feeder topology, per-unit conversion, and the path
//!   resistance/reactance matrices of the linearized grid model.
//! * [`powerflow`] — a linearized voltage model and a nonlinear
//!   branch-flow solver (backward/forward sweep), plus error metrics
//!   between the two.
//! * [`control`] — piecewise-linear volt/var droop curves with deadband
//!   and saturation, their inverses, and the convex cost they induce.
//! * [`dynamics`] — closed-loop discrete-time simulation of three local
//!   control laws (droop, projected gradient, pseudo-gradient) against
//!   either physics model, with convergence and oscillation detection.
//! * [`analysis`] — the aggregate objective, spectral stability
//!   conditions and stepsize bounds, equilibrium solving, and stepsize
//!   sweeps.
//!
//! The bundled 42-bus Southern California Edison feeder used by the
//! reference experiments is available through [`datasets`].

pub mod analysis;
pub mod control;
pub mod datasets;
pub mod dynamics;
pub mod netmodel;
pub mod powerflow;

pub use analysis::{check_conditions, objective, ConditionReport, EquilibriumResult};
pub use control::{ControlFunction, ControllerSet, DroopCurve};
pub use dynamics::{simulate, ClosedLoop, ControlLaw, PhysicsMode, SimOptions, Trajectory};
pub use netmodel::{Bus, BusId, FeederNetwork, ImpedanceMatrices, Line, PerUnitBase};
pub use powerflow::{InjectionProfile, LinearModel, PowerFlowSolution};
