//! Voltage physics: a linearized model built from the path matrices and
//! a nonlinear branch-flow solver (backward/forward sweep).
//!
//! The linear model predicts voltage magnitudes as `v = X q + v_tilde`,
//! where `q` holds controllable reactive injections and `v_tilde`
//! collects the slack voltage and the effect of all uncontrolled
//! injections. The nonlinear solver resolves the full branch-flow
//! equations of a radial feeder, tracking squared voltage magnitudes
//! internally and reporting magnitudes.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::netmodel::{effective_submatrix, BusId, FeederNetwork, NetworkError};

/// Net nodal injections (generation minus consumption) at non-slack
/// buses, in network bus order. Reactive control injections are added
/// on top of this profile per simulation step.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionProfile {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl InjectionProfile {
    /// Profile from the network's loads and generator operating points,
    /// with consumption scaled by `load_multiplier`.
    pub fn from_network(net: &FeederNetwork, load_multiplier: f64) -> Result<Self, FlowError> {
        if !(load_multiplier >= 0.0) || !load_multiplier.is_finite() {
            return Err(FlowError::BadValue(format!(
                "load multiplier must be finite and non-negative, got {load_multiplier}"
            )));
        }
        let n = net.n();
        let mut p = DVector::zeros(n);
        let mut q = DVector::zeros(n);
        for (i, bus) in net.buses().iter().enumerate() {
            p[i] = bus.gen_p - load_multiplier * bus.load_p;
            q[i] = -load_multiplier * bus.load_q;
        }
        Ok(Self { p, q })
    }

    pub fn zero(n: usize) -> Self {
        Self { p: DVector::zeros(n), q: DVector::zeros(n) }
    }

    /// Copy of the profile with extra reactive injections added at the
    /// given bus indices.
    pub fn with_added_q(&self, indices: &[usize], dq: &DVector<f64>) -> Self {
        let mut out = self.clone();
        for (k, &i) in indices.iter().enumerate() {
            out.q[i] += dq[k];
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("power flow did not converge: residual {residual:.3e} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("voltage collapse at bus {bus}: squared magnitude fell to {v2:.3e}")]
    VoltageCollapse { bus: BusId, v2: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid value: {0}")]
    BadValue(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Linearized voltage model `v = X q + v_tilde` over all non-slack
/// buses.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub v_tilde: DVector<f64>,
    pub order: Vec<BusId>,
}

/// Builds the linear model for a fixed uncontrolled injection profile:
/// `v_tilde = v0 + R p + X q_uncontrolled`.
pub fn build_linear_model(net: &FeederNetwork, inj: &InjectionProfile) -> Result<LinearModel, FlowError> {
    let n = net.n();
    if inj.p.len() != n || inj.q.len() != n {
        return Err(FlowError::Dimension { expected: n, got: inj.p.len() });
    }
    let m = net.build_impedance_matrices();
    let v_tilde = DVector::from_element(n, net.v0()) + &m.r * &inj.p + &m.x * &inj.q;
    Ok(LinearModel { r: m.r, x: m.x, v_tilde, order: m.order })
}

impl LinearModel {
    /// Voltage magnitudes for a full-length control injection vector.
    pub fn voltage(&self, q_control: &DVector<f64>) -> Result<DVector<f64>, FlowError> {
        let n = self.order.len();
        if q_control.len() != n {
            return Err(FlowError::Dimension { expected: n, got: q_control.len() });
        }
        Ok(&self.x * q_control + &self.v_tilde)
    }

    /// Restriction of the model to a bus subset. Exact for control
    /// vectors supported on that subset.
    pub fn reduced(&self, subset: &[BusId]) -> Result<ReducedLinearModel, FlowError> {
        let x_eff = effective_submatrix(&self.x, &self.order, subset)?;
        let mut v_tilde = DVector::zeros(subset.len());
        for (k, &b) in subset.iter().enumerate() {
            let i = self
                .order
                .iter()
                .position(|&o| o == b)
                .ok_or(NetworkError::UnknownBus(b))?;
            v_tilde[k] = self.v_tilde[i];
        }
        Ok(ReducedLinearModel { x_eff, v_tilde, buses: subset.to_vec() })
    }
}

/// Linear model restricted to the control buses.
#[derive(Debug, Clone)]
pub struct ReducedLinearModel {
    pub x_eff: DMatrix<f64>,
    pub v_tilde: DVector<f64>,
    pub buses: Vec<BusId>,
}

impl ReducedLinearModel {
    pub fn voltage(&self, q: &DVector<f64>) -> Result<DVector<f64>, FlowError> {
        let m = self.buses.len();
        if q.len() != m {
            return Err(FlowError::Dimension { expected: m, got: q.len() });
        }
        Ok(&self.x_eff * q + &self.v_tilde)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FlowOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 100 }
    }
}

/// Converged branch-flow state. Flows are sending-end values on the
/// line joining each bus to its parent, indexed in `lines()` order;
/// `current_sq` is the squared current magnitude on that line.
#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub v: DVector<f64>,
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
    pub current_sq: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub order: Vec<BusId>,
}

/// Solves the nonlinear branch-flow equations by fixed-point sweeps:
/// accumulate line flows leaf-to-root (with loss terms), propagate
/// squared voltages root-to-leaf, update squared currents, repeat. The
/// reported residual is the largest absolute violation over all four
/// equation families.
pub fn solve_distflow(
    net: &FeederNetwork,
    inj: &InjectionProfile,
    opts: &FlowOptions,
) -> Result<PowerFlowSolution, FlowError> {
    let n = net.n();
    if inj.p.len() != n || inj.q.len() != n {
        return Err(FlowError::Dimension { expected: n, got: inj.p.len() });
    }
    let v0_sq = net.v0() * net.v0();
    let topo = net.topo_order();

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        if let Some(p) = net.parent_of(i) {
            children[p].push(i);
        }
    }
    let rx: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let line = &net.lines()[net.parent_line_of(i)];
            (line.r, line.x)
        })
        .collect();

    // Per-bus state for the line feeding that bus; flat start.
    let mut p_flow = vec![0.0; n];
    let mut q_flow = vec![0.0; n];
    let mut ell = vec![0.0; n];
    let mut v_sq = vec![v0_sq; n];

    let up_sq = |i: usize, v_sq: &[f64]| match net.parent_of(i) {
        Some(p) => v_sq[p],
        None => v0_sq,
    };

    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < opts.max_iter {
        iterations += 1;

        for &i in topo.iter().rev() {
            let (r, x) = rx[i];
            let mut p = -inj.p[i] + r * ell[i];
            let mut q = -inj.q[i] + x * ell[i];
            for &c in &children[i] {
                p += p_flow[c];
                q += q_flow[c];
            }
            p_flow[i] = p;
            q_flow[i] = q;
        }

        for &i in topo {
            let (r, x) = rx[i];
            let v_up = up_sq(i, &v_sq);
            let v2 = v_up - 2.0 * (r * p_flow[i] + x * q_flow[i]) + (r * r + x * x) * ell[i];
            if v2 <= 0.0 {
                return Err(FlowError::VoltageCollapse { bus: net.buses()[i].id, v2 });
            }
            v_sq[i] = v2;
        }

        for &i in topo {
            let v_up = up_sq(i, &v_sq);
            ell[i] = (p_flow[i] * p_flow[i] + q_flow[i] * q_flow[i]) / v_up;
        }

        residual = 0.0f64;
        for i in 0..n {
            let (r, x) = rx[i];
            let v_up = up_sq(i, &v_sq);
            let mut p = -inj.p[i] + r * ell[i];
            let mut q = -inj.q[i] + x * ell[i];
            for &c in &children[i] {
                p += p_flow[c];
                q += q_flow[c];
            }
            let res_a = (p_flow[i] - p).abs();
            let res_b = (q_flow[i] - q).abs();
            let res_c = (v_sq[i] - v_up + 2.0 * (r * p_flow[i] + x * q_flow[i])
                - (r * r + x * x) * ell[i])
                .abs();
            let res_d = (ell[i] * v_up - (p_flow[i] * p_flow[i] + q_flow[i] * q_flow[i])).abs();
            residual = residual.max(res_a).max(res_b).max(res_c).max(res_d);
        }
        if residual <= opts.tol {
            let mut p_by_line = vec![0.0; n];
            let mut q_by_line = vec![0.0; n];
            let mut ell_by_line = vec![0.0; n];
            for i in 0..n {
                let li = net.parent_line_of(i);
                p_by_line[li] = p_flow[i];
                q_by_line[li] = q_flow[i];
                ell_by_line[li] = ell[i];
            }
            return Ok(PowerFlowSolution {
                v: DVector::from_iterator(n, v_sq.iter().map(|v2| v2.sqrt())),
                p_flow: p_by_line,
                q_flow: q_by_line,
                current_sq: ell_by_line,
                iterations,
                residual,
                order: net.bus_ids(),
            });
        }
    }
    Err(FlowError::NotConverged { iterations, residual })
}

/// Largest absolute and relative voltage differences between the linear
/// model and the nonlinear solution for the same injections.
#[derive(Debug, Clone)]
pub struct LinearizationError {
    pub max_abs: f64,
    pub max_rel: f64,
    pub per_bus: DVector<f64>,
}

pub fn linearization_error(
    net: &FeederNetwork,
    inj: &InjectionProfile,
    opts: &FlowOptions,
) -> Result<LinearizationError, FlowError> {
    let model = build_linear_model(net, inj)?;
    // Uncontrolled injections are already part of v_tilde.
    let v_lin = model.voltage(&DVector::zeros(net.n()))?;
    let sol = solve_distflow(net, inj, opts)?;
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut per_bus = DVector::zeros(net.n());
    for i in 0..net.n() {
        let abs = (v_lin[i] - sol.v[i]).abs();
        per_bus[i] = abs;
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / sol.v[i]);
    }
    Ok(LinearizationError { max_abs, max_rel, per_bus })
}

impl PowerFlowSolution {
    /// Stable tab-separated rendering used by golden-file tests and the
    /// CLI exports.
    pub fn to_table(&self, net: &FeederNetwork) -> String {
        let mut out = String::from("# schema powerflow/v1\nbus\tv\n");
        for (i, id) in self.order.iter().enumerate() {
            out.push_str(&format!("{id}\t{:.12e}\n", self.v[i]));
        }
        out.push_str("line\tp\tq\tcurrent_sq\n");
        for (li, line) in net.lines().iter().enumerate() {
            out.push_str(&format!(
                "{}-{}\t{:.12e}\t{:.12e}\t{:.12e}\n",
                line.from, line.to, self.p_flow[li], self.q_flow[li], self.current_sq[li]
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{Bus, Line, PerUnitBase};
    use approx::assert_relative_eq;

    fn two_bus(load_p: f64, load_q: f64) -> FeederNetwork {
        let mut bus = Bus::passive(BusId(1));
        bus.load_p = load_p;
        bus.load_q = load_q;
        FeederNetwork::new(
            PerUnitBase::new(1.0, 1000.0).unwrap(),
            BusId(0),
            1.0,
            vec![bus],
            vec![Line { from: BusId(0), to: BusId(1), r: 0.1, x: 0.2 }],
        )
        .unwrap()
    }

    #[test]
    fn flat_network_stays_flat() {
        let net = two_bus(0.0, 0.0);
        let inj = InjectionProfile::from_network(&net, 1.0).unwrap();
        let sol = solve_distflow(&net, &inj, &FlowOptions::default()).unwrap();
        assert_eq!(sol.v[0], 1.0);
        assert_eq!(sol.current_sq[0], 0.0);
        assert!(sol.residual <= 1e-15);
    }

    #[test]
    fn two_bus_matches_closed_form() {
        // With the sending end at the slack bus, the squared current
        // solves a scalar quadratic: ell = (p + r*ell)^2 + (q + x*ell)^2.
        let (p, q, r, x) = (0.5, 0.3, 0.1, 0.2);
        let net = two_bus(p, q);
        let inj = InjectionProfile::from_network(&net, 1.0).unwrap();
        let sol = solve_distflow(&net, &inj, &FlowOptions::default()).unwrap();

        let a = r * r + x * x;
        let b = 2.0 * (p * r + q * x) - 1.0;
        let c = p * p + q * q;
        let ell = (-b - (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
        let pf = p + r * ell;
        let qf = q + x * ell;
        let v2 = 1.0 - 2.0 * (r * pf + x * qf) + a * ell;

        assert_relative_eq!(sol.current_sq[0], ell, max_relative = 1e-9);
        assert_relative_eq!(sol.p_flow[0], pf, max_relative = 1e-9);
        assert_relative_eq!(sol.q_flow[0], qf, max_relative = 1e-9);
        assert_relative_eq!(sol.v[0], v2.sqrt(), max_relative = 1e-9);
        assert!(sol.residual <= 1e-10);
    }

    #[test]
    fn linear_model_drops_by_r_times_p() {
        let net = two_bus(0.5, 0.0);
        let inj = InjectionProfile::from_network(&net, 1.0).unwrap();
        let model = build_linear_model(&net, &inj).unwrap();
        assert_relative_eq!(model.v_tilde[0], 1.0 - 0.1 * 0.5, max_relative = 1e-14);
        let v = model.voltage(&DVector::from_element(1, 0.2)).unwrap();
        assert_relative_eq!(v[0], 0.95 + 0.2 * 0.2, max_relative = 1e-14);
    }

    #[test]
    fn linearization_error_shrinks_quadratically() {
        let net_full = two_bus(0.4, 0.2);
        let net_half = two_bus(0.2, 0.1);
        let opts = FlowOptions::default();
        let full = linearization_error(
            &net_full,
            &InjectionProfile::from_network(&net_full, 1.0).unwrap(),
            &opts,
        )
        .unwrap();
        let half = linearization_error(
            &net_half,
            &InjectionProfile::from_network(&net_half, 1.0).unwrap(),
            &opts,
        )
        .unwrap();
        // halving the injections should cut the first-order error by
        // roughly four; allow slack for higher-order terms
        let ratio = full.max_abs / half.max_abs;
        assert!(ratio > 3.0 && ratio < 5.0, "ratio {ratio}");
    }

    #[test]
    fn collapse_is_detected() {
        let net = two_bus(4.0, 3.0);
        let inj = InjectionProfile::from_network(&net, 1.0).unwrap();
        let err = solve_distflow(&net, &inj, &FlowOptions::default()).unwrap_err();
        assert!(
            matches!(err, FlowError::VoltageCollapse { .. } | FlowError::NotConverged { .. }),
            "overloaded feeder must fail: {err}"
        );
    }

    #[test]
    fn added_control_q_raises_voltage() {
        let net = two_bus(0.5, 0.3);
        let inj = InjectionProfile::from_network(&net, 1.0).unwrap();
        let with_q = inj.with_added_q(&[0], &DVector::from_element(1, 0.3));
        let opts = FlowOptions::default();
        let base = solve_distflow(&net, &inj, &opts).unwrap();
        let lifted = solve_distflow(&net, &with_q, &opts).unwrap();
        assert!(lifted.v[0] > base.v[0]);
    }
}
