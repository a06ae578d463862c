//! Aggregate objective, spectral stability conditions, equilibria, and
//! stepsize sweeps.
//!
//! The incremental control laws descend
//! `F(q) = sum_i C_i(q_i) + q' X q / 2 + q' v_tilde`
//! over the control buses, with `X` the effective (control-bus)
//! reactance matrix of the linearized grid. Spectral quantities come
//! from a deterministic shifted power iteration so reports are
//! bit-for-bit reproducible; tests cross-check it against a dense
//! eigensolver.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::control::{ControllerSet, CurveError};
use crate::dynamics::{
    simulate, step_pseudo_gradient, ClosedLoop, ControlLaw, SimError, SimOptions,
};
use crate::powerflow::ReducedLinearModel;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("matrix must be square and symmetric")]
    NotSymmetric,
    #[error("eigenvalue iteration did not converge within {max_iter} iterations")]
    EigenNotConverged { max_iter: usize },
    #[error("controller set is empty")]
    Empty,
    #[error("equilibrium iteration stalled: residual {residual:.3e} after {iterations} steps")]
    EquilibriumNotConverged { residual: f64, iterations: usize },
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Sim(#[from] Box<SimError>),
}

fn check_square_symmetric(m: &DMatrix<f64>) -> Result<(), AnalysisError> {
    if m.nrows() != m.ncols() {
        return Err(AnalysisError::NotSymmetric);
    }
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let denom = m[(i, j)].abs().max(m[(j, i)].abs()).max(1.0);
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * denom {
                return Err(AnalysisError::NotSymmetric);
            }
        }
    }
    Ok(())
}

/// Aggregate objective `C(q) + q' X q / 2 + q' v_tilde` over the
/// control buses. Errors when `q` leaves the curve limits.
pub fn objective(
    ctrls: &ControllerSet,
    x_eff: &DMatrix<f64>,
    v_tilde: &DVector<f64>,
    q: &DVector<f64>,
) -> Result<f64, AnalysisError> {
    let m = ctrls.len();
    if q.len() != m || x_eff.nrows() != m || v_tilde.len() != m {
        return Err(AnalysisError::Dimension { expected: m, got: q.len() });
    }
    let cost = ctrls.total_cost(q)?;
    let quad = 0.5 * (x_eff * q).dot(q);
    Ok(cost + quad + q.dot(v_tilde))
}

// Deterministic start vector for the power iteration: a fixed-seed
// splitmix64 stream, so repeated runs agree bit for bit.
fn seeded_start(n: usize) -> DVector<f64> {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut next = || {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    };
    let v = DVector::from_fn(n, |_, _| next() + 0.1);
    let norm = v.norm();
    v / norm
}

fn dominant_eigenvalue_psd(
    m: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<f64, AnalysisError> {
    let n = m.nrows();
    if n == 0 {
        return Err(AnalysisError::Empty);
    }
    let mut b = seeded_start(n);
    let mut lambda = 0.0f64;
    for _ in 0..max_iter {
        let mb = m * &b;
        let norm = mb.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = mb / norm;
        let new_lambda = (m * &next).dot(&next);
        let residual = (m * &next - new_lambda * &next).norm();
        let scale = new_lambda.abs().max(1.0);
        if (new_lambda - lambda).abs() <= tol * scale && residual <= tol.sqrt() * scale {
            return Ok(new_lambda);
        }
        lambda = new_lambda;
        b = next;
    }
    Err(AnalysisError::EigenNotConverged { max_iter })
}

/// Largest eigenvalue of a symmetric matrix via shifted power
/// iteration with deterministic seeding. `tol` is relative; the
/// default used throughout the crate is `1e-10`.
pub fn lambda_max_symmetric(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<f64, AnalysisError> {
    check_square_symmetric(m)?;
    // Shift by the infinity norm so every eigenvalue is non-negative
    // and the dominant one is the largest.
    let n = m.nrows();
    let shift = (0..n)
        .map(|i| (0..n).map(|j| m[(i, j)].abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let shifted = m + DMatrix::identity(n, n) * shift;
    Ok(dominant_eigenvalue_psd(&shifted, tol, max_iter)? - shift)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn lambda_min_symmetric(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<f64, AnalysisError> {
    Ok(-lambda_max_symmetric(&-m.clone(), tol, max_iter)?)
}

pub const EIG_TOL: f64 = 1e-10;
pub const EIG_MAX_ITER: usize = 200_000;

/// Stability conditions and stepsize bounds for a controller set on an
/// effective reactance matrix.
#[derive(Debug, Clone)]
pub struct ConditionReport {
    /// Largest curve slope bound over the control buses.
    pub alpha_max: f64,
    /// `lambda_max(diag(1/alpha) + X_eff)`, the curvature bound shared
    /// by both stepsize conditions.
    pub lambda_max_curvature: f64,
    /// `lambda_min(diag(1/alpha) - X_eff)`; positive means the
    /// non-incremental droop loop is a contraction.
    pub c1_margin: f64,
    pub c1_holds: bool,
    /// Largest provably safe gradient stepsize.
    pub c2_bound: f64,
    /// Largest provably safe pseudo-gradient stepsize,
    /// `c2_bound / alpha_max` identically.
    pub c3_bound: f64,
}

impl ConditionReport {
    /// Fixed-layout report used by the CLI and golden tests.
    pub fn to_table(&self) -> String {
        format!(
            "# schema conditions/v1\n\
             alpha_max\t{:.12e}\n\
             lambda_max_curvature\t{:.12e}\n\
             c1_margin\t{:.12e}\n\
             c1_holds\t{}\n\
             c2_bound\t{:.12e}\n\
             c3_bound\t{:.12e}\n",
            self.alpha_max,
            self.lambda_max_curvature,
            self.c1_margin,
            self.c1_holds,
            self.c2_bound,
            self.c3_bound
        )
    }
}

/// Evaluates the three stability conditions for the given curves and
/// effective reactance matrix.
pub fn check_conditions(
    ctrls: &ControllerSet,
    x_eff: &DMatrix<f64>,
) -> Result<ConditionReport, AnalysisError> {
    let m = ctrls.len();
    if m == 0 {
        return Err(AnalysisError::Empty);
    }
    if x_eff.nrows() != m || x_eff.ncols() != m {
        return Err(AnalysisError::Dimension { expected: m, got: x_eff.nrows() });
    }
    let inv_slope = DMatrix::from_diagonal(&ctrls.slope_bounds().map(|a| 1.0 / a));
    let alpha_max = ctrls.alpha_max();

    let c1_margin = lambda_min_symmetric(&(&inv_slope - x_eff), EIG_TOL, EIG_MAX_ITER)?;
    let lambda_max_curvature = lambda_max_symmetric(&(&inv_slope + x_eff), EIG_TOL, EIG_MAX_ITER)?;
    let c2_bound = 2.0 / lambda_max_curvature;
    let c3_bound = c2_bound / alpha_max;

    Ok(ConditionReport {
        alpha_max,
        lambda_max_curvature,
        c1_margin,
        c1_holds: c1_margin > 0.0,
        c2_bound,
        c3_bound,
    })
}

/// Converged network equilibrium.
#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub objective: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Solves for the unique fixed point `q = f(X q + v_tilde)` under the
/// linearized physics by damped pseudo-gradient iteration at half the
/// provably safe stepsize.
pub fn solve_equilibrium(
    ctrls: &ControllerSet,
    reduced: &ReducedLinearModel,
    tol: f64,
    max_iter: usize,
) -> Result<EquilibriumResult, AnalysisError> {
    let report = check_conditions(ctrls, &reduced.x_eff)?;
    let stepsize = 0.5 * report.c3_bound;
    let mut q = DVector::zeros(ctrls.len());
    for it in 1..=max_iter {
        let v = reduced
            .voltage(&q)
            .map_err(|e| AnalysisError::Sim(Box::new(SimError::Flow(e))))?;
        let residual = (&ctrls.evaluate_all(&v) - &q).amax();
        if residual <= tol {
            let objective = objective(ctrls, &reduced.x_eff, &reduced.v_tilde, &q)?;
            return Ok(EquilibriumResult { q, v, objective, residual, iterations: it - 1 });
        }
        q = step_pseudo_gradient(ctrls, &q, &v, stepsize);
        if it == max_iter {
            return Err(AnalysisError::EquilibriumNotConverged { residual, iterations: it });
        }
    }
    unreachable!("loop either returns or errors at max_iter")
}

/// Per-step descent guarantees of the two incremental laws.
///
/// For displacement `d` and curvature `H + X` (with `H = diag(1/alpha)`
/// standing in for the cost Hessian), the objective change per step is
/// bounded by the quadratic forms
/// `d' (g^2 (H + X) - 2 g H) d` (pseudo-gradient, `d = q - f(v)`) and
/// `d' (g^2 (H + X) - 2 g I) d` (gradient, `d = v - f^{-1}(q)`),
/// which are negative for stepsizes below the respective bounds.
/// Both stepsizes are explicit parameters so variant pairings can be
/// evaluated directly.
pub fn descent_bounds(
    ctrls: &ControllerSet,
    x_eff: &DMatrix<f64>,
    q: &DVector<f64>,
    v: &DVector<f64>,
    gamma_g: f64,
    gamma_p: f64,
) -> Result<(f64, f64), AnalysisError> {
    let dv = inverse_displacements(ctrls, q, v)?;
    let d2 = gradient_descent_form(ctrls, x_eff, &dv, gamma_g, gamma_g)?;
    let d3 = pseudo_gradient_descent_form(ctrls, x_eff, q, v, gamma_p)?;
    Ok((d2, d3))
}

/// Signed distances from each measured voltage to the inverse image of
/// its setpoint; the displacement vector of the gradient descent form.
pub fn inverse_displacements(
    ctrls: &ControllerSet,
    q: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>, AnalysisError> {
    let m = ctrls.len();
    if q.len() != m || v.len() != m {
        return Err(AnalysisError::Dimension { expected: m, got: q.len() });
    }
    let mut out = DVector::zeros(m);
    for i in 0..m {
        let c = ctrls.curve(i);
        // surface limit violations as errors rather than NaN
        let (lo, hi) = c.limits();
        if q[i] < lo || q[i] > hi {
            return Err(CurveError::OutOfLimits { q: q[i], lo, hi }.into());
        }
        out[i] = c.inverse_displacement(q[i], v[i]);
    }
    Ok(out)
}

/// Gradient-law descent form with independent quadratic and linear
/// stepsize factors.
pub fn gradient_descent_form(
    ctrls: &ControllerSet,
    x_eff: &DMatrix<f64>,
    dv: &DVector<f64>,
    gamma_quad: f64,
    gamma_lin: f64,
) -> Result<f64, AnalysisError> {
    let m = ctrls.len();
    if dv.len() != m || x_eff.nrows() != m {
        return Err(AnalysisError::Dimension { expected: m, got: dv.len() });
    }
    let h = DMatrix::from_diagonal(&ctrls.slope_bounds().map(|a| 1.0 / a));
    let curvature = h + x_eff;
    let quad = gamma_quad * gamma_quad * (&curvature * dv).dot(dv);
    Ok(quad - 2.0 * gamma_lin * dv.dot(dv))
}

/// Pseudo-gradient-law descent form at displacement `q - f(v)`.
pub fn pseudo_gradient_descent_form(
    ctrls: &ControllerSet,
    x_eff: &DMatrix<f64>,
    q: &DVector<f64>,
    v: &DVector<f64>,
    gamma_p: f64,
) -> Result<f64, AnalysisError> {
    let m = ctrls.len();
    if q.len() != m || v.len() != m || x_eff.nrows() != m {
        return Err(AnalysisError::Dimension { expected: m, got: q.len() });
    }
    let dq = q - ctrls.evaluate_all(v);
    let h = DMatrix::from_diagonal(&ctrls.slope_bounds().map(|a| 1.0 / a));
    let curvature = &h + x_eff;
    let quad = gamma_p * gamma_p * (&curvature * &dq).dot(&dq);
    Ok(quad - 2.0 * gamma_p * (&h * &dq).dot(&dq))
}

/// Outcome of one grid point of a stepsize sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub gamma: f64,
    pub converged: bool,
    pub steps: Option<usize>,
    pub oscillating: bool,
    /// First step whose update reverses direction against the previous
    /// one — the onset of ringing, even when the run still converges.
    pub overshoot: Option<usize>,
    pub final_objective: Option<f64>,
    pub failure: Option<String>,
}

/// Which incremental law a sweep exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepLaw {
    Gradient,
    PseudoGradient,
}

impl SweepLaw {
    fn law(self, gamma: f64) -> ControlLaw {
        match self {
            SweepLaw::Gradient => ControlLaw::Gradient { stepsize: gamma },
            SweepLaw::PseudoGradient => ControlLaw::PseudoGradient { stepsize: gamma },
        }
    }
}

/// Simulates every stepsize in `grid` (in parallel) and reports each
/// point's outcome in grid order. Physics failures are recorded per
/// point, not raised.
pub fn sweep_stepsize(
    loop_: &ClosedLoop,
    law: SweepLaw,
    grid: &[f64],
    q0: &DVector<f64>,
    opts: &SimOptions,
) -> Vec<SweepPoint> {
    grid.par_iter()
        .map(|&gamma| match simulate(loop_, law.law(gamma), q0, opts) {
            Ok(traj) => SweepPoint {
                gamma,
                converged: traj.converged_at.is_some(),
                steps: traj.steps_to_converge(),
                oscillating: traj.oscillating,
                overshoot: traj.first_overshoot(),
                final_objective: Some(traj.final_objective()),
                failure: None,
            },
            Err(e) => SweepPoint {
                gamma,
                converged: false,
                steps: None,
                oscillating: false,
                overshoot: None,
                final_objective: None,
                failure: Some(e.to_string()),
            },
        })
        .collect()
}

/// Largest grid value whose simulation converged.
pub fn largest_stable(points: &[SweepPoint]) -> Option<f64> {
    points
        .iter()
        .filter(|p| p.converged)
        .map(|p| p.gamma)
        .fold(None, |acc: Option<f64>, g| Some(acc.map_or(g, |a| a.max(g))))
}

/// Inclusive arithmetic grid `start, start+step, ...` up to `stop`
/// (with a half-step tolerance for rounding).
pub fn grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    assert!(step > 0.0 && stop >= start, "invalid grid {start}..{stop} by {step}");
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let g = start + step * k as f64;
        if g > stop + 0.5 * step {
            break;
        }
        out.push(g);
        k += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::DroopCurve;
    use approx::assert_relative_eq;

    fn single(alpha: f64) -> ControllerSet {
        let curve = DroopCurve::new(alpha, 1.0, 0.04, -0.5, 0.5).unwrap();
        ControllerSet::new(vec![crate::netmodel::BusId(1)], vec![curve]).unwrap()
    }

    #[test]
    fn objective_reference_value() {
        let ctrls = single(10.0);
        let x = DMatrix::from_element(1, 1, 0.5);
        let vt = DVector::from_element(1, 1.0);
        let q = DVector::from_element(1, -0.3);
        let f = objective(&ctrls, &x, &vt, &q).unwrap();
        // 0.3105 + 0.0225 - 0.3
        assert_relative_eq!(f, 0.033, max_relative = 1e-10);

        let q_bad = DVector::from_element(1, -0.7);
        assert!(objective(&ctrls, &x, &vt, &q_bad).is_err());
    }

    #[test]
    fn conditions_single_bus() {
        let ctrls = single(1.0);
        let x = DMatrix::from_element(1, 1, 0.5);
        let rep = check_conditions(&ctrls, &x).unwrap();
        assert!(rep.c1_holds);
        assert_relative_eq!(rep.c1_margin, 0.5, max_relative = 1e-9);
        assert_relative_eq!(rep.c2_bound, 4.0 / 3.0, max_relative = 1e-9);
        assert_relative_eq!(rep.c3_bound, 4.0 / 3.0, max_relative = 1e-9);

        let tight = single(4.0);
        let rep = check_conditions(&tight, &x).unwrap();
        assert!(!rep.c1_holds);
        assert_relative_eq!(rep.c1_margin, 0.25 - 0.5, max_relative = 1e-9);
    }

    #[test]
    fn stepsize_bound_ratio_is_alpha_max() {
        let curves = vec![
            DroopCurve::new(2.0, 1.0, 0.04, -0.3, 0.3).unwrap(),
            DroopCurve::new(7.5, 1.0, 0.04, -1.0, 1.0).unwrap(),
        ];
        let ctrls = ControllerSet::new(
            vec![crate::netmodel::BusId(1), crate::netmodel::BusId(2)],
            curves,
        )
        .unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[0.05, 0.02, 0.02, 0.08]);
        let rep = check_conditions(&ctrls, &x).unwrap();
        assert_relative_eq!(rep.c2_bound / rep.c3_bound, 7.5, max_relative = 1e-13);
    }

    #[test]
    fn eigen_matches_closed_form_2x2() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let max = lambda_max_symmetric(&m, EIG_TOL, EIG_MAX_ITER).unwrap();
        let min = lambda_min_symmetric(&m, EIG_TOL, EIG_MAX_ITER).unwrap();
        assert_relative_eq!(max, 3.0, max_relative = 1e-9);
        assert_relative_eq!(min, 1.0, max_relative = 1e-9);

        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, -1.0]);
        let max = lambda_max_symmetric(&indef, EIG_TOL, EIG_MAX_ITER).unwrap();
        assert_relative_eq!(max, 5.0f64.sqrt(), max_relative = 1e-9);
    }

    #[test]
    fn eigen_is_deterministic() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.3, 1.0, 3.0, 0.7, 0.3, 0.7, 2.0]);
        let a = lambda_max_symmetric(&m, EIG_TOL, EIG_MAX_ITER).unwrap();
        let b = lambda_max_symmetric(&m, EIG_TOL, EIG_MAX_ITER).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn grid_is_inclusive() {
        let g = grid(0.05, 0.3, 0.05);
        assert_eq!(g.len(), 6);
        assert_relative_eq!(g[5], 0.3, max_relative = 1e-12);
        assert_eq!(grid(1.0, 1.0, 1.0), vec![1.0]);
    }

    #[test]
    fn descent_forms_vanish_at_fixed_points() {
        let ctrls = single(2.0);
        let x = DMatrix::from_element(1, 1, 0.1);
        // fixed point of q = f(0.1 q + 0.95)
        let q = DVector::from_element(1, 2.0 * 0.03 / 1.2);
        let v = DVector::from_element(1, 0.95 + 0.1 * q[0]);
        let dq = (&q - ctrls.evaluate_all(&v)).amax();
        assert!(dq < 1e-12, "fixture must sit on the curve, got {dq}");
        let (d2, d3) = descent_bounds(&ctrls, &x, &q, &v, 0.5, 0.5).unwrap();
        assert!(d2.abs() < 1e-12);
        assert!(d3.abs() < 1e-12);
    }

    #[test]
    fn descent_forms_negative_below_bounds() {
        let ctrls = single(2.0);
        let x = DMatrix::from_element(1, 1, 0.1);
        let rep = check_conditions(&ctrls, &x).unwrap();
        let q = DVector::from_element(1, 0.0);
        let v = DVector::from_element(1, 1.06);
        let (d2, d3) = descent_bounds(&ctrls, &x, &q, &v, 0.9 * rep.c2_bound, 0.9 * rep.c3_bound).unwrap();
        assert!(d2 < 0.0, "gradient form {d2}");
        assert!(d3 < 0.0, "pseudo-gradient form {d3}");
        let (d2, d3) = descent_bounds(&ctrls, &x, &q, &v, 2.5 * rep.c2_bound, 2.5 * rep.c3_bound).unwrap();
        assert!(d2 > 0.0 && d3 > 0.0, "overshoot must flip the sign");
    }
}
