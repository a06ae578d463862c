//! Local volt/var control curves.
//!
//! A control curve maps a locally measured voltage magnitude to a
//! reactive setpoint. The shipped [`DroopCurve`] is the piecewise
//! linear shape used in practice: unresponsive inside a deadband
//! around nominal voltage, linear with slope `-alpha` outside it, and
//! saturated at the inverter's reactive limits. Everything downstream
//! (dynamics, stability analysis) talks to curves only through the
//! [`ControlFunction`] trait, so alternative monotone curves with a
//! bounded slope can be dropped in.
//!
//! Each curve induces a convex cost `C(q) = -∫_0^q f^{-1}(s) ds`; the
//! sum of these costs plus the network's quadratic term is the global
//! objective the incremental control laws descend.

use nalgebra::DVector;
use thiserror::Error;

use crate::netmodel::{BusId, FeederNetwork, NetworkError};

#[derive(Debug, Error)]
pub enum CurveError {
    #[error("invalid curve parameter: {0}")]
    BadParameter(String),
    #[error("inverse undefined at q = 0: any deadband voltage maps there")]
    DeadbandAmbiguous,
    #[error("inverse undefined at saturated setpoint q = {0}")]
    Saturated(f64),
    #[error("setpoint {q} outside limits [{lo}, {hi}]")]
    OutOfLimits { q: f64, lo: f64, hi: f64 },
    #[error("bus {0} carries no inverter")]
    NotControllable(BusId),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Clamp to `[lo, hi]`, the projection onto a box in each coordinate.
pub fn project(x: f64, lo: f64, hi: f64) -> f64 {
    assert!(lo <= hi, "projection interval is empty: [{lo}, {hi}]");
    x.min(hi).max(lo)
}

/// Monotone local volt/var response with a bounded slope.
///
/// Implementations must be non-increasing in voltage and change by at
/// most `slope_bound()` per unit of voltage; both properties are load
/// bearing for the stability conditions in [`crate::analysis`].
pub trait ControlFunction {
    /// Reactive setpoint for a measured voltage, already clamped to the
    /// curve's limits.
    fn evaluate(&self, v: f64) -> f64;

    /// Voltage at which the curve produces `q`; defined for unsaturated
    /// nonzero setpoints only.
    fn inverse(&self, q: f64) -> Result<f64, CurveError>;

    /// Closed voltage interval mapped onto `q` (a point for unsaturated
    /// nonzero setpoints, the deadband for zero, a half-line at the
    /// limits). Infinite endpoints encode the half-lines.
    fn inverse_interval(&self, q: f64) -> Result<(f64, f64), CurveError>;

    /// Convex control cost with `cost(0) = 0`, defined on the closed
    /// limit interval.
    fn cost(&self, q: f64) -> Result<f64, CurveError>;

    /// Subgradient of `cost` at `q` plus the measured voltage `v`; the
    /// per-bus component of the objective gradient when `v` is the bus
    /// voltage. At `q = 0` the subgradient choice is the distance from
    /// `v` to the deadband, making it vanish exactly on fixed points.
    fn cost_subgradient(&self, q: f64, v: f64) -> f64;

    /// Uniform bound on the curve's absolute slope.
    fn slope_bound(&self) -> f64;

    /// Reactive limits `(q_min, q_max)` with `q_min < 0 < q_max`.
    fn limits(&self) -> (f64, f64);

    /// Deadband `[v_low, v_high]` around nominal voltage.
    fn deadband(&self) -> (f64, f64);

    /// Signed distance from `v` to the inverse interval of `q`; zero
    /// exactly when `(q, v)` sits on the (set-valued) inverse curve.
    fn inverse_displacement(&self, q: f64, v: f64) -> f64 {
        match self.inverse_interval(q) {
            Ok((lo, hi)) => {
                if v < lo {
                    v - lo
                } else if v > hi {
                    v - hi
                } else {
                    0.0
                }
            }
            // outside the limits there is no inverse; report the
            // violation itself so callers see a nonzero displacement
            Err(_) => f64::NAN,
        }
    }
}

/// Deadband-and-saturation droop curve.
///
/// Piecewise linear: zero on `[v_nom - delta/2, v_nom + delta/2]`,
/// slope `-alpha` outside, clamped to `[q_min, q_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroopCurve {
    alpha: f64,
    v_nom: f64,
    delta: f64,
    q_min: f64,
    q_max: f64,
}

impl DroopCurve {
    pub fn new(alpha: f64, v_nom: f64, delta: f64, q_min: f64, q_max: f64) -> Result<Self, CurveError> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(CurveError::BadParameter(format!("slope must be positive, got {alpha}")));
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(CurveError::BadParameter(format!(
                "deadband width must be non-negative, got {delta}"
            )));
        }
        if !(v_nom > 0.0) || !v_nom.is_finite() {
            return Err(CurveError::BadParameter(format!(
                "nominal voltage must be positive, got {v_nom}"
            )));
        }
        if !(q_min < 0.0 && q_max > 0.0) || !q_min.is_finite() || !q_max.is_finite() {
            return Err(CurveError::BadParameter(format!(
                "limits must satisfy q_min < 0 < q_max, got ({q_min}, {q_max})"
            )));
        }
        Ok(Self { alpha, v_nom, delta, q_min, q_max })
    }

    /// Curve that reaches its reactive limit exactly at the hard
    /// voltage thresholds `v_nom ± threshold_offset`: the slope is
    /// `q_cap / (threshold_offset - delta/2)`.
    pub fn from_threshold(
        v_nom: f64,
        delta: f64,
        threshold_offset: f64,
        q_cap: f64,
    ) -> Result<Self, CurveError> {
        if !(threshold_offset > delta / 2.0) {
            return Err(CurveError::BadParameter(format!(
                "threshold offset {threshold_offset} must exceed half the deadband {}",
                delta / 2.0
            )));
        }
        if !(q_cap > 0.0) || !q_cap.is_finite() {
            return Err(CurveError::BadParameter(format!(
                "reactive capability must be positive, got {q_cap}"
            )));
        }
        let alpha = q_cap / (threshold_offset - delta / 2.0);
        Self::new(alpha, v_nom, delta, -q_cap, q_cap)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn v_nom(&self) -> f64 {
        self.v_nom
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    fn v_high(&self) -> f64 {
        self.v_nom + self.delta / 2.0
    }

    fn v_low(&self) -> f64 {
        self.v_nom - self.delta / 2.0
    }

    fn check_limits(&self, q: f64) -> Result<(), CurveError> {
        if q < self.q_min || q > self.q_max || !q.is_finite() {
            return Err(CurveError::OutOfLimits { q, lo: self.q_min, hi: self.q_max });
        }
        Ok(())
    }

    /// Inverse extended continuously to the closed limit interval; used
    /// by the cost subgradient, where the one-sided limit is the right
    /// value at saturation.
    fn inverse_extended(&self, q: f64) -> f64 {
        if q > 0.0 {
            self.v_low() - q / self.alpha
        } else {
            self.v_high() - q / self.alpha
        }
    }
}

impl ControlFunction for DroopCurve {
    fn evaluate(&self, v: f64) -> f64 {
        let above = (v - self.v_high()).max(0.0);
        let below = (self.v_low() - v).max(0.0);
        project(self.alpha * (below - above), self.q_min, self.q_max)
    }

    fn inverse(&self, q: f64) -> Result<f64, CurveError> {
        self.check_limits(q)?;
        if q == 0.0 {
            return Err(CurveError::DeadbandAmbiguous);
        }
        if q == self.q_min || q == self.q_max {
            return Err(CurveError::Saturated(q));
        }
        Ok(self.inverse_extended(q))
    }

    fn inverse_interval(&self, q: f64) -> Result<(f64, f64), CurveError> {
        self.check_limits(q)?;
        if q == 0.0 {
            Ok((self.v_low(), self.v_high()))
        } else if q == self.q_max {
            Ok((f64::NEG_INFINITY, self.inverse_extended(q)))
        } else if q == self.q_min {
            Ok((self.inverse_extended(q), f64::INFINITY))
        } else {
            let v = self.inverse_extended(q);
            Ok((v, v))
        }
    }

    fn cost(&self, q: f64) -> Result<f64, CurveError> {
        self.check_limits(q)?;
        let edge = if q >= 0.0 { self.v_low() } else { self.v_high() };
        Ok(-edge * q + q * q / (2.0 * self.alpha))
    }

    fn cost_subgradient(&self, q: f64, v: f64) -> f64 {
        if q != 0.0 {
            v - self.inverse_extended(q)
        } else if v > self.v_high() {
            v - self.v_high()
        } else if v < self.v_low() {
            v - self.v_low()
        } else {
            0.0
        }
    }

    fn slope_bound(&self) -> f64 {
        self.alpha
    }

    fn limits(&self) -> (f64, f64) {
        (self.q_min, self.q_max)
    }

    fn deadband(&self) -> (f64, f64) {
        (self.v_low(), self.v_high())
    }
}

/// The control curves of a feeder's inverter buses, in a fixed bus
/// order shared with the reduced linear model.
#[derive(Debug, Clone)]
pub struct ControllerSet {
    buses: Vec<BusId>,
    curves: Vec<DroopCurve>,
}

impl ControllerSet {
    pub fn new(buses: Vec<BusId>, curves: Vec<DroopCurve>) -> Result<Self, CurveError> {
        if buses.len() != curves.len() {
            return Err(CurveError::BadParameter(format!(
                "{} buses but {} curves",
                buses.len(),
                curves.len()
            )));
        }
        let mut sorted = buses.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != buses.len() {
            return Err(CurveError::BadParameter("duplicate control bus".into()));
        }
        Ok(Self { buses, curves })
    }

    /// One curve per inverter bus of the network, each reaching the
    /// bus's reactive capability exactly at `v_nom ± threshold_offset`.
    pub fn threshold_design(
        net: &FeederNetwork,
        v_nom: f64,
        delta: f64,
        threshold_offset: f64,
    ) -> Result<Self, CurveError> {
        let buses = net.control_buses();
        if buses.is_empty() {
            return Err(CurveError::BadParameter("network has no inverter buses".into()));
        }
        let curves = buses
            .iter()
            .map(|&b| {
                let (_, q_max) = net.bus(b)?.q_limits.ok_or(CurveError::NotControllable(b))?;
                DroopCurve::from_threshold(v_nom, delta, threshold_offset, q_max)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { buses, curves })
    }

    pub fn len(&self) -> usize {
        self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buses.is_empty()
    }

    pub fn buses(&self) -> &[BusId] {
        &self.buses
    }

    pub fn curve(&self, i: usize) -> &dyn ControlFunction {
        &self.curves[i]
    }

    pub fn curves(&self) -> impl Iterator<Item = &dyn ControlFunction> {
        self.curves.iter().map(|c| c as &dyn ControlFunction)
    }

    pub fn slope_bounds(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.curves.iter().map(|c| c.slope_bound()))
    }

    pub fn alpha_max(&self) -> f64 {
        self.curves.iter().map(|c| c.slope_bound()).fold(0.0, f64::max)
    }

    pub fn evaluate_all(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.curves.iter().zip(v.iter()).map(|(c, &v)| c.evaluate(v)))
    }

    pub fn project_all(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.curves.iter().zip(q.iter()).map(|(c, &q)| {
                let (lo, hi) = c.limits();
                project(q, lo, hi)
            }),
        )
    }

    pub fn total_cost(&self, q: &DVector<f64>) -> Result<f64, CurveError> {
        self.curves.iter().zip(q.iter()).map(|(c, &q)| c.cost(q)).sum()
    }

    pub fn subgradient_all(&self, q: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.curves
                .iter()
                .zip(q.iter().zip(v.iter()))
                .map(|(c, (&q, &v))| c.cost_subgradient(q, v)),
        )
    }
}
