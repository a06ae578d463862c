//! Shared fixtures for the benchmark targets.

use nalgebra::DVector;
use voltflow_core::control::ControllerSet;
use voltflow_core::datasets::sce42;
use voltflow_core::netmodel::FeederNetwork;
use voltflow_core::powerflow::InjectionProfile;

/// The 42-bus feeder at peak load with a threshold curve design; the
/// pieces a `ClosedLoop` borrows, owned together.
pub struct Fixture {
    pub net: FeederNetwork,
    pub ctrls: ControllerSet,
    pub inj: InjectionProfile,
}

pub fn sce42_fixture(deadband: f64, threshold_offset: f64) -> Fixture {
    let net = sce42();
    let ctrls = ControllerSet::threshold_design(&net, 1.0, deadband, threshold_offset)
        .expect("bundled feeder supports the design");
    let inj = InjectionProfile::from_network(&net, 1.0).expect("unit multiplier");
    Fixture { net, ctrls, inj }
}

pub fn zero_q(f: &Fixture) -> DVector<f64> {
    DVector::zeros(f.ctrls.len())
}
