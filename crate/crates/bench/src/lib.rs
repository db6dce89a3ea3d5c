//! Shared fixtures for the benchmarks.

use rare_core::operators::{CoilMaps, FourierMode, MeasurementOperator};
use rare_core::simulation::{make_phantom, radial_pattern, simulate_acquisition, AcquisitionConfig, PhantomConfig};
use rare_core::{ComplexImage, KSpaceData};

pub struct Fixture {
    pub truth: ComplexImage,
    pub operator: MeasurementOperator,
    pub data: KSpaceData,
    pub pseudoinverse: ComplexImage,
}

/// A phantom of `n x n x phases` sampled at `rate` with golden-angle spokes
/// and 30 dB noise, single coil.
pub fn fixture(n: usize, phases: usize, rate: f64, mode: FourierMode) -> Fixture {
    let truth = make_phantom(&PhantomConfig::random(n, phases, 1)).expect("phantom");
    let acq = AcquisitionConfig::for_rate(rate, n, Some(30.0), 0, 2);
    let coils = CoilMaps::uniform(n, n);
    let sim = simulate_acquisition(&truth, &acq, &coils, mode).expect("acquisition");
    Fixture {
        truth,
        operator: sim.operator,
        data: sim.data,
        pseudoinverse: sim.pseudoinverse,
    }
}

/// The operator alone, for a given acquisition.
pub fn operator(n: usize, phases: usize, acq: &AcquisitionConfig, coils: CoilMaps, mode: FourierMode) -> MeasurementOperator {
    let shape = rare_core::Shape::new(phases, n, n);
    let pattern = radial_pattern(acq, phases, n, n).expect("pattern");
    MeasurementOperator::new(shape, pattern, coils, mode).expect("operator")
}
