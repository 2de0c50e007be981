//! Deterministic discrete-event simulator: scenario files, drifting optics,
//! calibration servos, fault injection and reports.

pub mod engine;
pub mod optics;
pub mod scenario;
pub mod servo;

pub use engine::{
    run_scenario, EngineError, RequestReport, ScenarioReport, SeriesRow, Summary, SweepRow,
};
pub use optics::{LinkState, OpticalState, SimPhysics};
pub use scenario::{
    ClassicalLight, DriftSpec, Fault, LoadedScenario, ProfileSelection, RequestArrival, Scenario,
    ScenarioError, SweepSpec,
};
pub use servo::{
    hom_servo_step, hom_servo_update, polarization_servo_step, polarization_servo_update,
    DriftProcess, DriftQuantity, HomDip, Observable, ServoLoop, ServoUpdate,
};
