//! Boundary between the control plane and the optical layer.

use std::collections::{BTreeMap, BTreeSet};

use super::messages::{MeasurementSample, ProbeDirection};
use crate::ids::{LinkId, NodeId, RequestId};
use crate::rwa::{LightPath, RouteAllocation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOutcome {
    pub converged: bool,
    /// Simulated time the calibration occupies.
    pub duration_s: f64,
}

/// Optical operations the resources perform on behalf of the protocols.
pub trait PhysicalLayer {
    /// Measured end-to-end loss of one lit path.
    fn probe_loss_db(&mut self, path: &LightPath, direction: ProbeDirection, now: f64) -> f64;

    /// Runs the calibration servos of a request's channels.
    fn calibrate(
        &mut self,
        request: RequestId,
        allocation: &RouteAllocation,
        now: f64,
    ) -> CalibrationOutcome;

    fn set_emission(&mut self, request: RequestId, eps: &NodeId, on: bool, now: f64);

    /// Records accumulated at `node` over the last `dt` seconds.
    #[allow(clippy::too_many_arguments)]
    fn measure(
        &mut self,
        request: RequestId,
        node: &NodeId,
        allocation: &RouteAllocation,
        rate: f64,
        dt: f64,
        now: f64,
    ) -> MeasurementSample;

    /// Forgets all per-request state.
    fn release(&mut self, request: RequestId);
}

/// Loss-exact, noiseless optics. Probes return the planned loss, calibration
/// always converges, and records accrue at exactly the requested rate while
/// every EPS of the request is emitting.
#[derive(Debug, Clone, Default)]
pub struct IdealPhysics {
    /// Loss added to probes crossing a link.
    pub extra_loss_db: BTreeMap<LinkId, f64>,
    /// Number of upcoming calibration attempts that fail to converge.
    pub failing_calibrations: u32,
    pub calibration_time_s: f64,
    emitting: BTreeSet<(RequestId, NodeId)>,
    carry: BTreeMap<(RequestId, NodeId), f64>,
}

impl IdealPhysics {
    pub fn new() -> Self {
        Self {
            calibration_time_s: 0.5,
            ..Self::default()
        }
    }

    pub fn is_emitting(&self, request: RequestId, allocation: &RouteAllocation) -> bool {
        allocation
            .eps_nodes()
            .into_iter()
            .all(|e| self.emitting.contains(&(request, e)))
    }
}

impl PhysicalLayer for IdealPhysics {
    fn probe_loss_db(&mut self, path: &LightPath, _direction: ProbeDirection, _now: f64) -> f64 {
        path.total_loss_db
            + path
                .hops
                .iter()
                .filter_map(|h| self.extra_loss_db.get(h))
                .sum::<f64>()
    }

    fn calibrate(
        &mut self,
        _request: RequestId,
        _allocation: &RouteAllocation,
        _now: f64,
    ) -> CalibrationOutcome {
        let converged = if self.failing_calibrations > 0 {
            self.failing_calibrations -= 1;
            false
        } else {
            true
        };
        CalibrationOutcome {
            converged,
            duration_s: self.calibration_time_s,
        }
    }

    fn set_emission(&mut self, request: RequestId, eps: &NodeId, on: bool, _now: f64) {
        if on {
            self.emitting.insert((request, eps.clone()));
        } else {
            self.emitting.remove(&(request, eps.clone()));
        }
    }

    fn measure(
        &mut self,
        request: RequestId,
        node: &NodeId,
        allocation: &RouteAllocation,
        rate: f64,
        dt: f64,
        _now: f64,
    ) -> MeasurementSample {
        if !self.is_emitting(request, allocation) {
            return MeasurementSample::empty();
        }
        let carry = self.carry.entry((request, node.clone())).or_insert(0.0);
        let total = *carry + rate * dt;
        // Tolerance guards against 0.1 + 0.2 style rounding dropping a record.
        let records = (total + 1e-9).floor();
        *carry = (total - records).max(0.0);
        MeasurementSample {
            records: records as u64,
            coincidences: records as u64,
            accidentals: 0,
            car: f64::INFINITY,
            visibility: 1.0,
            fidelity: 1.0,
        }
    }

    fn release(&mut self, request: RequestId) {
        self.emitting.retain(|(r, _)| *r != request);
        self.carry.retain(|(r, _), _| *r != request);
    }
}
