//! Drift processes and the two calibration servos.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::physics::{hom_coincidences, polarization_error, ChannelPhysics};

/// Default random-walk strengths, per square-root second.
pub const DEFAULT_POLARIZATION_SIGMA: f64 = 0.01;
pub const DEFAULT_DELAY_SIGMA_PS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftQuantity {
    PolarizationOffset,
    DelayOffset,
}

impl DriftQuantity {
    pub fn default_sigma(self) -> f64 {
        match self {
            DriftQuantity::PolarizationOffset => DEFAULT_POLARIZATION_SIGMA,
            DriftQuantity::DelayOffset => DEFAULT_DELAY_SIGMA_PS,
        }
    }
}

/// Gaussian random walk on one quantity of one fiber.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftProcess {
    pub quantity: DriftQuantity,
    /// Walk strength per square-root second (rad or ps).
    pub sigma_per_sqrt_s: f64,
    pub interval_s: f64,
}

impl DriftProcess {
    /// Standard deviation of one step.
    pub fn step_sigma(&self) -> f64 {
        self.sigma_per_sqrt_s * self.interval_s.sqrt()
    }

    pub fn step<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let sigma = self.step_sigma();
        if sigma == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    HomDip,
    PolarizationVisibility,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServoLoop {
    pub observable: Observable,
    #[serde(default = "default_period")]
    pub period_s: f64,
    #[serde(default = "default_gain")]
    pub gain: f64,
    /// Residual offset regarded as converged (ps or rad). Defaults to 2 ps
    /// or 0.02 rad.
    #[serde(default)]
    pub tolerance: Option<f64>,
    /// Delay dither of the HOM probes.
    #[serde(default = "default_probe_step")]
    pub probe_step_ps: f64,
    /// Servo steps a calibration may take before giving up.
    #[serde(default = "default_budget")]
    pub step_budget: u32,
    /// Expected counts per probe. Unset means noiseless probes.
    #[serde(default)]
    pub probe_counts: Option<f64>,
}

fn default_period() -> f64 {
    1.0
}
fn default_gain() -> f64 {
    0.8
}
fn default_probe_step() -> f64 {
    5.0
}
fn default_budget() -> u32 {
    50
}

impl ServoLoop {
    pub fn new(observable: Observable) -> Self {
        Self {
            observable,
            period_s: default_period(),
            gain: default_gain(),
            tolerance: None,
            probe_step_ps: default_probe_step(),
            step_budget: default_budget(),
            probe_counts: None,
        }
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance.unwrap_or(match self.observable {
            Observable::HomDip => 2.0,
            Observable::PolarizationVisibility => 0.02,
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(format!("gain {} outside (0, 1]", self.gain));
        }
        if !(self.tolerance() > 0.0) {
            return Err("tolerance must be positive".into());
        }
        if !(self.period_s > 0.0) {
            return Err("period_s must be positive".into());
        }
        if !(self.probe_step_ps > 0.0) {
            return Err("probe_step_ps must be positive".into());
        }
        if self.probe_counts.is_some_and(|c| !(c > 0.0)) {
            return Err("probe_counts must be positive".into());
        }
        Ok(())
    }
}

/// Shape of the HOM dip the delay servo descends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomDip {
    pub visibility: f64,
    pub coherence_time_ps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServoUpdate {
    pub offset: f64,
    /// The servo's own estimate of the offset before correcting it.
    pub estimate: f64,
    pub converged: bool,
}

/// One delay-servo iteration. `probe` returns normalised coincidences
/// (baseline 1) at a trial delay; the dithered pair gives the slope, which is
/// scaled so that near the minimum a unit gain removes the whole offset.
/// Convergence is judged from the dip depth at the current delay.
pub fn hom_servo_update(
    offset_ps: f64,
    servo: &ServoLoop,
    dip: &HomDip,
    mut probe: impl FnMut(f64) -> f64,
) -> ServoUpdate {
    let d = servo.probe_step_ps;
    let tc = dip.coherence_time_ps;
    let depth_scale = dip.visibility.max(f64::MIN_POSITIVE);
    let slope = (probe(offset_ps + d) - probe(offset_ps - d)) / (2.0 * d) / depth_scale;
    let estimate = slope * tc * tc / 2.0;
    let depth = (1.0 - probe(offset_ps)) / depth_scale;
    let tol = servo.tolerance();
    let converged = depth >= (-(tol / tc) * (tol / tc)).exp();
    ServoUpdate {
        offset: offset_ps - servo.gain * estimate,
        estimate,
        converged,
    }
}

/// Noiseless delay-servo step on a channel.
pub fn hom_servo_step(channel: &ChannelPhysics, servo: &ServoLoop, dip: &HomDip) -> f64 {
    hom_servo_update(channel.delay_offset_ps, servo, dip, |tau| {
        hom_coincidences(tau, 1.0, dip.visibility, dip.coherence_time_ps)
    })
    .offset
}

/// One polarization-servo iteration. `measure` returns the visibility
/// multiplier seen by the classical reference light; the rotation sense is
/// known to the polarimeter, so only the magnitude comes from the multiplier.
pub fn polarization_servo_update(
    offset_rad: f64,
    servo: &ServoLoop,
    measure: impl FnOnce(f64) -> f64,
) -> ServoUpdate {
    let m = measure(offset_rad).clamp(0.0, 1.0);
    let magnitude = m.sqrt().acos();
    let estimate = if offset_rad < 0.0 {
        -magnitude
    } else {
        magnitude
    };
    ServoUpdate {
        offset: offset_rad - servo.gain * estimate,
        estimate,
        converged: magnitude < servo.tolerance(),
    }
}

/// Noiseless polarization-servo step on a channel.
pub fn polarization_servo_step(channel: &ChannelPhysics, servo: &ServoLoop) -> f64 {
    polarization_servo_update(channel.polarization_offset_rad, servo, polarization_error).offset
}

/// Poisson-sampled probe around an expected normalised value.
pub fn sampled<R: Rng + ?Sized>(rng: &mut R, expected: f64, counts: f64) -> f64 {
    let mean = (expected * counts).max(0.0);
    if mean == 0.0 {
        return 0.0;
    }
    let n: f64 = Poisson::new(mean).expect("positive mean").sample(rng);
    n / counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_6;

    fn dip() -> HomDip {
        HomDip {
            visibility: 0.9,
            coherence_time_ps: 40.0,
        }
    }

    fn chan(delay: f64, pol: f64) -> ChannelPhysics {
        let mut c = ChannelPhysics::lossy(0.0);
        c.delay_offset_ps = delay;
        c.polarization_offset_rad = pol;
        c
    }

    #[test]
    fn hom_servo_at_zero_stays() {
        let s = ServoLoop::new(Observable::HomDip);
        assert_eq!(hom_servo_step(&chan(0.0, 0.0), &s, &dip()), 0.0);
    }

    #[test]
    fn hom_servo_recovers_both_signs() {
        let s = ServoLoop::new(Observable::HomDip);
        for start in [50.0, -50.0] {
            let mut x: f64 = start;
            let mut steps = 0;
            while x.abs() >= s.tolerance() {
                x = hom_servo_step(&chan(x, 0.0), &s, &dip());
                steps += 1;
                assert!(steps <= s.step_budget, "no convergence from {start}");
            }
        }
    }

    #[test]
    fn hom_convergence_flag_matches_offset() {
        let s = ServoLoop::new(Observable::HomDip);
        let probe = |t: f64| hom_coincidences(t, 1.0, 0.9, 40.0);
        assert!(hom_servo_update(1.0, &s, &dip(), probe).converged);
        assert!(!hom_servo_update(3.0, &s, &dip(), probe).converged);
    }

    #[test]
    fn polarization_servo_closed_loop() {
        let mut s = ServoLoop::new(Observable::PolarizationVisibility);
        assert_eq!(polarization_servo_step(&chan(0.0, 0.0), &s), 0.0);
        s.gain = 1.0;
        assert!(polarization_servo_step(&chan(0.0, FRAC_PI_6), &s).abs() < 1e-12);
        assert!(polarization_servo_step(&chan(0.0, -FRAC_PI_6), &s).abs() < 1e-12);
    }

    #[test]
    fn drift_step_scales_with_interval() {
        let d = DriftProcess {
            quantity: DriftQuantity::DelayOffset,
            sigma_per_sqrt_s: 1.0,
            interval_s: 4.0,
        };
        assert_eq!(d.step_sigma(), 2.0);
    }

    #[test]
    fn servo_validation() {
        let mut s = ServoLoop::new(Observable::HomDip);
        assert!(s.validate().is_ok());
        s.gain = 0.0;
        assert!(s.validate().is_err());
        s.gain = 1.5;
        assert!(s.validate().is_err());
    }
}
