//! Expected-value optical model of the quantum channels.
//!
//! Every function here is pure. Stochastic sampling happens in the
//! simulator, around the means computed here.

pub mod profiles;

use serde::{Deserialize, Serialize};

pub use profiles::{CoexistenceProfile, Profile, ProfileError, TeleportProfile};

/// Optical state of one path as seen by its receiver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelPhysics {
    pub loss_db: f64,
    /// Effective Raman coefficient in counts/s per mW of launch power per GHz
    /// of filter bandwidth.
    pub raman_coeff: f64,
    pub polarization_offset_rad: f64,
    pub delay_offset_ps: f64,
    pub filter_bandwidth_ghz: f64,
    pub coincidence_window_ns: f64,
}

impl ChannelPhysics {
    pub fn lossy(loss_db: f64) -> Self {
        Self {
            loss_db,
            raman_coeff: 0.0,
            polarization_offset_rad: 0.0,
            delay_offset_ps: 0.0,
            filter_bandwidth_ghz: 100.0,
            coincidence_window_ns: 0.5,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.loss_db >= 0.0 && self.filter_bandwidth_ghz > 0.0 && self.coincidence_window_ns > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    pub efficiency: f64,
    pub dark_rate_cps: f64,
    /// Gaussian sigma of the detector timing jitter.
    #[serde(default)]
    pub jitter_ps: f64,
}

impl DetectorParams {
    pub fn ideal() -> Self {
        Self {
            efficiency: 1.0,
            dark_rate_cps: 0.0,
            jitter_ps: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.efficiency) && self.dark_rate_cps >= 0.0 && self.jitter_ps >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsParams {
    pub pair_rate_cps: f64,
    /// Two-photon indistinguishability, the depth parameter of the HOM dip.
    pub indistinguishability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockParams {
    pub clock_rate_hz: f64,
    pub sync_jitter_ps: f64,
}

impl Default for ClockParams {
    fn default() -> Self {
        Self {
            clock_rate_hz: 9.0e7,
            sync_jitter_ps: 5.0,
        }
    }
}

pub fn transmittance(loss_db: f64) -> f64 {
    10f64.powf(-loss_db / 10.0)
}

/// dBm to mW; `-inf` dBm maps to exactly zero power.
pub fn dbm_to_mw(dbm: f64) -> f64 {
    if dbm == f64::NEG_INFINITY {
        0.0
    } else {
        10f64.powf(dbm / 10.0)
    }
}

/// Raman noise count rate reaching the quantum receiver. Linear in launch
/// power (mW) and in filter bandwidth.
pub fn raman_noise_rate(launch_power_dbm: f64, channel: &ChannelPhysics) -> f64 {
    channel.raman_coeff * dbm_to_mw(launch_power_dbm) * channel.filter_bandwidth_ghz
}

/// Mean count rates of a two-detector coincidence measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub singles_a: f64,
    pub singles_b: f64,
    pub true_coinc: f64,
    pub accidentals: f64,
    /// Coincidence-to-accidental ratio; `f64::INFINITY` when there are no
    /// accidentals.
    #[serde(with = "crate::physics::inf_as_string")]
    pub car: f64,
}

impl DetectionStats {
    /// Fraction of coincidences that are genuine pairs.
    pub fn signal_fraction(&self) -> f64 {
        let total = self.true_coinc + self.accidentals;
        if total > 0.0 {
            self.true_coinc / total
        } else {
            1.0
        }
    }
}

/// Launch power of co-propagating classical light on each leg.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaunchPower {
    pub leg_a_dbm: f64,
    pub leg_b_dbm: f64,
}

impl LaunchPower {
    pub fn dark() -> Self {
        Self {
            leg_a_dbm: f64::NEG_INFINITY,
            leg_b_dbm: f64::NEG_INFINITY,
        }
    }

    pub fn on_a(dbm: f64) -> Self {
        Self {
            leg_a_dbm: dbm,
            leg_b_dbm: f64::NEG_INFINITY,
        }
    }
}

/// Singles, true coincidences, accidentals and CAR for a pair source feeding
/// two detectors. The coincidence window is taken from `leg_a`.
pub fn detection_statistics(
    eps: &EpsParams,
    leg_a: &ChannelPhysics,
    leg_b: &ChannelPhysics,
    det_a: &DetectorParams,
    det_b: &DetectorParams,
    power: LaunchPower,
) -> DetectionStats {
    let ea = transmittance(leg_a.loss_db) * det_a.efficiency;
    let eb = transmittance(leg_b.loss_db) * det_b.efficiency;
    let singles_a =
        eps.pair_rate_cps * ea + raman_noise_rate(power.leg_a_dbm, leg_a) + det_a.dark_rate_cps;
    let singles_b =
        eps.pair_rate_cps * eb + raman_noise_rate(power.leg_b_dbm, leg_b) + det_b.dark_rate_cps;
    let true_coinc = eps.pair_rate_cps * ea * eb;
    let window_s = leg_a.coincidence_window_ns * 1e-9;
    let accidentals = singles_a * singles_b * window_s;
    let car = if accidentals > 0.0 {
        (true_coinc + accidentals) / accidentals
    } else {
        f64::INFINITY
    };
    DetectionStats {
        singles_a,
        singles_b,
        true_coinc,
        accidentals,
        car,
    }
}

/// Two-photon interference fringe vs. relative half-wave-plate angle,
/// normalised so that `C(0) = max_coinc`.
pub fn fringe_coincidences(relative_hwp_angle_rad: f64, max_coinc: f64, visibility: f64) -> f64 {
    let c = (2.0 * relative_hwp_angle_rad).cos();
    max_coinc * (1.0 - visibility + 2.0 * visibility * c * c) / (1.0 + visibility)
}

/// `(Cmax - Cmin) / (Cmax + Cmin)`.
pub fn fringe_visibility(c_max: f64, c_min: f64) -> f64 {
    (c_max - c_min) / (c_max + c_min)
}

/// Intrinsic visibility diluted by accidental coincidences.
pub fn visibility_from_noise(stats: &DetectionStats, intrinsic_visibility: f64) -> f64 {
    intrinsic_visibility * stats.signal_fraction()
}

/// Gaussian Hong-Ou-Mandel dip.
pub fn hom_coincidences(
    relative_delay_ps: f64,
    baseline_coinc: f64,
    hom_visibility: f64,
    coherence_time_ps: f64,
) -> f64 {
    let x = relative_delay_ps / coherence_time_ps;
    baseline_coinc * (1.0 - hom_visibility * (-x * x).exp())
}

/// Temporal-mode overlap `exp(-(τ/τc)^2)`, the fraction of the HOM dip
/// depth retained at delay `τ`.
pub fn temporal_overlap(relative_delay_ps: f64, coherence_time_ps: f64) -> f64 {
    let x = relative_delay_ps / coherence_time_ps;
    (-x * x).exp()
}

/// Visibility multiplier for a residual polarization rotation.
pub fn polarization_error(offset_rad: f64) -> f64 {
    let c = offset_rad.cos();
    c * c
}

/// Probability that a photon lands outside its clock bin: the two-sided
/// Gaussian tail beyond half a bin, with sync and detector jitter combined
/// in quadrature.
pub fn clock_misidentification_probability(
    clock: &ClockParams,
    detector_jitter_ps: Option<f64>,
) -> f64 {
    let det = detector_jitter_ps.unwrap_or(0.0);
    let sigma = (clock.sync_jitter_ps * clock.sync_jitter_ps + det * det).sqrt();
    if sigma == 0.0 {
        return 0.0;
    }
    let half_bin_ps = 1e12 / clock.clock_rate_hz / 2.0;
    libm::erfc(half_bin_ps / (sigma * std::f64::consts::SQRT_2))
}

/// Average teleportation fidelity for signal fraction `s` and
/// indistinguishability `i`: `F = (2 + i)/3 * s + (1 - s)/2`.
pub fn teleportation_fidelity(indistinguishability: f64, signal_fraction: f64) -> f64 {
    let f_max = (2.0 + indistinguishability) / 3.0;
    f_max * signal_fraction + (1.0 - signal_fraction) / 2.0
}

/// Inputs of a three-party time-bin teleportation link: Alice's weak qubit
/// source, Bob's pair source, and Charlie's Bell-state measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeleportationSetup {
    pub clock: ClockParams,
    /// Mean photon number per clock cycle of Alice's qubits.
    pub qubit_mean_photons: f64,
    /// Pair generation probability per clock cycle at Bob.
    pub pair_probability: f64,
    pub indistinguishability: f64,
    pub alice_leg: ChannelPhysics,
    pub bob_bsm_leg: ChannelPhysics,
    pub bob_receiver_leg: ChannelPhysics,
    pub detector: DetectorParams,
    pub bsm_success_prob: f64,
    /// Co-propagating clock light on Bob's legs.
    pub clock_launch_dbm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeleportationEstimate {
    pub rate_hz: f64,
    pub fidelity_avg: f64,
    pub signal_fraction: f64,
    pub misidentification: f64,
}

pub fn teleportation_estimate(setup: &TeleportationSetup) -> TeleportationEstimate {
    let eta = setup.detector.efficiency;
    let p_qubit = setup.qubit_mean_photons * transmittance(setup.alice_leg.loss_db);
    let p_pair = setup.pair_probability
        * transmittance(setup.bob_bsm_leg.loss_db)
        * transmittance(setup.bob_receiver_leg.loss_db);
    let rate_hz =
        setup.clock.clock_rate_hz * p_qubit * p_pair * setup.bsm_success_prob * eta.powi(3);

    let eps = EpsParams {
        pair_rate_cps: setup.clock.clock_rate_hz * setup.pair_probability,
        indistinguishability: setup.indistinguishability,
    };
    let stats = detection_statistics(
        &eps,
        &setup.bob_bsm_leg,
        &setup.bob_receiver_leg,
        &setup.detector,
        &setup.detector,
        LaunchPower {
            leg_a_dbm: setup.clock_launch_dbm,
            leg_b_dbm: setup.clock_launch_dbm,
        },
    );
    let misidentification =
        clock_misidentification_probability(&setup.clock, Some(setup.detector.jitter_ps));
    let s = stats.signal_fraction() * (1.0 - misidentification);
    TeleportationEstimate {
        rate_hz,
        fidelity_avg: teleportation_fidelity(setup.indistinguishability, s),
        signal_fraction: s,
        misidentification,
    }
}

/// Serializes non-finite values as strings (`"inf"`), which JSON lacks.
pub(crate) mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NumOrStr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match NumOrStr::deserialize(d)? {
            NumOrStr::Num(x) => Ok(x),
            NumOrStr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, FRAC_PI_2, FRAC_PI_4, FRAC_PI_6};

    #[test]
    fn transmittance_values() {
        assert_eq!(transmittance(0.0), 1.0);
        assert!((transmittance(10.0) - 0.1).abs() < 1e-15);
        let loss: f64 = 45.6 * 0.43;
        assert!((loss - 19.608).abs() < 1e-12);
        assert!((transmittance(loss) - 0.010944).abs() < 1e-6);
    }

    #[test]
    fn raman_rate_examples() {
        let mut ch = ChannelPhysics::lossy(0.0);
        ch.raman_coeff = 1.0;
        ch.filter_bandwidth_ghz = 100.0;
        assert!((raman_noise_rate(0.0, &ch) - 100.0).abs() < 1e-12);
        assert_eq!(raman_noise_rate(f64::NEG_INFINITY, &ch), 0.0);
        let wide = raman_noise_rate(6.8, &ch);
        ch.filter_bandwidth_ghz = 5.0;
        let narrow = raman_noise_rate(6.8, &ch);
        assert!((wide / narrow - 20.0).abs() < 1e-9);
    }

    #[test]
    fn car_formula_example() {
        // singles 1e4 / 1e4, 0.5 ns window, 100 true coincidences
        let eps = EpsParams {
            pair_rate_cps: 1e4,
            indistinguishability: 1.0,
        };
        let mut leg = ChannelPhysics::lossy(0.0);
        leg.coincidence_window_ns = 0.5;
        let det_a = DetectorParams {
            efficiency: 1.0,
            dark_rate_cps: 0.0,
            jitter_ps: 0.0,
        };
        // efficiency 0.1 on b would lower singles_b; instead set singles via dark counts
        let det_b = DetectorParams {
            efficiency: 0.01,
            dark_rate_cps: 1e4 - 100.0,
            jitter_ps: 0.0,
        };
        let s = detection_statistics(&eps, &leg, &leg, &det_a, &det_b, LaunchPower::dark());
        assert!((s.singles_a - 1e4).abs() < 1e-9);
        assert!((s.singles_b - 1e4).abs() < 1e-9);
        assert!((s.true_coinc - 100.0).abs() < 1e-9);
        assert!((s.accidentals - 0.05).abs() < 1e-12);
        assert!((s.car - 2001.0).abs() < 1e-6);
    }

    #[test]
    fn noiseless_car_is_infinite() {
        let eps = EpsParams {
            pair_rate_cps: 0.0,
            indistinguishability: 1.0,
        };
        let leg = ChannelPhysics::lossy(3.0);
        let s = detection_statistics(
            &eps,
            &leg,
            &leg,
            &DetectorParams::ideal(),
            &DetectorParams::ideal(),
            LaunchPower::dark(),
        );
        assert_eq!(s.car, f64::INFINITY);
        assert_eq!(visibility_from_noise(&s, 0.9), 0.9);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"car\":\"inf\""));
        let back: DetectionStats = serde_json::from_str(&json).unwrap();
        assert_eq!(back.car, f64::INFINITY);
    }

    #[test]
    fn fringe_examples() {
        assert_eq!(fringe_coincidences(0.0, 1000.0, 0.77), 1000.0);
        let cmax = fringe_coincidences(0.0, 1000.0, 0.77);
        let cmin = fringe_coincidences(FRAC_PI_4, 1000.0, 0.77);
        assert!((fringe_visibility(cmax, cmin) - 0.77).abs() < 1e-12);
        for th in [0.0, 0.3, 1.1, 2.0] {
            assert!((fringe_coincidences(th, 500.0, 0.0) - 500.0).abs() < 1e-12);
        }
    }

    #[test]
    fn visibility_halves_when_accidentals_equal_true() {
        let s = DetectionStats {
            singles_a: 1.0,
            singles_b: 1.0,
            true_coinc: 10.0,
            accidentals: 10.0,
            car: 2.0,
        };
        assert!((visibility_from_noise(&s, 0.9) - 0.45).abs() < 1e-15);
    }

    #[test]
    fn hom_examples() {
        assert!((hom_coincidences(0.0, 100.0, 0.9, 20.0) - 10.0).abs() < 1e-12);
        assert!((hom_coincidences(1e4, 100.0, 0.9, 20.0) - 100.0).abs() < 1e-9);
        let v = hom_coincidences(20.0, 100.0, 0.9, 20.0);
        assert!((v - 100.0 * (1.0 - 0.9 / E)).abs() < 1e-12);
    }

    #[test]
    fn polarization_examples() {
        assert_eq!(polarization_error(0.0), 1.0);
        assert!(polarization_error(FRAC_PI_2) < 1e-30);
        assert!((polarization_error(FRAC_PI_6) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn misidentification_examples() {
        let mut clock = ClockParams {
            clock_rate_hz: 9e7,
            sync_jitter_ps: 0.0,
        };
        assert_eq!(clock_misidentification_probability(&clock, None), 0.0);
        clock.sync_jitter_ps = 5.0;
        assert!(clock_misidentification_probability(&clock, None) < 1e-12);
        // jitter equal to half a bin: two-sided 1-sigma tail
        clock.sync_jitter_ps = 1e12 / 9e7 / 2.0;
        let p = clock_misidentification_probability(&clock, None);
        assert!((p - 0.317_310_507_862_914).abs() < 1e-12, "{p}");
    }

    #[test]
    fn fidelity_limits() {
        assert!((teleportation_fidelity(1.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((teleportation_fidelity(0.0, 1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((teleportation_fidelity(0.7, 0.0) - 0.5).abs() < 1e-15);
    }
}
