//! Named parameter presets, stored as TOML documents.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    detection_statistics, visibility_from_noise, ChannelPhysics, ClockParams, DetectionStats,
    DetectorParams, EpsParams, LaunchPower, TeleportationSetup,
};

const QLAN1_TELEPORT: &str = include_str!("../../profiles/qlan1_teleport.toml");
const QLAN2_COEXIST: &str = include_str!("../../profiles/qlan2_coexist.toml");

/// Names of the embedded presets.
pub const BUILTIN: &[&str] = &["qlan1_teleport", "qlan2_coexist"];

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("unknown profile {0:?}")]
    Unknown(String),
    #[error("profile {name}: {source}")]
    Parse {
        name: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("profile {name}: {message}")]
    Invalid { name: String, message: String },
}

/// Per-path channel settings shared by every route using a profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDefaults {
    pub raman_coeff: f64,
    pub filter_bandwidth_ghz: f64,
    pub coincidence_window_ns: f64,
}

impl ChannelDefaults {
    pub fn channel(&self, loss_db: f64) -> ChannelPhysics {
        ChannelPhysics {
            loss_db,
            raman_coeff: self.raman_coeff,
            polarization_offset_rad: 0.0,
            delay_offset_ps: 0.0,
            filter_bandwidth_ghz: self.filter_bandwidth_ghz,
            coincidence_window_ns: self.coincidence_window_ns,
        }
    }
}

/// Single-link coexistence experiment: signal over the long fiber with
/// classical light, idler kept local.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoexistenceProfile {
    pub signal_nm: f64,
    pub idler_nm: f64,
    pub link_length_km: f64,
    pub attenuation_db_per_km: f64,
    pub idler_loss_db: f64,
    pub launch_power_dbm: f64,
    pub target_visibility: f64,
    pub sweep_dbm: Vec<f64>,
}

impl CoexistenceProfile {
    pub fn signal_loss_db(&self) -> f64 {
        self.link_length_km * self.attenuation_db_per_km
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeleportProfile {
    pub alice_km: f64,
    pub bob_bsm_km: f64,
    pub bob_receiver_km: f64,
    pub attenuation_db_per_km: f64,
    /// Fixed component loss added to every leg.
    pub component_loss_db: f64,
    pub qubit_mean_photons: f64,
    pub pair_probability: f64,
    pub bsm_success_prob: f64,
    pub clock_launch_dbm: f64,
}

impl TeleportProfile {
    pub fn total_fiber_km(&self) -> f64 {
        self.alice_km + self.bob_bsm_km + self.bob_receiver_km
    }

    fn leg_loss(&self, km: f64) -> f64 {
        km * self.attenuation_db_per_km + self.component_loss_db
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub name: String,
    pub intrinsic_visibility: f64,
    /// Width of the HOM dip.
    #[serde(default = "default_coherence_time_ps")]
    pub coherence_time_ps: f64,
    pub eps: EpsParams,
    pub detector: DetectorParams,
    pub channel: ChannelDefaults,
    #[serde(default)]
    pub clock: ClockParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coexistence: Option<CoexistenceProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teleport: Option<TeleportProfile>,
}

fn default_coherence_time_ps() -> f64 {
    40.0
}

impl Profile {
    pub fn builtin(name: &str) -> Result<Self, ProfileError> {
        let text = match name {
            "qlan1_teleport" => QLAN1_TELEPORT,
            "qlan2_coexist" => QLAN2_COEXIST,
            other => return Err(ProfileError::Unknown(other.to_string())),
        };
        Self::parse(name, text)
    }

    pub fn parse(name: &str, text: &str) -> Result<Self, ProfileError> {
        let profile: Profile = toml::from_str(text).map_err(|source| ProfileError::Parse {
            name: name.to_string(),
            source,
        })?;
        profile.validate()?;
        Ok(profile)
    }

    fn validate(&self) -> Result<(), ProfileError> {
        let bad = |message: &str| {
            Err(ProfileError::Invalid {
                name: self.name.clone(),
                message: message.to_string(),
            })
        };
        if !self.detector.is_valid() {
            return bad("detector efficiency must lie in [0, 1] and rates must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.intrinsic_visibility) {
            return bad("intrinsic_visibility must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.eps.indistinguishability) || self.eps.pair_rate_cps < 0.0 {
            return bad("eps parameters out of range");
        }
        if !self.channel.channel(0.0).is_valid() || self.channel.raman_coeff < 0.0 {
            return bad("channel bandwidth and window must be positive");
        }
        if !(self.coherence_time_ps > 0.0) {
            return bad("coherence_time_ps must be positive");
        }
        if self.clock.clock_rate_hz <= 0.0 || self.clock.sync_jitter_ps < 0.0 {
            return bad("clock rate must be positive");
        }
        if let Some(t) = &self.teleport {
            if !(t.bsm_success_prob > 0.0 && t.bsm_success_prob <= 0.5) {
                return bad("bsm_success_prob must lie in (0, 0.5]");
            }
        }
        Ok(())
    }

    /// Expected statistics of the coexistence link at a launch power.
    pub fn coexistence_stats(&self, launch_power_dbm: f64) -> Option<DetectionStats> {
        let c = self.coexistence.as_ref()?;
        let signal = self.channel.channel(c.signal_loss_db());
        let idler = self.channel.channel(c.idler_loss_db);
        Some(detection_statistics(
            &self.eps,
            &signal,
            &idler,
            &self.detector,
            &self.detector,
            LaunchPower::on_a(launch_power_dbm),
        ))
    }

    pub fn coexistence_visibility(&self, launch_power_dbm: f64) -> Option<f64> {
        self.coexistence_stats(launch_power_dbm)
            .map(|s| visibility_from_noise(&s, self.intrinsic_visibility))
    }

    pub fn teleportation_setup(&self) -> Option<TeleportationSetup> {
        let t = self.teleport.as_ref()?;
        Some(TeleportationSetup {
            clock: self.clock,
            qubit_mean_photons: t.qubit_mean_photons,
            pair_probability: t.pair_probability,
            indistinguishability: self.eps.indistinguishability,
            alice_leg: self.channel.channel(t.leg_loss(t.alice_km)),
            bob_bsm_leg: self.channel.channel(t.leg_loss(t.bob_bsm_km)),
            bob_receiver_leg: self.channel.channel(t.leg_loss(t.bob_receiver_km)),
            detector: self.detector,
            bsm_success_prob: t.bsm_success_prob,
            clock_launch_dbm: t.clock_launch_dbm,
        })
    }
}

/// Raman coefficient that brings the effective visibility of a link to
/// `target_visibility` at `launch_power_dbm`, with all Raman light on leg a.
/// Returns `None` when the target cannot be reached with a non-negative
/// coefficient.
pub fn fit_raman_coeff(
    eps: &EpsParams,
    leg_a: &ChannelPhysics,
    leg_b: &ChannelPhysics,
    det_a: &DetectorParams,
    det_b: &DetectorParams,
    intrinsic_visibility: f64,
    target_visibility: f64,
    launch_power_dbm: f64,
) -> Option<f64> {
    let mut zero = *leg_a;
    zero.raman_coeff = 0.0;
    let base = detection_statistics(eps, &zero, leg_b, det_a, det_b, LaunchPower::dark());
    // V_t = V_i tc / (tc + sa sb w)  =>  sa = tc (V_i / V_t - 1) / (sb w)
    let window_s = leg_a.coincidence_window_ns * 1e-9;
    let sa = base.true_coinc * (intrinsic_visibility / target_visibility - 1.0)
        / (base.singles_b * window_s);
    let raman = sa - base.singles_a;
    let unit = super::dbm_to_mw(launch_power_dbm) * leg_a.filter_bandwidth_ghz;
    (raman >= 0.0 && unit > 0.0).then(|| raman / unit)
}
