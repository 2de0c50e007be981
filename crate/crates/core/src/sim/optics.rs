//! Optical layer with drifting fibers, servo-held compensators and Poisson
//! counting, plugged into the control plane as its [`PhysicalLayer`].

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;

use super::scenario::LoadedScenario;
use super::servo::{
    hom_servo_update, polarization_servo_update, sampled, DriftQuantity, HomDip, Observable,
    ServoLoop, ServoUpdate,
};
use crate::control::messages::ProbeDirection;
use crate::control::{CalibrationOutcome, MeasurementSample, PhysicalLayer};
use crate::ids::{LinkId, NodeId, RequestId};
use crate::physics::profiles::Profile;
use crate::physics::{
    detection_statistics, hom_coincidences, polarization_error, teleportation_estimate,
    teleportation_fidelity, temporal_overlap, ChannelPhysics, DetectionStats, EpsParams,
    LaunchPower, TeleportationSetup,
};
use crate::rwa::{LightPath, RouteAllocation};
use crate::topology::Topology;

/// Accumulated state of one fiber.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LinkState {
    pub extra_loss_db: f64,
    pub polarization_rad: f64,
    pub delay_ps: f64,
    pub down: bool,
}

#[derive(Debug, Clone)]
struct RequestOptics {
    allocation: RouteAllocation,
    delay_comp_ps: f64,
    polarization_comp_rad: f64,
}

/// Expected optical figures of a request at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticalState {
    pub stats: DetectionStats,
    pub visibility: f64,
    pub fidelity: f64,
    /// Rate at which usable records can accrue.
    pub record_rate_hz: f64,
    /// Residual relative delay after compensation.
    pub delay_offset_ps: f64,
    /// Residual relative polarization rotation after compensation.
    pub polarization_offset_rad: f64,
}

pub struct SimPhysics {
    default_profile: Profile,
    eps_profiles: BTreeMap<NodeId, Profile>,
    eps_rates: BTreeMap<NodeId, f64>,
    link_ends: BTreeMap<LinkId, (NodeId, NodeId)>,
    links: BTreeMap<LinkId, LinkState>,
    launch_power_dbm: Option<f64>,
    /// Empty means every link carries the classical light.
    classical_links: BTreeSet<LinkId>,
    servos: Vec<ServoLoop>,
    calibration_step_s: f64,
    requests: BTreeMap<RequestId, RequestOptics>,
    emitting: BTreeSet<(RequestId, NodeId)>,
    sample_rng: ChaCha8Rng,
    servo_rng: ChaCha8Rng,
}

impl SimPhysics {
    pub fn new(loaded: &LoadedScenario, sample_rng: ChaCha8Rng, servo_rng: ChaCha8Rng) -> Self {
        let topology = &loaded.topology;
        let s = &loaded.scenario;
        Self {
            default_profile: loaded.default_profile.clone(),
            eps_profiles: loaded.eps_profiles.clone(),
            eps_rates: eps_rates(topology),
            link_ends: topology
                .links()
                .map(|l| (l.id.clone(), (l.a.node.clone(), l.b.node.clone())))
                .collect(),
            links: topology
                .links()
                .map(|l| (l.id.clone(), LinkState::default()))
                .collect(),
            launch_power_dbm: s.classical.launch_power_dbm,
            classical_links: s.classical.links.iter().cloned().collect(),
            servos: s.servos.clone(),
            calibration_step_s: s.calibration_step_s,
            requests: BTreeMap::new(),
            emitting: BTreeSet::new(),
            sample_rng,
            servo_rng,
        }
    }

    /// Drift-free optics for a topology under a single profile, with no
    /// servos and dark fibers.
    pub fn with_profile(topology: &Topology, profile: Profile, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let sample_rng = ChaCha8Rng::seed_from_u64(child_seed(&mut master));
        let servo_rng = ChaCha8Rng::seed_from_u64(child_seed(&mut master));
        Self {
            default_profile: profile,
            eps_profiles: BTreeMap::new(),
            eps_rates: eps_rates(topology),
            link_ends: topology
                .links()
                .map(|l| (l.id.clone(), (l.a.node.clone(), l.b.node.clone())))
                .collect(),
            links: topology
                .links()
                .map(|l| (l.id.clone(), LinkState::default()))
                .collect(),
            launch_power_dbm: None,
            classical_links: BTreeSet::new(),
            servos: Vec::new(),
            calibration_step_s: 0.1,
            requests: BTreeMap::new(),
            emitting: BTreeSet::new(),
            sample_rng,
            servo_rng,
        }
    }

    pub fn profile_for(&self, eps: &NodeId) -> &Profile {
        self.eps_profiles.get(eps).unwrap_or(&self.default_profile)
    }

    pub fn links(&self) -> &BTreeMap<LinkId, LinkState> {
        &self.links
    }

    pub fn launch_power_dbm(&self) -> Option<f64> {
        self.launch_power_dbm
    }

    pub fn set_launch_power(&mut self, dbm: f64) {
        self.launch_power_dbm = Some(dbm);
    }

    pub fn add_extra_loss(&mut self, link: &LinkId, db: f64) -> f64 {
        let state = self.links.entry(link.clone()).or_default();
        state.extra_loss_db += db;
        state.extra_loss_db
    }

    pub fn set_link_down(&mut self, link: &LinkId) {
        self.links.entry(link.clone()).or_default().down = true;
    }

    pub fn set_node_down(&mut self, node: &NodeId) {
        let touching: Vec<LinkId> = self
            .link_ends
            .iter()
            .filter(|(_, (a, b))| a == node || b == node)
            .map(|(l, _)| l.clone())
            .collect();
        for l in touching {
            self.set_link_down(&l);
        }
    }

    pub fn drift(&mut self, link: &LinkId, quantity: DriftQuantity, delta: f64) {
        let state = self.links.entry(link.clone()).or_default();
        match quantity {
            DriftQuantity::PolarizationOffset => state.polarization_rad += delta,
            DriftQuantity::DelayOffset => state.delay_ps += delta,
        }
    }

    pub fn tracked(&self) -> impl Iterator<Item = &RequestId> {
        self.requests.keys()
    }

    /// Moves a request's compensator so that the residual delay becomes
    /// `offset_ps`. Test hook for offset-injection experiments.
    pub fn set_residual_delay(&mut self, request: RequestId, offset_ps: f64) {
        let raw = self
            .requests
            .get(&request)
            .map(|o| self.raw_offsets(&o.allocation).0);
        if let (Some(raw), Some(o)) = (raw, self.requests.get_mut(&request)) {
            o.delay_comp_ps = offset_ps - raw;
        }
    }

    fn leg_loss(&self, leg: &LightPath) -> f64 {
        let mut loss = leg.total_loss_db;
        for h in &leg.hops {
            if let Some(s) = self.links.get(h) {
                if s.down {
                    return f64::INFINITY;
                }
                loss += s.extra_loss_db;
            }
        }
        loss
    }

    fn leg_sum(&self, leg: &LightPath) -> (f64, f64) {
        leg.hops
            .iter()
            .filter_map(|h| self.links.get(h))
            .fold((0.0, 0.0), |(d, p), s| {
                (d + s.delay_ps, p + s.polarization_rad)
            })
    }

    /// Uncompensated relative delay and rotation between the two photons
    /// that interfere: signal and idler of a direct route, or the two
    /// photons meeting at the BSM.
    fn raw_offsets(&self, allocation: &RouteAllocation) -> (f64, f64) {
        let (x, y) = match allocation {
            RouteAllocation::Direct(r) => (&r.leg_a, &r.leg_b),
            RouteAllocation::Swap { first, second, .. } => (&first.leg_b, &second.leg_b),
        };
        let (dx, px) = self.leg_sum(x);
        let (dy, py) = self.leg_sum(y);
        (dx - dy, px - py)
    }

    fn residual(&self, request: RequestId) -> Option<(f64, f64)> {
        let o = self.requests.get(&request)?;
        let (d, p) = self.raw_offsets(&o.allocation);
        Some((d + o.delay_comp_ps, p + o.polarization_comp_rad))
    }

    fn power_on(&self, leg: &LightPath) -> f64 {
        match self.launch_power_dbm {
            Some(dbm)
                if self.classical_links.is_empty()
                    || leg.hops.iter().any(|h| self.classical_links.contains(h)) =>
            {
                dbm
            }
            _ => f64::NEG_INFINITY,
        }
    }

    fn channel(&self, profile: &Profile, leg: &LightPath) -> ChannelPhysics {
        profile.channel.channel(self.leg_loss(leg))
    }

    fn pair_rate(&self, eps: &NodeId) -> f64 {
        self.eps_rates
            .get(eps)
            .copied()
            .unwrap_or_else(|| self.profile_for(eps).eps.pair_rate_cps)
    }

    /// Expected figures of a tracked request.
    pub fn optical_state(&self, request: RequestId) -> Option<OpticalState> {
        let o = self.requests.get(&request)?;
        let (delay, pol) = self.residual(request)?;
        Some(self.evaluate(&o.allocation, delay, pol))
    }

    fn evaluate(&self, allocation: &RouteAllocation, delay: f64, pol: f64) -> OpticalState {
        match allocation {
            RouteAllocation::Direct(r) => {
                let p = self.profile_for(&r.eps);
                let mut a = self.channel(p, &r.leg_a);
                let mut b = self.channel(p, &r.leg_b);
                a.delay_offset_ps = delay;
                a.polarization_offset_rad = pol;
                b.delay_offset_ps = 0.0;
                let eps = EpsParams {
                    pair_rate_cps: self.pair_rate(&r.eps),
                    indistinguishability: p.eps.indistinguishability,
                };
                let stats = detection_statistics(
                    &eps,
                    &a,
                    &b,
                    &p.detector,
                    &p.detector,
                    LaunchPower {
                        leg_a_dbm: self.power_on(&r.leg_a),
                        leg_b_dbm: self.power_on(&r.leg_b),
                    },
                );
                let overlap =
                    polarization_error(pol) * temporal_overlap(delay, p.coherence_time_ps);
                let visibility = p.intrinsic_visibility * overlap * stats.signal_fraction();
                OpticalState {
                    stats,
                    visibility,
                    // Bell-state fidelity of a Werner state with this visibility.
                    fidelity: (1.0 + 3.0 * visibility) / 4.0,
                    record_rate_hz: stats.true_coinc,
                    delay_offset_ps: delay,
                    polarization_offset_rad: pol,
                }
            }
            RouteAllocation::Swap { first, second, .. } => {
                let p = self.profile_for(&second.eps);
                let clock = p.clock;
                let (mu, p_pair, bsm, clock_dbm) = match &p.teleport {
                    Some(t) => (
                        t.qubit_mean_photons,
                        t.pair_probability,
                        t.bsm_success_prob,
                        t.clock_launch_dbm,
                    ),
                    None => (
                        self.pair_rate(&first.eps) / clock.clock_rate_hz,
                        self.pair_rate(&second.eps) / clock.clock_rate_hz,
                        0.5,
                        self.launch_power_dbm.unwrap_or(f64::NEG_INFINITY),
                    ),
                };
                let overlap =
                    polarization_error(pol) * temporal_overlap(delay, p.coherence_time_ps);
                let setup = TeleportationSetup {
                    clock,
                    qubit_mean_photons: mu,
                    pair_probability: p_pair,
                    indistinguishability: p.eps.indistinguishability * overlap,
                    alice_leg: self.channel(p, &first.leg_b),
                    bob_bsm_leg: self.channel(p, &second.leg_b),
                    bob_receiver_leg: self.channel(p, &second.leg_a),
                    detector: p.detector,
                    bsm_success_prob: bsm,
                    clock_launch_dbm: clock_dbm,
                };
                let est = teleportation_estimate(&setup);
                let eps = EpsParams {
                    pair_rate_cps: clock.clock_rate_hz * p_pair,
                    indistinguishability: setup.indistinguishability,
                };
                let stats = detection_statistics(
                    &eps,
                    &setup.bob_bsm_leg,
                    &setup.bob_receiver_leg,
                    &p.detector,
                    &p.detector,
                    LaunchPower {
                        leg_a_dbm: clock_dbm,
                        leg_b_dbm: clock_dbm,
                    },
                );
                debug_assert!(
                    (teleportation_fidelity(setup.indistinguishability, est.signal_fraction)
                        - est.fidelity_avg)
                        .abs()
                        < 1e-12
                );
                OpticalState {
                    stats,
                    visibility: p.intrinsic_visibility * overlap * est.signal_fraction,
                    fidelity: est.fidelity_avg,
                    record_rate_hz: est.rate_hz,
                    delay_offset_ps: delay,
                    polarization_offset_rad: pol,
                }
            }
        }
    }

    fn track(&mut self, request: RequestId, allocation: &RouteAllocation) {
        self.requests
            .entry(request)
            .and_modify(|o| o.allocation = allocation.clone())
            .or_insert_with(|| RequestOptics {
                allocation: allocation.clone(),
                delay_comp_ps: 0.0,
                polarization_comp_rad: 0.0,
            });
    }

    fn dip_for(&self, allocation: &RouteAllocation) -> HomDip {
        let eps = &allocation.eps_nodes()[0];
        let p = self.profile_for(eps);
        HomDip {
            visibility: p.eps.indistinguishability,
            coherence_time_ps: p.coherence_time_ps,
        }
    }

    /// Runs one iteration of `servo` on a tracked request. With `apply`
    /// false the servo only measures.
    pub fn servo_step(
        &mut self,
        request: RequestId,
        servo: &ServoLoop,
        apply: bool,
    ) -> Option<ServoUpdate> {
        let (delay, pol) = self.residual(request)?;
        let dip = self.dip_for(&self.requests[&request].allocation);
        let rng = &mut self.servo_rng;
        let counts = servo.probe_counts;
        let update = match servo.observable {
            Observable::HomDip => hom_servo_update(delay, servo, &dip, |tau| {
                let c = hom_coincidences(tau, 1.0, dip.visibility, dip.coherence_time_ps);
                counts.map_or(c, |n| sampled(rng, c, n))
            }),
            Observable::PolarizationVisibility => polarization_servo_update(pol, servo, |x| {
                let m = polarization_error(x);
                counts.map_or(m, |n| sampled(rng, m, n))
            }),
        };
        if apply {
            let o = self.requests.get_mut(&request).expect("tracked");
            match servo.observable {
                Observable::HomDip => o.delay_comp_ps += update.offset - delay,
                Observable::PolarizationVisibility => {
                    o.polarization_comp_rad += update.offset - pol
                }
            }
        }
        Some(update)
    }

    fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
        if !(mean > 0.0) || !mean.is_finite() {
            return 0;
        }
        Poisson::new(mean).expect("positive mean").sample(rng) as u64
    }

    pub fn is_emitting(&self, request: RequestId, allocation: &RouteAllocation) -> bool {
        allocation
            .eps_nodes()
            .into_iter()
            .all(|e| self.emitting.contains(&(request, e)))
    }
}

fn eps_rates(topology: &Topology) -> BTreeMap<NodeId, f64> {
    topology
        .nodes()
        .filter_map(|n| {
            n.features
                .eps
                .as_ref()
                .map(|f| (n.id.clone(), f.pair_rate_cps))
        })
        .collect()
}

impl PhysicalLayer for SimPhysics {
    fn probe_loss_db(&mut self, path: &LightPath, _direction: ProbeDirection, _now: f64) -> f64 {
        self.leg_loss(path)
    }

    fn calibrate(
        &mut self,
        request: RequestId,
        allocation: &RouteAllocation,
        _now: f64,
    ) -> CalibrationOutcome {
        self.track(request, allocation);
        let servos = self.servos.clone();
        let mut steps = 0u32;
        let mut converged = true;
        for servo in &servos {
            let mut done = false;
            for _ in 0..servo.step_budget {
                let u = self.servo_step(request, servo, false).expect("tracked");
                if u.converged {
                    done = true;
                    break;
                }
                self.servo_step(request, servo, true);
                steps += 1;
            }
            if !done {
                done = self
                    .servo_step(request, servo, false)
                    .is_some_and(|u| u.converged);
            }
            converged &= done;
        }
        CalibrationOutcome {
            converged,
            duration_s: f64::from(steps.max(1)) * self.calibration_step_s,
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
        _node: &NodeId,
        allocation: &RouteAllocation,
        rate: f64,
        dt: f64,
        _now: f64,
    ) -> MeasurementSample {
        if !self.is_emitting(request, allocation) {
            return MeasurementSample::empty();
        }
        self.track(request, allocation);
        let state = self.optical_state(request).expect("tracked");
        let rng = &mut self.sample_rng;
        let records = Self::poisson(rng, rate.min(state.record_rate_hz) * dt);
        let coincidences = Self::poisson(rng, state.stats.true_coinc * dt);
        let accidentals = Self::poisson(rng, state.stats.accidentals * dt);
        let car = if accidentals > 0 {
            (coincidences + accidentals) as f64 / accidentals as f64
        } else {
            f64::INFINITY
        };
        MeasurementSample {
            records,
            coincidences,
            accidentals,
            car,
            visibility: state.visibility,
            fidelity: state.fidelity,
        }
    }

    fn release(&mut self, request: RequestId) {
        self.requests.remove(&request);
        self.emitting.retain(|(r, _)| *r != request);
    }
}

/// Draws a `u64` seed for an independent stream.
pub(crate) fn child_seed<R: Rng>(rng: &mut R) -> u64 {
    rng.random()
}
