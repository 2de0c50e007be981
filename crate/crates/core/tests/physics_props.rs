mod common;

use common::oracle::*;
use proptest::prelude::*;
use qnet_core::physics::{
    clock_misidentification_probability, detection_statistics, fringe_coincidences,
    fringe_visibility, hom_coincidences, raman_noise_rate, teleportation_estimate,
    teleportation_fidelity, transmittance, visibility_from_noise, ChannelPhysics, ClockParams,
    DetectorParams, EpsParams, LaunchPower, Profile,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

proptest! {
    #[test]
    fn transmittance_multiplies(a in 0.0..60.0f64, b in 0.0..60.0f64) {
        prop_assert!(close(transmittance(a + b), transmittance(a) * transmittance(b), 1e-12));
        if a < b {
            prop_assert!(transmittance(a) > transmittance(b));
        }
    }

    #[test]
    fn raman_rate_is_linear(coeff in 0.1..1e4f64, dbm in -20.0..15.0f64, step in 0.5..10.0f64, bw in 1.0..200.0f64, k in 1.5..40.0f64) {
        let mut ch = ChannelPhysics::lossy(10.0);
        ch.raman_coeff = coeff;
        ch.filter_bandwidth_ghz = bw;
        let low = raman_noise_rate(dbm, &ch);
        let high = raman_noise_rate(dbm + step, &ch);
        prop_assert!(close(high / low, 10f64.powf(step / 10.0), 1e-12));
        let mut narrow = ch;
        narrow.filter_bandwidth_ghz = bw / k;
        prop_assert!(close(low / raman_noise_rate(dbm, &narrow), k, 1e-12));
    }

    #[test]
    fn car_falls_with_launch_power(
        rate in 1e4..1e8f64,
        loss_a in 0.0..30.0f64,
        loss_b in 0.0..10.0f64,
        coeff in 1.0..1e4f64,
        dark in 0.0..500.0f64,
        p in -20.0..12.0f64,
        step in 0.1..5.0f64,
    ) {
        let eps = EpsParams { pair_rate_cps: rate, indistinguishability: 0.8 };
        let mut a = ChannelPhysics::lossy(loss_a);
        a.raman_coeff = coeff;
        let b = ChannelPhysics::lossy(loss_b);
        let det = DetectorParams { efficiency: 0.8, dark_rate_cps: dark, jitter_ps: 0.0 };
        let lo = detection_statistics(&eps, &a, &b, &det, &det, LaunchPower::on_a(p));
        let hi = detection_statistics(&eps, &a, &b, &det, &det, LaunchPower::on_a(p + step));
        prop_assert!(hi.car < lo.car);
        for s in [lo, hi] {
            let v = visibility_from_noise(&s, 0.9);
            prop_assert!((0.0..=0.9).contains(&v));
            prop_assert!(s.accidentals == 0.0 || v < 0.9);
        }
    }

    #[test]
    fn fidelity_bounds_and_monotonicity(i in 0.0..=1.0f64, s in 0.0..=1.0f64, di in 0.0..0.5f64, ds in 0.0..0.5f64) {
        let f = teleportation_fidelity(i, s);
        prop_assert!((0.5..=1.0).contains(&f), "{f}");
        prop_assert!(teleportation_fidelity((i + di).min(1.0), s) >= f);
        prop_assert!(teleportation_fidelity(i, (s + ds).min(1.0)) >= f);
    }

    /// The full estimate never drops below 1/2, whatever the link.
    #[test]
    fn teleport_estimate_floor(
        km in 0.0..200.0f64,
        mu in 1e-4..0.5f64,
        pair in 1e-4..0.2f64,
        ind in 0.0..=1.0f64,
        dbm in -30.0..10.0f64,
        jitter in 0.0..3000.0f64,
        rate in 1e6..5e9f64,
    ) {
        let p = Profile::builtin("qlan1_teleport").unwrap();
        let mut setup = p.teleportation_setup().unwrap();
        setup.alice_leg.loss_db = 0.2 * km;
        setup.bob_receiver_leg.loss_db = 0.1 * km;
        setup.qubit_mean_photons = mu;
        setup.pair_probability = pair;
        setup.indistinguishability = ind;
        setup.clock_launch_dbm = dbm;
        setup.detector.jitter_ps = jitter;
        setup.clock.clock_rate_hz = rate;
        let e = teleportation_estimate(&setup);
        prop_assert!(e.fidelity_avg >= 0.5 && e.fidelity_avg <= 1.0, "{e:?}");
        prop_assert!(e.rate_hz >= 0.0);
    }

    #[test]
    fn hom_dip_minimum_at_zero(tau in -500.0..500.0f64, v in 0.05..1.0f64, tc in 5.0..200.0f64) {
        prop_assume!(tau != 0.0);
        prop_assert!(hom_coincidences(tau, 1.0, v, tc) > hom_coincidences(0.0, 1.0, v, tc));
        prop_assert!((hom_coincidences(0.0, 1.0, v, tc) - (1.0 - v)).abs() < 1e-15);
    }

    #[test]
    fn clock_error_monotone(s1 in 0.0..400.0f64, s2 in 0.0..400.0f64, rate in 1e8..5e9f64, k in 1.0..4.0f64) {
        let lo = ClockParams { clock_rate_hz: rate, sync_jitter_ps: s1.min(s2) };
        let hi = ClockParams { clock_rate_hz: rate, sync_jitter_ps: s1.max(s2) };
        prop_assert!(clock_misidentification_probability(&lo, None) <= clock_misidentification_probability(&hi, None));
        let slower = ClockParams { clock_rate_hz: rate / k, ..hi };
        prop_assert!(clock_misidentification_probability(&slower, None) <= clock_misidentification_probability(&hi, None));
    }
}

#[test]
fn fidelity_without_interference_is_two_thirds() {
    assert!((teleportation_fidelity(0.0, 1.0) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(teleportation_fidelity(1.0, 1.0), 1.0);
    assert_eq!(teleportation_fidelity(0.3, 0.0), 0.5);
}

#[test]
fn sampled_fringe_recovers_visibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for v in [0.3, 0.6, 0.77, 0.95] {
        let max = 5e4;
        let c_max = fringe_coincidences(0.0, max, v);
        let c_min = fringe_coincidences(std::f64::consts::FRAC_PI_4, max, v);
        assert!(c_min >= 1e3);
        for _ in 0..20 {
            let hi: f64 = Poisson::new(c_max).unwrap().sample(&mut rng);
            let lo: f64 = Poisson::new(c_min).unwrap().sample(&mut rng);
            let est = fringe_visibility(hi, lo);
            // dV/dCmax = 2 Cmin / S^2, dV/dCmin = -2 Cmax / S^2, Poisson variance = mean
            let s = hi + lo;
            let sigma = 2.0 * (lo * lo * hi + hi * hi * lo).sqrt() / (s * s);
            assert!(
                (est - v).abs() <= 3.0 * sigma,
                "v={v} est={est} sigma={sigma}"
            );
        }
    }
}

#[test]
fn clock_probability_matches_numeric_tail() {
    for sigma in [50.0, 200.0, 800.0, 1500.0, 3000.0] {
        let clock = ClockParams {
            clock_rate_hz: 9e7,
            sync_jitter_ps: sigma,
        };
        let half = 1e12 / 9e7 / 2.0;
        let oracle = gaussian_two_sided_tail(half / sigma);
        let got = clock_misidentification_probability(&clock, None);
        assert!(close(got, oracle, 1e-6), "sigma={sigma}: {got} vs {oracle}");
    }
}

#[test]
fn detector_jitter_adds_in_quadrature() {
    let clock = ClockParams {
        clock_rate_hz: 9e8,
        sync_jitter_ps: 300.0,
    };
    let combined = ClockParams {
        clock_rate_hz: 9e8,
        sync_jitter_ps: 500.0,
    };
    let a = clock_misidentification_probability(&clock, Some(400.0));
    let b = clock_misidentification_probability(&combined, None);
    assert!(close(a, b, 1e-12));
}
