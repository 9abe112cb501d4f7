use std::f64::consts::PI;

use beamtrack::channel::*;
use beamtrack::harness::checks::{channel_oracle_suite, nearest_codeword};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn thermal_noise_reference_values() {
    // 10·log10(5e7) = 76.9897; evaluated by hand.
    assert!((noise_power_dbm(50e6, 9.0) - (-88.0103)).abs() < 1e-4);
    assert!((noise_power_dbm(50e6, 13.0) - (-84.0103)).abs() < 1e-4);
    assert!((SceneConfig::full().noise_power_dbm() - (-88.0103)).abs() < 1e-4);
    assert!((dbm_to_watts(30.0) - 1.0).abs() < 1e-12);
}

#[test]
fn free_space_loss_at_one_metre() {
    // (4π · 28e9 / c)² ≈ 1.37754e6, i.e. 61.39 dB.
    let rho = path_loss(1.0, 28e9);
    assert!((10.0 * rho.log10() - 61.3910).abs() < 1e-3, "{rho}");
    assert!((path_loss(10.0, 28e9) / rho - 100.0).abs() < 1e-9);
}

#[test]
fn oracle_suite_passes_on_two_hundred_scenes() {
    for r in channel_oracle_suite(17, 200).unwrap() {
        assert!(r.passed, "{r}");
    }
}

#[test]
fn broadside_ue_picks_beam_zero() {
    let cfg = SceneConfig {
        n_paths: 1,
        ..SceneConfig::full()
    };
    let book = dft_codebook(64, 64);
    let h = channel_at([50.0, 0.0], &PathSet { nlos: vec![] }, &cfg).unwrap();
    assert_eq!(optimal_beam(&h, &book, cfg.snr_linear()).0, 0);
    assert_eq!(nearest_codeword(0.0, 64), 0);
    // sin θ = 1/4 lands exactly on codeword Q/8.
    let theta = 0.25f64.asin();
    let h = channel_at([50.0 * theta.cos(), 50.0 * theta.sin()], &PathSet { nlos: vec![] }, &cfg).unwrap();
    assert_eq!(optimal_beam(&h, &book, cfg.snr_linear()).0, 8);
}

#[test]
fn ue_at_origin_is_a_geometry_error() {
    let cfg = SceneConfig::full();
    assert!(matches!(
        channel_at([0.0, 0.0], &PathSet { nlos: vec![] }, &cfg),
        Err(beamtrack::Error::Geometry(_))
    ));
}

#[test]
fn invalid_scenes_are_config_errors() {
    let bad = [
        SceneConfig { n_paths: 0, ..SceneConfig::full() },
        SceneConfig { inner_radius: 300.0, ..SceneConfig::full() },
        SceneConfig { ue_speed: -1.0, ..SceneConfig::full() },
        SceneConfig { slot_length: 0.0, ..SceneConfig::full() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(beamtrack::Error::Config(_))));
    }
}

#[test]
fn stationary_channel_is_reproducible() {
    let cfg = SceneConfig::full();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ue = spawn_ue(&cfg, &mut rng);
    let paths = draw_nlos_paths(&cfg, &mut rng);
    assert_eq!(paths.nlos.len(), cfg.n_paths - 1);
    let a = channel_at(ue.position, &paths, &cfg).unwrap();
    let still = UEState { speed: 0.0, ..ue };
    let b = channel_at(advance(&still, 0.16, &cfg).position, &paths, &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, channel_at(advance(&ue, 0.16, &cfg).position, &paths, &cfg).unwrap());
}

proptest! {
    #[test]
    fn steering_and_codewords_are_unit_norm(theta in -PI..PI, n in 1usize..80, q in 1usize..80) {
        let a: f64 = array_response(theta, n).iter().map(|c| c.norm_sqr()).sum();
        prop_assert!((a - 1.0).abs() < 1e-12);
        let book = dft_codebook(n, q);
        prop_assert_eq!(book.len(), q);
        for w in book.iter() {
            let s: f64 = w.iter().map(|c| c.norm_sqr()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_efficiency_is_non_negative_and_bounded(seed in any::<u64>()) {
        let cfg = SceneConfig::full();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ue = spawn_ue(&cfg, &mut rng);
        let h = generate_channel(&ue, &cfg, &mut rng).unwrap();
        let book = dft_codebook(cfg.n_antennas, cfg.n_beams);
        let snr = cfg.snr_linear();
        let (q, best) = optimal_beam(&h, &book, snr);
        // Cauchy-Schwarz bound with unit-norm codewords.
        prop_assert!(best <= (1.0 + snr * h.norm_sqr()).log2() + 1e-9);
        for (k, w) in book.iter().enumerate() {
            let r = spectral_efficiency(&h, w, snr);
            prop_assert!(r >= 0.0);
            prop_assert!(r <= best);
            if r == best {
                prop_assert!(k >= q);
            }
        }
    }

    #[test]
    fn mobility_stays_in_annulus_and_moves_at_speed(seed in any::<u64>(), dt in 0.0f64..2.0) {
        let cfg = SceneConfig::full();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ue = spawn_ue(&cfg, &mut rng);
        prop_assert!(ue.distance() >= cfg.inner_radius && ue.distance() <= cfg.outer_radius);
        let next = step_ue(&ue, dt, &cfg, &mut rng);
        prop_assert!(next.distance() >= cfg.inner_radius - 1e-9);
        prop_assert!(next.distance() <= cfg.outer_radius + 1e-9);
        let moved = (next.position[0] - ue.position[0]).hypot(next.position[1] - ue.position[1]);
        prop_assert!(moved <= cfg.ue_speed * dt + 1e-9);
    }

    #[test]
    fn pilots_are_noiseless_at_minus_infinity(seed in any::<u64>()) {
        let cfg = SceneConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ue = spawn_ue(&cfg, &mut rng);
        let h = generate_channel(&ue, &cfg, &mut rng).unwrap();
        let book = dft_codebook(cfg.n_antennas, cfg.n_beams);
        let y = pilot_sweep(&h, &book, cfg.tx_power_dbm, f64::NEG_INFINITY, &mut rng);
        let amp = dbm_to_mw(cfg.tx_power_dbm).sqrt();
        for (yq, w) in y.iter().zip(book.iter()) {
            prop_assert!((yq - h.inner(w) * amp).norm() <= 1e-12 * (1.0 + yq.norm()));
        }
    }
}

#[test]
fn pilot_noise_has_configured_power() {
    let cfg = SceneConfig::desk();
    let h = ChannelVector { entries: vec![C64::new(0.0, 0.0); cfg.n_antennas] };
    let book = dft_codebook(cfg.n_antennas, cfg.n_beams);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = cfg.noise_power_dbm();
    let n = 4000;
    let mut acc = 0.0;
    for _ in 0..n {
        acc += pilot_sweep(&h, &book, cfg.tx_power_dbm, noise, &mut rng)
            .iter()
            .map(|y| y.norm_sqr())
            .sum::<f64>();
    }
    let mean = acc / (n * cfg.n_beams) as f64;
    let rel = mean / dbm_to_mw(noise);
    // 64000 exponential samples: relative standard error about 0.4 %.
    assert!((rel - 1.0).abs() < 0.02, "{rel}");
}
