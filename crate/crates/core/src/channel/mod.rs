//! Narrowband mmWave downlink: a single-antenna UE served by an `N_t`-element
//! half-wavelength ULA through an analog DFT codebook.
//!
//! The channel is a geometric sum of a line-of-sight path at the UE's true
//! azimuth and `L − 1` scattered paths, all scaled by free-space path loss.
//! Beam indices are 0-based (`q = 0..Q−1`).

mod mobility;

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

pub use mobility::{advance, redraw_heading, spawn_ue, step_ue, UEState};

use crate::{Error, Result};

pub type C64 = Complex64;

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Scene and link parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub n_antennas: usize,
    pub n_beams: usize,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub noise_figure_db: f64,
    pub tx_power_dbm: f64,
    pub n_paths: usize,
    pub ue_speed: f64,
    pub slot_length: f64,
    pub n_slots: usize,
    pub inner_radius: f64,
    pub outer_radius: f64,
    /// Power of each scattered path relative to line of sight, in dB below.
    pub nlos_attenuation_db: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl SceneConfig {
    /// 64 antennas and beams, 28 GHz, 50 MHz, 9 dB noise figure, 10 dBm,
    /// ten 160 ms slots.
    pub fn full() -> Self {
        Self {
            n_antennas: 64,
            n_beams: 64,
            carrier_hz: 28e9,
            bandwidth_hz: 50e6,
            noise_figure_db: 9.0,
            tx_power_dbm: 10.0,
            n_paths: 3,
            ue_speed: 5.0,
            slot_length: 0.16,
            n_slots: 10,
            inner_radius: 20.0,
            outer_radius: 200.0,
            nlos_attenuation_db: 10.0,
            seed: 0,
        }
    }

    /// Laptop-sized variant: 16 antennas and beams, five slots.
    pub fn desk() -> Self {
        Self {
            n_antennas: 16,
            n_beams: 16,
            n_slots: 5,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_antennas == 0 || self.n_beams == 0 || self.n_paths == 0 || self.n_slots == 0 {
            return fail("n_antennas, n_beams, n_paths and n_slots must be at least 1");
        }
        if !(self.slot_length > 0.0) || !(self.bandwidth_hz > 0.0) || !(self.carrier_hz > 0.0) {
            return fail("slot_length, bandwidth_hz and carrier_hz must be positive");
        }
        if !(self.inner_radius > 0.0 && self.inner_radius < self.outer_radius) {
            return fail("radii must satisfy 0 < inner_radius < outer_radius");
        }
        if !(self.ue_speed >= 0.0) {
            return fail("ue_speed must be non-negative");
        }
        Ok(())
    }

    pub fn noise_power_dbm(&self) -> f64 {
        noise_power_dbm(self.bandwidth_hz, self.noise_figure_db)
    }

    /// `P / σ²` in linear units.
    pub fn snr_linear(&self) -> f64 {
        dbm_to_mw(self.tx_power_dbm) / dbm_to_mw(self.noise_power_dbm())
    }
}

/// Thermal noise power `−174 + 10·log10(W) + N_F` in dBm.
pub fn noise_power_dbm(bandwidth_hz: f64, noise_figure_db: f64) -> f64 {
    -174.0 + 10.0 * bandwidth_hz.log10() + noise_figure_db
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    dbm_to_mw(dbm) * 1e-3
}

/// Unit-norm ULA steering vector, entry `k = e^{jπ k sin θ} / √N_t`.
pub fn array_response(theta: f64, n_antennas: usize) -> Vec<C64> {
    let scale = 1.0 / (n_antennas as f64).sqrt();
    let phase = PI * theta.sin();
    (0..n_antennas)
        .map(|k| C64::from_polar(scale, phase * k as f64))
        .collect()
}

/// `Q` unit-modulus beams, `v^(q)_k = e^{j2πkq/Q} / √N_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    n_antennas: usize,
    words: Vec<Vec<C64>>,
}

impl Codebook {
    pub fn n_antennas(&self) -> usize {
        self.n_antennas
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, q: usize) -> &[C64] {
        &self.words[q]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[C64]> {
        self.words.iter().map(Vec::as_slice)
    }
}

pub fn dft_codebook(n_antennas: usize, n_beams: usize) -> Codebook {
    let scale = 1.0 / (n_antennas as f64).sqrt();
    let words = (0..n_beams)
        .map(|q| {
            (0..n_antennas)
                .map(|k| {
                    // Reduce kq mod Q before scaling so the phase is exact.
                    let m = (k * q) % n_beams;
                    C64::from_polar(scale, 2.0 * PI * m as f64 / n_beams as f64)
                })
                .collect()
        })
        .collect();
    Codebook { n_antennas, words }
}

/// Complex channel vector `h` between the array and the UE.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelVector {
    pub entries: Vec<C64>,
}

impl ChannelVector {
    pub fn norm_sqr(&self) -> f64 {
        self.entries.iter().map(|c| c.norm_sqr()).sum()
    }

    /// `hᴴ v`.
    pub fn inner(&self, v: &[C64]) -> C64 {
        self.entries.iter().zip(v).map(|(h, x)| h.conj() * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Scattered-path geometry, held fixed for the duration of one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSet {
    /// `(azimuth, complex gain relative to the LOS path)`.
    pub nlos: Vec<(f64, C64)>,
}

pub fn draw_nlos_paths<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> PathSet {
    let power = 10f64.powf(-cfg.nlos_attenuation_db / 10.0);
    let sd = (power / 2.0).sqrt();
    let nlos = (1..cfg.n_paths)
        .map(|_| {
            let theta = rng.random_range(-PI..PI);
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            (theta, C64::new(re * sd, im * sd))
        })
        .collect();
    PathSet { nlos }
}

/// Free-space path loss `ρ = (4π d f_c / c)²`.
pub fn path_loss(distance: f64, carrier_hz: f64) -> f64 {
    (4.0 * PI * distance * carrier_hz / SPEED_OF_LIGHT).powi(2)
}

/// Channel for a UE at `position` (metres, array at the origin with
/// broadside along +x) given the slot's scattered paths.
pub fn channel_at(position: [f64; 2], paths: &PathSet, cfg: &SceneConfig) -> Result<ChannelVector> {
    let d = position[0].hypot(position[1]);
    if !(d > 0.0) {
        return Err(Error::Geometry(format!(
            "UE at distance {d} from the array"
        )));
    }
    let n = cfg.n_antennas;
    let amp = (n as f64 / path_loss(d, cfg.carrier_hz)).sqrt();
    let theta = position[1].atan2(position[0]);
    let mut h: Vec<C64> = array_response(theta, n).into_iter().map(|a| a * amp).collect();
    for &(th, gain) in &paths.nlos {
        for (hk, ak) in h.iter_mut().zip(array_response(th, n)) {
            *hk += ak * gain * amp;
        }
    }
    Ok(ChannelVector { entries: h })
}

/// Draws fresh scattered paths and evaluates the channel at the UE position.
pub fn generate_channel<R: Rng + ?Sized>(
    ue: &UEState,
    cfg: &SceneConfig,
    rng: &mut R,
) -> Result<ChannelVector> {
    let paths = draw_nlos_paths(cfg, rng);
    channel_at(ue.position, &paths, cfg)
}

/// One beam-training stage: `y_q = √P·hᴴv^(q)·x + n_q` with pilot `x = 1`
/// and `n_q ~ CN(0, σ²)`; powers in dBm, output in √mW.
pub fn pilot_sweep<R: Rng + ?Sized>(
    h: &ChannelVector,
    book: &Codebook,
    tx_power_dbm: f64,
    noise_dbm: f64,
    rng: &mut R,
) -> Vec<C64> {
    let amp = dbm_to_mw(tx_power_dbm).sqrt();
    let sd = (dbm_to_mw(noise_dbm) / 2.0).sqrt();
    book.iter()
        .map(|v| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            h.inner(v) * amp + C64::new(re * sd, im * sd)
        })
        .collect()
}

/// `log2(1 + SNR·|hᴴv|²)`.
pub fn spectral_efficiency(h: &ChannelVector, v: &[C64], snr_linear: f64) -> f64 {
    (1.0 + snr_linear * h.inner(v).norm_sqr()).log2()
}

/// Exhaustive search over the codebook; ties go to the lowest index.
pub fn optimal_beam(h: &ChannelVector, book: &Codebook, snr_linear: f64) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (q, v) in book.iter().enumerate() {
        let r = spectral_efficiency(h, v, snr_linear);
        if r > best.1 {
            best = (q, r);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_power_at_table_values() {
        let n = noise_power_dbm(50e6, 9.0);
        // -174 + 10·log10(5e7) + 9 evaluated independently.
        assert!((n - (-88.010_299_956_639_8)).abs() < 1e-9, "{n}");
        assert!((noise_power_dbm(50e6, 11.0) - n - 2.0).abs() < 1e-12);
        assert!((noise_power_dbm(500e6, 9.0) - n - 10.0).abs() < 1e-12);
    }

    #[test]
    fn broadside_response() {
        let a = array_response(0.0, 4);
        for c in &a {
            assert!((c - C64::new(0.5, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn codebook_first_word_and_phases() {
        let book = dft_codebook(8, 16);
        let s = 1.0 / 8f64.sqrt();
        for c in book.word(0) {
            assert!((c - C64::new(s, 0.0)).norm() < 1e-15);
        }
        for q in 0..16 {
            for k in 0..8 {
                let want = C64::from_polar(s, 2.0 * PI * (k * q) as f64 / 16.0);
                assert!((book.word(q)[k] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn distance_zero_is_a_geometry_error() {
        let cfg = SceneConfig::desk();
        let paths = PathSet { nlos: vec![] };
        assert!(matches!(
            channel_at([0.0, 0.0], &paths, &cfg),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn doubling_distance_quarters_power() {
        let cfg = SceneConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let paths = draw_nlos_paths(&cfg, &mut rng);
        let h1 = channel_at([30.0, 40.0], &paths, &cfg).unwrap();
        let h2 = channel_at([60.0, 80.0], &paths, &cfg).unwrap();
        let ratio = h1.norm_sqr() / h2.norm_sqr();
        assert!((ratio - 4.0).abs() < 1e-9, "{ratio}");
    }

    #[test]
    fn spectral_efficiency_basics() {
        let book = dft_codebook(4, 4);
        let h = ChannelVector {
            entries: book.word(1).to_vec(),
        };
        assert!((spectral_efficiency(&h, book.word(1), 1.0) - 1.0).abs() < 1e-12);
        assert!(spectral_efficiency(&h, book.word(2), 1.0).abs() < 1e-12);
        let (q, r) = optimal_beam(&h, &book, 1.0);
        assert_eq!(q, 1);
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn optimal_beam_ties_go_low() {
        let book = dft_codebook(4, 4);
        let h = ChannelVector {
            entries: vec![C64::new(0.0, 0.0); 4],
        };
        assert_eq!(optimal_beam(&h, &book, 1.0).0, 0);
    }

    #[test]
    fn invalid_configs() {
        let mut c = SceneConfig::desk();
        c.inner_radius = 300.0;
        assert!(c.validate().is_err());
        let mut c = SceneConfig::desk();
        c.n_beams = 0;
        assert!(c.validate().is_err());
        assert!(SceneConfig::full().validate().is_ok());
    }
}
