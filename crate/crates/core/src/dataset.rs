//! Episode generation and the binary dataset format.
//!
//! An episode follows one UE for `n_slots` slots. At each slot start the UE
//! sounds every beam (the pilot sweep); then, for every normalized instant
//! `t̄` of the grid, the UE is moved to `t_n + t̄T`, the channel re-evaluated
//! with the slot's scattered paths, and the best beam found by exhaustive
//! search.
//!
//! # File layout
//!
//! All integers and floats are little-endian; complex values are stored as
//! interleaved `(re, im)` `f32` pairs.
//!
//! ```text
//! header:
//!   "LBDS" | version: u32
//!   n_antennas, n_beams, n_paths, n_slots: u32 × 4
//!   carrier_hz, bandwidth_hz, noise_figure_db, tx_power_dbm, ue_speed,
//!   slot_length, inner_radius, outer_radius, nlos_attenuation_db: f64 × 9
//!   scene seed: u64
//!   grid_len: u32 | grid: f64 × grid_len
//!   n_episodes: u64
//!   checksum: u64 (FNV-1a of every preceding header byte)
//! episode record (n = n_slots, Q = n_beams, G = grid_len, N = n_antennas):
//!   seed: u64
//!   UE state at slot start (x, y, heading, speed): f32 × 4n
//!   pilot sweeps: complex × nQ
//!   best beam: u32 × nG
//!   best spectral efficiency: f32 × nG
//!   channel at every instant: complex × nGN
//! ```
//!
//! Header size is `124 + 8G` bytes and each record takes
//! `8 + 16n + 8nQ + 8nG + 8nGN` bytes (see [`record_size`]).

use std::path::Path;

use num_complex::Complex32;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{
    advance, channel_at, dbm_to_mw, dft_codebook, draw_nlos_paths, optimal_beam, pilot_sweep,
    redraw_heading, spawn_ue, spectral_efficiency, ChannelVector, Codebook, SceneConfig, C64,
};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"LBDS";
pub const DATASET_VERSION: u32 = 1;

/// Every `LABEL_CHECK_STRIDE`-th episode has its labels re-verified on load.
pub const LABEL_CHECK_STRIDE: usize = 100;

/// The nine prediction instants `0.1, 0.2, …, 0.9`.
pub fn default_grid() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// One UE trajectory with sweeps and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    /// `(x, y, heading, speed)` at each slot start.
    pub ue_states: Vec<[f32; 4]>,
    /// `pilots[i][q]`: received pilot of beam `q` at slot `i`.
    pub pilots: Vec<Vec<Complex32>>,
    /// `labels[i][j]`: best beam at slot `i`, instant `grid[j]`.
    pub labels: Vec<Vec<usize>>,
    /// Spectral efficiency of the best beam, bit/s/Hz.
    pub rates: Vec<Vec<f32>>,
    /// `channels[i][j]`: channel vector at slot `i`, instant `grid[j]`.
    pub channels: Vec<Vec<Vec<Complex32>>>,
}

impl Episode {
    pub fn n_slots(&self) -> usize {
        self.pilots.len()
    }

    pub fn channel(&self, slot: usize, instant: usize) -> ChannelVector {
        ChannelVector {
            entries: self.channels[slot][instant]
                .iter()
                .map(|c| C64::new(c.re as f64, c.im as f64))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub version: u32,
    pub scene: SceneConfig,
    pub grid: Vec<f64>,
    pub n_episodes: usize,
}

impl DatasetHeader {
    pub fn size(&self) -> usize {
        124 + 8 * self.grid.len()
    }

    fn to_bytes(&self) -> Vec<u8> {
        let s = &self.scene;
        let mut w = Vec::with_capacity(self.size());
        w.extend_from_slice(DATASET_MAGIC);
        w.extend_from_slice(&self.version.to_le_bytes());
        for v in [s.n_antennas, s.n_beams, s.n_paths, s.n_slots] {
            w.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in [
            s.carrier_hz,
            s.bandwidth_hz,
            s.noise_figure_db,
            s.tx_power_dbm,
            s.ue_speed,
            s.slot_length,
            s.inner_radius,
            s.outer_radius,
            s.nlos_attenuation_db,
        ] {
            w.extend_from_slice(&v.to_le_bytes());
        }
        w.extend_from_slice(&s.seed.to_le_bytes());
        w.extend_from_slice(&(self.grid.len() as u32).to_le_bytes());
        for t in &self.grid {
            w.extend_from_slice(&t.to_le_bytes());
        }
        w.extend_from_slice(&(self.n_episodes as u64).to_le_bytes());
        let sum = fnv1a(&w);
        w.extend_from_slice(&sum.to_le_bytes());
        w
    }

    fn read(r: &mut ByteReader) -> Result<Self> {
        let start = r.offset();
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let mut u = || r.u32().map(|v| v as usize);
        let (n_antennas, n_beams, n_paths, n_slots) = (u()?, u()?, u()?, u()?);
        let mut f = [0.0; 9];
        for v in &mut f {
            *v = r.f64()?;
        }
        let seed = r.u64()?;
        let grid_len = r.u32()? as usize;
        // A corrupt length would otherwise surface as truncation.
        if grid_len > 1 << 16 || grid_len * 8 + 16 > r.remaining() {
            return Err(Error::Format(format!("implausible grid length {grid_len}")));
        }
        let grid = (0..grid_len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let n_episodes = r.u64()? as usize;
        let body = &r.bytes[start..r.offset()];
        let expected = fnv1a(body);
        if r.u64()? != expected {
            return Err(Error::Format("dataset header checksum mismatch".into()));
        }
        let scene = SceneConfig {
            n_antennas,
            n_beams,
            carrier_hz: f[0],
            bandwidth_hz: f[1],
            noise_figure_db: f[2],
            tx_power_dbm: f[3],
            n_paths,
            ue_speed: f[4],
            slot_length: f[5],
            n_slots,
            inner_radius: f[6],
            outer_radius: f[7],
            nlos_attenuation_db: f[8],
            seed,
        };
        scene
            .validate()
            .map_err(|e| Error::Format(format!("header scene invalid: {e}")))?;
        Ok(Self {
            version,
            scene,
            grid,
            n_episodes,
        })
    }
}

/// Size in bytes of one episode record.
pub fn record_size(scene: &SceneConfig, grid_len: usize) -> usize {
    let (n, q, g, na) = (scene.n_slots, scene.n_beams, grid_len, scene.n_antennas);
    8 + 16 * n + 8 * n * q + 8 * n * g + 8 * n * g * na
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn scene(&self) -> &SceneConfig {
        &self.header.scene
    }

    pub fn grid(&self) -> &[f64] {
        &self.header.grid
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Inverse noise standard deviation in `1/√mW`; multiplies pilots before
    /// they enter a model.
    pub fn input_scale(&self) -> f64 {
        input_scale(self.scene())
    }

    pub fn file_size(&self) -> usize {
        self.header.size() + self.len() * record_size(self.scene(), self.grid().len())
    }
}

pub fn input_scale(scene: &SceneConfig) -> f64 {
    1.0 / dbm_to_mw(scene.noise_power_dbm()).sqrt()
}

fn to_c32(v: &[C64]) -> Vec<Complex32> {
    v.iter().map(|c| Complex32::new(c.re as f32, c.im as f32)).collect()
}

fn widen(v: &[Complex32]) -> ChannelVector {
    ChannelVector {
        entries: v.iter().map(|c| C64::new(c.re as f64, c.im as f64)).collect(),
    }
}

/// Simulates one episode. Equal seeds give bit-identical episodes.
pub fn generate_episode(cfg: &SceneConfig, grid: &[f64], seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let book = dft_codebook(cfg.n_antennas, cfg.n_beams);
    generate_with(cfg, &book, grid, seed)
}

fn generate_with(cfg: &SceneConfig, book: &Codebook, grid: &[f64], seed: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = cfg.noise_power_dbm();
    let snr = cfg.snr_linear();
    let n = cfg.n_slots;
    let mut ep = Episode {
        seed,
        ue_states: Vec::with_capacity(n),
        pilots: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        rates: Vec::with_capacity(n),
        channels: Vec::with_capacity(n),
    };
    let mut ue = spawn_ue(cfg, &mut rng);
    for slot in 0..n {
        if slot > 0 {
            ue = redraw_heading(&advance(&ue, cfg.slot_length, cfg), &mut rng);
        }
        let paths = draw_nlos_paths(cfg, &mut rng);
        let h = channel_at(ue.position, &paths, cfg)?;
        let y = pilot_sweep(&h, book, cfg.tx_power_dbm, noise, &mut rng);
        ep.ue_states.push([
            ue.position[0] as f32,
            ue.position[1] as f32,
            ue.heading as f32,
            ue.speed as f32,
        ]);
        ep.pilots.push(to_c32(&y));
        let mut labels = Vec::with_capacity(grid.len());
        let mut rates = Vec::with_capacity(grid.len());
        let mut chans = Vec::with_capacity(grid.len());
        for &t in grid {
            let moved = advance(&ue, t * cfg.slot_length, cfg);
            let h = to_c32(&channel_at(moved.position, &paths, cfg)?.entries);
            // Label the stored (f32) channel so evaluation sees the same optimum.
            let (q, r) = optimal_beam(&widen(&h), book, snr);
            labels.push(q);
            rates.push(r as f32);
            chans.push(h);
        }
        ep.labels.push(labels);
        ep.rates.push(rates);
        ep.channels.push(chans);
    }
    Ok(ep)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// Seed of episode `index` in `split`. The split and index occupy disjoint
/// bit ranges before mixing, and splitmix64 is a bijection, so no two
/// (split, index) pairs share a seed for a given master seed.
pub fn episode_seed(master: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0u64,
        Split::Validation => 1u64 << 63,
    };
    splitmix64(splitmix64(master) ^ tag ^ index as u64)
}

/// Generates `count` episodes of one split; `parallel` fans out across
/// worker threads without changing the result.
pub fn generate_split(
    cfg: &SceneConfig,
    grid: &[f64],
    split: Split,
    count: usize,
    master_seed: u64,
    parallel: bool,
) -> Result<Dataset> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Config("episode count must be at least 1".into()));
    }
    if grid.is_empty() || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config("instant grid must be non-empty and inside [0, 1]".into()));
    }
    let book = dft_codebook(cfg.n_antennas, cfg.n_beams);
    let one = |i: usize| generate_with(cfg, &book, grid, episode_seed(master_seed, split, i));
    let episodes = if parallel {
        (0..count).into_par_iter().map(one).collect::<Result<Vec<_>>>()?
    } else {
        (0..count).map(one).collect::<Result<Vec<_>>>()?
    };
    Ok(Dataset {
        header: DatasetHeader {
            version: DATASET_VERSION,
            scene: cfg.clone(),
            grid: grid.to_vec(),
            n_episodes: count,
        },
        episodes,
    })
}

/// Training and validation sets with disjoint seeds.
pub fn generate_dataset(
    cfg: &SceneConfig,
    grid: &[f64],
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    Ok((
        generate_split(cfg, grid, Split::Train, n_train, seed, true)?,
        generate_split(cfg, grid, Split::Validation, n_val, seed, true)?,
    ))
}

fn put_c32(w: &mut Vec<u8>, v: &[Complex32]) {
    for c in v {
        w.extend_from_slice(&c.re.to_le_bytes());
        w.extend_from_slice(&c.im.to_le_bytes());
    }
}

pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let header = DatasetHeader {
        n_episodes: ds.len(),
        ..ds.header.clone()
    };
    let scene = &header.scene;
    let (g, q, na) = (header.grid.len(), scene.n_beams, scene.n_antennas);
    let mut w = header.to_bytes();
    w.reserve(ds.len() * record_size(scene, g));
    for ep in &ds.episodes {
        check_shape(ep, scene, g)?;
        w.extend_from_slice(&ep.seed.to_le_bytes());
        for s in &ep.ue_states {
            for v in s {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        for y in &ep.pilots {
            debug_assert_eq!(y.len(), q);
            put_c32(&mut w, y);
        }
        for row in &ep.labels {
            for &l in row {
                w.extend_from_slice(&(l as u32).to_le_bytes());
            }
        }
        for row in &ep.rates {
            for r in row {
                w.extend_from_slice(&r.to_le_bytes());
            }
        }
        for slot in &ep.channels {
            for h in slot {
                debug_assert_eq!(h.len(), na);
                put_c32(&mut w, h);
            }
        }
    }
    Ok(w)
}

fn check_shape(ep: &Episode, scene: &SceneConfig, g: usize) -> Result<()> {
    let n = scene.n_slots;
    let ok = ep.ue_states.len() == n
        && ep.pilots.len() == n
        && ep.labels.len() == n
        && ep.rates.len() == n
        && ep.channels.len() == n
        && ep.pilots.iter().all(|y| y.len() == scene.n_beams)
        && ep.labels.iter().all(|r| r.len() == g)
        && ep.rates.iter().all(|r| r.len() == g)
        && ep
            .channels
            .iter()
            .all(|s| s.len() == g && s.iter().all(|h| h.len() == scene.n_antennas));
    if ok {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "episode {} does not match the header scene",
            ep.seed
        )))
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let bytes = dataset_to_bytes(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    dataset_from_bytes(&bytes)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    let header = DatasetHeader::read(&mut r)?;
    let scene = header.scene.clone();
    let (n, q, g, na) = (scene.n_slots, scene.n_beams, header.grid.len(), scene.n_antennas);
    let expected = header.size() + header.n_episodes * record_size(&scene, g);
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last episode",
            bytes.len() - expected
        )));
    }
    let c32 = |r: &mut ByteReader, len: usize| -> Result<Vec<Complex32>> {
        (0..len)
            .map(|_| Ok(Complex32::new(r.f32()?, r.f32()?)))
            .collect()
    };
    let mut episodes = Vec::with_capacity(header.n_episodes);
    for _ in 0..header.n_episodes {
        let seed = r.u64()?;
        let ue_states = (0..n)
            .map(|_| Ok([r.f32()?, r.f32()?, r.f32()?, r.f32()?]))
            .collect::<Result<Vec<_>>>()?;
        let pilots = (0..n).map(|_| c32(&mut r, q)).collect::<Result<Vec<_>>>()?;
        let labels = (0..n)
            .map(|_| (0..g).map(|_| r.u32().map(|v| v as usize)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        let rates = (0..n)
            .map(|_| (0..g).map(|_| r.f32()).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        let channels = (0..n)
            .map(|_| (0..g).map(|_| c32(&mut r, na)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        episodes.push(Episode {
            seed,
            ue_states,
            pilots,
            labels,
            rates,
            channels,
        });
    }
    let ds = Dataset { header, episodes };
    verify_labels(&ds, LABEL_CHECK_STRIDE)?;
    Ok(ds)
}

/// Re-checks every `stride`-th episode: each label must be in range and
/// optimal for its stored channel, and the stored rate must match a fresh
/// evaluation within 1e-6 (relative to max(1, R)).
pub fn verify_labels(ds: &Dataset, stride: usize) -> Result<()> {
    let scene = ds.scene();
    let book = dft_codebook(scene.n_antennas, scene.n_beams);
    let snr = scene.snr_linear();
    for ep in ds.episodes.iter().step_by(stride.max(1)) {
        for (i, (labels, rates)) in ep.labels.iter().zip(&ep.rates).enumerate() {
            for (j, (&q, &r)) in labels.iter().zip(rates).enumerate() {
                if q >= scene.n_beams {
                    return Err(Error::Data(format!(
                        "episode {}: beam {q} out of range at slot {i}",
                        ep.seed
                    )));
                }
                let h = ep.channel(i, j);
                let best = spectral_efficiency(&h, book.word(q), snr);
                let (_, opt) = optimal_beam(&h, &book, snr);
                let tol = 1e-6 * opt.max(1.0);
                if best < opt || (best - r as f64).abs() > tol || !(r > 0.0) {
                    return Err(Error::Data(format!(
                        "episode {}: stored label at slot {i}, instant {j} is not optimal",
                        ep.seed
                    )));
                }
            }
        }
    }
    Ok(())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Little-endian cursor that reports truncation with the failing offset.
#[derive(Clone, Debug)]
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SceneConfig {
        SceneConfig {
            n_slots: 3,
            ..SceneConfig::desk()
        }
    }

    #[test]
    fn header_size_matches_formula() {
        let ds = generate_split(&tiny(), &default_grid(), Split::Train, 2, 5, false).unwrap();
        assert_eq!(ds.header.to_bytes().len(), ds.header.size());
        assert_eq!(dataset_to_bytes(&ds).unwrap().len(), ds.file_size());
    }

    #[test]
    fn reader_reports_offset() {
        let mut r = ByteReader::new(&[1, 2, 3]);
        r.take(2).unwrap();
        match r.u32() {
            Err(Error::Truncated { offset, needed }) => assert_eq!((offset, needed), (2, 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seeds_of_splits_are_disjoint() {
        let a: std::collections::HashSet<u64> =
            (0..1000).map(|i| episode_seed(7, Split::Train, i)).collect();
        assert!((0..1000).all(|i| !a.contains(&episode_seed(7, Split::Validation, i))));
    }
}
