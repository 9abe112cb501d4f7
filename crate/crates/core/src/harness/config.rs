use std::path::{Path, PathBuf};

use crate::channel::SceneConfig;
use crate::dataset::default_grid;
use crate::models::ModelKind;
use crate::{Error, Result};

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "BEAMTRACK_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected full or desk)"))),
        }
    }
}

/// Everything one training/evaluation run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_val: usize,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Noise figures (dB) of the noise-factor sweep.
    pub noise_factors: Vec<f64>,
    /// Train one model per noise figure (otherwise the base model is
    /// re-evaluated on data at each noise figure).
    pub retrain_per_noise: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

/// Accepted keys; aliases map to the first name in each entry.
const KEYS: &[(&str, &[&str])] = &[
    ("preset", &[]),
    ("n_antennas", &["N_t", "nt"]),
    ("n_beams", &["Q"]),
    ("carrier_hz", &["f_c"]),
    ("bandwidth_hz", &["W"]),
    ("noise_figure_db", &["N_F", "nf"]),
    ("tx_power_dbm", &["P"]),
    ("n_paths", &["L"]),
    ("ue_speed", &["v"]),
    ("slot_length", &["T"]),
    ("n_slots", &[]),
    ("inner_radius", &[]),
    ("outer_radius", &[]),
    ("nlos_attenuation_db", &[]),
    ("model", &[]),
    ("epochs", &[]),
    ("batch_size", &[]),
    ("learning_rate", &["lr"]),
    ("grid", &[]),
    ("seeds", &["seed"]),
    ("n_train", &[]),
    ("n_val", &[]),
    ("train_data", &[]),
    ("val_data", &[]),
    ("out_dir", &[]),
    ("noise_factors", &[]),
    ("retrain_per_noise", &[]),
];

fn canonical(key: &str) -> Option<&'static str> {
    KEYS.iter()
        .find(|(k, aliases)| *k == key || aliases.contains(&key))
        .map(|(k, _)| *k)
}

pub fn valid_keys() -> Vec<&'static str> {
    KEYS.iter().map(|(k, _)| *k).collect()
}

fn list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    let items: Option<Vec<T>> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().ok())
        .collect();
    items.filter(|i| !i.is_empty())
}

impl RunConfig {
    /// Full-size scene: 100 epochs, batch 32, learning rate 3e-5, 10240/2560
    /// episodes. The desk preset shrinks the scene to 16 beams and five
    /// slots, 2048/512 episodes and 30 epochs at learning rate 1e-3.
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self {
                scene: SceneConfig::full(),
                model: ModelKind::Lnn,
                epochs: 100,
                batch_size: 32,
                learning_rate: 3e-5,
                grid: default_grid(),
                seeds: vec![1],
                n_train: 10240,
                n_val: 2560,
                train_data: None,
                val_data: None,
                out_dir: PathBuf::from("out"),
                noise_factors: vec![5.0, 7.0, 9.0, 11.0, 13.0],
                retrain_per_noise: true,
            },
            Preset::Desk => Self {
                scene: SceneConfig::desk(),
                epochs: 30,
                learning_rate: 1e-3,
                seeds: vec![1, 2, 3],
                n_train: 2048,
                n_val: 512,
                noise_factors: vec![9.0, 13.0],
                ..Self::preset(Preset::Full)
            },
        }
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key_trim = key.trim();
        let k = canonical(key_trim).ok_or_else(|| {
            Error::Config(format!(
                "unknown key '{key_trim}'; valid keys: {}",
                valid_keys().join(", ")
            ))
        })?;
        let v = value.trim();
        let bad = || Error::Config(format!("invalid value '{v}' for {k}"));
        fn num<T: std::str::FromStr>(v: &str, bad: impl Fn() -> Error) -> Result<T> {
            v.parse().map_err(|_| bad())
        }
        let s = &mut self.scene;
        match k {
            "preset" => {
                let out = std::mem::replace(&mut self.out_dir, PathBuf::new());
                *self = Self::preset(v.parse()?);
                self.out_dir = out;
            }
            "n_antennas" => s.n_antennas = num(v, bad)?,
            "n_beams" => s.n_beams = num(v, bad)?,
            "carrier_hz" => s.carrier_hz = num(v, bad)?,
            "bandwidth_hz" => s.bandwidth_hz = num(v, bad)?,
            "noise_figure_db" => s.noise_figure_db = num(v, bad)?,
            "tx_power_dbm" => s.tx_power_dbm = num(v, bad)?,
            "n_paths" => s.n_paths = num(v, bad)?,
            "ue_speed" => s.ue_speed = num(v, bad)?,
            "slot_length" => s.slot_length = num(v, bad)?,
            "n_slots" => s.n_slots = num(v, bad)?,
            "inner_radius" => s.inner_radius = num(v, bad)?,
            "outer_radius" => s.outer_radius = num(v, bad)?,
            "nlos_attenuation_db" => s.nlos_attenuation_db = num(v, bad)?,
            "model" => self.model = v.parse()?,
            "epochs" => self.epochs = num(v, bad)?,
            "batch_size" => self.batch_size = num(v, bad)?,
            "learning_rate" => self.learning_rate = num(v, bad)?,
            "grid" => self.grid = list(v).ok_or_else(bad)?,
            "seeds" => self.seeds = list(v).ok_or_else(bad)?,
            "n_train" => self.n_train = num(v, bad)?,
            "n_val" => self.n_val = num(v, bad)?,
            "train_data" => self.train_data = Some(PathBuf::from(v)),
            "val_data" => self.val_data = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "noise_factors" => self.noise_factors = list(v).ok_or_else(bad)?,
            "retrain_per_noise" => self.retrain_per_noise = num(v, bad)?,
            _ => unreachable!("key table and match arms agree"),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; errors carry the 1-based line number.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected 'key = value', found '{line}'")))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => parse_err(m),
                other => parse_err(other.to_string()),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Builds a config from an optional file plus `key=value` overrides,
    /// then applies the output-directory environment override.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        Self::load_over(Self::default(), path, overrides)
    }

    /// [`RunConfig::load`] starting from `base` instead of the defaults.
    pub fn load_over(base: Self, path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = base;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
            c.apply_text(&text)?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                c.out_dir = PathBuf::from(dir);
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.grid.is_empty() || self.grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("grid values must lie in [0, 1]".into()));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("grid must be strictly ascending".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aliases_and_comments() {
        let c = RunConfig::from_text("# scene\nQ = 16\nN_t=16 # inline\n\nmodel = lstm\n").unwrap();
        assert_eq!((c.scene.n_beams, c.scene.n_antennas, c.model), (16, 16, ModelKind::Lstm));
    }

    #[test]
    fn bad_value_names_line() {
        match RunConfig::from_text("Q = 64\nepochs = abc\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let e = RunConfig::from_text("colour = red").unwrap_err().to_string();
        assert!(e.contains("colour") && e.contains("n_beams") && e.contains("learning_rate"));
    }
}
