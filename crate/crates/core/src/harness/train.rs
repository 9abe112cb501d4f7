use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fmt_sig, RunConfig};
use crate::dataset::Dataset;
use crate::models::{episode_loss, ModelDims, ModelKind, SlotBatch, TrackerModel};
use crate::tensor::{AdamState, BnMode, Graph};
use crate::{Error, Result};

/// Trained model and the per-slot mean loss; `losses[0]` is the loss of the
/// untrained model, `losses[e]` the mean over the batches of epoch `e`.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrackerModel<f32>,
    pub losses: Vec<f64>,
}

/// Rejects datasets whose scene or instant grid differ from the config.
pub fn check_compat(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let (a, b) = (&cfg.scene, ds.scene());
    if a.n_beams != b.n_beams || a.n_antennas != b.n_antennas {
        return Err(Error::Config(format!(
            "dataset has Q={}, N_t={} but the config has Q={}, N_t={}",
            b.n_beams, b.n_antennas, a.n_beams, a.n_antennas
        )));
    }
    if ds.grid() != cfg.grid.as_slice() {
        return Err(Error::Config("dataset instant grid differs from the config grid".into()));
    }
    if ds.is_empty() {
        return Err(Error::Config("dataset has no episodes".into()));
    }
    Ok(())
}

/// Model input and row-aligned labels for the episodes `idx`.
pub fn make_batch(ds: &Dataset, idx: &[usize], grid_side: usize) -> Result<(SlotBatch<f32>, Vec<Vec<usize>>)> {
    let pilots: Vec<&[Vec<_>]> = idx.iter().map(|&i| ds.episodes[i].pilots.as_slice()).collect();
    let batch = SlotBatch::from_pilots(&pilots, grid_side, ds.input_scale())?;
    let labels = (0..batch.n_slots)
        .map(|s| {
            idx.iter()
                .flat_map(|&i| ds.episodes[i].labels[s].iter().copied())
                .collect()
        })
        .collect();
    Ok((batch, labels))
}

fn new_model(kind: ModelKind, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<TrackerModel<f32>> {
    TrackerModel::new(kind, ModelDims::standard(cfg.scene.n_beams)?, rng)
}

/// Untrained model exactly as [`train_model`] initializes it for `seed`.
pub fn initial_model(kind: ModelKind, cfg: &RunConfig, seed: u64) -> Result<TrackerModel<f32>> {
    new_model(kind, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// One optimizer step; returns the summed-over-slots loss before the update.
pub fn train_step(
    model: &mut TrackerModel<f32>,
    adam: &mut AdamState<f32>,
    batch: &SlotBatch<f32>,
    labels: &[Vec<usize>],
    grid: &[f64],
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let logits = model.forward(&mut g, &bound, batch, grid, BnMode::Train)?;
    let loss = episode_loss(&mut g, &logits, labels)?;
    let value = g.value(loss)?.data()[0] as f64;
    let grads = g.backward(loss)?;
    model.params.absorb(&grads, &bound);
    adam.apply(&mut model.params)?;
    Ok(value)
}

/// Loss of the current parameters in train mode without touching the
/// running statistics.
fn probe_loss(model: &mut TrackerModel<f32>, batch: &SlotBatch<f32>, labels: &[Vec<usize>], grid: &[f64]) -> Result<f64> {
    let saved = model.extractor.states.clone();
    let mut g = Graph::new();
    let bound = model.params.bind_frozen(&mut g);
    let logits = model.forward(&mut g, &bound, batch, grid, BnMode::Train);
    model.extractor.states = saved;
    let loss = episode_loss(&mut g, &logits?, labels)?;
    Ok(g.value(loss)?.data()[0] as f64)
}

/// Adam over shuffled mini-batches of whole episodes; every slot and every
/// instant of the grid contributes to each step. Deterministic for a given
/// seed. `on_epoch(epoch, mean_loss, model)` runs after each epoch.
pub fn train_model(
    cfg: &RunConfig,
    ds: &Dataset,
    kind: ModelKind,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64, &TrackerModel<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compat(cfg, ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = new_model(kind, cfg, &mut rng)?;
    let mut adam = AdamState::new(&model.params, cfg.learning_rate);
    let side = model.dims.grid_side;
    let n_slots = ds.scene().n_slots as f64;
    let bs = cfg.batch_size;

    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for chunk in order.chunks(bs) {
        let (batch, labels) = make_batch(ds, chunk, side)?;
        total += probe_loss(&mut model, &batch, &labels, &cfg.grid)? * chunk.len() as f64;
    }
    let mut losses = vec![total / ds.len() as f64 / n_slots];

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(bs) {
            let (batch, labels) = make_batch(ds, chunk, side)?;
            sum += train_step(&mut model, &mut adam, &batch, &labels, &cfg.grid)? * chunk.len() as f64;
            count += chunk.len();
        }
        let mean = sum / count as f64 / n_slots;
        if !mean.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        losses.push(mean);
        on_epoch(epoch, mean, &model)?;
    }
    Ok(TrainOutcome { model, losses })
}

pub fn checkpoint_path(dir: &Path, kind: ModelKind) -> PathBuf {
    dir.join(format!("{}.ckpt", kind.name()))
}

pub fn loss_csv_path(dir: &Path, kind: ModelKind) -> PathBuf {
    dir.join(format!("{}_loss.csv", kind.name()))
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{e},{}", fmt_sig(*l));
    }
    s
}

/// [`train_model`] that saves `<dir>/<kind>.ckpt` after every epoch and
/// `<dir>/<kind>_loss.csv` at the end.
pub fn train_to_dir(cfg: &RunConfig, ds: &Dataset, kind: ModelKind, seed: u64, dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let ckpt = checkpoint_path(dir, kind);
    let csv = loss_csv_path(dir, kind);
    let out = train_model(cfg, ds, kind, seed, |_, _, model| model.save(&ckpt))?;
    std::fs::write(&csv, loss_csv(&out.losses)).map_err(|e| Error::file(&csv, e))?;
    Ok(out)
}
