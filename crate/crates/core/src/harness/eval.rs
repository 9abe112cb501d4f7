use std::fmt::Write as _;

use rayon::prelude::*;

use super::fmt_sig;
use crate::channel::{dft_codebook, spectral_efficiency, Codebook};
use crate::dataset::{Dataset, Episode};
use crate::models::TrackerModel;
use crate::{Error, Result};

/// Episodes per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

/// Mean normalized spectral efficiency over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub grid: Vec<f64>,
    /// `cells[i][j]`: mean over episodes at slot `i`, instant `grid[j]`.
    pub cells: Vec<Vec<f64>>,
    /// Mean over instants, per slot.
    pub by_slot: Vec<f64>,
    /// Mean over slots, per instant.
    pub by_tbar: Vec<f64>,
    pub overall: f64,
    pub n_episodes: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("slot");
        for t in &self.grid {
            let _ = write!(s, ",tbar_{}", fmt_sig(*t));
        }
        s.push_str(",mean\n");
        for (i, row) in self.cells.iter().enumerate() {
            let _ = write!(s, "{}", i + 1);
            for v in row {
                let _ = write!(s, ",{}", fmt_sig(*v));
            }
            let _ = writeln!(s, ",{}", fmt_sig(self.by_slot[i]));
        }
        s.push_str("mean");
        for v in &self.by_tbar {
            let _ = write!(s, ",{}", fmt_sig(*v));
        }
        let _ = writeln!(s, ",{}", fmt_sig(self.overall));
        s
    }
}

/// `R(h, v^(q̂)) / R(h, v^(q*))` at slot `i`, instant `j`.
pub fn normalized_se(ep: &Episode, book: &Codebook, snr: f64, slot: usize, instant: usize, predicted: usize) -> f64 {
    let h = ep.channel(slot, instant);
    let best = spectral_efficiency(&h, book.word(ep.labels[slot][instant]), snr);
    let got = spectral_efficiency(&h, book.word(predicted), snr);
    if best > 0.0 {
        got / best
    } else {
        1.0
    }
}

fn check_stored(ds: &Dataset) -> Result<()> {
    let (n, g, na) = (ds.scene().n_slots, ds.grid().len(), ds.scene().n_antennas);
    for ep in &ds.episodes {
        let ok = ep.channels.len() == n
            && ep.labels.len() == n
            && ep.channels.iter().all(|s| s.len() == g && s.iter().all(|h| h.len() == na))
            && ep.labels.iter().all(|l| l.len() == g);
        if !ok {
            return Err(Error::Data(format!(
                "episode {} lacks stored channels or labels for every (slot, instant)",
                ep.seed
            )));
        }
    }
    Ok(())
}

/// Scores predicted beams `preds[episode][slot][instant]`.
pub fn evaluate_predictions(ds: &Dataset, preds: &[Vec<Vec<usize>>]) -> Result<EvalReport> {
    check_stored(ds)?;
    if preds.len() != ds.len() {
        return Err(Error::Data(format!("{} predictions for {} episodes", preds.len(), ds.len())));
    }
    let scene = ds.scene();
    let book = dft_codebook(scene.n_antennas, scene.n_beams);
    let snr = scene.snr_linear();
    let (n, g) = (scene.n_slots, ds.grid().len());
    let mut cells = vec![vec![0.0; g]; n];
    for (ep, p) in ds.episodes.iter().zip(preds) {
        for i in 0..n {
            for j in 0..g {
                let q = p[i][j];
                if q >= scene.n_beams {
                    return Err(Error::Data(format!("predicted beam {q} out of range")));
                }
                cells[i][j] += normalized_se(ep, &book, snr, i, j, q);
            }
        }
    }
    let m = ds.len() as f64;
    cells.iter_mut().flatten().for_each(|v| *v /= m);
    let by_slot: Vec<f64> = cells.iter().map(|r| r.iter().sum::<f64>() / g as f64).collect();
    let by_tbar: Vec<f64> = (0..g)
        .map(|j| cells.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let overall = by_slot.iter().sum::<f64>() / n as f64;
    Ok(EvalReport {
        grid: ds.grid().to_vec(),
        cells,
        by_slot,
        by_tbar,
        overall,
        n_episodes: ds.len(),
    })
}

/// Scores an arbitrary predictor mapping an episode to
/// `beams[slot][instant]`.
pub fn evaluate_with<F>(ds: &Dataset, predictor: F) -> Result<EvalReport>
where
    F: Fn(&Episode) -> Vec<Vec<usize>> + Sync,
{
    let preds: Vec<_> = ds.episodes.par_iter().map(&predictor).collect();
    evaluate_predictions(ds, &preds)
}

/// Scores a trained model; each slot's prediction sees only the sweeps up
/// to and including that slot. Bit-identical across calls.
pub fn evaluate(model: &TrackerModel<f32>, ds: &Dataset) -> Result<EvalReport> {
    if model.dims.n_beams != ds.scene().n_beams {
        return Err(Error::Config(format!(
            "model has {} beams, dataset {}",
            model.dims.n_beams,
            ds.scene().n_beams
        )));
    }
    check_stored(ds)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let parts = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (batch, _) = super::train::make_batch(ds, chunk, model.dims.grid_side)?;
            model.predict_beams(&batch, ds.grid())
        })
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<_> = parts.into_iter().flatten().collect();
    evaluate_predictions(ds, &preds)
}
