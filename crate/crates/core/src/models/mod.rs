//! Beam trackers: a shared convolutional feature extractor and output layer
//! around one of three recurrent cores.
//!
//! Per slot `i` the pilot sweep `y_i` (Q complex values) is split into real
//! and imaginary planes on a `√Q × √Q` grid (row-major in `q`), mapped to a
//! feature vector `s_i`, fed to the recurrent core, and turned into beam
//! probabilities by a linear layer plus softmax.
//!
//! - [`ModelKind::Lnn`]: CfC cell queried at the normalized instant `t̄`.
//! - [`ModelKind::Lstm`]: one prediction per slot, reused for every `t̄`.
//! - [`ModelKind::OdeLstm`]: LSTM state evolved over `t̄` by Euler steps of
//!   `h' = tanh(W h + b)` before the output layer.
//!
//! Batched forward passes lay rows out as `b·G + j` for episode `b` and
//! instant `grid[j]`.

mod extractor;
mod lstm;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex32;
use rand::{Rng, SeedableRng};

pub use extractor::{FeatureExtractor, CONV_KERNEL, CONV_PAD, CONV_STRIDE};
pub use lstm::LstmCellParams;

use crate::lnn::{cfc_forward, CfcCellParams};
use crate::tensor::{
    conv_output_size, BatchNormState, BnMode, Bound, Checkpoint, Dense, Graph, Init, ParamSet,
    Scalar, Tensor, Var,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Lnn,
    Lstm,
    OdeLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Lnn, ModelKind::Lstm, ModelKind::OdeLstm];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lnn => "lnn",
            ModelKind::Lstm => "lstm",
            ModelKind::OdeLstm => "ode-lstm",
        }
    }

    /// Whether the model receives the normalized prediction instant.
    pub fn uses_instant(self) -> bool {
        self != ModelKind::Lstm
    }

    fn code(self) -> f32 {
        match self {
            ModelKind::Lnn => 0.0,
            ModelKind::Lstm => 1.0,
            ModelKind::OdeLstm => 2.0,
        }
    }

    fn from_code(code: f32) -> Result<Self> {
        match code as i64 {
            0 => Ok(ModelKind::Lnn),
            1 => Ok(ModelKind::Lstm),
            2 => Ok(ModelKind::OdeLstm),
            _ => Err(Error::Format(format!("unknown model kind code {code}"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lnn" | "cfc" => Ok(ModelKind::Lnn),
            "lstm" => Ok(ModelKind::Lstm),
            "ode-lstm" | "ode_lstm" | "odelstm" => Ok(ModelKind::OdeLstm),
            other => Err(Error::Config(format!(
                "unknown model kind '{other}' (expected lnn, lstm or ode-lstm)"
            ))),
        }
    }
}

/// Layer widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub n_beams: usize,
    pub grid_side: usize,
    pub conv_channels: [usize; 3],
    pub hidden_dim: usize,
    pub backbone_dim: usize,
    pub ode_steps: usize,
}

impl ModelDims {
    /// Widths of the reference network: 64/256/256 conv channels, 128-wide
    /// backbone, 64 hidden units.
    pub fn standard(n_beams: usize) -> Result<Self> {
        Self::custom(n_beams, [64, 256, 256], 64, 128)
    }

    pub fn custom(
        n_beams: usize,
        conv_channels: [usize; 3],
        hidden_dim: usize,
        backbone_dim: usize,
    ) -> Result<Self> {
        let side = (n_beams as f64).sqrt().round() as usize;
        if side * side != n_beams || n_beams == 0 {
            return Err(Error::Config(format!(
                "number of beams {n_beams} is not a perfect square; cannot arrange pilots on a grid"
            )));
        }
        Ok(Self {
            n_beams,
            grid_side: side,
            conv_channels,
            hidden_dim,
            backbone_dim,
            ode_steps: 10,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.conv_channels[2]
    }

    /// Spatial extents after each convolution.
    pub fn spatial_chain(&self) -> Result<[usize; 3]> {
        let mut s = self.grid_side;
        let mut out = [0; 3];
        for o in &mut out {
            s = conv_output_size(s, CONV_KERNEL, CONV_STRIDE, CONV_PAD).ok_or_else(|| {
                Error::Config(format!("grid side {} too small for the conv stack", self.grid_side))
            })?;
            *o = s;
        }
        Ok(out)
    }

    fn to_block(self) -> Vec<f32> {
        [
            self.n_beams,
            self.grid_side,
            self.conv_channels[0],
            self.conv_channels[1],
            self.conv_channels[2],
            self.hidden_dim,
            self.backbone_dim,
            self.ode_steps,
        ]
        .iter()
        .map(|&v| v as f32)
        .collect()
    }

    fn from_block(v: &[f32]) -> Result<Self> {
        if v.len() != 8 {
            return Err(Error::Format("model.dims block must have 8 entries".into()));
        }
        let u = |i: usize| v[i] as usize;
        let mut d = Self::custom(u(0), [u(2), u(3), u(4)], u(5), u(6))?;
        d.ode_steps = u(7);
        if d.grid_side != u(1) {
            return Err(Error::Format("model.dims grid side inconsistent".into()));
        }
        Ok(d)
    }
}

/// One row of the layer table: name, input width, output width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: &'static str,
    pub input: usize,
    pub output: usize,
}

/// Input/output widths of every layer for `dims`, checked against the
/// reference network's table; fails fast on any mismatch.
pub fn shape_audit(dims: &ModelDims) -> Result<Vec<LayerShape>> {
    let [c1, c2, c3] = dims.conv_channels;
    dims.spatial_chain()?;
    let rows = vec![
        LayerShape { name: "BN1", input: 2, output: 2 },
        LayerShape { name: "CNN1", input: 2, output: c1 },
        LayerShape { name: "BN2", input: c1, output: c1 },
        LayerShape { name: "CNN2", input: c1, output: c2 },
        LayerShape { name: "BN3", input: c2, output: c2 },
        LayerShape { name: "CNN3", input: c2, output: c3 },
        LayerShape { name: "BN4", input: c3, output: c3 },
        LayerShape { name: "Pooling", input: c3, output: c3 },
        LayerShape { name: "LNN Backbone", input: c3 + dims.hidden_dim, output: dims.backbone_dim },
        LayerShape { name: "LNN Head f", input: dims.backbone_dim, output: dims.hidden_dim },
        LayerShape { name: "LNN Head g", input: dims.backbone_dim, output: dims.hidden_dim },
        LayerShape { name: "LNN Head h", input: dims.backbone_dim, output: dims.hidden_dim },
        LayerShape { name: "Output FC", input: dims.hidden_dim, output: dims.n_beams },
    ];
    // Reference widths; the output layer follows the codebook size.
    let reference: [(usize, usize); 13] = [
        (2, 2),
        (2, 64),
        (64, 64),
        (64, 256),
        (256, 256),
        (256, 256),
        (256, 256),
        (256, 256),
        (320, 128),
        (128, 64),
        (128, 64),
        (128, 64),
        (64, dims.n_beams),
    ];
    for (row, (i, o)) in rows.iter().zip(reference) {
        if (row.input, row.output) != (i, o) {
            return Err(Error::Config(format!(
                "layer {} has I={}, O={} but the reference network has I={i}, O={o}",
                row.name, row.input, row.output
            )));
        }
    }
    Ok(rows)
}

/// Pilot sweeps of `batch` episodes laid out slot-major as
/// `(n_slots·batch)×2×S×S`.
#[derive(Clone, Debug)]
pub struct SlotBatch<T> {
    pub input: Tensor<T>,
    pub batch: usize,
    pub n_slots: usize,
}

impl<T: Scalar> SlotBatch<T> {
    /// `pilots[b][i]` is the sweep of episode `b` at slot `i`; every value is
    /// multiplied by `scale` (the inverse noise standard deviation).
    pub fn from_pilots(pilots: &[&[Vec<Complex32>]], grid_side: usize, scale: f64) -> Result<Self> {
        let batch = pilots.len();
        let n_slots = pilots.first().map_or(0, |p| p.len());
        if batch == 0 || n_slots == 0 {
            return Err(Error::Argument("empty slot history".into()));
        }
        let q = grid_side * grid_side;
        let mut data = vec![T::zero(); n_slots * batch * 2 * q];
        for (b, episode) in pilots.iter().enumerate() {
            if episode.len() != n_slots {
                return Err(Error::dim("slot batch", &[n_slots], &[episode.len()]));
            }
            for (i, sweep) in episode.iter().enumerate() {
                if sweep.len() != q {
                    return Err(Error::dim("pilot sweep", &[q], &[sweep.len()]));
                }
                let base = (i * batch + b) * 2 * q;
                for (k, y) in sweep.iter().enumerate() {
                    data[base + k] = T::lit(y.re as f64 * scale);
                    data[base + q + k] = T::lit(y.im as f64 * scale);
                }
            }
        }
        let input = Tensor::new(&[n_slots * batch, 2, grid_side, grid_side], data)?;
        Ok(Self {
            input,
            batch,
            n_slots,
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Core {
    Cfc(CfcCellParams),
    Lstm(LstmCellParams),
    OdeLstm {
        lstm: LstmCellParams,
        derivative: Dense,
    },
}

/// Feature extractor, recurrent core and output layer with their parameters.
#[derive(Clone, Debug)]
pub struct TrackerModel<T> {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub params: ParamSet<T>,
    pub extractor: FeatureExtractor<T>,
    core: Core,
    output: Dense,
}

impl<T: Scalar> TrackerModel<T> {
    pub fn new<R: Rng + ?Sized>(kind: ModelKind, dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.spatial_chain()?;
        let mut params = ParamSet::new();
        let extractor = FeatureExtractor::new(&mut params, &dims, rng);
        let (f, h) = (dims.feature_dim(), dims.hidden_dim);
        let core = match kind {
            ModelKind::Lnn => Core::Cfc(CfcCellParams::new(&mut params, f, h, dims.backbone_dim, rng)),
            ModelKind::Lstm => Core::Lstm(LstmCellParams::new(&mut params, f, h, rng)),
            ModelKind::OdeLstm => {
                let lstm = LstmCellParams::new(&mut params, f, h, rng);
                let init = Init::XavierUniform { fan_in: h, fan_out: h };
                let derivative = Dense::new(&mut params, "ode.derivative", h, h, init, rng);
                Core::OdeLstm { lstm, derivative }
            }
        };
        let init = Init::XavierUniform {
            fan_in: h,
            fan_out: dims.n_beams,
        };
        let output = Dense::new(&mut params, "output", h, dims.n_beams, init, rng);
        Ok(Self {
            kind,
            dims,
            params,
            extractor,
            core,
            output,
        })
    }

    pub fn cfc_cell(&self) -> Option<&CfcCellParams> {
        match &self.core {
            Core::Cfc(c) => Some(c),
            _ => None,
        }
    }

    pub fn ode_derivative(&self) -> Option<Dense> {
        match self.core {
            Core::OdeLstm { derivative, .. } => Some(derivative),
            _ => None,
        }
    }

    pub fn output_layer(&self) -> Dense {
        self.output
    }

    /// Per-slot logits `(B·G)×Q`. Train mode updates the batch-norm running
    /// statistics.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        bound: &Bound,
        batch: &SlotBatch<T>,
        grid: &[f64],
        mode: BnMode,
    ) -> Result<Vec<Var>> {
        let mut states = self.extractor.states.clone();
        let out = self.forward_with(g, bound, batch, grid, mode, &mut states)?;
        if mode == BnMode::Train {
            self.extractor.states = states;
        }
        Ok(out)
    }

    /// Eval-mode forward pass that leaves the model untouched.
    pub fn forward_eval(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        batch: &SlotBatch<T>,
        grid: &[f64],
    ) -> Result<Vec<Var>> {
        let mut states = self.extractor.states.clone();
        self.forward_with(g, bound, batch, grid, BnMode::Eval, &mut states)
    }

    /// Extractor output `(n_slots·B)×F`.
    pub fn feature_extract(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        batch: &SlotBatch<T>,
        states: &mut [BatchNormState<T>; 4],
        mode: BnMode,
    ) -> Result<Var> {
        let s = self.dims.grid_side;
        if batch.input.shape()[1..] != [2, s, s] {
            return Err(Error::dim("feature_extract", batch.input.shape(), &[2, s, s]));
        }
        let input = g.constant(batch.input.clone());
        self.extractor.forward(g, bound, input, states, mode)
    }

    fn forward_with(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        batch: &SlotBatch<T>,
        grid: &[f64],
        mode: BnMode,
        states: &mut [BatchNormState<T>; 4],
    ) -> Result<Vec<Var>> {
        if grid.is_empty() {
            return Err(Error::Argument("empty instant grid".into()));
        }
        if let Some(bad) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("normalized instant {bad} outside [0, 1]")));
        }
        let (b, n, gl) = (batch.batch, batch.n_slots, grid.len());
        let h_dim = self.dims.hidden_dim;
        let feats = self.feature_extract(g, bound, batch, states, mode)?;
        let row_t: Vec<f64> = (0..b).flat_map(|_| grid.iter().copied()).collect();
        let mut logits = Vec::with_capacity(n);
        match &self.core {
            Core::Cfc(cell) => {
                let mut h = g.constant(Tensor::zeros(&[b * gl, h_dim]));
                for i in 0..n {
                    let s = g.slice_rows(feats, i * b, b)?;
                    let s = g.repeat_rows(s, gl)?;
                    h = cfc_forward(g, bound, cell, s, h, &row_t)?.state;
                    logits.push(self.output.forward(g, bound, h)?);
                }
            }
            Core::Lstm(lstm) => {
                let mut h = g.constant(Tensor::zeros(&[b, h_dim]));
                let mut c = g.constant(Tensor::zeros(&[b, h_dim]));
                for i in 0..n {
                    let s = g.slice_rows(feats, i * b, b)?;
                    (h, c) = lstm.step(g, bound, s, h, c)?;
                    let z = self.output.forward(g, bound, h)?;
                    logits.push(g.repeat_rows(z, gl)?);
                }
            }
            Core::OdeLstm { lstm, derivative } => {
                let mut h = g.constant(Tensor::zeros(&[b, h_dim]));
                let mut c = g.constant(Tensor::zeros(&[b, h_dim]));
                let steps = self.dims.ode_steps.max(1);
                let dt: Vec<T> = row_t.iter().map(|&t| T::lit(t / steps as f64)).collect();
                for i in 0..n {
                    let s = g.slice_rows(feats, i * b, b)?;
                    (h, c) = lstm.step(g, bound, s, h, c)?;
                    let mut e = g.repeat_rows(h, gl)?;
                    for _ in 0..steps {
                        let d = derivative.forward(g, bound, e)?;
                        let d = g.tanh(d)?;
                        let d = g.scale_rows(d, &dt)?;
                        e = g.add(e, d)?;
                    }
                    logits.push(self.output.forward(g, bound, e)?);
                }
            }
        }
        Ok(logits)
    }

    /// Beam probabilities for every prefix `1..=n` of a single episode at
    /// normalized instant `tbar` (eval mode).
    pub fn track(&self, pilots: &[Vec<Complex32>], tbar: f64, scale: f64) -> Result<Vec<Vec<f64>>> {
        if pilots.is_empty() {
            return Err(Error::Argument("empty slot history".into()));
        }
        let batch = SlotBatch::from_pilots(&[pilots], self.dims.grid_side, scale)?;
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let logits = self.forward_eval(&mut g, &bound, &batch, &[tbar])?;
        logits
            .into_iter()
            .map(|z| Ok(g.softmax(z)?.to_f64_vec()))
            .collect()
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!("model is {}, not {kind}", self.kind)));
        }
        Ok(())
    }

    pub fn track_lnn(&self, pilots: &[Vec<Complex32>], tbar: f64, scale: f64) -> Result<Vec<Vec<f64>>> {
        self.expect_kind(ModelKind::Lnn)?;
        self.track(pilots, tbar, scale)
    }

    /// The LSTM ignores the instant; the per-slot prediction is reused
    /// throughout the slot.
    pub fn track_lstm(&self, pilots: &[Vec<Complex32>], scale: f64) -> Result<Vec<Vec<f64>>> {
        self.expect_kind(ModelKind::Lstm)?;
        self.track(pilots, 0.0, scale)
    }

    pub fn track_ode_lstm(&self, pilots: &[Vec<Complex32>], tbar: f64, scale: f64) -> Result<Vec<Vec<f64>>> {
        self.expect_kind(ModelKind::OdeLstm)?;
        self.track(pilots, tbar, scale)
    }

    /// Predicted beam for every `[episode][slot][instant]` (eval mode).
    pub fn predict_beams(&self, batch: &SlotBatch<T>, grid: &[f64]) -> Result<Vec<Vec<Vec<usize>>>> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let logits = self.forward_eval(&mut g, &bound, batch, grid)?;
        let gl = grid.len();
        let mut out = vec![vec![vec![0; gl]; batch.n_slots]; batch.batch];
        for (i, z) in logits.into_iter().enumerate() {
            let p = g.softmax(z)?;
            for (r, row) in p.data().chunks(self.dims.n_beams).enumerate() {
                let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                out[r / gl][i][r % gl] = select_beam(&row);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("model.kind", &[1], vec![self.kind.code()]);
        ck.push("model.dims", &[8], self.dims.to_block());
        ck.push_params(&self.params);
        for (i, s) in self.extractor.states.iter().enumerate() {
            let conv = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
            let c = s.channels();
            ck.push(&format!("extractor.bn{}.running_mean", i + 1), &[c], conv(&s.running_mean));
            ck.push(&format!("extractor.bn{}.running_var", i + 1), &[c], conv(&s.running_var));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (_, kind) = ck
            .get("model.kind")
            .ok_or_else(|| Error::Format("checkpoint lacks model.kind".into()))?;
        let kind = ModelKind::from_code(*kind.first().unwrap_or(&-1.0))?;
        let (_, dims) = ck
            .get("model.dims")
            .ok_or_else(|| Error::Format("checkpoint lacks model.dims".into()))?;
        let dims = ModelDims::from_block(dims)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(kind, dims, &mut rng)?;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let (shape, data) = ck
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks block {name}")))?;
            model.params.load_block(&name, shape, data)?;
        }
        for (i, s) in model.extractor.states.iter_mut().enumerate() {
            for (suffix, dst) in [("running_mean", &mut s.running_mean), ("running_var", &mut s.running_var)] {
                let name = format!("extractor.bn{}.{suffix}", i + 1);
                let (shape, data) = ck
                    .get(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks block {name}")))?;
                if shape != [dst.len()] {
                    return Err(Error::dim("checkpoint batchnorm", shape, &[dst.len()]));
                }
                for (d, &v) in dst.iter_mut().zip(data) {
                    *d = T::lit(v as f64);
                }
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    pub fn cast<U: Scalar>(&self) -> TrackerModel<U> {
        let states = self.extractor.states.clone().map(|s| BatchNormState {
            running_mean: s.running_mean.iter().map(|v| U::lit(v.as_f64())).collect(),
            running_var: s.running_var.iter().map(|v| U::lit(v.as_f64())).collect(),
            momentum: s.momentum,
            eps: s.eps,
        });
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut out = TrackerModel::<U>::new(self.kind, self.dims, &mut rng).expect("valid dims");
        out.params = self.params.cast();
        out.extractor.states = states;
        out
    }
}

/// Linear layer then softmax for a single hidden state.
pub fn output_layer(hidden: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let q = bias.len();
    let h = hidden.len();
    let logits: Vec<f64> = (0..q)
        .map(|o| bias[o] + (0..h).map(|k| weight[o * h + k] * hidden[k]).sum::<f64>())
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Arg-max with ties broken toward the lowest index.
pub fn select_beam(probs: &[f64]) -> usize {
    let mut best = 0;
    for (q, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = q;
        }
    }
    best
}

/// Cross-entropy summed over slots; each slot's term averages over the
/// batch and instant grid. `labels[i]` lists the target of every row of
/// `logits[i]`.
pub fn episode_loss<T: Scalar>(g: &mut Graph<T>, logits: &[Var], labels: &[Vec<usize>]) -> Result<Var> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Data(format!(
            "labels for {} slots, predictions for {}",
            labels.len(),
            logits.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&z, l) in logits.iter().zip(labels) {
        let rows = g.shape(z)?[0];
        if l.len() != rows {
            return Err(Error::Data(format!("{} labels for {rows} predictions", l.len())));
        }
        let term = g.softmax_cross_entropy(z, l)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("at least one slot"))
}
