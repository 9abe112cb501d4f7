//! Liquid neural network core.
//!
//! [`cfc_forward`] is the closed-form continuous-time cell that is trained:
//! a shared Tanh backbone over `[features ⊕ previous state]` branches into
//! three single-layer heads `f`, `g`, `h`, mixed by a sigmoid gate of the
//! liquid time constant times the normalized instant:
//!
//! ```text
//! x(t̄) = σ(−f·t̄) ⊙ g + (1 − σ(−f·t̄)) ⊙ h
//! ```
//!
//! The heads are evaluated at the previous hidden state (explicit
//! recurrence). [`ltc_reference_step`] integrates the underlying
//! liquid time-constant ODE
//! `dx/dt = −(ω_τ + f(x, i))⊙x + a⊙f(x, i)` and is used only as a behavioral
//! reference.

use rand::Rng;

use crate::tensor::{Bound, Dense, Graph, Init, ParamSet, Scalar, Var};
use crate::{Error, Result};

/// Backbone plus the three heads of one CfC cell.
#[derive(Clone, Copy, Debug)]
pub struct CfcCellParams {
    pub backbone: Dense,
    pub head_f: Dense,
    pub head_g: Dense,
    pub head_h: Dense,
    pub feature_dim: usize,
    pub hidden_dim: usize,
}

impl CfcCellParams {
    /// Registers `lnn.backbone.*` and `lnn.head_{f,g,h}.*` in `params`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        feature_dim: usize,
        hidden_dim: usize,
        backbone_dim: usize,
        rng: &mut R,
    ) -> Self {
        let input = feature_dim + hidden_dim;
        let xavier = |i, o| Init::XavierUniform {
            fan_in: i,
            fan_out: o,
        };
        Self {
            backbone: Dense::new(params, "lnn.backbone", input, backbone_dim, xavier(input, backbone_dim), rng),
            head_f: Dense::new(params, "lnn.head_f", backbone_dim, hidden_dim, xavier(backbone_dim, hidden_dim), rng),
            head_g: Dense::new(params, "lnn.head_g", backbone_dim, hidden_dim, xavier(backbone_dim, hidden_dim), rng),
            head_h: Dense::new(params, "lnn.head_h", backbone_dim, hidden_dim, xavier(backbone_dim, hidden_dim), rng),
            feature_dim,
            hidden_dim,
        }
    }
}

/// Intermediate values of one cell evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CfcStep {
    pub state: Var,
    pub gate: Var,
    pub complement: Var,
    pub g: Var,
    pub h: Var,
    pub f: Var,
}

/// One CfC update for a batch.
///
/// `tbar` holds the normalized instant for every row, or a single value
/// shared by all rows. Values outside `[0, 1]` are rejected.
pub fn cfc_forward<T: Scalar>(
    graph: &mut Graph<T>,
    bound: &Bound,
    cell: &CfcCellParams,
    feat: Var,
    h_prev: Var,
    tbar: &[f64],
) -> Result<CfcStep> {
    if let Some(bad) = tbar.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain(format!(
            "normalized instant {bad} outside [0, 1]"
        )));
    }
    let rows = graph.shape(feat)?[0];
    let scales: Vec<T> = match tbar.len() {
        1 => vec![T::lit(-tbar[0]); rows],
        n if n == rows => tbar.iter().map(|&t| T::lit(-t)).collect(),
        n => return Err(Error::dim("cfc_forward instants", &[rows], &[n])),
    };
    let x = graph.concat(&[feat, h_prev], 1)?;
    let z = cell.backbone.forward(graph, bound, x)?;
    let z = graph.tanh(z)?;
    let f = cell.head_f.forward(graph, bound, z)?;
    let g = cell.head_g.forward(graph, bound, z)?;
    let g = graph.tanh(g)?;
    let h = cell.head_h.forward(graph, bound, z)?;
    let h = graph.tanh(h)?;
    let ft = graph.scale_rows(f, &scales)?;
    let gate = graph.sigmoid(ft)?;
    let complement = graph.one_minus(gate)?;
    let a = graph.mul(gate, g)?;
    let b = graph.mul(complement, h)?;
    let state = graph.add(a, b)?;
    Ok(CfcStep {
        state,
        gate,
        complement,
        g,
        h,
        f,
    })
}

/// Parameters of the reference liquid time-constant cell.
#[derive(Clone, Debug, PartialEq)]
pub struct LtcReferenceParams {
    /// Leak rates `ω_τ`, all positive.
    pub omega_tau: Vec<f64>,
    /// Reversal potentials `a`.
    pub reversal: Vec<f64>,
    /// Synapse network `f(x, i) = σ(W·[x ⊕ i] + b)`, `W: D×(D+m)` row-major.
    pub f_weight: Vec<f64>,
    pub f_bias: Vec<f64>,
    pub input_dim: usize,
}

impl LtcReferenceParams {
    pub fn random<R: Rng + ?Sized>(hidden: usize, input: usize, rng: &mut R) -> Self {
        let width = hidden + input;
        let b = (6.0 / (width + hidden) as f64).sqrt();
        Self {
            omega_tau: (0..hidden).map(|_| rng.random_range(0.5..2.0)).collect(),
            reversal: (0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect(),
            f_weight: (0..hidden * width).map(|_| rng.random_range(-b..b)).collect(),
            f_bias: (0..hidden).map(|_| rng.random_range(-b..b)).collect(),
            input_dim: input,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.omega_tau.len()
    }

    /// Synaptic activation `f(x, i) ∈ (0, 1)`.
    pub fn synapse(&self, x: &[f64], input: &[f64]) -> Vec<f64> {
        let width = self.hidden_dim() + self.input_dim;
        (0..self.hidden_dim())
            .map(|r| {
                let row = &self.f_weight[r * width..(r + 1) * width];
                let z: f64 = row
                    .iter()
                    .zip(x.iter().chain(input))
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + self.f_bias[r];
                1.0 / (1.0 + (-z).exp())
            })
            .collect()
    }

    /// Right-hand side of the ODE at `(x, i)`.
    pub fn rhs(&self, x: &[f64], input: &[f64]) -> Vec<f64> {
        let f = self.synapse(x, input);
        (0..x.len())
            .map(|k| -(self.omega_tau[k] + f[k]) * x[k] + self.reversal[k] * f[k])
            .collect()
    }
}

/// Fused semi-implicit Euler step
/// `x ← (x + dt·a⊙f) / (1 + dt·(ω_τ + f))`.
pub fn ltc_reference_step(
    x: &[f64],
    input: &[f64],
    dt: f64,
    params: &LtcReferenceParams,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("step size {dt} must be positive")));
    }
    if x.len() != params.hidden_dim() || input.len() != params.input_dim {
        return Err(Error::dim(
            "ltc_reference_step",
            &[x.len(), input.len()],
            &[params.hidden_dim(), params.input_dim],
        ));
    }
    let f = params.synapse(x, input);
    Ok((0..x.len())
        .map(|k| {
            (x[k] + dt * params.reversal[k] * f[k]) / (1.0 + dt * (params.omega_tau[k] + f[k]))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(rows: usize) -> (Graph<f64>, Bound, CfcCellParams, Var, Var, ParamSet<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        let cell = CfcCellParams::new(&mut params, 6, 4, 5, &mut rng);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let feat: Vec<f64> = (0..rows * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hp: Vec<f64> = (0..rows * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let feat = g.leaf(Tensor::new(&[rows, 6], feat).unwrap());
        let hp = g.leaf(Tensor::new(&[rows, 4], hp).unwrap());
        (g, bound, cell, feat, hp, params)
    }

    #[test]
    fn gate_is_half_at_zero_instant() {
        let (mut g, bound, cell, feat, hp, _) = setup(3);
        let step = cfc_forward(&mut g, &bound, &cell, feat, hp, &[0.0]).unwrap();
        assert!(g.value(step.gate).unwrap().data().iter().all(|&v| v == 0.5));
        let (gv, hv, out) = (
            g.value(step.g).unwrap().data().to_vec(),
            g.value(step.h).unwrap().data().to_vec(),
            g.value(step.state).unwrap().data().to_vec(),
        );
        for k in 0..out.len() {
            assert!((out[k] - 0.5 * (gv[k] + hv[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn instant_outside_unit_interval_is_rejected() {
        let (mut g, bound, cell, feat, hp, _) = setup(2);
        for t in [-0.1, 1.5, f64::NAN] {
            assert!(matches!(
                cfc_forward(&mut g, &bound, &cell, feat, hp, &[t]),
                Err(Error::Domain(_))
            ));
        }
    }

    #[test]
    fn reference_step_rejects_non_positive_dt() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LtcReferenceParams::random(3, 2, &mut rng);
        assert!(ltc_reference_step(&[0.0; 3], &[0.0; 2], 0.0, &p).is_err());
    }
}
