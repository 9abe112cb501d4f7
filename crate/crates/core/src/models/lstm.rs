use rand::Rng;

use crate::tensor::{Bound, Dense, Graph, Init, ParamSet, Scalar, Var};
use crate::Result;

/// Standard LSTM cell; each gate reads `[x ⊕ h]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmCellParams {
    pub input_gate: Dense,
    pub forget_gate: Dense,
    pub cell_gate: Dense,
    pub output_gate: Dense,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCellParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let width = input_dim + hidden_dim;
        let init = Init::XavierUniform {
            fan_in: width,
            fan_out: hidden_dim,
        };
        let mut gate = |name: &str| Dense::new(params, &format!("lstm.{name}"), width, hidden_dim, init, rng);
        Self {
            input_gate: gate("gate_i"),
            forget_gate: gate("gate_f"),
            cell_gate: gate("gate_g"),
            output_gate: gate("gate_o"),
            input_dim,
            hidden_dim,
        }
    }

    /// Returns `(h', c')`.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let xh = g.concat(&[x, h], 1)?;
        let i = self.input_gate.forward(g, bound, xh)?;
        let i = g.sigmoid(i)?;
        let f = self.forget_gate.forward(g, bound, xh)?;
        let f = g.sigmoid(f)?;
        let cand = self.cell_gate.forward(g, bound, xh)?;
        let cand = g.tanh(cand)?;
        let o = self.output_gate.forward(g, bound, xh)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next)?;
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}
