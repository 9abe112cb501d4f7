use super::kernels::{
    conv_output_size, gather_rows, gemm, scatter_add_rows, to_channel_first, to_channel_last,
    ConvGeom, MatView,
};
use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`]. Handles become stale once the graph is
/// cleared by [`Graph::backward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u32,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalisation layer.
///
/// A freshly initialised state has mean 0 and variance 1, so evaluating
/// before any training step is the identity up to `gamma`/`beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeom,
        x_cl: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: BnMode,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    AvgPool {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    OneMinus {
        x: Var,
    },
    ScaleRows {
        x: Var,
        scales: Vec<T>,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    generation: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf that requires grad and was reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

/// Record of the operations applied during one step.
///
/// Node ids increase strictly in creation order, so the record is a
/// topological order by construction.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    generation: u32,
    cleared: bool,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: 0,
            cleared: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Turns NaN/Inf detection after every operator on or off.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation = self.generation.wrapping_add(1);
        self.cleared = false;
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(Error::State(format!(
                "variable {} does not belong to the current graph",
                v.id
            )));
        }
        Ok(&self.nodes[v.id])
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.cleared = false;
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        Ok(Var {
            id,
            generation: self.generation,
        })
    }

    /// Adds an input tensor; it takes part in differentiation iff
    /// `requires_grad` is set.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        t.grad = None;
        if self.cleared {
            self.cleared = false;
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var {
            id,
            generation: self.generation,
        }
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.id].value.requires_grad)
    }

    fn output(&self, shape: &[usize], data: Vec<T>, inputs: &[Var]) -> Tensor<T> {
        let mut t = Tensor::new(shape, data).expect("operator output shape");
        t.requires_grad = self.any_grad(inputs);
        t
    }

    /// `y = x·Wᵀ + b` for `x: B×I`, `W: O×I`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x)?.to_vec();
        let ws = self.shape(w)?.to_vec();
        let bs = self.shape(b)?.to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim("linear", &xs, &ws));
        }
        if bs != [ws[0]] {
            return Err(Error::dim("linear bias", &ws, &bs));
        }
        let (rows, inp, out) = (xs[0], xs[1], ws[0]);
        let bias = self.nodes[b.id].value.data();
        let mut y = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        gemm(
            MatView::row_major(self.nodes[x.id].value.data(), rows, inp),
            MatView::row_major(self.nodes[w.id].value.data(), out, inp).t(),
            &mut y,
            T::one(),
        );
        let value = self.output(&[rows, out], y, &[x, w, b]);
        self.push("linear", value, Op::Linear { x, w, b })
    }

    /// Cross-correlation of `x: B×Ci×H×W` with `k: Co×Ci×Kh×Kw`, zero padding.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x)?.to_vec();
        let ks = self.shape(k)?.to_vec();
        let bs = self.shape(b)?.to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::dim("conv2d", &xs, &ks));
        }
        if bs != [ks[0]] {
            return Err(Error::dim("conv2d bias", &ks, &bs));
        }
        let (ho, wo) = match (
            conv_output_size(xs[2], ks[2], stride, pad),
            conv_output_size(xs[3], ks[3], stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::Config(format!(
                    "conv2d output size is not positive for input {:?}, kernel {:?}, stride {stride}, pad {pad}",
                    xs, ks
                )))
            }
        };
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            ho,
            wo,
            stride,
            pad,
        };
        let x_cl = to_channel_last(
            self.nodes[x.id].value.data(),
            geom.batch,
            geom.c_in,
            geom.h * geom.w,
        );
        let kdata = self.nodes[k.id].value.data();
        let bias = self.nodes[b.id].value.data();
        let out_rows = geom.batch * ho * wo;
        let mut out_cl = Vec::with_capacity(out_rows * geom.c_out);
        for _ in 0..out_rows {
            out_cl.extend_from_slice(bias);
        }
        let ntap = geom.kh * geom.kw;
        for (tap, pairs) in geom.taps() {
            let a = gather_rows(&x_cl, geom.c_in, pairs.iter().map(|p| p.1));
            let mut c = vec![T::zero(); pairs.len() * geom.c_out];
            // Kernel slice for this tap viewed as Co×Ci with stride Ci·Kh·Kw.
            let wt = MatView::strided(&kdata[tap..], geom.c_out, geom.c_in, geom.c_in * ntap, ntap);
            gemm(
                MatView::row_major(&a, pairs.len(), geom.c_in),
                wt.t(),
                &mut c,
                T::zero(),
            );
            scatter_add_rows(&mut out_cl, geom.c_out, &c, pairs.iter().map(|p| p.0));
        }
        let y = to_channel_first(&out_cl, geom.batch, geom.c_out, ho * wo);
        let value = self.output(&[geom.batch, geom.c_out, ho, wo], y, &[x, k, b]);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                k,
                b,
                geom,
                x_cl,
            },
        )
    }

    /// Per-channel batch normalisation of `B×C×H×W` (or `B×C`) input.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: BnMode,
    ) -> Result<Var> {
        let xs = self.shape(x)?.to_vec();
        if xs.len() != 4 && xs.len() != 2 {
            return Err(Error::dim("batchnorm2d", &xs, &[state.channels()]));
        }
        let (batch, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        for v in [gamma, beta] {
            if self.shape(v)? != [c] {
                return Err(Error::dim("batchnorm2d affine", &xs, self.shape(v)?));
            }
        }
        if state.channels() != c {
            return Err(Error::dim("batchnorm2d state", &xs, &[state.channels()]));
        }
        let n = batch * spatial;
        if mode == BnMode::Train && n < 2 {
            return Err(Error::Domain(format!(
                "batchnorm2d in train mode needs at least 2 values per channel, got {n}"
            )));
        }
        let xd = self.nodes[x.id].value.data();
        let g = self.nodes[gamma.id].value.data();
        let be = self.nodes[beta.id].value.data();
        let eps = T::lit(state.eps);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut y = vec![T::zero(); xd.len()];
        let nt = T::lit(n as f64);
        for ch in 0..c {
            let idx = |bi: usize, s: usize| (bi * c + ch) * spatial + s;
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mut sum = T::zero();
                    for bi in 0..batch {
                        for s in 0..spatial {
                            sum += xd[idx(bi, s)];
                        }
                    }
                    let mean = sum / nt;
                    let mut sq = T::zero();
                    for bi in 0..batch {
                        for s in 0..spatial {
                            let d = xd[idx(bi, s)] - mean;
                            sq += d * d;
                        }
                    }
                    let var = sq / nt;
                    let m = T::lit(state.momentum);
                    let unbiased = sq / T::lit((n - 1) as f64);
                    state.running_mean[ch] = (T::one() - m) * state.running_mean[ch] + m * mean;
                    state.running_var[ch] = (T::one() - m) * state.running_var[ch] + m * unbiased;
                    (mean, var)
                }
                BnMode::Eval => (state.running_mean[ch], state.running_var[ch]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for bi in 0..batch {
                for s in 0..spatial {
                    let i = idx(bi, s);
                    let h = (xd[i] - mean) * is;
                    xhat[i] = h;
                    y[i] = g[ch] * h + be[ch];
                }
            }
        }
        let value = self.output(&xs, y, &[x, gamma, beta]);
        self.push(
            "batchnorm2d",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
        )
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let y: Vec<T> = t.data().iter().map(|&v| kind.apply(v)).collect();
        let shape = t.shape().to_vec();
        let value = self.output(&shape, y, &[x]);
        self.push("activation", value, Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    /// Mean over all spatial positions: `B×C×H×W → B×C`.
    pub fn avgpool_global(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x)?.to_vec();
        if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
            return Err(Error::dim("avgpool_global", &xs, &[]));
        }
        let s = xs[2] * xs[3];
        let inv = T::one() / T::lit(s as f64);
        let y: Vec<T> = self.nodes[x.id]
            .value
            .data()
            .chunks(s)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = self.output(&[xs[0], xs[1]], y, &[x]);
        self.push("avgpool_global", value, Op::AvgPool { x })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v)?.to_vec(),
            None => return Err(Error::Argument("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(Error::dim("concat axis", &first, &[axis]));
        }
        let mut extent = 0;
        for &v in xs {
            let s = self.shape(v)?;
            let same_rank = s.len() == first.len();
            if !same_rank || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::dim("concat", &first, s));
            }
            extent += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut y = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &v in xs {
                let t = &self.nodes[v.id].value;
                let chunk = t.shape()[axis] * inner;
                y.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = extent;
        let value = self.output(&shape, y, xs);
        self.push(
            "concat",
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.shape(logits)?.to_vec();
        if ls.len() != 2 || ls[0] != targets.len() || ls[0] == 0 {
            return Err(Error::dim("softmax_cross_entropy", &ls, &[targets.len()]));
        }
        let q = ls[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= q) {
            return Err(Error::Domain(format!("target index {bad} outside [0, {q})")));
        }
        let z = self.nodes[logits.id].value.data();
        let mut probs = vec![T::zero(); z.len()];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &z[r * q..(r + 1) * q];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (p, &v) in probs[r * q..(r + 1) * q].iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            for p in &mut probs[r * q..(r + 1) * q] {
                *p /= denom;
            }
            total += denom.ln() - (row[t] - max);
        }
        let loss = total / T::lit(targets.len() as f64);
        let value = self.output(&[], vec![loss], &[logits]);
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Row-wise softmax of a `B×Q` node, outside the differentiation record.
    pub fn softmax(&self, logits: Var) -> Result<Tensor<T>> {
        let t = &self.node(logits)?.value;
        if t.shape().len() != 2 {
            return Err(Error::dim("softmax", t.shape(), &[]));
        }
        let q = t.shape()[1];
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(q) {
            out.extend(softmax_row(row));
        }
        Tensor::new(t.shape(), out)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let y: Vec<T> = ta.data().iter().zip(tb.data()).map(|(&p, &q)| f(p, q)).collect();
        let shape = ta.shape().to_vec();
        let value = self.output(&shape, y, &[a, b]);
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul { a, b })
    }

    /// `1 − x` elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let y = t.data().iter().map(|&v| T::one() - v).collect();
        let shape = t.shape().to_vec();
        let value = self.output(&shape, y, &[x]);
        self.push("one_minus", value, Op::OneMinus { x })
    }

    /// Multiplies row `r` of `x` by the constant `scales[r]`.
    pub fn scale_rows(&mut self, x: Var, scales: &[T]) -> Result<Var> {
        let t = &self.node(x)?.value;
        let rows = t.shape().first().copied().unwrap_or(0);
        if rows != scales.len() || rows == 0 {
            return Err(Error::dim("scale_rows", t.shape(), &[scales.len()]));
        }
        let width = t.numel() / rows;
        let mut y = t.data().to_vec();
        for (chunk, &s) in y.chunks_mut(width).zip(scales) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let shape = t.shape().to_vec();
        let value = self.output(&shape, y, &[x]);
        self.push(
            "scale_rows",
            value,
            Op::ScaleRows {
                x,
                scales: scales.to_vec(),
            },
        )
    }

    /// Repeats each row `times` times: row `r·times + j` of the output is row
    /// `r` of the input.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let t = &self.node(x)?.value;
        if t.shape().is_empty() || times == 0 {
            return Err(Error::dim("repeat_rows", t.shape(), &[times]));
        }
        let rows = t.shape()[0];
        let width = if rows == 0 { 0 } else { t.numel() / rows };
        let mut y = Vec::with_capacity(t.numel() * times);
        for row in t.data().chunks(width.max(1)) {
            for _ in 0..times {
                y.extend_from_slice(row);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] *= times;
        let value = self.output(&shape, y, &[x]);
        self.push("repeat_rows", value, Op::RepeatRows { x, times })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.node(x)?.value;
        let rows = t.shape().first().copied().unwrap_or(0);
        if start + len > rows || len == 0 {
            return Err(Error::dim("slice_rows", t.shape(), &[start, len]));
        }
        let width = t.numel() / rows;
        let y = t.data()[start * width..(start + len) * width].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let value = self.output(&shape, y, &[x]);
        self.push("slice_rows", value, Op::SliceRows { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.node(x)?.value;
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::dim("reshape", t.shape(), shape));
        }
        let y = t.data().to_vec();
        let value = self.output(shape, y, &[x]);
        self.push("reshape", value, Op::Reshape { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().copied().sum::<T>();
        let value = self.output(&[], vec![s], &[x]);
        self.push("sum", value, Op::Sum { x })
    }

    /// Reverse-mode accumulation from a scalar `loss`; clears the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.cleared {
            return Err(Error::State(
                "backward called on a graph already consumed by a previous backward".into(),
            ));
        }
        let numel = self.node(loss)?.value.numel();
        if numel != 1 {
            return Err(Error::dim("backward (loss must be scalar)", self.shape(loss)?, &[]));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].value.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }
        let out = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) if n.value.requires_grad => {
                    Some(Tensor::new(n.value.shape(), g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        let generation = self.generation;
        self.generation = self.generation.wrapping_add(1);
        self.cleared = true;
        Ok(Gradients {
            generation,
            grads: out,
        })
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let n = &nodes[v.id];
    if !n.value.requires_grad {
        return None;
    }
    Some(grads[v.id].get_or_insert_with(|| vec![T::zero(); n.value.numel()]))
}

fn axpy<T: Scalar>(dst: &mut [T], src: impl Iterator<Item = T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| nodes[v.id].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let (rows, inp) = (nodes[x.id].value.shape()[0], nodes[x.id].value.shape()[1]);
            let out = nodes[w.id].value.shape()[0];
            if let Some(dx) = slot(grads, nodes, *x) {
                gemm(
                    MatView::row_major(g, rows, out),
                    MatView::row_major(val(*w), out, inp),
                    dx,
                    T::one(),
                );
            }
            if let Some(dw) = slot(grads, nodes, *w) {
                gemm(
                    MatView::row_major(g, rows, out).t(),
                    MatView::row_major(val(*x), rows, inp),
                    dw,
                    T::one(),
                );
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for row in g.chunks(out) {
                    axpy(db, row.iter().copied());
                }
            }
        }
        Op::Conv2d { x, k, b, geom, x_cl } => {
            let s_out = geom.ho * geom.wo;
            let g_cl = to_channel_last(g, geom.batch, geom.c_out, s_out);
            if let Some(db) = slot(grads, nodes, *b) {
                for row in g_cl.chunks(geom.c_out) {
                    axpy(db, row.iter().copied());
                }
            }
            let ntap = geom.kh * geom.kw;
            let taps = geom.taps();
            if nodes[k.id].value.requires_grad {
                let mut dk_local = vec![T::zero(); nodes[k.id].value.numel()];
                for (tap, pairs) in &taps {
                    let a = gather_rows(x_cl, geom.c_in, pairs.iter().map(|p| p.1));
                    let go = gather_rows(&g_cl, geom.c_out, pairs.iter().map(|p| p.0));
                    let mut dw = vec![T::zero(); geom.c_out * geom.c_in];
                    gemm(
                        MatView::row_major(&go, pairs.len(), geom.c_out).t(),
                        MatView::row_major(&a, pairs.len(), geom.c_in),
                        &mut dw,
                        T::zero(),
                    );
                    for (idx, v) in dw.into_iter().enumerate() {
                        dk_local[idx * ntap + tap] += v;
                    }
                }
                if let Some(dk) = slot(grads, nodes, *k) {
                    axpy(dk, dk_local.into_iter());
                }
            }
            if nodes[x.id].value.requires_grad {
                let kdata = val(*k);
                let mut dx_cl = vec![T::zero(); x_cl.len()];
                for (tap, pairs) in &taps {
                    let go = gather_rows(&g_cl, geom.c_out, pairs.iter().map(|p| p.0));
                    let mut da = vec![T::zero(); pairs.len() * geom.c_in];
                    let wt = MatView::strided(
                        &kdata[*tap..],
                        geom.c_out,
                        geom.c_in,
                        geom.c_in * ntap,
                        ntap,
                    );
                    gemm(
                        MatView::row_major(&go, pairs.len(), geom.c_out),
                        wt,
                        &mut da,
                        T::zero(),
                    );
                    scatter_add_rows(&mut dx_cl, geom.c_in, &da, pairs.iter().map(|p| p.1));
                }
                let dx_local = to_channel_first(&dx_cl, geom.batch, geom.c_in, geom.h * geom.w);
                if let Some(dx) = slot(grads, nodes, *x) {
                    axpy(dx, dx_local.into_iter());
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
        } => {
            let xs = nodes[x.id].value.shape();
            let (batch, c) = (xs[0], xs[1]);
            let spatial: usize = xs[2..].iter().product();
            let n = T::lit((batch * spatial) as f64);
            let gam = val(*gamma);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ch in 0..c {
                for bi in 0..batch {
                    for s in 0..spatial {
                        let i = (bi * c + ch) * spatial + s;
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            if let Some(dx) = slot(grads, nodes, *x) {
                for ch in 0..c {
                    let scale = gam[ch] * inv_std[ch];
                    for bi in 0..batch {
                        for s in 0..spatial {
                            let i = (bi * c + ch) * spatial + s;
                            dx[i] += match mode {
                                BnMode::Eval => g[i] * scale,
                                BnMode::Train => {
                                    scale / n * (n * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                }
                            };
                        }
                    }
                }
            }
            if let Some(dg) = slot(grads, nodes, *gamma) {
                axpy(dg, dgamma.into_iter());
            }
            if let Some(db) = slot(grads, nodes, *beta) {
                axpy(db, dbeta.into_iter());
            }
        }
        Op::Act { x, kind } => {
            let y = node.value.data();
            if let Some(dx) = slot(grads, nodes, *x) {
                axpy(
                    dx,
                    g.iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * kind.derivative_from_output(yi)),
                );
            }
        }
        Op::AvgPool { x } => {
            let xs = nodes[x.id].value.shape();
            let s = xs[2] * xs[3];
            let inv = T::one() / T::lit(s as f64);
            if let Some(dx) = slot(grads, nodes, *x) {
                for (chunk, &gi) in dx.chunks_mut(s).zip(g) {
                    chunk.iter_mut().for_each(|v| *v += gi * inv);
                }
            }
        }
        Op::Concat { xs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &v in xs {
                let chunk = nodes[v.id].value.shape()[*axis] * inner;
                if let Some(dx) = slot(grads, nodes, v) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        axpy(&mut dx[o * chunk..(o + 1) * chunk], src.iter().copied());
                    }
                }
                offset += chunk;
            }
        }
        Op::SoftmaxCe {
            logits,
            targets,
            probs,
        } => {
            let q = nodes[logits.id].value.shape()[1];
            let scale = g[0] / T::lit(targets.len() as f64);
            if let Some(dz) = slot(grads, nodes, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..q {
                        let one_hot = if j == t { T::one() } else { T::zero() };
                        dz[r * q + j] += scale * (probs[r * q + j] - one_hot);
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(da) = slot(grads, nodes, *a) {
                axpy(da, g.iter().copied());
            }
            if let Some(db) = slot(grads, nodes, *b) {
                axpy(db, g.iter().copied());
            }
        }
        Op::Sub { a, b } => {
            if let Some(da) = slot(grads, nodes, *a) {
                axpy(da, g.iter().copied());
            }
            if let Some(db) = slot(grads, nodes, *b) {
                axpy(db, g.iter().map(|&v| -v));
            }
        }
        Op::Mul { a, b } => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(da) = slot(grads, nodes, *a) {
                axpy(da, g.iter().zip(vb).map(|(&gi, &bi)| gi * bi));
            }
            if let Some(db) = slot(grads, nodes, *b) {
                axpy(db, g.iter().zip(va).map(|(&gi, &ai)| gi * ai));
            }
        }
        Op::OneMinus { x } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                axpy(dx, g.iter().map(|&v| -v));
            }
        }
        Op::ScaleRows { x, scales } => {
            let width = g.len() / scales.len();
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, gr), &s) in dx.chunks_mut(width).zip(g.chunks(width)).zip(scales) {
                    axpy(d, gr.iter().map(|&v| v * s));
                }
            }
        }
        Op::RepeatRows { x, times } => {
            let rows = nodes[x.id].value.shape()[0];
            let width = if rows == 0 { 0 } else { nodes[x.id].value.numel() / rows };
            if let Some(dx) = slot(grads, nodes, *x) {
                for (r, d) in dx.chunks_mut(width.max(1)).enumerate() {
                    for j in 0..*times {
                        let src = &g[(r * times + j) * width..(r * times + j + 1) * width];
                        axpy(d, src.iter().copied());
                    }
                }
            }
        }
        Op::SliceRows { x, start } => {
            let rows = nodes[x.id].value.shape()[0];
            let width = nodes[x.id].value.numel() / rows;
            if let Some(dx) = slot(grads, nodes, *x) {
                axpy(&mut dx[start * width..start * width + g.len()], g.iter().copied());
            }
        }
        Op::Reshape { x } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                axpy(dx, g.iter().copied());
            }
        }
        Op::Sum { x } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                dx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
    }
}
