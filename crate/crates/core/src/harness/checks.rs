//! Numerical self-checks shared by the CLI (`gradcheck`, `selftest`) and
//! the acceptance tests. Every check reports a measured value against a
//! fixed threshold.

use std::fmt;

use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{
    channel_at, dft_codebook, optimal_beam, pilot_sweep, spawn_ue, PathSet, SceneConfig,
};
use crate::dataset::{generate_episode, Episode};
use crate::lnn::{cfc_forward, ltc_reference_step, CfcCellParams, LtcReferenceParams};
use crate::models::{episode_loss, ModelDims, ModelKind, SlotBatch, TrackerModel};
use crate::tensor::gradcheck::{numerical_grad, numerical_grad_at, rel_error};
use crate::tensor::{AdamState, BatchNormState, BnMode, Graph, ParamSet, Tensor, Var};
use crate::Result;

/// Per-operation finite-difference tolerance.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Whole-model finite-difference tolerance.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Memorization target for the summed episode loss.
pub const MEMORIZE_LOSS: f64 = 0.05;
pub const MEMORIZE_STEPS: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckResult {
    /// Passes when `value < threshold`.
    pub fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value < threshold,
        }
    }

    /// Passes when `value <= threshold`.
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            passed: value <= threshold,
            ..Self::below(name, value, threshold)
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: {:.3e} (limit {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.threshold
        )
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Checks the gradient of `Σ w ⊙ build(inputs)` for every input against
/// central differences; `w` is a fixed random weighting.
fn op_check<F>(name: &str, inputs: Vec<Tensor<f64>>, seed: u64, build: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&mut g, &vars)?;
        g.shape(y)?.to_vec()
    };
    let weight = random_tensor(&mut rng, &out_shape, 1.0);
    let loss_of = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let y = build(g, vars)?;
        let w = g.constant(weight.clone());
        let yw = g.mul(y, w)?;
        g.sum(yw)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let loss = loss_of(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&inputs)
        .flat_map(|(&v, t)| match grads.get(v) {
            Some(gr) => gr.data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let eval = |x: &[f64]| -> f64 {
        let mut g = Graph::new();
        let mut off = 0;
        let vars: Vec<Var> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s, x[off..off + n].to_vec()).expect("shape");
                off += n;
                g.constant(t)
            })
            .collect();
        let l = loss_of(&mut g, &vars).expect("forward succeeded once already");
        g.value(l).expect("loss").data()[0]
    };
    let numeric = numerical_grad(eval, &flat, 1e-6);
    Ok(CheckResult::below(
        format!("grad {name}"),
        rel_error(&analytic, &numeric),
        OP_TOLERANCE,
    ))
}

/// Finite-difference check of every differentiable operation at 64-bit.
pub fn op_gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| random_tensor(&mut rng, shape, 1.0);
    let mut out = Vec::new();

    out.push(op_check("linear", vec![t(&[3, 5]), t(&[4, 5]), t(&[4])], 1, |g, v| {
        g.linear(v[0], v[1], v[2])
    })?);
    out.push(op_check(
        "conv2d k3 s3 p1",
        vec![t(&[2, 3, 5, 5]), t(&[4, 3, 3, 3]), t(&[4])],
        2,
        |g, v| g.conv2d(v[0], v[1], v[2], 3, 1),
    )?);
    out.push(op_check(
        "conv2d k3 s1 p1",
        vec![t(&[2, 2, 4, 4]), t(&[3, 2, 3, 3]), t(&[3])],
        3,
        |g, v| g.conv2d(v[0], v[1], v[2], 1, 1),
    )?);
    for (label, shape) in [("batchnorm2d train 4d", vec![3, 2, 2, 3]), ("batchnorm2d train 2d", vec![5, 3])] {
        let c = shape[1];
        out.push(op_check(label, vec![t(&shape), t(&[c]), t(&[c])], 4, move |g, v| {
            let mut st = BatchNormState::new(c);
            g.batchnorm2d(v[0], v[1], v[2], &mut st, BnMode::Train)
        })?);
    }
    let stats = t(&[3]);
    out.push(op_check("batchnorm2d eval", vec![t(&[2, 3, 2, 2]), t(&[3]), t(&[3])], 5, move |g, v| {
        let mut st = BatchNormState::new(3);
        st.running_mean = stats.data().to_vec();
        st.running_var = stats.data().iter().map(|s| 0.5 + s * s).collect();
        g.batchnorm2d(v[0], v[1], v[2], &mut st, BnMode::Eval)
    })?);
    // Keep ReLU inputs away from the kink so central differences are valid.
    let mut relu_in = t(&[4, 6]);
    relu_in.data_mut().iter_mut().for_each(|v| *v += v.signum() * 0.1);
    out.push(op_check("relu", vec![relu_in], 6, |g, v| g.relu(v[0]))?);
    out.push(op_check("tanh", vec![t(&[4, 6])], 7, |g, v| g.tanh(v[0]))?);
    out.push(op_check("sigmoid", vec![t(&[4, 6])], 8, |g, v| g.sigmoid(v[0]))?);
    out.push(op_check("avgpool_global", vec![t(&[2, 3, 3, 2])], 9, |g, v| g.avgpool_global(v[0]))?);
    out.push(op_check("concat axis 1", vec![t(&[3, 2]), t(&[3, 4])], 10, |g, v| g.concat(v, 1))?);
    out.push(op_check("concat axis 0", vec![t(&[2, 3]), t(&[1, 3])], 11, |g, v| g.concat(v, 0))?);
    out.push(op_check("softmax_cross_entropy", vec![t(&[4, 5])], 12, |g, v| {
        g.softmax_cross_entropy(v[0], &[0, 3, 4, 1])
    })?);
    out.push(op_check("add", vec![t(&[3, 3]), t(&[3, 3])], 13, |g, v| g.add(v[0], v[1]))?);
    out.push(op_check("sub", vec![t(&[3, 3]), t(&[3, 3])], 14, |g, v| g.sub(v[0], v[1]))?);
    out.push(op_check("mul", vec![t(&[3, 3]), t(&[3, 3])], 15, |g, v| g.mul(v[0], v[1]))?);
    out.push(op_check("one_minus", vec![t(&[3, 3])], 16, |g, v| g.one_minus(v[0]))?);
    out.push(op_check("scale_rows", vec![t(&[3, 4])], 17, |g, v| {
        g.scale_rows(v[0], &[0.5, -2.0, 0.0])
    })?);
    out.push(op_check("repeat_rows", vec![t(&[2, 3])], 18, |g, v| g.repeat_rows(v[0], 3))?);
    out.push(op_check("slice_rows", vec![t(&[5, 2])], 19, |g, v| g.slice_rows(v[0], 1, 3))?);
    out.push(op_check("reshape", vec![t(&[2, 6])], 20, |g, v| g.reshape(v[0], &[3, 4]))?);
    out.push(op_check("sum", vec![t(&[2, 3])], 21, |g, v| g.sum(v[0]))?);
    Ok(out)
}

/// Small multi-slot input at `Q = N_t = 16` with random labels.
fn tiny_batch(seed: u64, n_slots: usize, episodes: usize) -> Result<(SlotBatch<f64>, Vec<Episode>)> {
    let scene = SceneConfig {
        n_slots,
        ..SceneConfig::desk()
    };
    let grid = [0.2, 0.5, 0.9];
    let eps = (0..episodes)
        .map(|i| generate_episode(&scene, &grid, seed + i as u64))
        .collect::<Result<Vec<_>>>()?;
    let pilots: Vec<&[Vec<Complex32>]> = eps.iter().map(|e| e.pilots.as_slice()).collect();
    let batch = SlotBatch::from_pilots(&pilots, 4, crate::dataset::input_scale(&scene))?;
    Ok((batch, eps))
}

/// Checks sampled coordinates of every parameter block of `kind` against
/// central differences of the training loss (train-mode batch norm).
pub fn model_gradient_check(kind: ModelKind, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = TrackerModel::<f64>::new(kind, ModelDims::standard(16)?, &mut rng)?;
    let grid = [0.2, 0.5, 0.9];
    let (batch, _) = tiny_batch(seed, 2, 2)?;
    let labels: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..2 * grid.len()).map(|_| rng.random_range(0..16)).collect())
        .collect();

    let loss_at = |params: &ParamSet<f64>| -> f64 {
        let mut m = model.clone();
        m.params = params.clone();
        let mut g = Graph::new();
        g.set_check_finite(false);
        let bound = m.params.bind_frozen(&mut g);
        let logits = m.forward(&mut g, &bound, &batch, &grid, BnMode::Train).expect("forward");
        let l = episode_loss(&mut g, &logits, &labels).expect("loss");
        g.value(l).expect("loss").data()[0]
    };

    let mut m = model.clone();
    let mut g = Graph::new();
    let bound = m.params.bind(&mut g);
    let logits = m.forward(&mut g, &bound, &batch, &grid, BnMode::Train)?;
    let loss = episode_loss(&mut g, &logits, &labels)?;
    let grads = g.backward(loss)?;
    m.params.absorb(&grads, &bound);

    let mut out = Vec::new();
    for id in model.params.ids() {
        let name = model.params.name(id).to_string();
        let analytic_all = m.params.get(id).grad.clone().unwrap_or_default();
        // The largest-magnitude entries plus a few random ones.
        let mut order: Vec<usize> = (0..analytic_all.len()).collect();
        order.sort_by(|&a, &b| analytic_all[b].abs().total_cmp(&analytic_all[a].abs()));
        let mut coords: Vec<usize> = order.iter().copied().take(3).collect();
        for _ in 0..3 {
            coords.push(rng.random_range(0..analytic_all.len()));
        }
        coords.sort_unstable();
        coords.dedup();
        let base = model.params.get(id).data().to_vec();
        let numeric = numerical_grad_at(
            |x| {
                let mut p = model.params.clone();
                p.get_mut(id).data_mut().copy_from_slice(x);
                loss_at(&p)
            },
            &base,
            &coords,
            1e-5,
        );
        let analytic: Vec<f64> = coords.iter().map(|&c| analytic_all[c]).collect();
        out.push(CheckResult::below(
            format!("grad {kind} {name}"),
            rel_error(&analytic, &numeric),
            MODEL_TOLERANCE,
        ));
    }
    Ok(out)
}

/// Every per-op check followed by every parameter block of all three models.
pub fn gradient_suite() -> Result<Vec<CheckResult>> {
    let mut out = op_gradient_suite(7)?;
    for kind in ModelKind::ALL {
        out.extend(model_gradient_check(kind, 11)?);
    }
    Ok(out)
}

/// Index of the DFT beam whose spatial frequency is closest, on the unit
/// circle, to a path at azimuth `theta`.
pub fn nearest_codeword(theta: f64, n_beams: usize) -> usize {
    let u = theta.sin() / 2.0;
    ((u * n_beams as f64).round() as i64).rem_euclid(n_beams as i64) as usize
}

/// Exhaustive search against geometry on single-path scenes, noiseless
/// pilot argmax against exhaustive search, and codebook orthogonality.
pub fn channel_oracle_suite(seed: u64, n_scenes: usize) -> Result<Vec<CheckResult>> {
    let cfg = SceneConfig {
        n_paths: 1,
        ..SceneConfig::full()
    };
    let book = dft_codebook(cfg.n_antennas, cfg.n_beams);
    let snr = cfg.snr_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut geo_miss, mut pilot_miss) = (0usize, 0usize);
    let no_scatter = PathSet { nlos: Vec::new() };
    for _ in 0..n_scenes {
        let ue = spawn_ue(&cfg, &mut rng);
        let h = channel_at(ue.position, &no_scatter, &cfg)?;
        let (q, _) = optimal_beam(&h, &book, snr);
        let theta = ue.position[1].atan2(ue.position[0]);
        if q != nearest_codeword(theta, cfg.n_beams) {
            geo_miss += 1;
        }
        let y = pilot_sweep(&h, &book, cfg.tx_power_dbm, f64::NEG_INFINITY, &mut rng);
        let best = (0..y.len())
            .fold(0, |b, k| if y[k].norm_sqr() > y[b].norm_sqr() { k } else { b });
        if best != q {
            pilot_miss += 1;
        }
    }
    let mut ortho = 0.0f64;
    for n in [16, 64] {
        let b = dft_codebook(n, n);
        for p in 0..n {
            for q in 0..n {
                let ip: num_complex::Complex64 =
                    b.word(p).iter().zip(b.word(q)).map(|(a, c)| a.conj() * c).sum();
                let target = if p == q { 1.0 } else { 0.0 };
                ortho = ortho.max((ip - target).norm());
            }
        }
    }
    Ok(vec![
        CheckResult::at_most("exhaustive search = nearest codeword (misses)", geo_miss as f64, 0.0),
        CheckResult::at_most("noiseless pilot argmax = exhaustive search (misses)", pilot_miss as f64, 0.0),
        CheckResult::below("codebook orthogonality at Q = N_t", ortho, 1e-6),
    ])
}

/// Gate, saturation, boundedness and continuity of the CfC cell.
pub fn cfc_property_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::<f64>::new();
    let cell = CfcCellParams::new(&mut params, 16, 8, 12, &mut rng);
    let rows = 32;
    let feat = random_tensor(&mut rng, &[rows, 16], 3.0);
    let hprev = random_tensor(&mut rng, &[rows, 8], 1.0);
    let run = |params: &ParamSet<f64>, t: f64| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let (f, h) = (g.constant(feat.clone()), g.constant(hprev.clone()));
        let s = cfc_forward(&mut g, &bound, &cell, f, h, &[t])?;
        Ok((
            g.value(s.state)?.data().to_vec(),
            g.value(s.gate)?.data().to_vec(),
            g.value(s.h)?.data().to_vec(),
        ))
    };
    let (_, gate0, _) = run(&params, 0.0)?;
    let gate_dev = gate0.iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max);

    let mut sat = params.clone();
    sat.get_mut(cell.head_f.bias).data_mut().iter_mut().for_each(|b| *b = 60.0);
    let (x, _, h) = run(&sat, 1.0)?;
    let sat_dev = x.iter().zip(&h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut bound_max = 0.0f64;
    let mut jump = 0.0f64;
    let delta = 1e-7;
    for k in 0..=100 {
        let t = k as f64 / 100.0;
        let (x, _, _) = run(&params, t)?;
        bound_max = x.iter().fold(bound_max, |m, v| m.max(v.abs()));
        let t2 = if t + delta <= 1.0 { t + delta } else { t - delta };
        let (x2, _, _) = run(&params, t2)?;
        jump = x.iter().zip(&x2).fold(jump, |m, (a, b)| m.max((a - b).abs()));
    }
    Ok(vec![
        CheckResult::at_most("cfc gate at t=0 deviation from 1/2", gate_dev, 0.0),
        CheckResult::below("cfc saturated output vs h-branch", sat_dev, 1e-8),
        CheckResult::below("cfc max |output|", bound_max, 1.0),
        CheckResult::below("cfc output jump for dt=1e-7", jump, 1e-5),
    ])
}

/// Fixed point and step-refinement consistency of the reference LTC cell.
pub fn ltc_reference_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = LtcReferenceParams::random(8, 3, &mut rng);
    let input: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    for _ in 0..100_000 {
        let next = ltc_reference_step(&x, &input, 0.05, &p)?;
        let change = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = next;
        if change < 1e-14 {
            break;
        }
    }
    let f = p.synapse(&x, &input);
    let fixed_dev = (0..8)
        .map(|k| (x[k] - p.reversal[k] * f[k] / (p.omega_tau[k] + f[k])).abs())
        .fold(0.0, f64::max);

    let x0: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rhs = p.rhs(&x0, &input);
    let err = |dt: f64| -> Result<f64> {
        let x1 = ltc_reference_step(&x0, &input, dt, &p)?;
        Ok((0..8)
            .map(|k| ((x1[k] - x0[k]) / dt - rhs[k]).abs())
            .fold(0.0, f64::max))
    };
    let errs = [err(1e-2)?, err(1e-3)?, err(1e-4)?, err(1e-5)?];
    let shrinking = errs.windows(2).all(|w| w[1] < w[0]);
    let mut refine = CheckResult::below("ltc step vs ODE rhs at dt=1e-5", errs[3], 1e-4);
    refine.passed &= shrinking;
    Ok(vec![
        CheckResult::below("ltc fixed point a*f/(w+f)", fixed_dev, 1e-6),
        refine,
    ])
}

/// Desk-scale episode at zero speed: labels are constant within each slot.
pub fn memorization_episode(seed: u64) -> Result<(Episode, SceneConfig, Vec<f64>)> {
    let scene = SceneConfig {
        ue_speed: 0.0,
        ..SceneConfig::desk()
    };
    let grid = crate::dataset::default_grid();
    Ok((generate_episode(&scene, &grid, seed)?, scene, grid))
}

/// Trains `kind` on a single episode; returns the step at which the summed
/// loss first fell below [`MEMORIZE_LOSS`] (or `None`) and the loss curve.
pub fn memorize(kind: ModelKind, seed: u64, lr: f64, max_steps: usize) -> Result<(Option<usize>, Vec<f64>)> {
    let (ep, scene, grid) = memorization_episode(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = TrackerModel::<f32>::new(kind, ModelDims::standard(scene.n_beams)?, &mut rng)?;
    let mut adam = AdamState::new(&model.params, lr);
    let batch = SlotBatch::from_pilots(&[ep.pilots.as_slice()], 4, crate::dataset::input_scale(&scene))?;
    let mut curve = Vec::new();
    for step in 1..=max_steps {
        let l = super::train_step(&mut model, &mut adam, &batch, &ep.labels, &grid)?;
        curve.push(l);
        if l < MEMORIZE_LOSS {
            return Ok((Some(step), curve));
        }
    }
    Ok((None, curve))
}

pub fn memorization_suite(seed: u64) -> Result<Vec<CheckResult>> {
    ModelKind::ALL
        .iter()
        .map(|&kind| {
            let (hit, curve) = memorize(kind, seed, 1e-3, MEMORIZE_STEPS)?;
            let last = *curve.last().unwrap_or(&f64::NAN);
            let mut r = CheckResult::below(format!("memorize one episode ({kind}), final loss"), last, MEMORIZE_LOSS);
            r.passed = hit.is_some();
            Ok(r)
        })
        .collect()
}

/// Fast invariants: channel oracle, CfC and LTC properties.
pub fn selftest() -> Result<Vec<CheckResult>> {
    let mut out = channel_oracle_suite(3, 200)?;
    out.extend(cfc_property_suite(5)?);
    out.extend(ltc_reference_suite(9)?);
    Ok(out)
}
