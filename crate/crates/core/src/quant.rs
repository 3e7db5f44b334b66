//! Coarse-to-fine quantization chain.
//!
//! A base resolution per attribute group is rescaled by a list entry chosen
//! from gate logits (hard at eval, straight-through categorical sample during
//! training), expanded into a per-anchor column through a bounded MLP factor,
//! and finally multiplied by per-element error-sensitivity weights to give an
//! `[n, k]` resolution matrix. Values quantize as `round(a * q) / q`, so a
//! larger entry means a finer lattice with bin width `1/q`.

use crate::autodiff::{DiffError, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Chain constants shared by training, encode, and decode.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantConfig {
    /// Base resolution per attribute group (feature, scaling, offsets).
    pub base_steps: [f64; 3],
    /// Candidate multipliers for the coarse stage.
    pub scale_list: Vec<f64>,
    /// Floor applied to collected gradient magnitudes before normalization.
    pub gradient_floor: f64,
    /// Floor on the `1 + tanh` expansion so resolutions stay positive even
    /// when the factor MLP saturates.
    pub expansion_floor: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            base_steps: [1.0, 10.0, 10.0],
            scale_list: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            gradient_floor: 1e-3,
            expansion_floor: 1e-9,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale_list.is_empty() {
            return Err(Error::invalid("scale list is empty"));
        }
        if !self.scale_list.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::invalid("scale list entries must be positive"));
        }
        if !self.base_steps.iter().all(|&q| q > 0.0 && q.is_finite()) {
            return Err(Error::invalid("base steps must be positive"));
        }
        Ok(())
    }
}

/// How the coarse scale is selected.
#[derive(Clone, Copy, Debug)]
pub enum SelectMode {
    /// Argmax of the logits, ties toward the lower index.
    Eval,
    /// Straight-through hard categorical sample: the forward value is the
    /// sampled one-hot choice, gradients follow `softmax((logits + g) / tau)`.
    /// `noise: false` zeroes the perturbation, which makes the sampled choice
    /// equal the eval argmax.
    Train { temperature: f64, noise: bool },
}

/// Outcome of one scale selection.
pub struct ScaleChoice {
    pub index: usize,
    pub value: f64,
    /// Scalar variable carrying the selected value (with straight-through
    /// gradients in train mode).
    pub var: Var,
    /// Softmax weights over the perturbed logits (train mode only).
    pub soft_weights: Option<Vec<f64>>,
}

pub fn sample_gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    -(-u.ln()).ln()
}

fn argmax_low_tie(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Select a scale from `logits` (shape `[1, S]`).
pub fn select_scale_on_tape(
    tape: &mut Tape,
    logits: Var,
    cfg: &QuantConfig,
    mode: SelectMode,
    rng: &mut ChaCha8Rng,
) -> Result<ScaleChoice> {
    cfg.validate()?;
    let s = cfg.scale_list.len();
    let lv = tape.value(logits);
    if lv.len() != s {
        return Err(Error::invalid(format!(
            "expected {s} scale logits, got {}",
            lv.len()
        )));
    }
    if !lv.all_finite() {
        return Err(Error::invalid("scale logits are not finite"));
    }
    match mode {
        SelectMode::Eval => {
            let index = argmax_low_tie(lv.data());
            let value = cfg.scale_list[index];
            let var = tape.leaf(&Tensor::scalar(value));
            Ok(ScaleChoice {
                index,
                value,
                var,
                soft_weights: None,
            })
        }
        SelectMode::Train { temperature, noise } => {
            if temperature <= 0.0 {
                return Err(Error::invalid("temperature must be positive in train mode"));
            }
            let gumbel: Vec<f64> = (0..s)
                .map(|_| if noise { sample_gumbel(rng) } else { 0.0 })
                .collect();
            let g = tape.leaf(&Tensor::matrix(1, s, gumbel)?);
            let perturbed = tape.add(logits, g)?;
            let sharpened = tape.affine(perturbed, 1.0 / temperature, 0.0);
            let soft = tape.softmax(sharpened);
            let scales_col = tape.leaf(&Tensor::matrix(s, 1, cfg.scale_list.clone())?);
            let soft_scale = tape.matmul(soft, scales_col)?; // [1, 1]

            let index = argmax_low_tie(tape.value(perturbed).data());
            let value = cfg.scale_list[index];
            // forward carries the hard value, backward flows through soft_scale
            let correction = value - tape.value(soft_scale).item();
            let hard_shift = tape.leaf(&Tensor::matrix(1, 1, vec![correction])?);
            let var = tape.add(soft_scale, hard_shift)?;
            Ok(ScaleChoice {
                index,
                value,
                var,
                soft_weights: Some(tape.value(soft).data().to_vec()),
            })
        }
    }
}

/// Expand a scalar resolution into a per-anchor column:
/// `q1 * (1 + tanh(f(G)))`, floored just above zero.
/// Returns the expansion factor column (without `q1`) and the full column.
pub fn expand_to_vector(
    tape: &mut Tape,
    store: &ParamStore,
    factor_mlp: &Mlp2,
    prior_feature: Var,
    q1: Var,
) -> Result<(Var, Var)> {
    let raw = factor_mlp.on_tape(tape, store, prior_feature)?;
    if !tape.value(raw).all_finite() {
        return Err(Error::invalid("expansion network output is not finite"));
    }
    let t = tape.tanh(raw);
    let one_plus = tape.affine(t, 1.0, 1.0);
    let factor = tape.clamp_min(one_plus, QuantConfig::default().expansion_floor);
    let q2 = tape.mul_scalar(factor, q1)?;
    Ok((factor, q2))
}

/// Per-element error-sensitivity weights: view-averaged absolute gradients,
/// floored, then normalized to mean one.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMatrix {
    values: Tensor,
}

impl GradientMatrix {
    /// Flat weighting used before any gradients have been collected.
    pub fn ones(n: usize, k: usize) -> Self {
        GradientMatrix {
            values: Tensor::ones(vec![n, k]),
        }
    }

    pub fn from_raw(values: Tensor) -> Result<Self> {
        if !values.data().iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(Error::invalid("gradient matrix entries must be positive"));
        }
        Ok(GradientMatrix { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn is_flat(&self) -> bool {
        self.values.data().iter().all(|&v| v == 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn mean(&self) -> f64 {
        self.values.data().iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Collect `mean_v |d loss_v / d attributes|`, floor at `floor`, then scale
/// to mean one. `per_view_loss` rebuilds the view loss on a fresh tape from
/// an attribute leaf each call.
pub fn collect_gradients<F>(
    view_count: usize,
    attributes: &Tensor,
    floor: f64,
    mut per_view_loss: F,
) -> Result<GradientMatrix>
where
    F: FnMut(usize, &mut Tape, Var) -> std::result::Result<Var, DiffError>,
{
    if view_count == 0 {
        return Err(Error::invalid("gradient collection needs at least one view"));
    }
    let mut acc = vec![0.0f64; attributes.len()];
    for view in 0..view_count {
        let mut tape = Tape::new();
        let attr = tape.watched(attributes);
        let loss = per_view_loss(view, &mut tape, attr).map_err(Error::from)?;
        let grads = tape.backward(loss).map_err(Error::from)?;
        let g = grads
            .wrt(attr)
            .ok_or_else(|| Error::invalid("view loss does not depend on the attributes"))?;
        if !g.all_finite() {
            return Err(Error::invalid(format!(
                "view {view} loss is not differentiable at the current point"
            )));
        }
        for (a, &gv) in acc.iter_mut().zip(g.data()) {
            *a += gv.abs();
        }
    }
    let m = view_count as f64;
    for v in &mut acc {
        *v = (*v / m).max(floor);
    }
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    for v in &mut acc {
        *v /= mean;
    }
    GradientMatrix::from_raw(Tensor::new(attributes.shape().to_vec(), acc)?)
}

/// `q4[a, j] = q2[a] * grads[a, j]`, on the tape.
pub fn build_matrix_on_tape(tape: &mut Tape, q2: Var, grads: &GradientMatrix) -> Result<Var> {
    let g = tape.leaf(grads.values());
    Ok(tape.scale_rows(g, q2)?)
}

/// Plain `q4 = q2 ⊗ grads` for decode and tests.
pub fn build_matrix(q2: &Tensor, grads: &GradientMatrix) -> Result<Tensor> {
    let (n, one) = q2.dims2();
    let (gn, k) = grads.values().dims2();
    if one != 1 || n != gn {
        return Err(Error::invalid(format!(
            "q2 must be [{gn}, 1], got {:?}",
            q2.shape()
        )));
    }
    let mut out = Vec::with_capacity(n * k);
    for a in 0..n {
        let q = q2.data()[a];
        for j in 0..k {
            out.push(q * grads.values().at(a, j));
        }
    }
    Ok(Tensor::new(vec![n, k], out)?)
}

/// `round(a * q4) / q4` with ties away from zero.
pub fn quantize_eval(a: &Tensor, q4: &Tensor) -> Result<Tensor> {
    check_resolution(q4)?;
    if a.shape() != q4.shape() {
        return Err(Error::invalid(format!(
            "attribute shape {:?} does not match resolution shape {:?}",
            a.shape(),
            q4.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(q4.data())
        .map(|(&v, &q)| (v * q).round() / q)
        .collect();
    Ok(Tensor::new(a.shape().to_vec(), data)?)
}

/// Integer lattice indices `round(a * q4)`.
pub fn lattice_indices(a: &Tensor, q4: &Tensor) -> Result<Vec<i64>> {
    check_resolution(q4)?;
    Ok(a.data()
        .iter()
        .zip(q4.data())
        .map(|(&v, &q)| (v * q).round() as i64)
        .collect())
}

fn check_resolution(q4: &Tensor) -> Result<()> {
    if let Some(pos) = q4.data().iter().position(|&q| !(q > 0.0) || !q.is_finite()) {
        let (_, k) = q4.dims2();
        return Err(Error::invalid(format!(
            "non-positive resolution at element ({}, {})",
            pos / k,
            pos % k
        )));
    }
    Ok(())
}

/// Draw the additive-noise quantization proxy: `u ~ U(-1/2, 1/2)` per element,
/// applied as `a + u / q4` on the tape so the bin width matches the hard
/// rounding it stands in for.
pub fn noise_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    Tensor::new(shape.to_vec(), data).expect("noise shape")
}

pub fn quantize_noise_on_tape(
    tape: &mut Tape,
    a: Var,
    q4: Var,
    noise: &Tensor,
) -> Result<Var> {
    check_resolution(&tape.value(q4))?;
    let u = tape.leaf(noise);
    let delta = tape.div(u, q4)?;
    Ok(tape.add(a, delta)?)
}

/// Straight-through rounding: forward is the hard lattice value, the
/// backward pass treats quantization as identity on `a`.
pub fn quantize_ste_on_tape(tape: &mut Tape, a: Var, q4: Var) -> Result<Var> {
    let hard = quantize_eval(&tape.value(a), &tape.value(q4))?;
    let av = tape.value(a);
    let shift: Vec<f64> = hard
        .data()
        .iter()
        .zip(av.data())
        .map(|(&h, &v)| h - v)
        .collect();
    let s = tape.leaf(&Tensor::new(av.shape().to_vec(), shift)?);
    Ok(tape.add(a, s)?)
}

/// Deterministic per-iteration seed for the quantization noise stream.
pub fn noise_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::subseed(seed, &format!("quant.noise.{iteration}")))
}
