//! Conditional Gaussian entropy model over quantized attributes.
//!
//! A per-group head maps the fused prior feature to a (mean, std) pair per
//! element. Bin probabilities integrate that Gaussian over one lattice bin
//! (width `1/q4`) and the estimated rate is the sum of `-log2 p`, which is
//! what the coded payload converges to.

use crate::autodiff::{normal_cdf, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{InitScheme, Linear};
use rand_chacha::ChaCha8Rng;

/// Lower clamp on predicted standard deviations.
pub const SIGMA_MIN: f64 = 1e-4;
/// Floor on bin probabilities inside rate estimates.
pub const P_MIN: f64 = 1e-9;

/// Two-layer head with a shared trunk and separate mean / raw-std outputs.
/// Raw stds pass through softplus and the [`SIGMA_MIN`] clamp.
#[derive(Clone, Debug)]
pub struct EntropyHead {
    pub trunk: Linear,
    pub mean_out: Linear,
    pub std_out: Linear,
    pub width: usize,
}

impl EntropyHead {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let trunk = Linear::register(store, &format!("{name}.trunk"), input, hidden, rng, InitScheme::UniformFanIn);
        let mean_out = Linear::register(store, &format!("{name}.mean"), hidden, width, rng, InitScheme::UniformFanIn);
        let std_out = Linear::register(store, &format!("{name}.std"), hidden, width, rng, InitScheme::UniformFanIn);
        EntropyHead {
            trunk,
            mean_out,
            std_out,
            width,
        }
    }

    /// Predict `(mean, std)` for a batch of prior features.
    pub fn predict_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        feature: Var,
    ) -> Result<(Var, Var)> {
        let h = self.trunk.on_tape(tape, store, feature)?;
        let a = tape.tanh(h);
        let mean = self.mean_out.on_tape(tape, store, a)?;
        let raw_std = self.std_out.on_tape(tape, store, a)?;
        let sp = tape.softplus(raw_std);
        let std = tape.clamp_min(sp, SIGMA_MIN);
        if !tape.value(mean).all_finite() || !tape.value(std).all_finite() {
            return Err(Error::invalid("entropy head produced non-finite parameters"));
        }
        Ok((mean, std))
    }

    pub fn param_ids(&self) -> [crate::autodiff::ParamId; 6] {
        [
            self.trunk.w,
            self.trunk.b,
            self.mean_out.w,
            self.mean_out.b,
            self.std_out.w,
            self.std_out.b,
        ]
    }
}

/// Gaussian mass of the lattice bin around `value`, floored at [`P_MIN`].
pub fn bin_probability(value: f64, mean: f64, std: f64, q4: f64) -> f64 {
    bin_integral(value, mean, std, q4).max(P_MIN)
}

/// Unfloored bin mass; sums to the window mass exactly by telescoping.
pub fn bin_integral(value: f64, mean: f64, std: f64, q4: f64) -> f64 {
    let h = 0.5 / q4;
    let hi = normal_cdf((value + h - mean) / std);
    let lo = normal_cdf((value - h - mean) / std);
    hi - lo
}

/// `sum(-log2 p)` over all elements, plain tensors.
pub fn estimate_bits(values: &Tensor, mean: &Tensor, std: &Tensor, q4: &Tensor) -> Result<f64> {
    if values.shape() != mean.shape() || values.shape() != std.shape() || values.shape() != q4.shape() {
        return Err(Error::invalid("estimate_bits shapes disagree"));
    }
    let mut bits = 0.0;
    for i in 0..values.len() {
        let p = bin_probability(values.data()[i], mean.data()[i], std.data()[i], q4.data()[i]);
        bits += -p.log2();
    }
    Ok(bits)
}

/// Same rate, assembled on the tape so it differentiates w.r.t. the head
/// outputs, the resolution matrix, and (through a noise proxy) the values.
pub fn estimate_bits_on_tape(
    tape: &mut Tape,
    values: Var,
    mean: Var,
    std: Var,
    q4: Var,
) -> Result<Var> {
    let shape = tape.shape(values).to_vec();
    let halves = tape.leaf(&Tensor::new(shape.clone(), vec![0.5; shape.iter().product()])?);
    let h = tape.div(halves, q4)?;
    let centered = tape.sub(values, mean)?;
    let upper = tape.add(centered, h)?;
    let lower = tape.sub(centered, h)?;
    let zu = tape.div(upper, std)?;
    let zl = tape.div(lower, std)?;
    let cu = tape.normal_cdf(zu);
    let cl = tape.normal_cdf(zl);
    let p = tape.sub(cu, cl)?;
    let p = tape.clamp_min(p, P_MIN);
    let ln_p = tape.log(p);
    let total = tape.sum(ln_p);
    Ok(tape.affine(total, -std::f64::consts::LOG2_E, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{param_gradient_check, probe_largest, ParamProbe};
    use crate::quant::quantize_eval;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn zero_initialized_head_gives_softplus_zero_std() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = EntropyHead::register(&mut store, "h", 4, 8, 3, &mut rng);
        for id in head.param_ids() {
            for v in store.value_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let g = tape.leaf(&Tensor::matrix(2, 4, vec![0.3; 8]).unwrap());
        let (mean, std) = head.predict_on_tape(&mut tape, &store, g).unwrap();
        for &m in tape.value(mean).data() {
            assert_eq!(m, 0.0);
        }
        let want = 2f64.ln(); // softplus(0)
        for &s in tape.value(std).data() {
            assert!((s - want).abs() < 1e-15);
            assert!((s - 0.6931).abs() < 1e-4);
        }
    }

    #[test]
    fn std_clamps_at_sigma_min() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = EntropyHead::register(&mut store, "h", 2, 4, 1, &mut rng);
        for id in head.param_ids() {
            for v in store.value_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        // drive the raw std extremely negative
        store.value_mut(head.std_out.b).data_mut()[0] = -60.0;
        let mut tape = Tape::new();
        let g = tape.leaf(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let (_, std) = head.predict_on_tape(&mut tape, &store, g).unwrap();
        assert_eq!(tape.value(std).data()[0], SIGMA_MIN);
    }

    #[test]
    fn head_matches_independent_reevaluation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = EntropyHead::register(&mut store, "h", 3, 5, 2, &mut rng);
        let g = Tensor::matrix(4, 3, (0..12).map(|i| 0.17 * i as f64 - 1.0).collect()).unwrap();
        let mut tape = Tape::new();
        let gv = tape.leaf(&g);
        let (mean, std) = head.predict_on_tape(&mut tape, &store, gv).unwrap();

        let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
            let w = store.value(l.w);
            let b = store.value(l.b);
            (0..l.fan_out)
                .map(|o| {
                    let mut acc = b.data()[o];
                    for (i, &xi) in x.iter().enumerate() {
                        acc += xi * w.at(i, o);
                    }
                    acc
                })
                .collect()
        };
        for row in 0..4 {
            let h: Vec<f64> = lin(&head.trunk, g.row(row)).iter().map(|v| v.tanh()).collect();
            let m = lin(&head.mean_out, &h);
            let s_raw = lin(&head.std_out, &h);
            for j in 0..2 {
                assert!((tape.value(mean).at(row, j) - m[j]).abs() < 1e-12);
                let want = (s_raw[j].max(0.0) + (-s_raw[j].abs()).exp().ln_1p()).max(SIGMA_MIN);
                assert!((tape.value(std).at(row, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_bins_have_equal_probability() {
        let (mean, std, q4) = (0.4, 0.9, 2.0);
        for k in 1..10 {
            let offset = k as f64 / q4;
            let hi = bin_probability(mean + offset, mean, std, q4);
            let lo = bin_probability(mean - offset, mean, std, q4);
            assert!((hi - lo).abs() < 1e-15, "k={k}: {hi} vs {lo}");
        }
    }

    #[test]
    fn huge_std_limit_stays_at_least_p_min() {
        let p = bin_probability(0.0, 0.0, 1e12, 1.0);
        assert!(p >= P_MIN);
        assert!(p < 1e-9 + 1e-12);
    }

    /// Telescoping oracle: unfloored bin masses over a lattice covering
    /// +-8 sigma sum to the window mass, inside [1 - 1e-6, 1].
    #[test]
    fn lattice_summation_covers_the_mass() {
        let q4: f64 = 4.0;
        let std: f64 = 1.0;
        let mean: f64 = 0.137;
        let reach = (8.0 * std * q4).ceil() as i64;
        let center = (mean * q4).round() as i64;
        let mut total = 0.0;
        for z in center - reach..=center + reach {
            total += bin_integral(z as f64 / q4, mean, std, q4);
        }
        assert!(total <= 1.0 + 1e-12, "sum {total}");
        assert!(total >= 1.0 - 1e-6, "sum {total}");

        // an independent normal_cdf difference over the same window agrees
        let lo_edge = ((center - reach) as f64 - 0.5) / q4;
        let hi_edge = ((center + reach) as f64 + 0.5) / q4;
        let direct = normal_cdf((hi_edge - mean) / std) - normal_cdf((lo_edge - mean) / std);
        assert!((total - direct).abs() < 1e-9);
    }

    #[test]
    fn one_bit_for_half_probability() {
        // bisect sigma until the central bin holds exactly half the mass
        let q4 = 1.0;
        let (mut lo, mut hi) = (0.1f64, 10.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if bin_integral(0.0, 0.0, mid, q4) > 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let sigma = 0.5 * (lo + hi);
        let v = Tensor::scalar(0.0);
        let m = Tensor::scalar(0.0);
        let s = Tensor::scalar(sigma);
        let q = Tensor::scalar(q4);
        let bits = estimate_bits(&v, &m, &s, &q).unwrap();
        assert!((bits - 1.0).abs() < 1e-9, "bits {bits}");
    }

    #[test]
    fn full_probability_costs_zero_bits() {
        // a bin much wider than the distribution captures all mass
        let v = Tensor::scalar(0.0);
        let m = Tensor::scalar(0.0);
        let s = Tensor::scalar(SIGMA_MIN);
        let q = Tensor::scalar(1e-6); // bin width 1e6
        let bits = estimate_bits(&v, &m, &s, &q).unwrap();
        assert!(bits.abs() < 1e-12, "bits {bits}");
    }

    #[test]
    fn estimate_matches_per_element_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 40;
        let vals = Tensor::vector((0..n).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let mean = Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let std = Tensor::vector((0..n).map(|_| rng.gen_range(0.2..2.0)).collect());
        let q4 = Tensor::vector((0..n).map(|_| rng.gen_range(0.5..8.0)).collect());
        let got = estimate_bits(&vals, &mean, &std, &q4).unwrap();
        let mut want = 0.0;
        for i in 0..n {
            let h = 0.5 / q4.data()[i];
            let a = normal_cdf((vals.data()[i] + h - mean.data()[i]) / std.data()[i]);
            let b = normal_cdf((vals.data()[i] - h - mean.data()[i]) / std.data()[i]);
            want -= ((a - b).max(P_MIN)).log2();
        }
        assert!((got - want).abs() < 1e-9);

        // tape version agrees with the plain one
        let mut tape = Tape::new();
        let vv = tape.leaf(&vals);
        let mv = tape.leaf(&mean);
        let sv = tape.leaf(&std);
        let qv = tape.leaf(&q4);
        let bits = estimate_bits_on_tape(&mut tape, vv, mv, sv, qv).unwrap();
        assert!((tape.value(bits).item() - want).abs() < 1e-9);
    }

    /// Rate responds monotonically to resolution: finer lattices never cost
    /// fewer estimated bits on a fixed scene and model.
    #[test]
    fn rate_is_monotone_in_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 500;
        let raw = Tensor::vector((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let mean = Tensor::vector(vec![0.0; n]);
        let std = Tensor::vector(vec![0.8; n]);
        let base_q = Tensor::vector((0..n).map(|_| rng.gen_range(0.5..4.0)).collect());

        let mut last = f64::NEG_INFINITY;
        for scale in [0.5, 0.75, 1.0, 1.5, 2.0] {
            let q4 = base_q.map(|q| q * scale);
            let quantized = quantize_eval(&raw, &q4).unwrap();
            let bits = estimate_bits(&quantized, &mean, &std, &q4).unwrap();
            assert!(
                bits >= last - 1e-9,
                "rate decreased when refining: {bits} after {last} at scale {scale}"
            );
            last = bits;
        }
    }

    #[test]
    fn head_gradients_pass_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let head = EntropyHead::register(&mut store, "h", 4, 6, 3, &mut rng);
        let g = Tensor::matrix(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let vals = Tensor::matrix(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let q4 = Tensor::matrix(5, 3, (0..15).map(|_| rng.gen_range(0.5..4.0)).collect()).unwrap();

        let forward = |s: &ParamStore, tape: &mut Tape| {
            let gv = tape.leaf(&g);
            let (mean, std) = head
                .predict_on_tape(tape, s, gv)
                .map_err(|_| crate::autodiff::DiffError::NonFinite { context: "head" })?;
            let vv = tape.leaf(&vals);
            let qv = tape.leaf(&q4);
            estimate_bits_on_tape(tape, vv, mean, std, qv)
                .map_err(|_| crate::autodiff::DiffError::NonFinite { context: "bits" })
        };

        let mut tape = Tape::new();
        let out = forward(&store, &mut tape).unwrap();
        let grads = tape.backward(out).unwrap();
        let probes: Vec<ParamProbe> = head
            .param_ids()
            .into_iter()
            .map(|id| ParamProbe {
                elements: probe_largest(grads.param(id).unwrap(), 8),
                id,
            })
            .collect();
        let err = param_gradient_check(&store, forward, &probes, 1e-5).unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }
}
