//! Small MLP building blocks on top of the tape.
//!
//! Weights are stored `[in, out]` so a batch `[n, in]` multiplies directly.
//! Everything that evaluates a network does so through a [`Tape`], encoder
//! and decoder included, so both sides share one forward code path.

use crate::autodiff::{DiffError, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Weight initialization family. The default cycle assigns scheme `i % 3` to
/// expert `i` so sibling networks start from visibly different parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    UniformFanIn,
    NormalFanIn,
    Orthogonal,
}

impl InitScheme {
    pub fn cycle(i: usize) -> Self {
        match i % 3 {
            0 => InitScheme::UniformFanIn,
            1 => InitScheme::NormalFanIn,
            _ => InitScheme::Orthogonal,
        }
    }
}

/// Draw an `[in, out]` weight matrix under the given scheme.
pub fn init_weight(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, scheme: InitScheme) -> Tensor {
    let n = fan_in * fan_out;
    match scheme {
        InitScheme::UniformFanIn => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(vec![fan_in, fan_out], data).expect("init shape")
        }
        InitScheme::NormalFanIn => {
            let std = 1.0 / (fan_in as f64).sqrt();
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect();
            Tensor::new(vec![fan_in, fan_out], data).expect("init shape")
        }
        InitScheme::Orthogonal => {
            let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let mut w = Tensor::new(vec![fan_in, fan_out], data).expect("init shape");
            orthonormalize(&mut w);
            w
        }
    }
}

/// Modified Gram-Schmidt over the smaller dimension: columns when
/// `in >= out`, rows otherwise.
fn orthonormalize(w: &mut Tensor) {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let by_cols = rows >= cols;
    let (outer, inner) = if by_cols { (cols, rows) } else { (rows, cols) };
    let get = |t: &Tensor, o: usize, i: usize| {
        if by_cols {
            t.at(i, o)
        } else {
            t.at(o, i)
        }
    };
    let set = |t: &mut Tensor, o: usize, i: usize, v: f64| {
        if by_cols {
            t.set(i, o, v);
        } else {
            t.set(o, i, v);
        }
    };
    for o in 0..outer {
        for prev in 0..o {
            let mut dot = 0.0;
            for i in 0..inner {
                dot += get(w, o, i) * get(w, prev, i);
            }
            for i in 0..inner {
                let v = get(w, o, i) - dot * get(w, prev, i);
                set(w, o, i, v);
            }
        }
        let mut norm = 0.0;
        for i in 0..inner {
            norm += get(w, o, i) * get(w, o, i);
        }
        let norm = norm.sqrt().max(1e-12);
        for i in 0..inner {
            let v = get(w, o, i) / norm;
            set(w, o, i, v);
        }
    }
}

/// One dense layer with bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
        scheme: InitScheme,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), init_weight(rng, fan_in, fan_out, scheme));
        let b = store.register(&format!("{name}.b"), Tensor::zeros(vec![1, fan_out]));
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn on_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let h = tape.matmul(x, w)?;
        tape.add(h, b)
    }
}

/// Two dense layers with a tanh in between.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
        scheme: InitScheme,
    ) -> Self {
        let l1 = Linear::register(store, &format!("{name}.0"), fan_in, hidden, rng, scheme);
        let l2 = Linear::register(store, &format!("{name}.1"), hidden, fan_out, rng, scheme);
        Mlp2 { l1, l2 }
    }

    pub fn on_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        let h = self.l1.on_tape(tape, store, x)?;
        let a = tape.tanh(h);
        self.l2.on_tape(tape, store, a)
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.l1.w, self.l1.b, self.l2.w, self.l2.b]
    }
}
