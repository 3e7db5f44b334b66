//! Gated mixture of expert priors.
//!
//! Several small MLPs read the same interpolated location features and each
//! produces a candidate prior vector; a one-layer gate turns the features
//! into a probability vector over experts and the fused prior is the
//! weighted sum. Experts share an architecture but start from different
//! initialization schemes and sub-seeds so they do not learn in lockstep.

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{InitScheme, Linear, Mlp2};
use crate::subseed;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PriorConfig {
    pub expert_count: usize,
    pub hidden: usize,
    pub prior_dim: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            expert_count: 5,
            hidden: 16,
            prior_dim: 24,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PriorMixture {
    cfg: PriorConfig,
    input_width: usize,
    experts: Vec<Mlp2>,
    gate: Linear,
}

impl PriorMixture {
    /// Register all expert and gate parameters. Expert `i` uses init scheme
    /// `i % 3` under its own sub-seed, so no two experts start identical.
    pub fn register(
        store: &mut ParamStore,
        cfg: PriorConfig,
        input_width: usize,
        seed: u64,
    ) -> Result<Self> {
        if cfg.expert_count == 0 {
            return Err(Error::invalid("expert count must be at least one"));
        }
        let mut experts = Vec::with_capacity(cfg.expert_count);
        for i in 0..cfg.expert_count {
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, &format!("prior.expert{i}")));
            experts.push(Mlp2::register(
                store,
                &format!("prior.expert{i}"),
                input_width,
                cfg.hidden,
                cfg.prior_dim,
                &mut rng,
                InitScheme::cycle(i),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "prior.gate"));
        let gate = Linear::register(
            store,
            "prior.gate",
            input_width,
            cfg.expert_count,
            &mut rng,
            InitScheme::UniformFanIn,
        );
        Ok(PriorMixture {
            cfg,
            input_width,
            experts,
            gate,
        })
    }

    pub fn from_parts(cfg: PriorConfig, input_width: usize, experts: Vec<Mlp2>, gate: Linear) -> Self {
        PriorMixture {
            cfg,
            input_width,
            experts,
            gate,
        }
    }

    pub fn config(&self) -> PriorConfig {
        self.cfg
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn experts(&self) -> &[Mlp2] {
        &self.experts
    }

    pub fn gate(&self) -> &Linear {
        &self.gate
    }

    /// Softmax gate weights for a batch of inputs: `[n, expert_count]`,
    /// each row a probability vector.
    pub fn gate_weights_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        interp: Var,
    ) -> Result<Var> {
        let logits = self.gate.on_tape(tape, store, interp)?;
        if !tape.value(logits).all_finite() {
            return Err(Error::invalid("gate logits are not finite"));
        }
        Ok(tape.softmax(logits))
    }

    /// Expert outputs, gate weights, and the fused prior feature.
    pub fn fuse_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        interp: Var,
    ) -> Result<FusedPrior> {
        let weights = self.gate_weights_on_tape(tape, store, interp)?;
        let mut expert_outputs = Vec::with_capacity(self.experts.len());
        let mut fused: Option<Var> = None;
        for (i, expert) in self.experts.iter().enumerate() {
            let p = expert.on_tape(tape, store, interp)?;
            let w = tape.select_column(weights, i)?;
            let contrib = tape.scale_rows(p, w)?;
            fused = Some(match fused {
                None => contrib,
                Some(prev) => tape.add(prev, contrib)?,
            });
            expert_outputs.push(p);
        }
        Ok(FusedPrior {
            feature: fused.expect("at least one expert"),
            weights,
            expert_outputs,
        })
    }

    /// Scene-level mean gate weights (diagnostic; one value per expert).
    pub fn mean_gate_weights(&self, store: &ParamStore, interp: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.leaf(interp);
        let w = self.gate_weights_on_tape(&mut tape, store, x)?;
        let m = tape.mean_rows(w);
        Ok(tape.value(m).data().to_vec())
    }

    pub fn param_ids(&self) -> Vec<crate::autodiff::ParamId> {
        let mut ids = Vec::new();
        for e in &self.experts {
            ids.extend(e.param_ids());
        }
        ids.push(self.gate.w);
        ids.push(self.gate.b);
        ids
    }
}

/// Result of one fusion pass.
pub struct FusedPrior {
    /// `[n, prior_dim]` fused feature.
    pub feature: Var,
    /// `[n, expert_count]` gate weights.
    pub weights: Var,
    /// Raw expert outputs, `[n, prior_dim]` each.
    pub expert_outputs: Vec<Var>,
}
