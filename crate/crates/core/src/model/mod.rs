//! The tangent transformer classifier.
//!
//! A [`TangentModel`] pairs a [`ModelConfig`] with frozen [`BaseWeights`].
//! Deltas ([`TangentWeights`]) are passed explicitly to every evaluation so
//! that many delta sets (shards, compositions, optimizer iterates) can share
//! one model.
//!
//! Layout: an input is an `n_features x n_tokens` matrix. Tokens are
//! embedded, a CLS column is prepended, positions are added, the blocks run,
//! and the CLS column goes through the final norm and the linear head.
//! Blocks before the tunable tail carry no deltas and only their value
//! stream is computed.

mod block;
mod cache;
mod init;
mod weights;

use std::cell::Cell;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{
    layernorm_backward, layernorm_dual, layernorm_value, linear_backward, linear_dual, linear_value, DualGrad,
    DualValue, LayerNormCache, LinearCache,
};
use crate::params::TensorSet;
use crate::tensor::Tensor;

pub use block::{block_backward, block_dual, block_value, BlockCache};
pub use cache::ActivationCache;
pub use init::init_tangent;
pub use weights::{BaseWeights, BlockDeltas, BlockParams, TangentWeights, TunableSubset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// `f_w(x) + ∇f_w(x)·Δw`.
    #[default]
    Full,
    /// `∇f_w(x)·Δw` alone.
    JvpOnly,
}

fn default_ln_eps() -> f64 {
    crate::layers::DEFAULT_LN_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub n_tokens: usize,
    pub n_features: usize,
    /// Number of blocks, counted from the end, that carry deltas.
    pub tunable_blocks: usize,
    #[serde(default)]
    pub reset_last_block: bool,
    #[serde(default)]
    pub linearize_cls: bool,
    #[serde(default)]
    pub prediction_mode: PredictionMode,
    #[serde(default)]
    pub tunable_subset: TunableSubset,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            d_model: 32,
            heads: 2,
            mlp_ratio: 2,
            n_classes: 4,
            n_tokens: 8,
            n_features: 8,
            tunable_blocks: 1,
            reset_last_block: false,
            linearize_cls: false,
            prediction_mode: PredictionMode::Full,
            tunable_subset: TunableSubset::Full,
            ln_eps: default_ln_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.d_model == 0 || self.n_tokens == 0 || self.n_features == 0 {
            return fail("depth, d_model, n_tokens and n_features must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("{} heads do not divide d_model {}", self.heads, self.d_model));
        }
        if self.mlp_ratio == 0 || self.n_classes < 2 {
            return fail("mlp_ratio must be positive and n_classes >= 2".into());
        }
        if self.tunable_blocks > self.depth {
            return fail(format!(
                "tunable_blocks {} exceeds depth {}",
                self.tunable_blocks, self.depth
            ));
        }
        if self.prediction_mode == PredictionMode::JvpOnly && self.tunable_blocks == 0 {
            return fail("jvp_only prediction requires at least one tunable block".into());
        }
        if self.linearize_cls && self.tunable_blocks == 0 {
            return fail("linearize_cls requires at least one tunable block".into());
        }
        if !(self.ln_eps > 0.0) {
            return fail(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn first_tunable(&self) -> usize {
        self.depth - self.tunable_blocks
    }

    /// Token columns including CLS.
    pub fn n_cols(&self) -> usize {
        self.n_tokens + 1
    }
}

thread_local! {
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of full-network forward passes (value or dual) issued on this
/// thread. Used to check that composed models cost one pass.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.with(|c| c.get())
}

fn count_forward_pass() {
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));
}

/// Forward intermediates needed by [`TangentModel::grad_tangent`].
#[derive(Debug, Default)]
pub struct Tape {
    record: Option<TapeRecord>,
}

#[derive(Debug)]
struct TapeRecord {
    fingerprint: String,
    blocks: Vec<BlockCache>,
    final_norm: LayerNormCache,
    head: LinearCache,
}

impl Tape {
    pub fn is_empty(&self) -> bool {
        self.record.is_none()
    }

    pub fn clear(&mut self) {
        self.record = None;
    }
}

#[derive(Debug, Clone)]
pub struct TangentModel {
    config: ModelConfig,
    base: BaseWeights,
    fingerprint: String,
}

impl TangentModel {
    pub fn new(config: ModelConfig, base: BaseWeights) -> Result<Self> {
        config.validate()?;
        let template = BaseWeights::random(&config, &mut crate::rng::RngState::new(0))?;
        let shapes_match = base.blocks.len() == config.depth
            && base.tensors().len() == template.tensors().len() + usize::from(base.tail_cls.is_some())
            && base.tensors().iter().zip(template.tensors()).all(|(a, b)| a.shape() == b.shape());
        if !shapes_match {
            return Err(Error::Config("base weights do not match the model configuration".into()));
        }
        if config.linearize_cls != base.tail_cls.is_some() {
            return Err(Error::Config(
                "linearize_cls requires a re-initialized tail CLS token in the base weights (see init_tangent)".into(),
            ));
        }
        let fingerprint = fingerprint(&config, &base);
        Ok(Self {
            config,
            base,
            fingerprint,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn base(&self) -> &BaseWeights {
        &self.base
    }

    /// SHA-256 over the configuration and every base tensor.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn zero_delta(&self) -> TangentWeights {
        TangentWeights::zeros(&self.config, &self.base)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [self.config.n_features, self.config.n_tokens];
        if x.shape() != want {
            return Err(crate::error::TensorError::Dimension {
                op: "model input",
                left: x.shape().to_vec(),
                right: want.to_vec(),
            }
            .into());
        }
        Ok(())
    }

    /// Embedded tokens with CLS column and positions, `d x (n_tokens + 1)`.
    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let tokens = linear_value(x, &self.base.embed)?;
        let mut h = Tensor::zeros(&[self.config.d_model, self.config.n_cols()]);
        h.set_col(0, self.base.cls_token.data());
        for t in 0..self.config.n_tokens {
            h.set_col(t + 1, &tokens.col(t));
        }
        Ok(h.add(&self.base.pos)?)
    }

    /// Outputs of every frozen (delta-free) block, in order.
    pub(crate) fn frozen_prefix(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.embed(x)?;
        let mut outs = Vec::with_capacity(self.config.first_tunable());
        for p in &self.base.blocks[..self.config.first_tunable()] {
            h = block_value(&h, p)?;
            outs.push(h.clone());
        }
        Ok(outs)
    }

    pub(crate) fn tail_input(&self, x: &Tensor) -> Result<Tensor> {
        match self.frozen_prefix(x)?.pop() {
            Some(h) => Ok(h),
            None => self.embed(x),
        }
    }

    /// Plain network output `f_w(x)`, `n_classes x 1`. Shares no code with
    /// the dual path beyond the value-only layer functions.
    pub fn forward_value(&self, x: &Tensor) -> Result<Tensor> {
        count_forward_pass();
        let mut h = self.embed(x)?;
        let first = self.config.first_tunable();
        for (i, p) in self.base.blocks.iter().enumerate() {
            if i == first {
                if let Some(c) = &self.base.tail_cls {
                    h.set_col(0, c.data());
                }
            }
            h = block_value(&h, p)?;
        }
        let cls = Tensor::column(&h.col(0));
        let z = layernorm_value(&cls, &self.base.final_norm)?;
        Ok(linear_value(&z, &self.base.head)?)
    }

    /// `(f_w(x), ∇f_w(x)·Δw)` at the head.
    pub fn forward_dual(&self, delta: &TangentWeights, x: &Tensor) -> Result<DualValue> {
        count_forward_pass();
        let h = self.tail_input(x)?;
        self.tail(delta, h, None)
    }

    /// As [`Self::forward_dual`], recording intermediates on `tape`.
    pub fn forward_taped(&self, delta: &TangentWeights, x: &Tensor, tape: &mut Tape) -> Result<DualValue> {
        count_forward_pass();
        let h = self.tail_input(x)?;
        self.tail(delta, h, Some(tape))
    }

    /// As [`Self::forward_taped`], reusing cached frozen-prefix activations
    /// for example `id` when present.
    pub fn forward_cached(
        &self,
        delta: &TangentWeights,
        x: &Tensor,
        id: u64,
        cache: &ActivationCache,
        tape: Option<&mut Tape>,
    ) -> Result<DualValue> {
        count_forward_pass();
        let h = match cache.tail_input(self, id) {
            Some(h) => h.clone(),
            None => {
                log::debug!("activation cache miss for example {id}; recomputing frozen prefix");
                self.tail_input(x)?
            }
        };
        self.tail(delta, h, tape)
    }

    /// Dual pass over the tunable tail only, starting from the output of the
    /// frozen prefix. Counts as one forward pass.
    pub(crate) fn forward_from_tail_input(
        &self,
        delta: &TangentWeights,
        h: Tensor,
        tape: Option<&mut Tape>,
    ) -> Result<DualValue> {
        count_forward_pass();
        self.tail(delta, h, tape)
    }

    fn tail(&self, delta: &TangentWeights, mut h: Tensor, tape: Option<&mut Tape>) -> Result<DualValue> {
        delta.check_structure(&self.config, &self.base)?;
        let mut jvp = h.zeros_like();
        if let (Some(c), Some(dc)) = (&self.base.tail_cls, &delta.cls) {
            h.set_col(0, c.data());
            jvp.set_col(0, dc.data());
        }
        let mut x = DualValue { value: h, jvp };
        let first = self.config.first_tunable();
        let record = tape.is_some();
        let mut caches = Vec::new();
        for (k, dp) in delta.blocks.iter().enumerate() {
            let (y, c) = block_dual(&x, &self.base.blocks[first + k], dp)?;
            if record {
                caches.push(c);
            }
            x = y;
        }
        let cls = DualValue {
            value: Tensor::column(&x.value.col(0)),
            jvp: Tensor::column(&x.jvp.col(0)),
        };
        let (z, ln_cache) = layernorm_dual(&cls, &self.base.final_norm, &delta.final_norm)?;
        let (logits, head_cache) = linear_dual(&z, &self.base.head, &delta.head)?;
        if let Some(tape) = tape {
            tape.record = Some(TapeRecord {
                fingerprint: self.fingerprint.clone(),
                blocks: caches,
                final_norm: ln_cache,
                head: head_cache,
            });
        }
        Ok(logits)
    }

    /// The model prediction under the configured [`PredictionMode`].
    pub fn predict(&self, logits: &DualValue) -> Tensor {
        match self.config.prediction_mode {
            PredictionMode::Full => logits.value.add(&logits.jvp).expect("dual shapes agree"),
            PredictionMode::JvpOnly => logits.jvp.clone(),
        }
    }

    /// `Jᵀ g` for the tunable deltas, where `g = ∂L/∂prediction` and `J` is
    /// the Jacobian of the head output with respect to the deltas.
    ///
    /// The result does not depend on the deltas used in the taped forward
    /// pass. Passing the gradient of a loss at `f_w(x)` instead yields the
    /// ordinary weight gradient of the nonlinear network for the tunable
    /// parameters.
    pub fn grad_tangent(&self, tape: &Tape, loss_grad: &Tensor) -> Result<TangentWeights> {
        let rec = tape
            .record
            .as_ref()
            .ok_or_else(|| Error::State("grad_tangent called without a recorded forward pass".into()))?;
        if rec.fingerprint != self.fingerprint {
            return Err(Error::State("tape was recorded by a different model".into()));
        }
        if loss_grad.shape() != [self.config.n_classes, 1] && loss_grad.shape() != [self.config.n_classes] {
            return Err(Error::Parameter(format!(
                "loss gradient shape {:?} does not match {} classes",
                loss_grad.shape(),
                self.config.n_classes
            )));
        }
        let mut grads = self.zero_delta();
        let g = DualGrad::jvp_only(loss_grad.reshape(&[self.config.n_classes, 1])?);
        let (g, d_head) = linear_backward(&rec.head, &self.base.head, &grads.head, &g)?;
        let (g, d_norm) = layernorm_backward(&rec.final_norm, &self.base.final_norm, &grads.final_norm, &g)?;
        grads.head = d_head;
        grads.final_norm = d_norm;

        let mut gj = Tensor::zeros(&[self.config.d_model, self.config.n_cols()]);
        gj.set_col(0, g.jvp.data());
        let mut g = DualGrad::jvp_only(gj);
        let first = self.config.first_tunable();
        for k in (0..rec.blocks.len()).rev() {
            let zero = self.base.blocks[first + k].zero_deltas();
            let (gx, d_block) = block_backward(&rec.blocks[k], &self.base.blocks[first + k], &zero, &g)?;
            grads.blocks[k] = d_block;
            g = gx;
        }
        if let Some(c) = grads.cls.as_mut() {
            *c = Tensor::from_vec(&[self.config.d_model], g.jvp.col(0))?;
        }
        grads.mask(self.config.tunable_subset);
        Ok(grads)
    }

    /// Same model with a different prediction mode or tunable subset; the
    /// fingerprint follows the configuration.
    pub fn with_config(&self, config: ModelConfig) -> Result<Self> {
        Self::new(config, self.base.clone())
    }
}

pub fn fingerprint(config: &ModelConfig, base: &BaseWeights) -> String {
    let mut h = Sha256::new();
    // Only the fields that define the function f_w and the delta layout.
    let key = (
        config.depth,
        config.d_model,
        config.heads,
        config.mlp_ratio,
        config.n_classes,
        config.n_tokens,
        config.n_features,
        config.tunable_blocks,
        config.linearize_cls,
        config.ln_eps.to_bits(),
    );
    h.update(serde_json::to_vec(&key).expect("tuple serializes"));
    for (name, t) in base.tensor_names().iter().zip(base.tensors()) {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
