use crate::error::Result;
use crate::layers::LayerNormParams;
use crate::rng::RngState;
use crate::tensor::Tensor;

use super::weights::{BaseWeights, BlockParams, TangentWeights};
use super::ModelConfig;

/// Chooses the linearization point and zero deltas.
///
/// With `reset_last_block`, the last block, the final norm and the head are
/// re-drawn (truncated normal, fan-in scaled) before freezing. With
/// `linearize_cls`, a fresh CLS token is drawn for the tunable tail and a
/// zero CLS delta is created. Both draws use substreams of `rng`, so equal
/// seeds give equal linearization points.
pub fn init_tangent(
    pretrained: &BaseWeights,
    config: &ModelConfig,
    rng: &RngState,
) -> Result<(BaseWeights, TangentWeights)> {
    config.validate()?;
    let mut base = pretrained.clone();
    if config.reset_last_block {
        let mut r = rng.derive("reset-last-block");
        let last = base.blocks.len() - 1;
        base.blocks[last] = BlockParams::random(config, &mut r)?;
        base.final_norm = LayerNormParams::new(
            Tensor::full(&[config.d_model], 1.0),
            Tensor::zeros(&[config.d_model]),
            config.ln_eps,
        )?;
        base.head = BaseWeights::random_head(config, &mut r)?;
    }
    base.tail_cls = if config.linearize_cls {
        Some(rng.derive("tail-cls").truncated_normal(&[config.d_model], 0.1))
    } else {
        None
    };
    let delta = TangentWeights::zeros(config, &base);
    Ok((base, delta))
}
