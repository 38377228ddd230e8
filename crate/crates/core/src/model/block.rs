//! Pre-norm transformer block: `h = x + W_o·A(LN₁(x))`, `y = h + MLP(LN₂(h))`.
//! Residual branches add duals componentwise, which is the exact derivative
//! rule for a sum.

use crate::layers::{
    attention_backward, attention_dual, attention_value, gelu, gelu_backward, gelu_dual, layernorm_backward,
    layernorm_dual, layernorm_value, linear_backward, linear_dual, linear_value, AttentionCache, DualGrad,
    DualValue, GeluCache, LayerNormCache, LinearCache,
};
use crate::tensor::{Result, Tensor};

use super::weights::{BlockDeltas, BlockParams};

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    proj: LinearCache,
    ln2: LayerNormCache,
    fc1: LinearCache,
    gelu: GeluCache,
    fc2: LinearCache,
}

pub fn block_value(x: &Tensor, p: &BlockParams) -> Result<Tensor> {
    let a = attention_value(&layernorm_value(x, &p.ln1)?, &p.attn)?;
    let h = x.add(&linear_value(&a, &p.proj)?)?;
    let u = linear_value(&layernorm_value(&h, &p.ln2)?, &p.fc1)?.map(gelu);
    h.add(&linear_value(&u, &p.fc2)?)
}

pub fn block_dual(x: &DualValue, p: &BlockParams, dp: &BlockDeltas) -> Result<(DualValue, BlockCache)> {
    let (n1, ln1) = layernorm_dual(x, &p.ln1, &dp.ln1)?;
    let (a, attn) = attention_dual(&n1, &p.attn, &dp.attn)?;
    let (o, proj) = linear_dual(&a, &p.proj, &dp.proj)?;
    let h = x.add(&o)?;
    let (n2, ln2) = layernorm_dual(&h, &p.ln2, &dp.ln2)?;
    let (u, fc1) = linear_dual(&n2, &p.fc1, &dp.fc1)?;
    let (g, gelu) = gelu_dual(&u)?;
    let (m, fc2) = linear_dual(&g, &p.fc2, &dp.fc2)?;
    let y = h.add(&m)?;
    Ok((
        y,
        BlockCache {
            ln1,
            attn,
            proj,
            ln2,
            fc1,
            gelu,
            fc2,
        },
    ))
}

pub fn block_backward(
    cache: &BlockCache,
    p: &BlockParams,
    dp: &BlockDeltas,
    g: &DualGrad,
) -> Result<(DualGrad, BlockDeltas)> {
    let (g_gelu, d_fc2) = linear_backward(&cache.fc2, &p.fc2, &dp.fc2, g)?;
    let g_u = gelu_backward(&cache.gelu, &g_gelu)?;
    let (g_n2, d_fc1) = linear_backward(&cache.fc1, &p.fc1, &dp.fc1, &g_u)?;
    let (g_h2, d_ln2) = layernorm_backward(&cache.ln2, &p.ln2, &dp.ln2, &g_n2)?;
    let g_h = g.add(&g_h2)?;
    let (g_a, d_proj) = linear_backward(&cache.proj, &p.proj, &dp.proj, &g_h)?;
    let (g_n1, d_attn) = attention_backward(&cache.attn, &p.attn, &dp.attn, &g_a)?;
    let (g_x1, d_ln1) = layernorm_backward(&cache.ln1, &p.ln1, &dp.ln1, &g_n1)?;
    let g_x = g_h.add(&g_x1)?;
    Ok((
        g_x,
        BlockDeltas {
            ln1: d_ln1,
            attn: d_attn,
            proj: d_proj,
            ln2: d_ln2,
            fc1: d_fc1,
            fc2: d_fc2,
        },
    ))
}
