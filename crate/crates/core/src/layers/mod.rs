//! Dual-stream layers.
//!
//! Every layer maps a [`DualValue`] `(x, ẋ)` to `(f(x), ḟ)` where `ḟ` is the
//! directional derivative of the layer output along the layer's deltas plus
//! the chain-rule propagation of the incoming `ẋ`. Activations are `d x n`
//! matrices with one column per token and projections act as `W · x`.
//!
//! Each layer also has an exact adjoint (`*_backward`) so that gradients with
//! respect to the deltas, the incoming jvp and (optionally) the incoming
//! value can be computed for an arbitrary scalar loss.

mod attention;
mod gelu;
mod layernorm;
mod linear;

pub use attention::{
    attention_backward, attention_dual, attention_value, AttentionCache, AttentionDeltas,
    AttentionParams,
};
pub use gelu::{gelu, gelu_backward, gelu_dual, gelu_prime, gelu_second, GeluCache};
pub use layernorm::{
    layernorm_backward, layernorm_dual, layernorm_value, LayerNormCache, LayerNormDeltas,
    LayerNormParams, DEFAULT_LN_EPS,
};
pub use linear::{linear_backward, linear_dual, linear_value, LinearCache, LinearDeltas, LinearParams};

pub use crate::params::TensorSet;
use crate::tensor::{Result, Tensor};

/// An activation paired with its running Jacobian-vector product.
#[derive(Debug, Clone, PartialEq)]
pub struct DualValue {
    pub value: Tensor,
    pub jvp: Tensor,
}

impl DualValue {
    pub fn new(value: Tensor, jvp: Tensor) -> Result<Self> {
        if value.shape() != jvp.shape() {
            return Err(crate::error::TensorError::Dimension {
                op: "DualValue::new",
                left: value.shape().to_vec(),
                right: jvp.shape().to_vec(),
            });
        }
        Ok(Self { value, jvp })
    }

    /// A dual with an identically zero tangent.
    pub fn constant(value: Tensor) -> Self {
        let jvp = value.zeros_like();
        Self { value, jvp }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            value: self.value.add(&other.value)?,
            jvp: self.jvp.add(&other.jvp)?,
        })
    }
}

/// Gradient of a scalar loss with respect to a [`DualValue`].
///
/// `value` is `None` when value gradients are not being tracked, which is
/// the case whenever only tangent-delta gradients are wanted: the value
/// stream never depends on the deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGrad {
    pub value: Option<Tensor>,
    pub jvp: Tensor,
}

impl DualGrad {
    pub fn jvp_only(jvp: Tensor) -> Self {
        Self { value: None, jvp }
    }

    pub fn full(value: Tensor, jvp: Tensor) -> Self {
        Self {
            value: Some(value),
            jvp,
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let value = match (&self.value, &other.value) {
            (Some(a), Some(b)) => Some(a.add(b)?),
            (Some(a), None) | (None, Some(a)) => Some(a.clone()),
            (None, None) => None,
        };
        Ok(Self {
            value,
            jvp: self.jvp.add(&other.jvp)?,
        })
    }
}
