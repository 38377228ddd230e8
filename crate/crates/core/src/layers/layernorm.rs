use super::{DualGrad, DualValue, TensorSet};
use crate::error::TensorError;
use crate::tensor::{Result, Tensor};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Affine layer normalization over the feature dimension of each token.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormDeltas {
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
            eps: DEFAULT_LN_EPS,
        }
    }

    pub fn new(gamma: Tensor, beta: Tensor, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(TensorError::Parameter(format!("layernorm eps must be > 0, got {eps}")));
        }
        if gamma.shape() != beta.shape() || gamma.shape().len() != 1 {
            return Err(TensorError::Dimension {
                op: "LayerNormParams::new",
                left: gamma.shape().to_vec(),
                right: beta.shape().to_vec(),
            });
        }
        Ok(Self { gamma, beta, eps })
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn zero_deltas(&self) -> LayerNormDeltas {
        LayerNormDeltas {
            dgamma: self.gamma.zeros_like(),
            dbeta: self.beta.zeros_like(),
        }
    }

    fn check(&self, x: &Tensor, dp: &LayerNormDeltas) -> Result<()> {
        if x.rows() != self.dim()
            || dp.dgamma.shape() != self.gamma.shape()
            || dp.dbeta.shape() != self.beta.shape()
        {
            return Err(TensorError::Dimension {
                op: "layernorm",
                left: x.shape().to_vec(),
                right: self.gamma.shape().to_vec(),
            });
        }
        Ok(())
    }
}

impl TensorSet for LayerNormParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

impl TensorSet for LayerNormDeltas {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.dgamma, &self.dbeta]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.dgamma, &mut self.dbeta]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Normalized activations `x̂`, `d x n`.
    pub xhat: Tensor,
    /// `1 / sqrt(Var[x] + eps)` per token.
    pub inv_std: Vec<f64>,
    pub jvp_in: Tensor,
}

fn normalize(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (d, n) = (x.rows(), x.cols());
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(n);
    for t in 0..n {
        let col = x.col(t);
        let mean = col.iter().sum::<f64>() / d as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let normed: Vec<f64> = col.iter().map(|v| (v - mean) * inv).collect();
        xhat.set_col(t, &normed);
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

fn affine(xhat: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (d, n) = (xhat.rows(), xhat.cols());
    let mut out = xhat.clone();
    let data = out.data_mut();
    for i in 0..d {
        let (g, b) = (gamma.data()[i], beta.data()[i]);
        for v in &mut data[i * n..(i + 1) * n] {
            *v = g * *v + b;
        }
    }
    Ok(out)
}

/// Applies the symmetric Jacobian of `x ↦ x̂` for one token:
/// `M v = (v − mean(v) − x̂ · mean(x̂ ⊙ v)) / σ`.
fn apply_m(xhat: &[f64], inv_std: f64, v: &[f64]) -> Vec<f64> {
    let d = v.len() as f64;
    let mean_v = v.iter().sum::<f64>() / d;
    let proj = xhat.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / d;
    v.iter()
        .zip(xhat)
        .map(|(vi, xi)| (vi - mean_v - xi * proj) * inv_std)
        .collect()
}

pub fn layernorm_value(x: &Tensor, p: &LayerNormParams) -> Result<Tensor> {
    if x.rows() != p.dim() {
        return Err(TensorError::Dimension {
            op: "layernorm",
            left: x.shape().to_vec(),
            right: p.gamma.shape().to_vec(),
        });
    }
    let (xhat, _) = normalize(x, p.eps);
    affine(&xhat, &p.gamma, &p.beta)
}

/// `value = γ ⊙ x̂ + β`, `jvp = Δγ ⊙ x̂ + Δβ + γ ⊙ (M ẋ)`.
pub fn layernorm_dual(x: &DualValue, p: &LayerNormParams, dp: &LayerNormDeltas) -> Result<(DualValue, LayerNormCache)> {
    p.check(&x.value, dp)?;
    let (xhat, inv_std) = normalize(&x.value, p.eps);
    let value = affine(&xhat, &p.gamma, &p.beta)?;
    let mut jvp = affine(&xhat, &dp.dgamma, &dp.dbeta)?;
    let mut prop = x.jvp.zeros_like();
    for (t, &s) in inv_std.iter().enumerate() {
        let mj = apply_m(&xhat.col(t), s, &x.jvp.col(t));
        prop.set_col(t, &mj);
    }
    let gamma_scaled = affine(&prop, &p.gamma, &p.beta.zeros_like())?;
    jvp.add_assign(&gamma_scaled)?;
    Ok((
        DualValue { value, jvp },
        LayerNormCache {
            xhat,
            inv_std,
            jvp_in: x.jvp.clone(),
        },
    ))
}

pub fn layernorm_backward(
    cache: &LayerNormCache,
    p: &LayerNormParams,
    dp: &LayerNormDeltas,
    g: &DualGrad,
) -> Result<(DualGrad, LayerNormDeltas)> {
    let xhat = &cache.xhat;
    let (d, n) = (xhat.rows(), xhat.cols());
    let df = d as f64;
    let gj = &g.jvp;

    let grad_dgamma = Tensor::from_vec(&[d], gj.hadamard(xhat)?.row_sums())?;
    let grad_dbeta = Tensor::from_vec(&[d], gj.row_sums())?;

    let mut grad_jvp = gj.zeros_like();
    let mut grad_value = g.value.as_ref().map(|gv| gv.zeros_like());
    for t in 0..n {
        let xh = xhat.col(t);
        let inv = cache.inv_std[t];
        let gj_t = gj.col(t);
        // u = γ ⊙ Ḡ, the gradient reaching the propagated term M ẋ.
        let u: Vec<f64> = gj_t.iter().zip(p.gamma.data()).map(|(a, b)| a * b).collect();
        grad_jvp.set_col(t, &apply_m(&xh, inv, &u));

        if let (Some(gv), Some(out)) = (&g.value, grad_value.as_mut()) {
            let gv_t = gv.col(t);
            // Gradient reaching x̂ from the value output and from Δγ ⊙ x̂.
            let gxhat: Vec<f64> = (0..d)
                .map(|i| p.gamma.data()[i] * gv_t[i] + dp.dgamma.data()[i] * gj_t[i])
                .collect();
            let mut gx = apply_m(&xh, inv, &gxhat);

            // Second-order term: derivative of uᵀ M(x) ẋ with respect to x.
            let j = cache.jvp_in.col(t);
            let mean_j = j.iter().sum::<f64>() / df;
            let a: f64 = u.iter().zip(&j).map(|(ui, ji)| ui * (ji - mean_j)).sum();
            let b: f64 = u.iter().zip(&xh).map(|(ui, xi)| ui * xi).sum();
            let c: f64 = xh.iter().zip(&j).map(|(xi, ji)| xi * ji).sum();
            let mu = apply_m(&xh, inv, &u);
            let mj = apply_m(&xh, inv, &j);
            for i in 0..d {
                gx[i] += -a * inv * inv * xh[i] / df - (mu[i] * c + b * mj[i]) * inv / df
                    + b * c * inv * inv * xh[i] / (df * df);
            }
            out.set_col(t, &gx);
        }
    }
    Ok((
        DualGrad {
            value: grad_value,
            jvp: grad_jvp,
        },
        LayerNormDeltas {
            dgamma: grad_dgamma,
            dbeta: grad_dbeta,
        },
    ))
}
