//! Multi-head softmax attention and its linearization.
//!
//! For one head with `Q = W_q x`, `K = W_k x`, `V = W_v x` (all `d_h x n`):
//!
//! ```text
//! S = s · QᵀK            Φ = softmax_rows(S)          A = V Φᵀ
//! Q̇ = ΔW_q x + W_q ẋ     K̇ = ΔW_k x + W_k ẋ           Γ = ΔW_v x + W_v ẋ
//! Ψ = s · (Q̇ᵀK + QᵀK̇)
//! Φ̇ = Φ ⊙ Ψ − rowsum(Φ ⊙ Ψ) ⊙ Φ
//! Ȧ = Γ Φᵀ + V Φ̇ᵀ
//! ```
//!
//! Row `i` of `Φ` holds the weights of query token `i` over all keys, so the
//! `Φ̇` line is `(diag(Φᵢ) − ΦᵢΦᵢᵀ) Ψᵢ` applied row by row. In the transposed
//! notation where tokens are rows this is the familiar
//! `(Φ ⊙ Ψ − (I ⊙ ΦᵀΨ) Φ)ᵀ V + Φ Γ`. The scale `s` multiplies `Ψ` as well
//! because `Ψ` is the directional derivative of the scaled logits.

use super::{DualGrad, DualValue, TensorSet};
use crate::error::TensorError;
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub heads: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDeltas {
    pub dw_q: Tensor,
    pub dw_k: Tensor,
    pub dw_v: Tensor,
}

impl AttentionParams {
    /// Uses the conventional `1 / sqrt(d / heads)` logit scale.
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, heads: usize) -> Result<Self> {
        let d = w_q.rows();
        for w in [&w_q, &w_k, &w_v] {
            if w.shape() != [d, d] {
                return Err(TensorError::Dimension {
                    op: "AttentionParams::new",
                    left: w_q.shape().to_vec(),
                    right: w.shape().to_vec(),
                });
            }
        }
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(TensorError::Parameter(format!(
                "{heads} heads do not divide model width {d}"
            )));
        }
        let scale = 1.0 / ((d / heads) as f64).sqrt();
        Ok(Self {
            w_q,
            w_k,
            w_v,
            heads,
            scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn zero_deltas(&self) -> AttentionDeltas {
        AttentionDeltas {
            dw_q: self.w_q.zeros_like(),
            dw_k: self.w_k.zeros_like(),
            dw_v: self.w_v.zeros_like(),
        }
    }

    fn check(&self, x: &Tensor, dp: &AttentionDeltas) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(TensorError::Parameter(format!(
                "{} heads do not divide model width {d}",
                self.heads
            )));
        }
        if x.shape().len() != 2 || x.rows() != d {
            return Err(TensorError::Dimension {
                op: "attention input",
                left: x.shape().to_vec(),
                right: self.w_q.shape().to_vec(),
            });
        }
        for (w, dw) in [(&self.w_q, &dp.dw_q), (&self.w_k, &dp.dw_k), (&self.w_v, &dp.dw_v)] {
            if w.shape() != dw.shape() {
                return Err(TensorError::Dimension {
                    op: "attention deltas",
                    left: w.shape().to_vec(),
                    right: dw.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

impl TensorSet for AttentionParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_q, &self.w_k, &self.w_v]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_q, &mut self.w_k, &mut self.w_v]
    }
}

impl TensorSet for AttentionDeltas {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.dw_q, &self.dw_k, &self.dw_v]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.dw_q, &mut self.dw_k, &mut self.dw_v]
    }
}

/// Forward intermediates; `phi` and `psi` are per head, `n x n`.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub x: DualValue,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub q_dot: Tensor,
    pub k_dot: Tensor,
    pub gamma: Tensor,
    pub phi: Vec<Tensor>,
    pub psi: Vec<Tensor>,
}

/// Plain attention value `A(x)`.
pub fn attention_value(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    p.check(x, &p.zero_deltas())?;
    let q = p.w_q.matmul(x)?;
    let k = p.w_k.matmul(x)?;
    let v = p.w_v.matmul(x)?;
    let dh = p.head_dim();
    let mut out = x.zeros_like();
    for h in 0..p.heads {
        let (qh, kh, vh) = (q.row_slice(h * dh, dh)?, k.row_slice(h * dh, dh)?, v.row_slice(h * dh, dh)?);
        let phi = qh.t_matmul(&kh)?.scale(p.scale).softmax_rows()?;
        out.set_rows(h * dh, &vh.matmul_t(&phi)?)?;
    }
    Ok(out)
}

/// `Φ̇ = Φ ⊙ Ψ − rowsum(Φ ⊙ Ψ) ⊙ Φ`.
fn softmax_tangent(phi: &Tensor, psi: &Tensor) -> Tensor {
    let n = phi.cols();
    let mut out = phi.hadamard(psi).expect("phi/psi share shape");
    for i in 0..phi.rows() {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let c: f64 = row.iter().sum();
        for (o, &f) in row.iter_mut().zip(&phi.data()[i * n..(i + 1) * n]) {
            *o -= c * f;
        }
    }
    out
}

pub fn attention_dual(x: &DualValue, p: &AttentionParams, dp: &AttentionDeltas) -> Result<(DualValue, AttentionCache)> {
    p.check(&x.value, dp)?;
    if x.jvp.shape() != x.value.shape() {
        return Err(TensorError::Dimension {
            op: "attention dual input",
            left: x.value.shape().to_vec(),
            right: x.jvp.shape().to_vec(),
        });
    }
    let xv = &x.value;
    let q = p.w_q.matmul(xv)?;
    let k = p.w_k.matmul(xv)?;
    let v = p.w_v.matmul(xv)?;
    let mut q_dot = dp.dw_q.matmul(xv)?;
    q_dot.add_assign(&p.w_q.matmul(&x.jvp)?)?;
    let mut k_dot = dp.dw_k.matmul(xv)?;
    k_dot.add_assign(&p.w_k.matmul(&x.jvp)?)?;
    let mut gamma = dp.dw_v.matmul(xv)?;
    gamma.add_assign(&p.w_v.matmul(&x.jvp)?)?;

    let dh = p.head_dim();
    let mut value = xv.zeros_like();
    let mut jvp = xv.zeros_like();
    let mut phis = Vec::with_capacity(p.heads);
    let mut psis = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let r = h * dh;
        let (qh, kh, vh) = (q.row_slice(r, dh)?, k.row_slice(r, dh)?, v.row_slice(r, dh)?);
        let (qdh, kdh, gh) = (q_dot.row_slice(r, dh)?, k_dot.row_slice(r, dh)?, gamma.row_slice(r, dh)?);
        let phi = qh.t_matmul(&kh)?.scale(p.scale).softmax_rows()?;
        let mut psi = qdh.t_matmul(&kh)?;
        psi.add_assign(&qh.t_matmul(&kdh)?)?;
        psi.scale_mut(p.scale);
        let phi_dot = softmax_tangent(&phi, &psi);

        value.set_rows(r, &vh.matmul_t(&phi)?)?;
        let mut jh = gh.matmul_t(&phi)?;
        jh.add_assign(&vh.matmul_t(&phi_dot)?)?;
        jvp.set_rows(r, &jh)?;
        phis.push(phi);
        psis.push(psi);
    }
    Ok((
        DualValue { value, jvp },
        AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            q_dot,
            k_dot,
            gamma,
            phi: phis,
            psi: psis,
        },
    ))
}

/// Adjoint of [`attention_dual`]. Base weights are frozen, so only the
/// input dual and the deltas receive gradients.
pub fn attention_backward(
    cache: &AttentionCache,
    p: &AttentionParams,
    dp: &AttentionDeltas,
    g: &DualGrad,
) -> Result<(DualGrad, AttentionDeltas)> {
    let d = p.dim();
    let n = cache.x.value.cols();
    if cache.phi.len() != p.heads || cache.q.shape() != [d, n] || g.jvp.shape() != [d, n] {
        return Err(TensorError::Parameter(format!(
            "attention cache inconsistent with parameters (d={d}, heads={}, grad {:?})",
            p.heads,
            g.jvp.shape()
        )));
    }
    let want_value = g.value.is_some();
    let s = p.scale;
    let dh = p.head_dim();

    let mut g_q = Tensor::zeros(&[d, n]);
    let mut g_k = Tensor::zeros(&[d, n]);
    let mut g_v = Tensor::zeros(&[d, n]);
    let mut g_qdot = Tensor::zeros(&[d, n]);
    let mut g_kdot = Tensor::zeros(&[d, n]);
    let mut g_gamma = Tensor::zeros(&[d, n]);

    for h in 0..p.heads {
        let r = h * dh;
        let phi = &cache.phi[h];
        let psi = &cache.psi[h];
        let (qh, kh, vh) = (cache.q.row_slice(r, dh)?, cache.k.row_slice(r, dh)?, cache.v.row_slice(r, dh)?);
        let gj = g.jvp.row_slice(r, dh)?;

        g_gamma.set_rows(r, &gj.matmul(phi)?)?;
        // Gradient reaching Φ̇ and, through the softmax tangent, Ψ.
        let g_phidot = gj.t_matmul(&vh)?;
        let mut g_psi = phi.zeros_like();
        let b: Vec<f64> = (0..n).map(|i| (0..n).map(|j| g_phidot.get(i, j) * phi.get(i, j)).sum()).collect();
        for (i, &bi) in b.iter().enumerate() {
            for j in 0..n {
                g_psi.set(i, j, phi.get(i, j) * (g_phidot.get(i, j) - bi));
            }
        }
        g_qdot.set_rows(r, &kh.matmul_t(&g_psi)?.scale(s))?;
        g_kdot.set_rows(r, &qh.matmul(&g_psi)?.scale(s))?;

        if want_value {
            let ga = g.value.as_ref().expect("checked").row_slice(r, dh)?;
            let gh = cache.gamma.row_slice(r, dh)?;
            let (qdh, kdh) = (cache.q_dot.row_slice(r, dh)?, cache.k_dot.row_slice(r, dh)?);
            let phi_dot = softmax_tangent(phi, psi);

            let mut gv = gj.matmul(&phi_dot)?;
            gv.add_assign(&ga.matmul(phi)?)?;
            g_v.set_rows(r, &gv)?;

            // Gradient reaching Φ: from Γ Φᵀ, from V Φᵀ, and from Φ̇(Φ, Ψ).
            let mut g_phi = gj.t_matmul(&gh)?;
            g_phi.add_assign(&ga.t_matmul(&vh)?)?;
            for (i, &bi) in b.iter().enumerate() {
                let c: f64 = (0..n).map(|j| phi.get(i, j) * psi.get(i, j)).sum();
                for j in 0..n {
                    let extra = g_phidot.get(i, j) * (psi.get(i, j) - c) - bi * psi.get(i, j);
                    g_phi.set(i, j, g_phi.get(i, j) + extra);
                }
            }
            // Softmax adjoint.
            let mut g_s = phi.zeros_like();
            for i in 0..n {
                let dotp: f64 = (0..n).map(|j| g_phi.get(i, j) * phi.get(i, j)).sum();
                for j in 0..n {
                    g_s.set(i, j, phi.get(i, j) * (g_phi.get(i, j) - dotp));
                }
            }
            let mut gq = kh.matmul_t(&g_s)?;
            gq.add_assign(&kdh.matmul_t(&g_psi)?)?;
            g_q.set_rows(r, &gq.scale(s))?;
            let mut gk = qh.matmul(&g_s)?;
            gk.add_assign(&qdh.matmul(&g_psi)?)?;
            g_k.set_rows(r, &gk.scale(s))?;
        }
    }

    let xv = &cache.x.value;
    let grads = AttentionDeltas {
        dw_q: g_qdot.matmul_t(xv)?,
        dw_k: g_kdot.matmul_t(xv)?,
        dw_v: g_gamma.matmul_t(xv)?,
    };
    let mut grad_jvp = p.w_q.t_matmul(&g_qdot)?;
    grad_jvp.add_assign(&p.w_k.t_matmul(&g_kdot)?)?;
    grad_jvp.add_assign(&p.w_v.t_matmul(&g_gamma)?)?;

    let grad_value = if want_value {
        let mut gx = p.w_q.t_matmul(&g_q)?;
        gx.add_assign(&p.w_k.t_matmul(&g_k)?)?;
        gx.add_assign(&p.w_v.t_matmul(&g_v)?)?;
        gx.add_assign(&dp.dw_q.t_matmul(&g_qdot)?)?;
        gx.add_assign(&dp.dw_k.t_matmul(&g_kdot)?)?;
        gx.add_assign(&dp.dw_v.t_matmul(&g_gamma)?)?;
        Some(gx)
    } else {
        None
    };
    Ok((
        DualGrad {
            value: grad_value,
            jvp: grad_jvp,
        },
        grads,
    ))
}
