use super::{DualGrad, DualValue, TensorSet};
use crate::error::TensorError;
use crate::tensor::{Result, Tensor};

/// Fully connected layer `y = W x + b` with `W: out x in`, `b: out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDeltas {
    pub dw: Tensor,
    pub db: Tensor,
}

impl LinearParams {
    pub fn new(w: Tensor, b: Tensor) -> Result<Self> {
        if w.shape().len() != 2 || b.len() != w.rows() {
            return Err(TensorError::Dimension {
                op: "LinearParams::new",
                left: w.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        Ok(Self { w, b })
    }

    pub fn zero_deltas(&self) -> LinearDeltas {
        LinearDeltas {
            dw: self.w.zeros_like(),
            db: self.b.zeros_like(),
        }
    }

    fn check(&self, dp: &LinearDeltas) -> Result<()> {
        if dp.dw.shape() != self.w.shape() || dp.db.shape() != self.b.shape() {
            return Err(TensorError::Dimension {
                op: "linear deltas",
                left: self.w.shape().to_vec(),
                right: dp.dw.shape().to_vec(),
            });
        }
        Ok(())
    }
}

impl TensorSet for LinearParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

impl TensorSet for LinearDeltas {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.dw, &self.db]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.dw, &mut self.db]
    }
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    pub x: DualValue,
}

pub fn linear_value(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    p.w.matmul(x)?.add_row_bias(&p.b)
}

/// `value = W x + b`, `jvp = ΔW x + Δb + W ẋ`.
pub fn linear_dual(x: &DualValue, p: &LinearParams, dp: &LinearDeltas) -> Result<(DualValue, LinearCache)> {
    p.check(dp)?;
    let value = linear_value(&x.value, p)?;
    let mut jvp = dp.dw.matmul(&x.value)?.add_row_bias(&dp.db)?;
    jvp.add_assign(&p.w.matmul(&x.jvp)?)?;
    Ok((DualValue { value, jvp }, LinearCache { x: x.clone() }))
}

pub fn linear_backward(
    cache: &LinearCache,
    p: &LinearParams,
    dp: &LinearDeltas,
    g: &DualGrad,
) -> Result<(DualGrad, LinearDeltas)> {
    let grad_dw = g.jvp.matmul_t(&cache.x.value)?;
    let grad_db = Tensor::from_vec(p.b.shape(), g.jvp.row_sums())?;
    let grad_jvp = p.w.t_matmul(&g.jvp)?;
    let grad_value = match &g.value {
        Some(gv) => {
            let mut gx = p.w.t_matmul(gv)?;
            gx.add_assign(&dp.dw.t_matmul(&g.jvp)?)?;
            Some(gx)
        }
        None => None,
    };
    Ok((
        DualGrad {
            value: grad_value,
            jvp: grad_jvp,
        },
        LinearDeltas {
            dw: grad_dw,
            db: grad_db,
        },
    ))
}
