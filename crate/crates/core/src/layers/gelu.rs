use super::{DualGrad, DualValue};
use crate::tensor::Result;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Exact (erf-based) GeLU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `Φ(x) + x φ(x)`.
pub fn gelu_prime(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// `φ(x) (2 − x²)`.
pub fn gelu_second(x: f64) -> f64 {
    normal_pdf(x) * (2.0 - x * x)
}

#[derive(Debug, Clone)]
pub struct GeluCache {
    pub x: DualValue,
}

pub fn gelu_dual(x: &DualValue) -> Result<(DualValue, GeluCache)> {
    let value = x.value.map(gelu);
    let slope = x.value.map(gelu_prime);
    let jvp = slope.hadamard(&x.jvp)?;
    Ok((DualValue { value, jvp }, GeluCache { x: x.clone() }))
}

pub fn gelu_backward(cache: &GeluCache, g: &DualGrad) -> Result<DualGrad> {
    let slope = cache.x.value.map(gelu_prime);
    let grad_jvp = slope.hadamard(&g.jvp)?;
    let grad_value = match &g.value {
        Some(gv) => {
            let mut gx = slope.hadamard(gv)?;
            let curv = cache.x.value.map(gelu_second);
            gx.add_assign(&curv.hadamard(&cache.x.jvp)?.hadamard(&g.jvp)?)?;
            Some(gx)
        }
        None => None,
    };
    Ok(DualGrad {
        value: grad_value,
        jvp: grad_jvp,
    })
}
