#![allow(dead_code)]

use tangent_core::model::init_tangent;
use tangent_core::{BaseWeights, ModelConfig, ParamVector, RngState, TangentModel, TangentWeights, Tensor};

pub fn small_config() -> ModelConfig {
    ModelConfig {
        depth: 2,
        d_model: 16,
        heads: 2,
        mlp_ratio: 2,
        n_classes: 3,
        n_tokens: 5,
        n_features: 6,
        tunable_blocks: 2,
        ..ModelConfig::default()
    }
}

pub fn model(cfg: &ModelConfig, seed: u64) -> TangentModel {
    let pretrained = BaseWeights::random(cfg, &mut RngState::new(seed)).unwrap();
    let (base, _) = init_tangent(&pretrained, cfg, &RngState::new(seed + 1)).unwrap();
    TangentModel::new(cfg.clone(), base).unwrap()
}

pub fn input(cfg: &ModelConfig, rng: &mut RngState) -> Tensor {
    rng.gaussian(&[cfg.n_features, cfg.n_tokens], 0.0, 1.0).unwrap()
}

pub fn delta(m: &TangentModel, rng: &mut RngState, std: f64) -> TangentWeights {
    TangentWeights::random(m.config(), m.base(), rng, std)
}

/// `max |a - b| / max(max |b|, floor)`.
pub fn rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|v| v.abs()).fold(floor, f64::max);
    num / den
}

/// Central difference of `f(w + t·dir)` in `t`.
pub fn central(f: impl Fn(f64) -> Tensor, h: f64) -> Tensor {
    let mut d = f(h).sub(&f(-h)).unwrap();
    d.scale_mut(0.5 / h);
    d
}

/// Five-point stencil; exact up to rounding on polynomials of degree ≤ 4.
pub fn stencil(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
}

pub fn shifted(m: &TangentModel, d: &TangentWeights, t: f64) -> TangentModel {
    let base = m.base().apply_delta(m.config(), &d.scaled(t)).unwrap();
    TangentModel::new(m.config().clone(), base).unwrap()
}
