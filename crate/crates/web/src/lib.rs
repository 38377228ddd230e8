//! Browser demo. Each operation is a plain function returning a
//! serializable report; the `wasm_bindgen` exports wrap them as JSON.

use serde::Serialize;
use tangent_core::layers::{attention_dual, attention_value, AttentionDeltas, AttentionParams};
use tangent_core::model::init_tangent;
use tangent_core::privacy::{account, sigma_for_epsilon};
use tangent_core::{BaseWeights, DualValue, Error, ModelConfig, ParamVector, Result, RngState, TangentModel, TangentWeights};
use wasm_bindgen::prelude::*;

/// Taylor residual of a random two-block model along one unit direction.
#[derive(Debug, Clone, Serialize)]
pub struct TaylorCurve {
    pub scales: Vec<f64>,
    /// `‖f_{w+sΔ}(x) − f_lin(x)‖`.
    pub residuals: Vec<f64>,
    /// `residual / s²`; flat in the second-order regime.
    pub ratios: Vec<f64>,
}

pub fn taylor_curve(seed: u64, d_model: usize, heads: usize, points: usize) -> Result<TaylorCurve> {
    if points < 2 {
        return Err(Error::Parameter("need at least two scales".into()));
    }
    let cfg = ModelConfig {
        depth: 2,
        d_model,
        heads,
        n_classes: 3,
        n_tokens: 6,
        n_features: 5,
        tunable_blocks: 2,
        ..ModelConfig::default()
    };
    let mut rng = RngState::new(seed);
    let pre = BaseWeights::random(&cfg, &mut rng)?;
    let (base, _) = init_tangent(&pre, &cfg, &rng.derive("init"))?;
    let model = TangentModel::new(cfg.clone(), base)?;
    let x = rng.gaussian(&[cfg.n_features, cfg.n_tokens], 0.0, 1.0)?;
    let dir = TangentWeights::random(&cfg, model.base(), &mut rng, 1.0);
    let dir = dir.scaled(1.0 / dir.norm());
    // Log-spaced from 1 down to 1e-5.
    let scales: Vec<f64> = (0..points).map(|i| 10f64.powf(-5.0 * i as f64 / (points - 1) as f64)).collect();
    let mut residuals = Vec::with_capacity(points);
    for &s in &scales {
        let delta = dir.scaled(s);
        let lin = model.predict(&model.forward_dual(&delta, &x)?);
        let moved = TangentModel::new(cfg.clone(), model.base().apply_delta(&cfg, &delta)?)?;
        residuals.push(moved.forward_value(&x)?.sub(&lin)?.norm());
    }
    let ratios = scales.iter().zip(&residuals).map(|(s, r)| r / (s * s)).collect();
    Ok(TaylorCurve {
        scales,
        residuals,
        ratios,
    })
}

/// Closed-form attention JVP against a central difference of the value.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionCheck {
    pub jvp: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub max_rel_error: f64,
    pub shape: [usize; 2],
}

pub fn attention_check(seed: u64, d: usize, n: usize, heads: usize, step: f64) -> Result<AttentionCheck> {
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("step must be > 0, got {step}")));
    }
    let mut rng = RngState::new(seed);
    let std = 1.0 / (d.max(1) as f64).sqrt();
    let mut w = || rng.gaussian(&[d, d], 0.0, std);
    let p = AttentionParams::new(w()?, w()?, w()?, heads)?;
    let x = rng.gaussian(&[d, n], 0.0, 1.0)?;
    let mut dirs = [
        rng.gaussian(&[d, n], 0.0, 1.0)?,
        rng.gaussian(&[d, d], 0.0, 1.0)?,
        rng.gaussian(&[d, d], 0.0, 1.0)?,
        rng.gaussian(&[d, d], 0.0, 1.0)?,
    ];
    let norm = dirs.iter().map(|t| t.sum_sq()).sum::<f64>().sqrt();
    dirs.iter_mut().for_each(|t| t.scale_mut(1.0 / norm));
    let [dx, dq, dk, dv] = dirs;
    let dp = AttentionDeltas {
        dw_q: dq,
        dw_k: dk,
        dw_v: dv,
    };
    let jvp = attention_dual(&DualValue::new(x.clone(), dx.clone())?, &p, &dp)?.0.jvp;
    let shifted = |t: f64| -> Result<tangent_core::Tensor> {
        let mut q = p.clone();
        q.w_q.axpy(t, &dp.dw_q)?;
        q.w_k.axpy(t, &dp.dw_k)?;
        q.w_v.axpy(t, &dp.dw_v)?;
        let mut xs = x.clone();
        xs.axpy(t, &dx)?;
        Ok(attention_value(&xs, &q)?)
    };
    let mut fd = shifted(step)?.sub(&shifted(-step)?)?;
    fd.scale_mut(0.5 / step);
    let max_rel_error = jvp.sub(&fd)?.max_abs() / fd.max_abs().max(1e-12);
    Ok(AttentionCheck {
        jvp: jvp.into_data(),
        finite_difference: fd.into_data(),
        max_rel_error,
        shape: [d, n],
    })
}

/// Privacy spent as training proceeds, and the noise needed for a target.
#[derive(Debug, Clone, Serialize)]
pub struct EpsilonCurve {
    pub steps: Vec<usize>,
    pub epsilon: Vec<f64>,
    /// Noise multiplier reaching `target_epsilon` at the last step, if set.
    pub sigma_for_target: Option<f64>,
}

pub fn epsilon_curve(
    noise_multiplier: f64,
    sample_rate: f64,
    delta: f64,
    max_steps: usize,
    points: usize,
    target_epsilon: Option<f64>,
) -> Result<EpsilonCurve> {
    if points == 0 || max_steps == 0 {
        return Err(Error::Parameter("need at least one step and one point".into()));
    }
    let mut steps: Vec<usize> = (1..=points).map(|i| (i * max_steps).div_ceil(points)).collect();
    steps.dedup();
    let epsilon = steps
        .iter()
        .map(|&s| account(noise_multiplier, s, sample_rate, delta))
        .collect::<Result<_>>()?;
    let sigma_for_target = target_epsilon
        .map(|e| sigma_for_epsilon(e, delta, max_steps, sample_rate))
        .transpose()?;
    Ok(EpsilonCurve {
        steps,
        epsilon,
        sigma_for_target,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
        .and_then(|v| serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string())))
}

#[wasm_bindgen(js_name = taylorCurve)]
pub fn taylor_curve_js(seed: u32, d_model: usize, heads: usize, points: usize) -> std::result::Result<String, JsValue> {
    to_js(taylor_curve(seed as u64, d_model, heads, points))
}

#[wasm_bindgen(js_name = attentionCheck)]
pub fn attention_check_js(seed: u32, d: usize, n: usize, heads: usize, step: f64) -> std::result::Result<String, JsValue> {
    to_js(attention_check(seed as u64, d, n, heads, step))
}

/// A non-positive `target_epsilon` means no target.
#[wasm_bindgen(js_name = epsilonCurve)]
pub fn epsilon_curve_js(
    noise_multiplier: f64,
    sample_rate: f64,
    delta: f64,
    max_steps: usize,
    points: usize,
    target_epsilon: f64,
) -> std::result::Result<String, JsValue> {
    let target = (target_epsilon > 0.0).then_some(target_epsilon);
    to_js(epsilon_curve(noise_multiplier, sample_rate, delta, max_steps, points, target))
}
