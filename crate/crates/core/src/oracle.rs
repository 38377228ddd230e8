//! User-facing verification suite.
//!
//! Runs finite-difference checks of every dual layer and of the assembled
//! model, the adjoint identity of the gradient, and the composition/ensemble
//! identity at randomized small shapes. Everything is derived from one seed,
//! so the report is reproducible byte for byte.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::compose::{compose, ShardModel};
use crate::error::Result;
use crate::layers::{
    attention_dual, attention_value, gelu_dual, layernorm_dual, layernorm_value, linear_dual, linear_value,
    AttentionDeltas, AttentionParams, DualValue, LayerNormDeltas, LayerNormParams, LinearDeltas, LinearParams,
};
use crate::model::{init_tangent, BaseWeights, ModelConfig, Tape, TangentModel, TangentWeights};
use crate::params::ParamVector;
use crate::rng::RngState;
use crate::tensor::Tensor;

const FD_STEP: f64 = 1e-4;
pub const LAYER_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-5;
pub const IDENTITY_TOL: f64 = 1e-10;

/// Deliberate defects used to show that the suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Attention tangent computed without the key-delta contribution.
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub shapes: String,
    /// Shape of the instance with the largest error.
    pub worst_shape: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub seed: u64,
    pub checks: Vec<OracleCheck>,
    pub passed: bool,
}

impl OracleReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {:<18} max_rel_error={:.3e} tol={:.0e} instances={} worst_shape={}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.max_rel_error,
                c.tolerance,
                c.instances,
                c.worst_shape
            );
        }
        let _ = writeln!(out, "{}", if self.passed { "all checks passed" } else { "oracle check FAILED" });
        out
    }

    pub fn failures(&self) -> Vec<&OracleCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

fn rel(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let num = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.data().iter().map(|v| v.abs()).fold(floor, f64::max);
    num / den
}

fn fd(f: impl Fn(f64) -> Result<Tensor>) -> Result<Tensor> {
    let mut d = f(FD_STEP)?.sub(&f(-FD_STEP)?)?;
    d.scale_mut(0.5 / FD_STEP);
    Ok(d)
}

fn gauss(rng: &mut RngState, shape: &[usize]) -> Tensor {
    rng.gaussian(shape, 0.0, 1.0).expect("unit std")
}

/// Rescales all direction tensors jointly to unit norm.
fn normalize(parts: &mut [&mut Tensor]) {
    let n = parts.iter().map(|t| t.sum_sq()).sum::<f64>().sqrt();
    if n > 0.0 {
        parts.iter_mut().for_each(|t| t.scale_mut(1.0 / n));
    }
}

fn plus(a: &Tensor, t: f64, d: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    out.axpy(t, d)?;
    Ok(out)
}

struct Tracker {
    name: &'static str,
    tolerance: f64,
    worst: f64,
    worst_shape: String,
    shapes: Vec<String>,
    instances: usize,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            worst: 0.0,
            worst_shape: String::new(),
            shapes: Vec::new(),
            instances: 0,
        }
    }

    fn record(&mut self, err: f64, shape: String) {
        // NaN must fail, so compare with a negated test.
        if !(err <= self.worst) {
            self.worst = err;
            self.worst_shape = shape.clone();
        }
        if !self.shapes.contains(&shape) {
            self.shapes.push(shape);
        }
        self.instances += 1;
    }

    fn finish(self) -> OracleCheck {
        OracleCheck {
            name: self.name.into(),
            shapes: self.shapes.join(";"),
            worst_shape: self.worst_shape,
            instances: self.instances,
            max_rel_error: self.worst,
            tolerance: self.tolerance,
            passed: self.worst <= self.tolerance,
        }
    }
}

fn dims(rng: &mut RngState) -> (usize, usize) {
    (2 + rng.below(15), 1 + rng.below(8))
}

fn check_linear(rng: &mut RngState, instances: usize) -> Result<OracleCheck> {
    let mut tr = Tracker::new("linear_dual", LAYER_TOL);
    for _ in 0..instances {
        let (d_in, n) = dims(rng);
        let d_out = 1 + rng.below(16);
        let p = LinearParams::new(gauss(rng, &[d_out, d_in]), gauss(rng, &[d_out]))?;
        let x = gauss(rng, &[d_in, n]);
        let (mut xd, mut dw, mut db) = (gauss(rng, &[d_in, n]), gauss(rng, &[d_out, d_in]), gauss(rng, &[d_out]));
        normalize(&mut [&mut xd, &mut dw, &mut db]);
        let (y, _) = linear_dual(&DualValue::new(x.clone(), xd.clone())?, &p, &LinearDeltas { dw: dw.clone(), db: db.clone() })?;
        let want = fd(|t| {
            let pt = LinearParams::new(plus(&p.w, t, &dw)?, plus(&p.b, t, &db)?)?;
            Ok(linear_value(&plus(&x, t, &xd)?, &pt)?)
        })?;
        tr.record(rel(&y.jvp, &want, 1e-8), format!("{d_out}x{d_in}x{n}"));
    }
    Ok(tr.finish())
}

fn check_gelu(rng: &mut RngState, instances: usize) -> Result<OracleCheck> {
    let mut tr = Tracker::new("gelu_dual", LAYER_TOL);
    for _ in 0..instances {
        let (d, n) = dims(rng);
        let x = gauss(rng, &[d, n]).scale(2.0);
        let mut xd = gauss(rng, &[d, n]);
        normalize(&mut [&mut xd]);
        let (y, _) = gelu_dual(&DualValue::new(x.clone(), xd.clone())?)?;
        let want = fd(|t| Ok(plus(&x, t, &xd)?.map(crate::layers::gelu)))?;
        tr.record(rel(&y.jvp, &want, 1e-8), format!("{d}x{n}"));
    }
    Ok(tr.finish())
}

fn check_layernorm(rng: &mut RngState, instances: usize) -> Result<OracleCheck> {
    let mut tr = Tracker::new("layernorm_dual", LAYER_TOL);
    for _ in 0..instances {
        let (d, n) = dims(rng);
        let p = LayerNormParams::new(gauss(rng, &[d]), gauss(rng, &[d]), crate::layers::DEFAULT_LN_EPS)?;
        let x = gauss(rng, &[d, n]);
        let (mut xd, mut dg, mut dbt) = (gauss(rng, &[d, n]), gauss(rng, &[d]), gauss(rng, &[d]));
        normalize(&mut [&mut xd, &mut dg, &mut dbt]);
        let dp = LayerNormDeltas {
            dgamma: dg.clone(),
            dbeta: dbt.clone(),
        };
        let (y, _) = layernorm_dual(&DualValue::new(x.clone(), xd.clone())?, &p, &dp)?;
        let want = fd(|t| {
            let pt = LayerNormParams::new(plus(&p.gamma, t, &dg)?, plus(&p.beta, t, &dbt)?, p.eps)?;
            Ok(layernorm_value(&plus(&x, t, &xd)?, &pt)?)
        })?;
        tr.record(rel(&y.jvp, &want, 1e-8), format!("{d}x{n}"));
    }
    Ok(tr.finish())
}

fn check_attention(rng: &mut RngState, instances: usize, fault: Option<Fault>) -> Result<OracleCheck> {
    let mut tr = Tracker::new("attention_dual", LAYER_TOL);
    for i in 0..instances {
        let heads = [1, 2, 4][i % 3];
        let d = heads * (1 + rng.below(16 / heads));
        let n = 1 + rng.below(8);
        let w = |rng: &mut RngState| gauss(rng, &[d, d]).scale(1.0 / (d as f64).sqrt());
        let p = AttentionParams::new(w(rng), w(rng), w(rng), heads)?;
        let x = gauss(rng, &[d, n]);
        let (mut xd, mut dq, mut dk, mut dv) = (
            gauss(rng, &[d, n]),
            gauss(rng, &[d, d]),
            gauss(rng, &[d, d]),
            gauss(rng, &[d, d]),
        );
        normalize(&mut [&mut xd, &mut dq, &mut dk, &mut dv]);
        let dp = AttentionDeltas {
            dw_q: dq.clone(),
            dw_k: if fault == Some(Fault::Attention) { dk.zeros_like() } else { dk.clone() },
            dw_v: dv.clone(),
        };
        let (y, _) = attention_dual(&DualValue::new(x.clone(), xd.clone())?, &p, &dp)?;
        let want = fd(|t| {
            let pt = AttentionParams::new(plus(&p.w_q, t, &dq)?, plus(&p.w_k, t, &dk)?, plus(&p.w_v, t, &dv)?, heads)?;
            Ok(attention_value(&plus(&x, t, &xd)?, &pt)?)
        })?;
        tr.record(rel(&y.jvp, &want, 1e-8), format!("d{d}h{heads}n{n}"));
    }
    Ok(tr.finish())
}

fn oracle_model(rng: &mut RngState, linearize_cls: bool) -> Result<TangentModel> {
    let heads = [1, 2, 4][rng.below(3)];
    let cfg = ModelConfig {
        depth: 2,
        d_model: 16,
        heads,
        mlp_ratio: 2,
        n_classes: 2 + rng.below(4),
        n_tokens: 1 + rng.below(7),
        n_features: 1 + rng.below(8),
        tunable_blocks: 1 + rng.below(2),
        linearize_cls,
        ..ModelConfig::default()
    };
    let pre = BaseWeights::random(&cfg, rng)?;
    let (base, _) = init_tangent(&pre, &cfg, &rng.derive("init"))?;
    TangentModel::new(cfg, base)
}

fn unit_delta(m: &TangentModel, rng: &mut RngState) -> TangentWeights {
    let d = TangentWeights::random(m.config(), m.base(), rng, 1.0);
    d.scaled(1.0 / d.norm())
}

fn model_input(m: &TangentModel, rng: &mut RngState) -> Tensor {
    gauss(rng, &[m.config().n_features, m.config().n_tokens])
}

fn shape_of(m: &TangentModel) -> String {
    let c = m.config();
    format!("d{}h{}n{}t{}", c.d_model, c.heads, c.n_tokens, c.tunable_blocks)
}

fn check_model(rng: &mut RngState, instances: usize) -> Result<OracleCheck> {
    let mut tr = Tracker::new("model_forward_dual", MODEL_TOL);
    for i in 0..instances {
        let m = oracle_model(rng, i % 2 == 1)?;
        let x = model_input(&m, rng);
        let d = unit_delta(&m, rng);
        let jvp = m.forward_dual(&d, &x)?.jvp;
        let want = fd(|t| {
            let shifted = TangentModel::new(m.config().clone(), m.base().apply_delta(m.config(), &d.scaled(t))?)?;
            shifted.forward_value(&x)
        })?;
        tr.record(rel(&jvp, &want, 1e-8), shape_of(&m));
    }
    Ok(tr.finish())
}

fn check_adjoint(rng: &mut RngState, instances: usize) -> Result<OracleCheck> {
    let mut tr = Tracker::new("grad_tangent", IDENTITY_TOL);
    for i in 0..instances {
        let m = oracle_model(rng, i % 2 == 0)?;
        let x = model_input(&m, rng);
        let v = unit_delta(&m, rng);
        let g = gauss(rng, &[m.config().n_classes, 1]);
        let mut tape = Tape::default();
        let jv = m.forward_taped(&v, &x, &mut tape)?.jvp;
        let jtg = m.grad_tangent(&tape, &g)?;
        let (lhs, rhs) = (g.dot(&jv)?, jtg.dot(&v));
        let scale = g.norm() * jv.norm().max(jtg.norm());
        tr.record((lhs - rhs).abs() / scale.max(1e-300), shape_of(&m));
    }
    Ok(tr.finish())
}

fn check_composition(rng: &mut RngState, instances: usize) -> Result<OracleCheck> {
    let mut tr = Tracker::new("compose_ensemble", IDENTITY_TOL);
    for _ in 0..instances {
        let m = oracle_model(rng, false)?;
        let n = 2 + rng.below(6);
        let members: Vec<ShardModel> = (0..n)
            .map(|k| ShardModel {
                shard_id: format!("s{k}"),
                delta: TangentWeights::random(m.config(), m.base(), rng, 0.1),
                base_fingerprint: m.fingerprint().to_string(),
                sample_ids: vec![k as u64],
                train_config_digest: String::new(),
            })
            .collect();
        let lambdas: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let cm = compose(&members, Some(&lambdas))?;
        let x = model_input(&m, rng);
        let composed = m.predict(&m.forward_dual(&cm.delta, &x)?);
        let base = m.forward_value(&x)?;
        let mut ensemble = base.scale(1.0 - lambdas.iter().sum::<f64>());
        for (sm, l) in members.iter().zip(&lambdas) {
            ensemble.axpy(*l, &m.predict(&m.forward_dual(&sm.delta, &x)?))?;
        }
        tr.record(rel(&composed, &ensemble, 1e-8), format!("{}N{n}", shape_of(&m)));
    }
    Ok(tr.finish())
}

/// Runs every check with `instances` random cases each.
pub fn run_oracle_suite(seed: u64, instances: usize, fault: Option<Fault>) -> Result<OracleReport> {
    let root = RngState::new(seed);
    let checks = vec![
        check_linear(&mut root.derive("linear"), instances)?,
        check_gelu(&mut root.derive("gelu"), instances)?,
        check_layernorm(&mut root.derive("layernorm"), instances)?,
        check_attention(&mut root.derive("attention"), instances, fault)?,
        check_model(&mut root.derive("model"), instances)?,
        check_adjoint(&mut root.derive("adjoint"), instances)?,
        check_composition(&mut root.derive("composition"), instances)?,
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(OracleReport { seed, checks, passed })
}
