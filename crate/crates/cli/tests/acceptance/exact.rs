//! Criteria that hold to rounding error on random instances.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use tangent_core::compose::{
    add_component, compose, make_shards, train_shard, unlearn_retrain, unlearn_subtract, Renormalization, ShardModel,
};
use tangent_core::data::{SynthSpec, SynthTask};
use tangent_core::layers::{
    attention_dual, gelu_dual, layernorm_dual, linear_dual, AttentionParams, AttentionDeltas, LayerNormDeltas,
    LayerNormParams, LinearDeltas, LinearParams,
};
use tangent_core::model::{forward_pass_count, init_tangent, ActivationCache};
use tangent_core::training::{train_tangent, LossKind, Objective, OptimizerKind, TangentObjective};
use tangent_core::{
    BaseWeights, Dataset, DualValue, ModelConfig, ParamVector, RngState, TangentModel, TangentWeights, Tensor,
    TensorSet, TrainConfig,
};

use crate::ensure;
use crate::reference::{self as r, mat, M};
use crate::Outcome;

const FD_STEP: f64 = 1e-4;
const LAYER_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-5;
const VALUE_TOL: f64 = 1e-12;
const INSTANCES: usize = 100;

fn randn(rng: &mut RngState, shape: &[usize], std: f64) -> Tensor {
    rng.gaussian(shape, 0.0, std).unwrap()
}

/// Random directions scaled jointly to unit norm.
fn unit_dirs(rng: &mut RngState, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut dirs: Vec<Tensor> = shapes.iter().map(|s| randn(rng, s, 1.0)).collect();
    let norm = dirs.iter().map(|t| t.sum_sq()).sum::<f64>().sqrt();
    dirs.iter_mut().for_each(|t| t.scale_mut(1.0 / norm));
    dirs
}

fn at(base: &Tensor, dir: &Tensor, t: f64) -> M {
    mat(base) + mat(dir) * t
}

/// Worst JVP and value errors over the instances of one layer.
#[derive(Default)]
struct Worst {
    jvp: f64,
    value: f64,
    shape: String,
}

impl Worst {
    fn record(&mut self, jvp: f64, value: f64, shape: String) {
        if jvp >= self.jvp {
            self.jvp = jvp;
            self.shape = shape;
        }
        self.value = self.value.max(value);
    }

    fn check(&self, name: &str, tol: f64) -> Result<String, String> {
        let line = format!("{name} jvp {:.1e} value {:.1e} worst at {}", self.jvp, self.value, self.shape);
        ensure!(self.jvp <= tol && self.value <= VALUE_TOL, "{line} (tolerance {tol:e})");
        Ok(line)
    }
}

fn linear_instance(rng: &mut RngState, w: &mut Worst) {
    let (din, dout, n) = (1 + rng.below(16), 1 + rng.below(16), 1 + rng.below(8));
    let x = randn(rng, &[din, n], 1.0);
    let p = LinearParams::new(randn(rng, &[dout, din], 1.0 / (din as f64).sqrt()), randn(rng, &[dout], 0.5)).unwrap();
    let d = unit_dirs(rng, &[&[din, n], &[dout, din], &[dout]]);
    let dp = LinearDeltas {
        dw: d[1].clone(),
        db: d[2].clone(),
    };
    let out = linear_dual(&DualValue::new(x.clone(), d[0].clone()).unwrap(), &p, &dp).unwrap().0;
    let f = |t: f64| r::linear(&at(&x, &d[0], t), &at(&p.w, &d[1], t), &at(&p.b, &d[2], t));
    w.record(
        r::rel(&mat(&out.jvp), &r::central(f, FD_STEP), 1e-8),
        r::rel(&mat(&out.value), &f(0.0), 1e-300),
        format!("in {din} out {dout} n {n}"),
    );
}

fn gelu_instance(rng: &mut RngState, w: &mut Worst) {
    let (d, n) = (1 + rng.below(16), 1 + rng.below(8));
    let x = randn(rng, &[d, n], 2.0);
    let dx = unit_dirs(rng, &[&[d, n]]).remove(0);
    let out = gelu_dual(&DualValue::new(x.clone(), dx.clone()).unwrap()).unwrap().0;
    let f = |t: f64| at(&x, &dx, t).map(r::gelu);
    w.record(
        r::rel(&mat(&out.jvp), &r::central(f, FD_STEP), 1e-8),
        r::rel(&mat(&out.value), &f(0.0), 1e-300),
        format!("d {d} n {n}"),
    );
}

fn layernorm_instance(rng: &mut RngState, w: &mut Worst) {
    let (d, n) = (2 + rng.below(15), 1 + rng.below(8));
    let x = randn(rng, &[d, n], 1.5);
    let gamma = randn(rng, &[d], 0.3).map(|v| v + 1.0);
    let p = LayerNormParams::new(gamma, randn(rng, &[d], 0.3), 1e-5).unwrap();
    let dirs = unit_dirs(rng, &[&[d, n], &[d], &[d]]);
    let dp = LayerNormDeltas {
        dgamma: dirs[1].clone(),
        dbeta: dirs[2].clone(),
    };
    let out = layernorm_dual(&DualValue::new(x.clone(), dirs[0].clone()).unwrap(), &p, &dp).unwrap().0;
    let f = |t: f64| r::layernorm(&at(&x, &dirs[0], t), &at(&p.gamma, &dirs[1], t), &at(&p.beta, &dirs[2], t), p.eps);
    w.record(
        r::rel(&mat(&out.jvp), &r::central(f, FD_STEP), 1e-8),
        r::rel(&mat(&out.value), &f(0.0), 1e-300),
        format!("d {d} n {n}"),
    );
}

fn attention_instance(rng: &mut RngState, w: &mut Worst, i: usize) {
    let heads = [1, 2, 4][i % 3];
    let d = heads * (1 + rng.below(16 / heads));
    let n = 1 + rng.below(8);
    let x = randn(rng, &[d, n], 1.0);
    let std = 1.5 / (d as f64).sqrt();
    let p = AttentionParams::new(randn(rng, &[d, d], std), randn(rng, &[d, d], std), randn(rng, &[d, d], std), heads).unwrap();
    let dirs = unit_dirs(rng, &[&[d, n], &[d, d], &[d, d], &[d, d]]);
    let dp = AttentionDeltas {
        dw_q: dirs[1].clone(),
        dw_k: dirs[2].clone(),
        dw_v: dirs[3].clone(),
    };
    let out = attention_dual(&DualValue::new(x.clone(), dirs[0].clone()).unwrap(), &p, &dp).unwrap().0;
    let f = |t: f64| {
        let (wq, wk, wv) = (at(&p.w_q, &dirs[1], t), at(&p.w_k, &dirs[2], t), at(&p.w_v, &dirs[3], t));
        r::attention(&at(&x, &dirs[0], t), &wq, &wk, &wv, heads)
    };
    w.record(
        r::rel(&mat(&out.jvp), &r::central(f, FD_STEP), 1e-8),
        r::rel(&mat(&out.value), &f(0.0), 1e-300),
        format!("d {d} n {n} heads {heads}"),
    );
}

/// A random two-block model; the variants cycle through the tunable depth,
/// a re-initialized last block and a linearized CLS token.
fn random_model(rng: &mut RngState, i: usize) -> TangentModel {
    let heads = [1, 2, 4][i % 3];
    let d = heads * (2 + rng.below(16 / heads - 1));
    let cfg = ModelConfig {
        depth: 2,
        d_model: d,
        heads,
        mlp_ratio: 2,
        n_classes: 2 + rng.below(3),
        n_tokens: 1 + rng.below(7),
        n_features: 2 + rng.below(5),
        tunable_blocks: 1 + i % 2,
        reset_last_block: i % 4 >= 2,
        linearize_cls: i.is_multiple_of(5),
        ..ModelConfig::default()
    };
    let pre = BaseWeights::random(&cfg, rng).unwrap();
    let (base, _) = init_tangent(&pre, &cfg, &rng.derive("init")).unwrap();
    TangentModel::new(cfg, base).unwrap()
}

fn unit_delta(m: &TangentModel, rng: &mut RngState) -> TangentWeights {
    let d = TangentWeights::random(m.config(), m.base(), rng, 1.0);
    d.scaled(1.0 / d.norm())
}

fn input(cfg: &ModelConfig, rng: &mut RngState) -> Tensor {
    randn(rng, &[cfg.n_features, cfg.n_tokens], 1.0)
}

fn shifted_scores(m: &TangentModel, d: &TangentWeights, x: &Tensor, t: f64) -> M {
    let w = m.base().apply_delta(m.config(), &d.scaled(t)).unwrap();
    r::classifier(m.config(), &w, x)
}

pub fn jvp_matches_finite_differences() -> Outcome {
    let start = Instant::now();
    let mut rng = RngState::new(2024);
    let mut layers: Vec<(&str, Worst)> = ["linear", "gelu", "layernorm", "attention"]
        .into_iter()
        .map(|n| (n, Worst::default()))
        .collect();
    for i in 0..INSTANCES {
        linear_instance(&mut rng, &mut layers[0].1);
        gelu_instance(&mut rng, &mut layers[1].1);
        layernorm_instance(&mut rng, &mut layers[2].1);
        attention_instance(&mut rng, &mut layers[3].1, i);
    }
    let mut model = Worst::default();
    for i in 0..INSTANCES {
        let m = random_model(&mut rng, i);
        let x = input(m.config(), &mut rng);
        let d = unit_delta(&m, &mut rng);
        let out = m.forward_dual(&d, &x).unwrap();
        let fd = r::central(|t| shifted_scores(&m, &d, &x, t), FD_STEP);
        let c = m.config();
        model.record(
            r::rel(&mat(&out.jvp), &fd, 1e-8),
            r::rel(&mat(&out.value), &shifted_scores(&m, &d, &x, 0.0), 1e-300),
            format!("d {} heads {} n {} tunable {}", c.d_model, c.heads, c.n_cols(), c.tunable_blocks),
        );
    }
    let mut lines = Vec::new();
    for (name, w) in &layers {
        lines.push(w.check(name, LAYER_TOL)?);
    }
    lines.push(model.check("model", MODEL_TOL)?);
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("{INSTANCES} instances each; {}", lines.join("; ")))
}

fn small_config() -> ModelConfig {
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

fn model(cfg: &ModelConfig, seed: u64) -> TangentModel {
    let pre = BaseWeights::random(cfg, &mut RngState::new(seed)).unwrap();
    let (base, _) = init_tangent(&pre, cfg, &RngState::new(seed + 1)).unwrap();
    TangentModel::new(cfg.clone(), base).unwrap()
}

fn rel_t(a: &Tensor, b: &Tensor) -> f64 {
    r::rel(&mat(a), &mat(b), 1e-300)
}

pub fn linearity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut zero_checks = 0;
    for (k, (tunable, cls)) in [(2, false), (1, false), (2, true), (1, true)].into_iter().enumerate() {
        let cfg = ModelConfig {
            tunable_blocks: tunable,
            linearize_cls: cls,
            ..small_config()
        };
        let m = model(&cfg, 100 + k as u64);
        let mut rng = RngState::new(k as u64);
        for _ in 0..25 {
            let x = input(&cfg, &mut rng);
            let (d1, d2) = (unit_delta(&m, &mut rng), unit_delta(&m, &mut rng).scaled(3.0));
            let c = 4.0 * rng.standard_normal();
            let j = |d: &TangentWeights| m.forward_dual(d, &x).unwrap().jvp;
            let (j1, j2) = (j(&d1), j(&d2));
            worst = worst.max(rel_t(&j(&d1.scaled(c)), &j1.scale(c)));
            worst = worst.max(rel_t(&j(&d1.plus(&d2)), &j1.add(&j2).unwrap()));

            let zero = m.forward_dual(&m.zero_delta(), &x).unwrap();
            let base = m.forward_value(&x).unwrap();
            ensure!(zero.value.data() == base.data(), "value at zero delta differs from the base network");
            ensure!(m.predict(&zero).data() == base.data(), "prediction at zero delta differs from the base network");
            ensure!(zero.jvp.data().iter().all(|v| *v == 0.0), "nonzero jvp at zero delta");
            zero_checks += 1;
        }
    }
    ensure!(worst <= 1e-12, "homogeneity/additivity error {worst:e}");
    Ok(format!("homogeneity and additivity error {worst:.1e}; {zero_checks} zero-delta outputs bit-exact"))
}

fn members(m: &TangentModel, n: usize, rng: &mut RngState) -> Vec<ShardModel> {
    (0..n)
        .map(|k| ShardModel {
            shard_id: format!("shard-{k:03}"),
            delta: TangentWeights::random(m.config(), m.base(), rng, 0.05),
            base_fingerprint: m.fingerprint().to_string(),
            sample_ids: vec![k as u64],
            train_config_digest: String::new(),
        })
        .collect()
}

pub fn composition_is_ensembling() -> Outcome {
    let start = Instant::now();
    let cfg = small_config();
    let m = model(&cfg, 7);
    let mut rng = RngState::new(8);
    let mut worst: f64 = 0.0;
    let mut passes = Vec::new();
    for n in [2, 5, 10, 50] {
        let ms = members(&m, n, &mut rng);
        let lambdas: Vec<f64> = (0..n).map(|_| rng.uniform() * 2.0 / n as f64).collect();
        let cm = compose(&ms, Some(&lambdas)).unwrap();
        for _ in 0..5 {
            let x = input(&cfg, &mut rng);
            let before = forward_pass_count();
            let composed = m.predict(&m.forward_dual(&cm.delta, &x).unwrap());
            let used = forward_pass_count() - before;
            ensure!(used == 1, "N={n}: composed prediction used {used} forward passes");

            let mut ensemble = m.forward_value(&x).unwrap().scale(1.0 - lambdas.iter().sum::<f64>());
            for (sm, l) in ms.iter().zip(&lambdas) {
                ensemble.axpy(*l, &m.predict(&m.forward_dual(&sm.delta, &x).unwrap())).unwrap();
            }
            worst = worst.max(rel_t(&composed, &ensemble));
        }
        passes.push(format!("N={n}: 1"));
    }
    ensure!(worst <= 1e-10, "relative error {worst:e}");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("relative error {worst:.1e}; forward passes {}", passes.join(", ")))
}

fn param_rel(a: &TangentWeights, b: &TangentWeights) -> f64 {
    a.max_abs_diff(b) / b.flatten().iter().fold(1e-300_f64, |m, v| m.max(v.abs()))
}

fn task(cfg: &ModelConfig, separation: f64, task_seed: u64) -> SynthTask {
    SynthTask::new(SynthSpec {
        n_classes: cfg.n_classes,
        n_features: cfg.n_features,
        n_tokens: cfg.n_tokens,
        separation,
        task_seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

pub fn exact_unlearning() -> Outcome {
    let cfg = small_config();
    let m = model(&cfg, 9);
    let mut rng = RngState::new(10);
    let (mut sub_err, mut readd_err): (f64, f64) = (0.0, 0.0);
    for n in [2, 3, 5, 10] {
        let ms = members(&m, n, &mut rng);
        let cm = compose(&ms, None).unwrap();
        for (k, gone) in ms.iter().enumerate() {
            let sub = unlearn_subtract(&cm, &gone.shard_id, Renormalization::Uniform).unwrap();
            let survivors: Vec<ShardModel> = ms.iter().filter(|s| s.shard_id != gone.shard_id).cloned().collect();
            let fresh = compose(&survivors, None).unwrap();
            sub_err = sub_err.max(param_rel(&sub.delta, &fresh.delta));
            ensure!(sub.components() == fresh.components(), "N={n} k={k}: components differ");
            let back = add_component(&sub, gone.clone()).unwrap();
            readd_err = readd_err.max(param_rel(&back.delta, &cm.delta));
        }
    }
    ensure!(sub_err <= 1e-12, "subtract vs recompose {sub_err:e}");
    ensure!(readd_err <= 1e-12, "subtract then re-add {readd_err:e}");

    let tcfg = ModelConfig {
        tunable_blocks: 1,
        ..cfg.clone()
    };
    let tm = model(&tcfg, 11);
    let data = task(&tcfg, 0.5, 3).sample(60, 4, 0).unwrap();
    let train = TrainConfig {
        optimizer: OptimizerKind::Adam,
        lr: 1e-2,
        epochs: 3,
        batch_size: 8,
        kappa: 5.0,
        ridge_lambda: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    let shards = make_shards(&data, 3, 6).unwrap();
    let trained: Vec<ShardModel> = shards.iter().map(|s| train_shard(&tm, &data, s, &train).unwrap().0).collect();
    let cm = compose(&trained, None).unwrap();
    let again = unlearn_retrain(&cm, &shards[1].shard_id, &[], |s| Ok(train_shard(&tm, &data, s, &train)?.0)).unwrap();
    ensure!(again.delta.bits_equal(&cm.delta), "retraining with nothing forgotten changed the composition");
    ensure!(again == cm, "retraining with nothing forgotten changed the members");
    Ok(format!(
        "subtract vs recompose {sub_err:.1e}; re-add {readd_err:.1e}; empty-forget retrain bit-exact"
    ))
}

fn objective_value(obj: &TangentObjective, d: &TangentWeights, ridge: f64) -> f64 {
    obj.evaluate(d).unwrap().0 + ridge * d.norm_sq()
}

fn stencil(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
}

fn chord_and_gradient() -> Result<String, String> {
    let cfg = small_config();
    let m = model(&cfg, 12);
    let data = task(&cfg, 0.5, 4).sample(12, 2, 0).unwrap();
    let ridge = 1e-2;
    let obj = TangentObjective {
        model: &m,
        data: &data,
        cache: None,
        loss: TrainConfig::default().loss_spec(),
    };
    let mut rng = RngState::new(13);
    let mut min_gap = f64::INFINITY;
    for _ in 0..100 {
        let a = TangentWeights::random(&cfg, m.base(), &mut rng, 0.3);
        let b = TangentWeights::random(&cfg, m.base(), &mut rng, 0.3);
        let t = rng.uniform();
        let mut mid = a.scaled(t);
        mid.axpy(1.0 - t, &b);
        let lhs = objective_value(&obj, &mid, ridge);
        let chord = t * objective_value(&obj, &a, ridge) + (1.0 - t) * objective_value(&obj, &b, ridge);
        ensure!(lhs <= chord + 1e-10, "chord inequality violated: {lhs} > {chord}");
        min_gap = min_gap.min(chord - lhs);
    }

    let mut grad_err: f64 = 0.0;
    for kind in [LossKind::Rsl, LossKind::Mse, LossKind::Ce] {
        let obj = TangentObjective {
            loss: TrainConfig { loss: kind, ..TrainConfig::default() }.loss_spec(),
            ..obj
        };
        for _ in 0..3 {
            let p = TangentWeights::random(&cfg, m.base(), &mut rng, 0.2);
            let dir = unit_delta(&m, &mut rng);
            let idx: Vec<usize> = (0..data.len()).collect();
            let mut g = p.zeroed();
            for s in obj.sample_grads(&p, &idx).unwrap() {
                g.axpy(1.0 / data.len() as f64, &s.grad);
            }
            g.axpy(2.0 * ridge, &p);
            let analytic = g.dot(&dir);
            let numeric = stencil(|t| objective_value(&obj, &p.plus(&dir.scaled(t)), ridge), 1e-3);
            grad_err = grad_err.max((analytic - numeric).abs() / analytic.abs().max(1e-8));
        }
    }
    ensure!(grad_err <= 1e-6, "gradient vs finite differences {grad_err:e}");
    Ok(format!("100 chords hold (min gap {min_gap:.1e}); gradient vs finite differences {grad_err:.1e}"))
}

fn monotone_descent() -> Result<String, String> {
    let cfg = small_config();
    let m = model(&cfg, 14);
    let data = task(&cfg, 0.5, 5).sample(30, 7, 0).unwrap();
    let mut runs = 0;
    for (ridge, lr) in [(0.0, 1e-2), (1e-2, 1e-2), (1e-1, 3e-3)] {
        let tc = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr,
            epochs: 25,
            batch_size: data.len(),
            kappa: 5.0,
            ridge_lambda: ridge,
            ..TrainConfig::default()
        };
        let (_, rep) = train_tangent(&m, &data, &tc).unwrap();
        let curve = rep.loss_curve();
        ensure!(curve.windows(2).all(|w| w[1] <= w[0]), "ridge {ridge}: curve not monotone {curve:?}");
        ensure!(curve.last() < curve.first(), "ridge {ridge}: no descent");
        runs += 1;
    }
    Ok(format!("{runs} full-batch curves monotone"))
}

fn set_flat(p: &mut TangentWeights, mut k: usize, v: f64) {
    for t in p.tensors_mut() {
        if k < t.len() {
            t.data_mut()[k] = v;
            return;
        }
        k -= t.len();
    }
    panic!("index out of range");
}

/// Full-batch gradient descent on MSE + ridge against the normal equations
/// `(Σ JᵢᵀJᵢ/(nK) + λI) Δ = −Σ Jᵢᵀ(f(xᵢ) − tᵢ)/(nK)`, with each `Jᵢ`
/// assembled column by column from basis-direction JVPs.
fn normal_equations() -> Result<String, String> {
    let cfg = ModelConfig {
        depth: 1,
        d_model: 4,
        heads: 1,
        mlp_ratio: 2,
        n_classes: 2,
        n_tokens: 3,
        n_features: 3,
        tunable_blocks: 1,
        ..ModelConfig::default()
    };
    let m = model(&cfg, 15);
    let data = task(&cfg, 0.8, 6).sample(24, 8, 0).unwrap();
    let lambda = 0.05;
    let zero = m.zero_delta();
    let p = zero.numel();
    let (n, k) = (data.len() as f64, cfg.n_classes as f64);
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DMatrix::<f64>::zeros(p, 1);
    for s in &data.samples {
        let mut jac = DMatrix::<f64>::zeros(cfg.n_classes, p);
        for col in 0..p {
            let mut e = zero.clone();
            set_flat(&mut e, col, 1.0);
            jac.column_mut(col).copy_from(&mat(&m.forward_dual(&e, &s.x).unwrap().jvp).column(0));
        }
        let mut resid = mat(&m.forward_value(&s.x).unwrap());
        resid[s.label] -= 1.0;
        a += jac.transpose() * &jac / (n * k);
        b -= jac.transpose() * resid / (n * k);
    }
    let eig = a.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min() + lambda, eig.max() + lambda);
    let sys = a + DMatrix::<f64>::identity(p, p) * lambda;
    let exact = sys.cholesky().ok_or("normal equations are not positive definite")?.solve(&b);

    // The Hessian is 2(A + λI); step 2/(L + μ) contracts by (L − μ)/(L + μ).
    let (l, mu) = (2.0 * hi, 2.0 * lo);
    let rate = (l - mu) / (l + mu);
    let epochs = ((1e-10_f64).ln() / rate.ln()).ceil() as usize;
    let tc = TrainConfig {
        loss: LossKind::Mse,
        optimizer: OptimizerKind::Sgd,
        lr: 2.0 / (l + mu),
        epochs,
        batch_size: data.len(),
        ridge_lambda: lambda,
        ..TrainConfig::default()
    };
    let (delta, rep) = train_tangent(&m, &data, &tc).unwrap();
    let curve = rep.loss_curve();
    ensure!(curve.windows(2).all(|w| w[1] <= w[0] + 1e-15 * w[0].abs()), "gradient descent curve not monotone");
    let got = DMatrix::from_column_slice(p, 1, &delta.flatten());
    let err = (&got - &exact).norm() / exact.norm();
    ensure!(err <= 1e-6, "trainer vs normal equations {err:e} after {epochs} epochs");
    Ok(format!("{p}-parameter ridge solution matched to {err:.1e} ({epochs} full-batch steps, condition {:.0})", hi / lo))
}

pub fn convex_training() -> Outcome {
    Ok([chord_and_gradient()?, monotone_descent()?, normal_equations()?].join("; "))
}

pub fn taylor_regime() -> Outcome {
    let cfg = small_config();
    let m = model(&cfg, 16);
    let mut rng = RngState::new(17);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x = input(&cfg, &mut rng);
        let d = unit_delta(&m, &mut rng);
        let ratios: Vec<f64> = [1e-1, 1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&s| {
                let ds = d.scaled(s);
                let lin = m.predict(&m.forward_dual(&ds, &x).unwrap());
                let w = m.base().apply_delta(&cfg, &ds).unwrap();
                let exact = TangentModel::new(cfg.clone(), w).unwrap().forward_value(&x).unwrap();
                exact.sub(&lin).unwrap().norm() / (s * s)
            })
            .collect();
        let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0_f64), |(l, h), &r| (l.min(r), h.max(r)));
        ensure!(hi / lo < 10.0, "ratios {ratios:?} span more than a decade");
        worst = worst.max(hi / lo);
    }
    Ok(format!("10 directions; worst max/min residual ratio {worst:.2}"))
}

const BIN: &str = env!("CARGO_BIN_EXE_tangent");

fn tangent(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("TANGENT_OUT_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs one pipeline from flags, collects the resolved spec of every step
/// from its report, and replays the specs twice in fresh directories.
fn cli_replay() -> Result<String, String> {
    let first = tempfile::tempdir().unwrap();
    let d = first.path();
    fs::write(d.join("model.json"), r#"{"depth":2,"d_model":16,"heads":2,"mlp_ratio":2,"n_classes":3,"n_tokens":4,"n_features":5,"tunable_blocks":2}"#).unwrap();
    fs::write(d.join("pretrain.json"), r#"{"loss":"ce","optimizer":"adam","lr":0.003,"epochs":2,"batch_size":32}"#).unwrap();
    fs::write(d.join("train.json"), r#"{"optimizer":"adam","lr":0.003,"epochs":2,"batch_size":8,"kappa":5,"ridge_lambda":0.001}"#).unwrap();
    let task = "--n-classes 3 --n-features 5 --n-tokens 4";
    let steps = [
        format!("gen-data {task} --n 80 --task-seed 1 --name src"),
        format!("gen-data {task} --n 48 --task-seed 2 --source-seed 1 --similarity 0.8 --first-id 1000 --name tgt"),
        "pretrain --data out/src.tgd --model-config model.json --train-config pretrain.json --workers 2".into(),
        "init --pretrained out/pretrained.tgt --reset-last-block --linearize-cls".into(),
        "init --pretrained out/pretrained.tgt --jvp-only --name jvp".into(),
        "shard --data out/tgt.tgd --n-shards 3 --seed 4 --out-dir out/shards".into(),
        "train --base out/base.tgt --data out/tgt.tgd --train-config train.json --manifest out/shards/manifest.json --shard shard-000 --name s0".into(),
        "train --base out/base.tgt --data out/tgt.tgd --train-config train.json --manifest out/shards/manifest.json --shard shard-001 --name s1".into(),
        "train --base out/base.tgt --data out/tgt.tgd --train-config train.json --manifest out/shards/manifest.json --shard shard-002 --nonlinear --name s2".into(),
        "compose --base out/base.tgt --shards out/s0.tgt out/s1.tgt --lambdas 0.6,0.3".into(),
        "unlearn --base out/base.tgt --composed out/composed.tgt --shard-id shard-000 --subtract --name sub".into(),
        "unlearn --base out/base.tgt --composed out/composed.tgt --shard-id shard-001 --retrain --forget FORGET --data out/tgt.tgd --train-config train.json --name re".into(),
        "train-dp --base out/jvp.tgt --data out/tgt.tgd --epsilon 5 --noise-multiplier 1.5".into(),
        "eval --base out/base.tgt --data out/tgt.tgd --composed out/composed.tgt --predictions --name ev".into(),
    ];
    let reports = |dir: &Path| -> Vec<PathBuf> {
        snapshot(dir).into_iter().map(|f| f.0).filter(|p| p.to_string_lossy().ends_with(".report.json")).collect()
    };
    let mut order = Vec::new();
    for s in &steps {
        let before = reports(d);
        let s = if s.contains("FORGET") {
            let ids: serde_json::Value = serde_json::from_slice(&fs::read(d.join("out/shards/shard-001.ids.json")).unwrap()).unwrap();
            s.replace("FORGET", &ids["sample_ids"][0].to_string())
        } else {
            s.clone()
        };
        tangent(d, &s.split_whitespace().collect::<Vec<_>>())?;
        let fresh: Vec<PathBuf> = reports(d).into_iter().filter(|p| !before.contains(p)).collect();
        ensure!(fresh.len() == 1, "{s}: expected one new report, found {fresh:?}");
        let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join(&fresh[0])).unwrap()).map_err(|e| e.to_string())?;
        order.push(report["spec"].clone());
    }
    order.push(serde_json::json!({"command": "oracle-check", "seed": 3, "instances": 5, "json": true}));
    order.push(serde_json::json!({"command": "dp-sigma", "epsilon": 2.0, "delta": 1e-5, "steps": 40, "sample_rate": 0.1}));

    let replay = || -> Result<(tempfile::TempDir, Vec<String>), String> {
        let t = tempfile::tempdir().unwrap();
        for f in ["model.json", "pretrain.json", "train.json"] {
            fs::copy(d.join(f), t.path().join(f)).unwrap();
        }
        let mut stdout = Vec::new();
        for (i, spec) in order.iter().enumerate() {
            let file = t.path().join(format!("spec-{i:02}.json"));
            fs::write(&file, serde_json::to_vec_pretty(spec).unwrap()).unwrap();
            stdout.push(tangent(t.path(), &["run", file.to_str().unwrap()])?);
        }
        Ok((t, stdout))
    };
    let (a, out_a) = replay()?;
    let (b, out_b) = replay()?;
    let (snap_a, snap_b) = (snapshot(a.path()), snapshot(b.path()));
    ensure!(out_a == out_b, "stdout differs between replays");
    ensure!(snap_a.len() == snap_b.len(), "replays wrote different file sets");
    for ((pa, ba), (pb, bb)) in snap_a.iter().zip(&snap_b) {
        ensure!(pa == pb && ba == bb, "{} differs between replays", pa.display());
    }
    let original = snapshot(&d.join("out"));
    let replayed = snapshot(&a.path().join("out"));
    ensure!(original == replayed, "replaying the recorded specs did not reproduce the flag-driven run");
    Ok(format!("{} specs replayed twice, {} files byte-identical", order.len(), snap_a.len()))
}

fn cached_gradients() -> Result<String, String> {
    let cfg = ModelConfig {
        depth: 3,
        tunable_blocks: 1,
        ..small_config()
    };
    let m = model(&cfg, 18);
    let data: Dataset = task(&cfg, 0.5, 7).sample(20, 9, 50).unwrap();
    let cache = ActivationCache::build(&m, data.samples.iter().map(|s| (s.id, &s.x))).unwrap();
    let loss = TrainConfig::default().loss_spec();
    let plain = TangentObjective {
        model: &m,
        data: &data,
        cache: None,
        loss,
    };
    let cached = TangentObjective {
        cache: Some(&cache),
        ..plain
    };
    let mut rng = RngState::new(19);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let p = TangentWeights::random(&cfg, m.base(), &mut rng, 0.1);
        for (a, b) in plain.sample_grads(&p, &idx).unwrap().iter().zip(cached.sample_grads(&p, &idx).unwrap()) {
            worst = worst.max(param_rel(&b.grad, &a.grad));
        }
    }
    ensure!(worst <= 1e-14, "cached vs uncached gradients {worst:e}");
    Ok(format!("cached vs uncached gradients {worst:.1e}"))
}

pub fn determinism() -> Outcome {
    Ok([cli_replay()?, cached_gradients()?].join("; "))
}
