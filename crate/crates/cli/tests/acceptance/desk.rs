//! Desk-scale experiments on the synthetic transfer task. Every learning
//! rate is chosen on a validation split; the test split is only read for
//! the reported numbers.

use std::sync::OnceLock;
use std::time::Instant;

use tangent_core::compose::{compose, make_shards, shard_seed, train_shard, Shard};
use tangent_core::data::{SynthSpec, SynthTask};
use tangent_core::model::init_tangent;
use tangent_core::privacy::{account, clip_gradient, dp_sgd_step, train_private, train_private_nonlinear, PrivacyBudget};
use tangent_core::training::{evaluate_nonlinear, evaluate_tangent, train_nonlinear, LossKind, LossSpec, OptimizerKind, TrainReport};
use tangent_core::{
    BaseWeights, Dataset, ModelConfig, ParamVector, PredictionMode, RngState, TangentModel, TangentWeights, Tensor,
    TrainConfig,
};

use crate::ensure;
use crate::Outcome;

const SEPARATION: f64 = 0.4;
const N_SHARDS: usize = 10;

struct Desk {
    pretrained: BaseWeights,
    config: ModelConfig,
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

/// A network pretrained on a source task, and train/val/test splits of a
/// related target task.
fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let config = ModelConfig {
            depth: 2,
            d_model: 32,
            heads: 2,
            n_classes: 4,
            n_tokens: 8,
            n_features: 8,
            tunable_blocks: 2,
            ..ModelConfig::default()
        };
        let source = SynthTask::new(SynthSpec {
            separation: SEPARATION,
            task_seed: 1,
            ..SynthSpec::default()
        })
        .unwrap();
        let target = SynthTask::new(SynthSpec {
            separation: SEPARATION,
            task_seed: 2,
            source_seed: Some(1),
            similarity: 0.9,
            ..SynthSpec::default()
        })
        .unwrap();
        let init = TangentModel::new(config.clone(), BaseWeights::random(&config, &mut RngState::new(0)).unwrap()).unwrap();
        let pretrain = TrainConfig {
            loss: LossKind::Ce,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            epochs: 20,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let (delta, _) = train_nonlinear(&init, &source.sample(2000, 10, 0).unwrap(), &pretrain).unwrap();
        Desk {
            pretrained: init.base().apply_delta(&config, &delta).unwrap(),
            config,
            train: target.sample(1000, 11, 100_000).unwrap(),
            val: target.sample(1000, 13, 300_000).unwrap(),
            test: target.sample(2000, 12, 200_000).unwrap(),
        }
    })
}

/// Linearization point: last block and head re-initialized, last block tunable.
fn tail_model(prediction_mode: PredictionMode) -> TangentModel {
    let d = desk();
    let cfg = ModelConfig {
        tunable_blocks: 1,
        reset_last_block: true,
        prediction_mode,
        ..d.config.clone()
    };
    let (base, _) = init_tangent(&d.pretrained, &cfg, &RngState::new(5)).unwrap();
    TangentModel::new(cfg, base).unwrap()
}

const ACCURACY: LossSpec = LossSpec {
    kind: LossKind::Ce,
    alpha: 1.0,
    kappa: 1.0,
};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn uniform_average(deltas: &[TangentWeights]) -> TangentWeights {
    let mut avg = deltas[0].scaled(1.0 / deltas.len() as f64);
    for d in &deltas[1..] {
        avg.axpy(1.0 / deltas.len() as f64, d);
    }
    avg
}

/// Per-shard deltas, their validation accuracy after averaging, and the lr.
struct Sweep {
    lr: f64,
    deltas: Vec<TangentWeights>,
    val: f64,
}

fn best(sweeps: Vec<Sweep>) -> Sweep {
    sweeps.into_iter().fold(None::<Sweep>, |b, s| match b {
        Some(b) if b.val >= s.val => Some(b),
        _ => Some(s),
    })
    .unwrap()
}

fn tangent_sweep(m: &TangentModel, shards: &[Shard], lr: f64) -> Sweep {
    let d = desk();
    let cfg = TrainConfig {
        loss: LossKind::Rsl,
        kappa: 5.0,
        optimizer: OptimizerKind::Adam,
        lr,
        epochs: 30,
        batch_size: 32,
        ridge_lambda: 1e-3,
        ..TrainConfig::default()
    };
    let members: Vec<_> = shards.iter().map(|s| train_shard(m, &d.train, s, &cfg).unwrap().0).collect();
    let composed = compose(&members, None).unwrap();
    let val = evaluate_tangent(m, &composed.delta, &d.val, ACCURACY).unwrap().accuracy;
    Sweep {
        lr,
        deltas: members.into_iter().map(|s| s.delta).collect(),
        val,
    }
}

fn nonlinear_sweep(m: &TangentModel, shards: &[Shard], lr: f64) -> Sweep {
    let d = desk();
    let deltas: Vec<_> = shards
        .iter()
        .map(|s| {
            let cfg = TrainConfig {
                loss: LossKind::Ce,
                optimizer: OptimizerKind::Adam,
                lr,
                epochs: 30,
                batch_size: 32,
                seed: shard_seed(0, &s.shard_id),
                ..TrainConfig::default()
            };
            train_nonlinear(m, &d.train.subset(&s.sample_ids).unwrap(), &cfg).unwrap().0
        })
        .collect();
    let val = evaluate_nonlinear(m, &uniform_average(&deltas), &d.val, ACCURACY).unwrap().accuracy;
    Sweep { lr, deltas, val }
}

pub fn sharding_benefit() -> Outcome {
    let start = Instant::now();
    let d = desk();
    let m = tail_model(PredictionMode::Full);
    let shards = make_shards(&d.train, N_SHARDS, 3).unwrap();

    let tangent = best([1e-3, 3e-3, 1e-2].iter().map(|&lr| tangent_sweep(&m, &shards, lr)).collect());
    let shard_acc: Vec<f64> = tangent
        .deltas
        .iter()
        .map(|delta| evaluate_tangent(&m, delta, &d.test, ACCURACY).unwrap().accuracy)
        .collect();
    let composed = evaluate_tangent(&m, &uniform_average(&tangent.deltas), &d.test, ACCURACY).unwrap().accuracy;

    let nonlinear = best([3e-3, 1e-2, 3e-2].iter().map(|&lr| nonlinear_sweep(&m, &shards, lr)).collect());
    let soup = evaluate_nonlinear(&m, &uniform_average(&nonlinear.deltas), &d.test, ACCURACY).unwrap().accuracy;

    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "tangent lr {:e}: mean shard {:.3}, composed {composed:.3}; nonlinear lr {:e}: weight average {soup:.3}",
        tangent.lr,
        mean(&shard_acc),
        nonlinear.lr
    );
    ensure!(composed >= mean(&shard_acc) + 0.03, "{summary}: composition gains less than 3 points");
    ensure!(soup < composed, "{summary}: weight averaging matches or beats the tangent composition");
    ensure!(secs < 600.0, "{summary}: took {secs:.0}s");
    Ok(summary)
}

fn noise_variance() -> Result<String, String> {
    let (sigma, clip, batch) = (1.3, 0.7, 8usize);
    let mut rng = RngState::new(31);
    let grads: Vec<Tensor> = (0..batch).map(|_| rng.gaussian(&[6], 0.0, 1.0).unwrap()).collect();
    let refs: Vec<&Tensor> = grads.iter().collect();
    let mut clean = Tensor::zeros(&[6]);
    for g in &grads {
        clean.add_assign(&clip_gradient(g, clip)).unwrap();
    }
    clean.scale_mut(1.0 / batch as f64);
    let trials = 10_000;
    let (mut sum, mut sum_sq) = ([0.0; 6], [0.0; 6]);
    for _ in 0..trials {
        let (out, _) = dp_sgd_step(&refs, clip, sigma, &mut rng).unwrap();
        for (j, (o, c)) in out.data().iter().zip(clean.data()).enumerate() {
            sum[j] += o - c;
            sum_sq[j] += (o - c) * (o - c);
        }
    }
    let want = sigma * sigma * clip * clip / (batch * batch) as f64;
    let mut worst: f64 = 0.0;
    for j in 0..6 {
        let m = sum[j] / trials as f64;
        worst = worst.max(((sum_sq[j] / trials as f64 - m * m) / want - 1.0).abs());
    }
    ensure!(worst <= 0.05, "noise variance off by {:.1}%", 100.0 * worst);
    Ok(format!("noise variance within {:.1}% over {trials} trials", 100.0 * worst))
}

fn classical_bound() -> Result<String, String> {
    let delta: f64 = 1e-5;
    let sigma = (2.0 * (1.25 / delta).ln()).sqrt();
    let eps = account(sigma, 1, 1.0, delta).map_err(|e| e.to_string())?;
    ensure!(eps <= 1.0, "single Gaussian query at sigma {sigma:.3} accounts to epsilon {eps}");
    Ok(format!("single query at sigma {sigma:.3} gives epsilon {eps:.3}"))
}

fn audited(report: &TrainReport, clip: f64) -> Result<(f64, usize), String> {
    let p = report.privacy.as_ref().ok_or("no privacy summary")?;
    ensure!(p.audit.violations == 0, "{} clipped gradients above C", p.audit.violations);
    ensure!(p.audit.max_norm_after_clip <= clip, "max clipped norm {}", p.audit.max_norm_after_clip);
    ensure!(p.audit.samples == p.steps * 100, "audit saw {} gradients in {} steps", p.audit.samples, p.steps);
    Ok((p.epsilon_spent, p.audit.samples))
}

pub fn dp_mechanics() -> Outcome {
    let d = desk();
    let clip = 1.0;
    let budget = PrivacyBudget {
        epsilon: f64::INFINITY,
        delta: 1e-5,
        clip_norm: clip,
        noise_multiplier: 2.0,
    };
    let tangent = tail_model(PredictionMode::JvpOnly);
    let nonlinear = tail_model(PredictionMode::Full);
    let mut audited_grads = 0;
    let mut spent = Vec::new();
    let mut results = Vec::new();
    for lr in [0.1, 0.3, 1.0] {
        let cfg = TrainConfig {
            loss: LossKind::Ce,
            optimizer: OptimizerKind::Sgd,
            lr,
            epochs: 20,
            batch_size: 100,
            seed: 3,
            ..TrainConfig::default()
        };
        let (dt, rt) = train_private(&tangent, &d.train, &cfg, &budget).unwrap();
        let (dn, rn) = train_private_nonlinear(&nonlinear, &d.train, &cfg, &budget).unwrap();
        for r in [&rt, &rn] {
            let (eps, n) = audited(r, clip)?;
            audited_grads += n;
            spent.push(eps);
        }
        let acc = |t: bool, split: &Dataset| {
            if t {
                evaluate_tangent(&tangent, &dt, split, ACCURACY).unwrap().accuracy
            } else {
                evaluate_nonlinear(&nonlinear, &dn, split, ACCURACY).unwrap().accuracy
            }
        };
        results.push((lr, acc(true, &d.val), acc(true, &d.test), acc(false, &d.val), acc(false, &d.test)));
    }
    ensure!(spent.iter().all(|e| *e == spent[0]), "runs spent different budgets: {spent:?}");
    let t = results.iter().fold(results[0], |b, r| if r.1 > b.1 { *r } else { b });
    let n = results.iter().fold(results[0], |b, r| if r.3 > b.3 { *r } else { b });
    let ordering = format!(
        "epsilon {:.2}: tangent lr {} test {:.3}, nonlinear lr {} test {:.3}",
        spent[0], t.0, t.2, n.0, n.4
    );
    let lines = [
        format!("{audited_grads} clipped gradients audited, none above C"),
        noise_variance()?,
        classical_bound()?,
        ordering.clone(),
    ];
    ensure!(t.2 >= n.4, "{ordering}: tangent DP training below the nonlinear baseline");
    Ok(lines.join("; "))
}
