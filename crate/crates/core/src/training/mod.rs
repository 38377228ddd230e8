//! Fine-tuning of the deltas.
//!
//! The tangent objective `(1/|D|) Σ loss(f_lin(x), y) + λ‖Δw‖²` is convex in
//! `Δw`. It is minimized with mini-batch first-order updates through the
//! generic [`fit`] loop, which is shared with the nonlinear baseline and with
//! DP-SGD (through [`GradientAggregator`]).

mod loss;
mod optim;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ActivationCache, ModelConfig, PredictionMode, Tape, TangentModel, TangentWeights};
use crate::params::ParamVector;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub use loss::{argmax, ce_loss, mse_loss, rsl_loss, LossKind, LossSpec};
pub use optim::{Optimizer, OptimizerKind};

fn default_alpha() -> f64 {
    1.0
}

fn default_kappa() -> f64 {
    15.0
}

fn default_decay_factor() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub ridge_lambda: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub pgd_radius: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Rsl,
            alpha: default_alpha(),
            kappa: default_kappa(),
            ridge_lambda: 0.0,
            optimizer: OptimizerKind::Sgd,
            lr: 0.01,
            decay_epochs: Vec::new(),
            decay_factor: default_decay_factor(),
            epochs: 10,
            batch_size: 32,
            pgd_radius: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.ridge_lambda >= 0.0) {
            return fail(format!("ridge_lambda must be >= 0, got {}", self.ridge_lambda));
        }
        if !(self.alpha > 0.0) {
            return fail(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.decay_factor > 0.0) {
            return fail(format!("decay_factor must be > 0, got {}", self.decay_factor));
        }
        match self.pgd_radius {
            Some(r) if !(r > 0.0) => return fail(format!("pgd_radius must be > 0, got {r}")),
            Some(_) if self.ridge_lambda > 0.0 => {
                return fail("ridge_lambda and pgd_radius cannot be combined".into());
            }
            _ => {}
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            kind: self.loss,
            alpha: self.alpha,
            kappa: self.kappa,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean regularized objective over the epoch's batches, each evaluated
    /// before its update.
    pub loss: f64,
    pub train_accuracy: f64,
    pub delta_norm: f64,
    pub lr: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "crate::serde_float::option")]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub final_train_accuracy: f64,
    pub final_train_loss: f64,
    #[serde(default)]
    pub final_val_accuracy: Option<f64>,
    pub final_delta_norm: f64,
    /// Set when the aggregator refused further steps (privacy budget).
    #[serde(default)]
    pub stopped_early: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy: Option<crate::privacy::PrivacySummary>,
    /// Kept out of serialized artifacts so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// One JSON document per epoch followed by a summary line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(self)?);
        out.push('\n');
        Ok(out)
    }
}

/// Loss, gradient and correctness for one training example.
#[derive(Debug, Clone)]
pub struct SampleGrad<P> {
    pub loss: f64,
    pub grad: P,
    pub correct: bool,
}

/// A finite-sum objective with per-example gradients.
pub trait Objective: Sync {
    type Params: ParamVector + Send + Sync;

    fn n_samples(&self) -> usize;

    /// Per-example loss gradients, in the order of `indices`.
    fn sample_grads(&self, params: &Self::Params, indices: &[usize]) -> Result<Vec<SampleGrad<Self::Params>>>;

    /// Mean unregularized loss and accuracy over every example.
    fn evaluate(&self, params: &Self::Params) -> Result<(f64, f64)>;
}

/// Turns the per-example gradients of one batch into an update direction.
pub trait GradientAggregator<P> {
    fn aggregate(&mut self, samples: &[SampleGrad<P>]) -> Result<P>;

    /// Whether another step is allowed.
    fn may_step(&self) -> bool {
        true
    }

    /// Privacy spent so far, if tracked.
    fn epsilon(&self) -> Option<f64> {
        None
    }
}

/// Plain mini-batch mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanGradient;

impl<P: ParamVector> GradientAggregator<P> for MeanGradient {
    fn aggregate(&mut self, samples: &[SampleGrad<P>]) -> Result<P> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Parameter("cannot aggregate an empty batch".into()))?;
        let mut sum = first.grad.zeroed();
        for s in samples {
            sum.add_assign(&s.grad);
        }
        sum.scale_mut(1.0 / samples.len() as f64);
        Ok(sum)
    }
}

/// Euclidean projection onto `{‖Δw‖ ≤ radius}` using the global norm.
pub fn pgd_project<P: ParamVector>(delta: &P, radius: f64) -> Result<P> {
    if !(radius > 0.0) {
        return Err(Error::Parameter(format!("projection radius must be > 0, got {radius}")));
    }
    let norm = delta.norm();
    if norm <= radius {
        return Ok(delta.clone());
    }
    Ok(delta.scaled(radius / norm))
}

pub(crate) fn map_indices<T, F>(indices: &[usize], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        indices.par_iter().map(|&i| f(i)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        indices.iter().map(|&i| f(i)).collect()
    }
}

#[cfg(not(target_arch = "wasm32"))]
fn clock() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn clock() -> Option<()> {
    None
}

#[cfg(not(target_arch = "wasm32"))]
fn elapsed(start: Option<std::time::Instant>) -> f64 {
    start.map_or(0.0, |s| s.elapsed().as_secs_f64())
}

#[cfg(target_arch = "wasm32")]
fn elapsed(_: Option<()>) -> f64 {
    0.0
}

/// Mini-batch first-order minimization of `obj + ridge_lambda·‖p‖²`,
/// optionally projected onto the `pgd_radius` ball after every step.
///
/// Batches are drawn by reshuffling the example order every epoch with a
/// stream derived from `cfg.seed`; the trajectory is a deterministic
/// function of the inputs.
pub fn fit<O, A>(obj: &O, init: O::Params, cfg: &TrainConfig, agg: &mut A) -> Result<(O::Params, TrainReport)>
where
    O: Objective,
    A: GradientAggregator<O::Params>,
{
    cfg.validate()?;
    let n = obj.n_samples();
    if n == 0 {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let start = clock();
    let mut params = init;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order_rng = RngState::new(cfg.seed).derive("batch-order");
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    let mut last_finite = None;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order_rng.shuffle(&mut order);
        let (mut loss_sum, mut seen, mut correct) = (0.0, 0usize, 0usize);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Only batch membership is random; a canonical order inside the
            // batch keeps full-batch sums identical across epochs.
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            if !agg.may_step() {
                if steps == 0 {
                    return Err(Error::Config("privacy budget exhausted before the first step".into()));
                }
                stopped_early = true;
                break;
            }
            let samples = obj.sample_grads(&params, &idx)?;
            let data_loss = samples.iter().map(|s| s.loss).sum::<f64>() / samples.len() as f64;
            let batch_loss = data_loss + cfg.ridge_lambda * params.norm_sq();
            let mut grad = agg.aggregate(&samples)?;
            if !batch_loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch,
                    last_finite,
                });
            }
            last_finite = Some(batch_loss);
            if cfg.ridge_lambda > 0.0 {
                grad.axpy(2.0 * cfg.ridge_lambda, &params);
            }
            opt.step(&mut params, &grad, lr);
            if let Some(r) = cfg.pgd_radius {
                params = pgd_project(&params, r)?;
            }
            steps += 1;
            loss_sum += batch_loss * samples.len() as f64;
            seen += samples.len();
            correct += samples.iter().filter(|s| s.correct).count();
        }
        if seen > 0 {
            let record = EpochRecord {
                epoch,
                loss: loss_sum / seen as f64,
                train_accuracy: correct as f64 / seen as f64,
                delta_norm: params.norm(),
                lr,
                steps,
                epsilon: agg.epsilon(),
            };
            log::info!(
                "epoch {epoch}: loss {:.6} acc {:.4} |dw| {:.4e}",
                record.loss,
                record.train_accuracy,
                record.delta_norm
            );
            epochs.push(record);
        }
        if stopped_early {
            break;
        }
    }

    let (final_train_loss, final_train_accuracy) = obj.evaluate(&params)?;
    let report = TrainReport {
        config: cfg.clone(),
        epochs,
        steps,
        final_train_accuracy,
        final_train_loss,
        final_val_accuracy: None,
        final_delta_norm: params.norm(),
        stopped_early,
        privacy: None,
        wall_time_secs: elapsed(start),
    };
    Ok((params, report))
}

/// The tangent objective over a dataset. Frozen-prefix activations come
/// from `cache` when supplied.
pub struct TangentObjective<'a> {
    pub model: &'a TangentModel,
    pub data: &'a Dataset,
    pub cache: Option<&'a ActivationCache>,
    pub loss: LossSpec,
}

impl TangentObjective<'_> {
    fn logits(&self, params: &TangentWeights, i: usize, tape: Option<&mut Tape>) -> Result<Tensor> {
        let s = &self.data.samples[i];
        let dual = match (self.cache, tape) {
            (Some(c), tape) => self.model.forward_cached(params, &s.x, s.id, c, tape)?,
            (None, Some(tape)) => self.model.forward_taped(params, &s.x, tape)?,
            (None, None) => self.model.forward_dual(params, &s.x)?,
        };
        Ok(self.model.predict(&dual))
    }
}

impl Objective for TangentObjective<'_> {
    type Params = TangentWeights;

    fn n_samples(&self) -> usize {
        self.data.len()
    }

    fn sample_grads(&self, params: &TangentWeights, indices: &[usize]) -> Result<Vec<SampleGrad<TangentWeights>>> {
        map_indices(indices, |i| {
            let mut tape = Tape::default();
            let pred = self.logits(params, i, Some(&mut tape))?;
            let label = self.data.samples[i].label;
            let (loss, g) = self.loss.eval(pred.data(), label)?;
            let grad = self.model.grad_tangent(&tape, &Tensor::column(&g))?;
            Ok(SampleGrad {
                loss,
                grad,
                correct: argmax(pred.data()) == label,
            })
        })
    }

    fn evaluate(&self, params: &TangentWeights) -> Result<(f64, f64)> {
        let idx: Vec<usize> = (0..self.data.len()).collect();
        let per = map_indices(&idx, |i| {
            let pred = self.logits(params, i, None)?;
            let label = self.data.samples[i].label;
            Ok((self.loss.eval(pred.data(), label)?.0, argmax(pred.data()) == label))
        })?;
        Ok(summarize(&per))
    }
}

fn summarize(per: &[(f64, bool)]) -> (f64, f64) {
    let n = per.len().max(1) as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per.iter().filter(|p| p.1).count() as f64 / n;
    (loss, acc)
}

/// Ordinary fine-tuning of the tunable weights of the nonlinear network,
/// parameterized as `w + Δw` with the same delta layout as the tangent
/// model. Serves as the pretraining routine and the nonlinear baseline.
pub struct NonlinearObjective<'a> {
    model: &'a TangentModel,
    data: &'a Dataset,
    tail_inputs: Vec<Tensor>,
    loss: LossSpec,
}

impl<'a> NonlinearObjective<'a> {
    pub fn new(model: &'a TangentModel, data: &'a Dataset, loss: LossSpec) -> Result<Self> {
        let tail_inputs = data
            .samples
            .iter()
            .map(|s| model.tail_input(&s.x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            data,
            tail_inputs,
            loss,
        })
    }

    /// The network `w + Δw` with its value as the prediction.
    pub fn shifted(&self, params: &TangentWeights) -> Result<TangentModel> {
        let config = ModelConfig {
            prediction_mode: PredictionMode::Full,
            ..self.model.config().clone()
        };
        TangentModel::new(config.clone(), self.model.base().apply_delta(&config, params)?)
    }
}

impl Objective for NonlinearObjective<'_> {
    type Params = TangentWeights;

    fn n_samples(&self) -> usize {
        self.data.len()
    }

    fn sample_grads(&self, params: &TangentWeights, indices: &[usize]) -> Result<Vec<SampleGrad<TangentWeights>>> {
        let m = self.shifted(params)?;
        let zero = m.zero_delta();
        map_indices(indices, |i| {
            let mut tape = Tape::default();
            let out = m.forward_from_tail_input(&zero, self.tail_inputs[i].clone(), Some(&mut tape))?;
            let label = self.data.samples[i].label;
            let (loss, g) = self.loss.eval(out.value.data(), label)?;
            // At zero deltas the tangent adjoint is the ordinary weight gradient.
            let grad = m.grad_tangent(&tape, &Tensor::column(&g))?;
            Ok(SampleGrad {
                loss,
                grad,
                correct: argmax(out.value.data()) == label,
            })
        })
    }

    fn evaluate(&self, params: &TangentWeights) -> Result<(f64, f64)> {
        let m = self.shifted(params)?;
        let zero = m.zero_delta();
        let idx: Vec<usize> = (0..self.data.len()).collect();
        let per = map_indices(&idx, |i| {
            let out = m.forward_from_tail_input(&zero, self.tail_inputs[i].clone(), None)?;
            let label = self.data.samples[i].label;
            Ok((self.loss.eval(out.value.data(), label)?.0, argmax(out.value.data()) == label))
        })?;
        Ok(summarize(&per))
    }
}

fn check_dataset(model: &TangentModel, data: &Dataset) -> Result<()> {
    let c = model.config();
    if data.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if data.n_features != c.n_features || data.n_tokens != c.n_tokens || data.n_classes != c.n_classes {
        return Err(Error::Data(format!(
            "dataset shape ({} features, {} tokens, {} classes) does not match the model ({}, {}, {})",
            data.n_features, data.n_tokens, data.n_classes, c.n_features, c.n_tokens, c.n_classes
        )));
    }
    Ok(())
}

/// Builds the frozen-prefix cache when the model has frozen blocks.
pub fn prefix_cache(model: &TangentModel, data: &Dataset) -> Result<Option<ActivationCache>> {
    if model.config().first_tunable() == 0 {
        return Ok(None);
    }
    ActivationCache::build(model, data.samples.iter().map(|s| (s.id, &s.x))).map(Some)
}

/// Trains the tangent deltas from zero.
pub fn train_tangent(model: &TangentModel, data: &Dataset, cfg: &TrainConfig) -> Result<(TangentWeights, TrainReport)> {
    check_dataset(model, data)?;
    let cache = prefix_cache(model, data)?;
    let obj = TangentObjective {
        model,
        data,
        cache: cache.as_ref(),
        loss: cfg.loss_spec(),
    };
    fit(&obj, model.zero_delta(), cfg, &mut MeanGradient)
}

/// Fine-tunes the tunable weights of the nonlinear network from `w`.
/// Returns the weight change; `base().apply_delta` gives the new weights.
pub fn train_nonlinear(
    model: &TangentModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TangentWeights, TrainReport)> {
    check_dataset(model, data)?;
    let obj = NonlinearObjective::new(model, data, cfg.loss_spec())?;
    fit(&obj, model.zero_delta(), cfg, &mut MeanGradient)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and loss of the tangent model `(w, delta)` on `data`.
pub fn evaluate_tangent(
    model: &TangentModel,
    delta: &TangentWeights,
    data: &Dataset,
    loss: LossSpec,
) -> Result<EvalReport> {
    check_dataset(model, data)?;
    let obj = TangentObjective {
        model,
        data,
        cache: None,
        loss,
    };
    let (loss, accuracy) = obj.evaluate(delta)?;
    Ok(EvalReport {
        n: data.len(),
        accuracy,
        loss,
    })
}

/// Accuracy and loss of the nonlinear network `w + delta` on `data`.
pub fn evaluate_nonlinear(
    model: &TangentModel,
    delta: &TangentWeights,
    data: &Dataset,
    loss: LossSpec,
) -> Result<EvalReport> {
    check_dataset(model, data)?;
    let obj = NonlinearObjective::new(model, data, loss)?;
    let (loss, accuracy) = obj.evaluate(delta)?;
    Ok(EvalReport {
        n: data.len(),
        accuracy,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Least squares on `(a_i, y_i)` with a 2-vector parameter.
    struct Regression {
        a: Vec<[f64; 2]>,
        y: Vec<f64>,
    }

    impl Objective for Regression {
        type Params = Tensor;
        fn n_samples(&self) -> usize {
            self.y.len()
        }
        fn sample_grads(&self, p: &Tensor, idx: &[usize]) -> Result<Vec<SampleGrad<Tensor>>> {
            Ok(idx
                .iter()
                .map(|&i| {
                    let r = self.a[i][0] * p.data()[0] + self.a[i][1] * p.data()[1] - self.y[i];
                    SampleGrad {
                        loss: r * r,
                        grad: Tensor::column(&[2.0 * r * self.a[i][0], 2.0 * r * self.a[i][1]]),
                        correct: false,
                    }
                })
                .collect())
        }
        fn evaluate(&self, p: &Tensor) -> Result<(f64, f64)> {
            let idx: Vec<usize> = (0..self.y.len()).collect();
            let s = self.sample_grads(p, &idx)?;
            Ok((s.iter().map(|s| s.loss).sum::<f64>() / s.len() as f64, 0.0))
        }
    }

    fn regression(n: usize, seed: u64) -> Regression {
        let mut rng = RngState::new(seed);
        let a: Vec<[f64; 2]> = (0..n).map(|_| [rng.standard_normal(), rng.standard_normal()]).collect();
        let y = a.iter().map(|a| 1.5 * a[0] - 0.7 * a[1] + 0.3 * rng.standard_normal()).collect();
        Regression { a, y }
    }

    #[test]
    fn ridge_matches_normal_equations() {
        let prob = regression(50, 3);
        let lambda = 0.1;
        let n = prob.y.len() as f64;
        // (AᵀA/n + λI) p = Aᵀy/n, solved by Cramer's rule.
        let (mut m00, mut m01, mut m11, mut b0, mut b1) = (lambda, 0.0, lambda, 0.0, 0.0);
        for (a, y) in prob.a.iter().zip(&prob.y) {
            m00 += a[0] * a[0] / n;
            m01 += a[0] * a[1] / n;
            m11 += a[1] * a[1] / n;
            b0 += a[0] * y / n;
            b1 += a[1] * y / n;
        }
        let det = m00 * m11 - m01 * m01;
        let exact = [(b0 * m11 - b1 * m01) / det, (m00 * b1 - m01 * b0) / det];

        let cfg = TrainConfig {
            ridge_lambda: lambda,
            lr: 0.1,
            epochs: 500,
            batch_size: 50,
            ..TrainConfig::default()
        };
        let (p, _) = fit(&prob, Tensor::column(&[0.0, 0.0]), &cfg, &mut MeanGradient).unwrap();
        assert!((p.data()[0] - exact[0]).abs() < 1e-6, "{:?} vs {exact:?}", p.data());
        assert!((p.data()[1] - exact[1]).abs() < 1e-6, "{:?} vs {exact:?}", p.data());
    }

    #[test]
    fn zero_lr_keeps_init_and_flat_curve() {
        let prob = regression(20, 4);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 5,
            batch_size: 20,
            ..TrainConfig::default()
        };
        let (p, report) = fit(&prob, Tensor::column(&[0.0, 0.0]), &cfg, &mut MeanGradient).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0]);
        let curve = report.loss_curve();
        assert!(curve.iter().all(|&l| l == curve[0]));
    }

    #[test]
    fn full_batch_descent_is_monotone() {
        let prob = regression(40, 5);
        let cfg = TrainConfig {
            ridge_lambda: 0.01,
            lr: 0.05,
            epochs: 60,
            batch_size: 40,
            ..TrainConfig::default()
        };
        let (_, report) = fit(&prob, Tensor::column(&[3.0, 3.0]), &cfg, &mut MeanGradient).unwrap();
        for w in report.loss_curve().windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn pgd_iterates_stay_in_ball() {
        let prob = regression(30, 6);
        let cfg = TrainConfig {
            lr: 0.2,
            epochs: 20,
            batch_size: 7,
            pgd_radius: Some(0.5),
            ..TrainConfig::default()
        };
        let (_, report) = fit(&prob, Tensor::column(&[0.0, 0.0]), &cfg, &mut MeanGradient).unwrap();
        assert!(report.epochs.iter().all(|e| e.delta_norm <= 0.5 + 1e-12));
        assert!(report.final_delta_norm > 0.49, "constraint should be active");
    }

    #[test]
    fn ridge_and_pgd_are_exclusive() {
        let cfg = TrainConfig {
            ridge_lambda: 0.1,
            pgd_radius: Some(1.0),
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn projection_cases() {
        let small = Tensor::column(&[0.3, 0.4]);
        assert!(pgd_project(&small, 1.0).unwrap().bits_equal(&small));
        let big = Tensor::column(&[6.0, 8.0]);
        let p = pgd_project(&big, 1.0).unwrap();
        assert!((ParamVector::norm(&p) - 1.0).abs() < 1e-15);
        assert!((p.data()[0] / p.data()[1] - 0.75).abs() < 1e-15);
        assert!(pgd_project(&p, 1.0).unwrap().bits_equal(&p));
        assert!(matches!(pgd_project(&big, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let mut prob = regression(10, 7);
        prob.y[3] = f64::NAN;
        let cfg = TrainConfig {
            lr: 0.01,
            epochs: 2,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let err = fit(&prob, Tensor::column(&[0.0, 0.0]), &cfg, &mut MeanGradient).unwrap_err();
        assert!(matches!(
            err,
            Error::NonFinite {
                epoch: 0,
                batch: 0,
                last_finite: None
            }
        ));
    }

    #[test]
    fn lr_schedule_is_piecewise_constant() {
        let cfg = TrainConfig {
            lr: 1.0,
            decay_epochs: vec![2, 4],
            decay_factor: 0.5,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn config_json_is_flat_and_defaults_apply() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"lr":0.1,"epochs":3,"batch_size":8}"#).unwrap();
        assert_eq!(cfg.kappa, 15.0);
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.loss, LossKind::Rsl);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr":0.1,"epochs":3,"batch_size":8,"bogus":1}"#).is_err());
    }
}
