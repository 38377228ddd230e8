//! DP-SGD on the tangent objective.
//!
//! Each step clips every per-example gradient to global norm `C`, adds one
//! Gaussian draw `N(0, σ²C²)` per parameter entry to the clipped sum, and
//! divides by the batch size. Privacy is tracked with a Rényi-DP accountant
//! for the Poisson-subsampled Gaussian mechanism at integer orders, converted
//! to `(ε, δ)` with the tightened conversion of Canonne, Kamath and Steinke.
//! Batches are drawn by shuffling rather than Poisson sampling; at `q = 1`
//! (full-batch steps) the two coincide and the bound is exact.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{PredictionMode, TangentModel, TangentWeights};
use crate::params::ParamVector;
use crate::rng::RngState;
use crate::training::{
    fit, prefix_cache, GradientAggregator, NonlinearObjective, Objective, SampleGrad, TangentObjective, TrainConfig,
    TrainReport,
};

/// Mechanism parameters and the target guarantee.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyBudget {
    /// Target ε; training stops before exceeding it. `inf` disables the stop.
    #[serde(with = "crate::serde_float")]
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
}

impl PrivacyBudget {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.epsilon > 0.0) {
            return fail(format!("target epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.clip_norm > 0.0) {
            return fail(format!("clip norm must be > 0, got {}", self.clip_norm));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return fail(format!("noise multiplier must be finite and >= 0, got {}", self.noise_multiplier));
        }
        Ok(())
    }
}

/// `g · min(1, C/‖g‖)` with the global norm. The result satisfies
/// `‖out‖ ≤ C` in floating point, not only in exact arithmetic.
pub fn clip_gradient<P: ParamVector>(g: &P, clip_norm: f64) -> P {
    let norm = g.norm();
    if norm <= clip_norm {
        return g.clone();
    }
    let mut out = g.scaled(clip_norm / norm);
    while out.norm() > clip_norm {
        out.scale_mut(1.0 - f64::EPSILON);
    }
    out
}

/// What one DP-SGD step did, for auditing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepTrace {
    /// Norm of every per-example gradient after clipping.
    pub clipped_norms: Vec<f64>,
    pub raw_norms: Vec<f64>,
    /// Gaussian draws added to the batch sum.
    pub noise_draws: usize,
}

/// `(1/B)(Σ_i clip(g_i, C) + N(0, σ²C² I))`.
///
/// With `σ = 0` no noise is drawn, so the update equals the plain mean of
/// the clipped gradients bit for bit.
pub fn dp_sgd_step<P: ParamVector>(
    grads: &[&P],
    clip_norm: f64,
    noise_multiplier: f64,
    rng: &mut RngState,
) -> Result<(P, StepTrace)> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Parameter("DP-SGD step on an empty batch".into()))?;
    let mut trace = StepTrace::default();
    let mut sum = first.zeroed();
    for g in grads {
        let c = clip_gradient(*g, clip_norm);
        trace.raw_norms.push(g.norm());
        trace.clipped_norms.push(c.norm());
        sum.add_assign(&c);
    }
    if noise_multiplier > 0.0 {
        let std = noise_multiplier * clip_norm;
        for t in sum.tensors_mut() {
            for v in t.data_mut() {
                *v += std * rng.standard_normal();
            }
            trace.noise_draws += t.len();
        }
    }
    sum.scale_mut(1.0 / grads.len() as f64);
    Ok((sum, trace))
}

/// Integer Rényi orders used by the accountant.
fn orders() -> impl Iterator<Item = u32> {
    (2..=64).chain((72..=256).step_by(8)).chain([320, 384, 512, 768, 1024])
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// RDP of one step of the sampled Gaussian mechanism at integer order `α`.
pub fn rdp_sampled_gaussian(q: f64, sigma: f64, alpha: u32) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    let a = alpha as f64;
    if q == 1.0 {
        return a / (2.0 * sigma * sigma);
    }
    // A_α = Σ_k C(α,k) (1−q)^{α−k} q^k exp((k²−k)/(2σ²))
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut log_a = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = k as f64;
        let term = ln_binomial(alpha, k) + (a - kf) * l1q + kf * lq + (kf * kf - kf) / (2.0 * sigma * sigma);
        log_a = log_add(log_a, term);
    }
    log_a / (a - 1.0)
}

/// Upper bound on ε after `steps` compositions at sampling rate `q`.
pub fn account(noise_multiplier: f64, steps: usize, q: f64, delta: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Parameter(format!("sample rate must lie in (0, 1], got {q}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Parameter(format!("delta must lie in (0, 1), got {delta}")));
    }
    if steps == 0 {
        return Ok(0.0);
    }
    if noise_multiplier <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let t = steps as f64;
    let eps = orders()
        .map(|alpha| {
            let a = alpha as f64;
            let rdp = t * rdp_sampled_gaussian(q, noise_multiplier, alpha);
            rdp + (-1.0 / a).ln_1p() - (delta.ln() + a.ln()) / (a - 1.0)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(eps.max(0.0))
}

/// Smallest noise multiplier whose ε after `steps` steps is at most `epsilon`,
/// to a relative precision of about 1e-10.
pub fn sigma_for_epsilon(epsilon: f64, delta: f64, steps: usize, q: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Parameter(format!("target epsilon must be finite and > 0, got {epsilon}")));
    }
    if steps == 0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while account(hi, steps, q, delta)? > epsilon {
        lo = hi;
        hi *= 2.0;
        if hi > 1e8 {
            return Err(Error::Parameter(format!("epsilon {epsilon} is unreachable")));
        }
    }
    while hi - lo > 1e-10 * hi {
        let mid = 0.5 * (lo + hi);
        if account(mid, steps, q, delta)? > epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Clipping audit over a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ClipAudit {
    pub samples: usize,
    pub clipped: usize,
    pub max_norm_after_clip: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySummary {
    pub budget: PrivacyBudget,
    pub sample_rate: f64,
    pub steps: usize,
    #[serde(with = "crate::serde_float")]
    pub epsilon_spent: f64,
    pub audit: ClipAudit,
}

/// [`GradientAggregator`] implementing DP-SGD with a running accountant.
#[derive(Debug, Clone)]
pub struct DpSgd {
    budget: PrivacyBudget,
    sample_rate: f64,
    rng: RngState,
    steps: usize,
    audit: ClipAudit,
    /// Keep every step trace (tests and audits).
    pub keep_traces: bool,
    pub traces: Vec<StepTrace>,
}

impl DpSgd {
    pub fn new(budget: PrivacyBudget, sample_rate: f64, rng: RngState) -> Result<Self> {
        budget.validate()?;
        if !(sample_rate > 0.0 && sample_rate <= 1.0) {
            return Err(Error::Config(format!("sample rate must lie in (0, 1], got {sample_rate}")));
        }
        Ok(Self {
            budget,
            sample_rate,
            rng,
            steps: 0,
            audit: ClipAudit::default(),
            keep_traces: false,
            traces: Vec::new(),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn audit(&self) -> ClipAudit {
        self.audit
    }

    fn spent(&self, steps: usize) -> f64 {
        account(self.budget.noise_multiplier, steps, self.sample_rate, self.budget.delta).expect("validated parameters")
    }

    pub fn summary(&self) -> PrivacySummary {
        PrivacySummary {
            budget: self.budget.clone(),
            sample_rate: self.sample_rate,
            steps: self.steps,
            epsilon_spent: self.spent(self.steps),
            audit: self.audit,
        }
    }
}

impl<P: ParamVector> GradientAggregator<P> for DpSgd {
    fn aggregate(&mut self, samples: &[SampleGrad<P>]) -> Result<P> {
        let grads: Vec<&P> = samples.iter().map(|s| &s.grad).collect();
        let (update, trace) = dp_sgd_step(&grads, self.budget.clip_norm, self.budget.noise_multiplier, &mut self.rng)?;
        let c = self.budget.clip_norm;
        for (&raw, &clipped) in trace.raw_norms.iter().zip(&trace.clipped_norms) {
            self.audit.samples += 1;
            self.audit.clipped += usize::from(raw > c);
            self.audit.violations += usize::from(clipped > c);
            self.audit.max_norm_after_clip = self.audit.max_norm_after_clip.max(clipped);
        }
        if self.keep_traces {
            self.traces.push(trace);
        }
        self.steps += 1;
        Ok(update)
    }

    fn may_step(&self) -> bool {
        self.budget.epsilon.is_infinite() || self.spent(self.steps + 1) <= self.budget.epsilon
    }

    fn epsilon(&self) -> Option<f64> {
        Some(self.spent(self.steps))
    }
}

/// Runs DP-SGD over any objective from `init`.
pub fn fit_private<O: Objective>(
    obj: &O,
    init: O::Params,
    cfg: &TrainConfig,
    budget: &PrivacyBudget,
) -> Result<(O::Params, TrainReport, DpSgd)> {
    let n = obj.n_samples();
    if n == 0 {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let q = cfg.batch_size.min(n) as f64 / n as f64;
    let mut agg = DpSgd::new(budget.clone(), q, RngState::new(cfg.seed).derive("dp-noise"))?;
    let (params, mut report) = fit(obj, init, cfg, &mut agg)?;
    report.privacy = Some(agg.summary());
    Ok((params, report, agg))
}

/// DP training of the tangent deltas. The model must predict with the JVP
/// alone.
pub fn train_private(
    model: &TangentModel,
    data: &Dataset,
    cfg: &TrainConfig,
    budget: &PrivacyBudget,
) -> Result<(TangentWeights, TrainReport)> {
    if model.config().prediction_mode != PredictionMode::JvpOnly {
        return Err(Error::Config("private tangent training requires jvp_only prediction".into()));
    }
    let cache = prefix_cache(model, data)?;
    let obj = TangentObjective {
        model,
        data,
        cache: cache.as_ref(),
        loss: cfg.loss_spec(),
    };
    let (delta, report, _) = fit_private(&obj, model.zero_delta(), cfg, budget)?;
    Ok((delta, report))
}

/// DP fine-tuning of the tunable weights of the nonlinear network; the
/// baseline for [`train_private`].
pub fn train_private_nonlinear(
    model: &TangentModel,
    data: &Dataset,
    cfg: &TrainConfig,
    budget: &PrivacyBudget,
) -> Result<(TangentWeights, TrainReport)> {
    let obj = NonlinearObjective::new(model, data, cfg.loss_spec())?;
    let (delta, report, _) = fit_private(&obj, model.zero_delta(), cfg, budget)?;
    Ok((delta, report))
}
