//! Weight-space composition of shard models and unlearning.
//!
//! Tangent models linearized around the same `w` are linear in their deltas,
//! so `Σ λ_i f_lin(x; Δw_i)` equals one tangent model with delta
//! `Σ λ_i Δw_i` (plus `(Σ λ_i − 1) f_w(x)` when the weights do not sum to
//! one). A composed model therefore costs a single forward pass, and removing
//! a shard is a subtraction in weight space.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{TangentModel, TangentWeights};
use crate::params::ParamVector;
use crate::rng::{derive_seed, RngState};
use crate::training::{train_tangent, TrainConfig, TrainReport};

/// A block of a dataset partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub shard_id: String,
    pub sample_ids: Vec<u64>,
}

/// One delta trained on one shard.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardModel {
    pub shard_id: String,
    pub delta: TangentWeights,
    pub base_fingerprint: String,
    pub sample_ids: Vec<u64>,
    pub train_config_digest: String,
}

/// How the surviving weights are set after a component is removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Renormalization {
    /// `1/(N−1)` for every survivor.
    #[default]
    Uniform,
    /// Survivors keep their relative weights and the total is preserved.
    Proportional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedModel {
    pub delta: TangentWeights,
    pub members: Vec<ShardModel>,
    pub lambdas: Vec<f64>,
    pub base_fingerprint: String,
}

impl ComposedModel {
    /// `(shard_id, λ)` per component.
    pub fn components(&self) -> Vec<(String, f64)> {
        self.members
            .iter()
            .map(|m| m.shard_id.clone())
            .zip(self.lambdas.iter().copied())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn position(&self, shard_id: &str) -> Result<usize> {
        self.members
            .iter()
            .position(|m| m.shard_id == shard_id)
            .ok_or_else(|| Error::Parameter(format!("shard {shard_id} is not a component")))
    }

    fn is_uniform(&self) -> bool {
        let n = self.lambdas.len() as f64;
        self.lambdas.iter().all(|&l| l == 1.0 / n)
    }
}

/// Partitions the dataset ids into `n_shards` blocks of near-equal size by
/// sampling without replacement. Ids are sorted within each shard.
pub fn make_shards(dataset: &Dataset, n_shards: usize, seed: u64) -> Result<Vec<Shard>> {
    if n_shards == 0 || n_shards > dataset.len() {
        return Err(Error::Parameter(format!(
            "n_shards must lie in [1, {}], got {n_shards}",
            dataset.len()
        )));
    }
    let mut ids = dataset.ids();
    RngState::new(seed).derive("shards").shuffle(&mut ids);
    let (q, r) = (ids.len() / n_shards, ids.len() % n_shards);
    let mut out = Vec::with_capacity(n_shards);
    let mut start = 0;
    for k in 0..n_shards {
        let size = q + usize::from(k < r);
        let mut sample_ids = ids[start..start + size].to_vec();
        sample_ids.sort_unstable();
        out.push(Shard {
            shard_id: format!("shard-{k:03}"),
            sample_ids,
        });
        start += size;
    }
    Ok(out)
}

/// Per-shard training seed: shards are independent of each other and of the
/// order in which they are trained.
pub fn shard_seed(seed: u64, shard_id: &str) -> u64 {
    derive_seed(seed, &format!("shard:{shard_id}"))
}

/// Trains one shard from `Δw = 0` on `dataset ∩ sample_ids`.
pub fn train_shard(
    model: &TangentModel,
    dataset: &Dataset,
    shard: &Shard,
    cfg: &TrainConfig,
) -> Result<(ShardModel, TrainReport)> {
    let data = dataset.subset(&shard.sample_ids)?;
    let cfg = TrainConfig {
        seed: shard_seed(cfg.seed, &shard.shard_id),
        ..cfg.clone()
    };
    let (delta, report) = train_tangent(model, &data, &cfg)?;
    let sm = ShardModel {
        shard_id: shard.shard_id.clone(),
        delta,
        base_fingerprint: model.fingerprint().to_string(),
        sample_ids: shard.sample_ids.clone(),
        train_config_digest: cfg.digest(),
    };
    Ok((sm, report))
}

fn check_members(models: &[ShardModel]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::Composition("nothing to compose".into()))?;
    let mut names = HashSet::new();
    let mut seen = HashSet::new();
    for m in models {
        if m.base_fingerprint != first.base_fingerprint {
            return Err(Error::Fingerprint {
                expected: first.base_fingerprint.clone(),
                found: m.base_fingerprint.clone(),
            });
        }
        if !names.insert(m.shard_id.as_str()) {
            return Err(Error::Composition(format!("shard {} appears twice", m.shard_id)));
        }
        for id in &m.sample_ids {
            if !seen.insert(*id) {
                return Err(Error::Composition(format!(
                    "sample {id} belongs to more than one shard"
                )));
            }
        }
    }
    Ok(())
}

fn weighted_sum(models: &[ShardModel], lambdas: &[f64]) -> TangentWeights {
    let mut delta = models[0].delta.scaled(lambdas[0]);
    for (m, &l) in models.iter().zip(lambdas).skip(1) {
        delta.axpy(l, &m.delta);
    }
    delta
}

/// `Σ λ_i Δw_i`; `lambdas = None` means uniform `1/N`.
pub fn compose(models: &[ShardModel], lambdas: Option<&[f64]>) -> Result<ComposedModel> {
    check_members(models)?;
    let lambdas = match lambdas {
        Some(l) if l.len() != models.len() => {
            return Err(Error::Composition(format!(
                "{} weights for {} models",
                l.len(),
                models.len()
            )));
        }
        Some(l) if l.iter().any(|v| !v.is_finite()) => {
            return Err(Error::Composition("composition weights must be finite".into()));
        }
        Some(l) => l.to_vec(),
        None => vec![1.0 / models.len() as f64; models.len()],
    };
    Ok(ComposedModel {
        delta: weighted_sum(models, &lambdas),
        members: models.to_vec(),
        base_fingerprint: models[0].base_fingerprint.clone(),
        lambdas,
    })
}

/// Removes a component by subtracting its weighted delta and renormalizing.
pub fn unlearn_subtract(cm: &ComposedModel, shard_id: &str, policy: Renormalization) -> Result<ComposedModel> {
    let i = cm.position(shard_id)?;
    if cm.len() == 1 {
        return Err(Error::Composition(
            "cannot remove the only component; retrain from the base instead".into(),
        ));
    }
    let mut members = cm.members.clone();
    members.remove(i);
    let mut lambdas = cm.lambdas.clone();
    let removed = lambdas.remove(i);
    let total: f64 = cm.lambdas.iter().sum();

    let mut delta = cm.delta.clone();
    delta.axpy(-removed, &cm.members[i].delta);
    match policy {
        Renormalization::Uniform if cm.is_uniform() => {
            let n = members.len() as f64;
            delta.scale_mut(cm.len() as f64 / n);
            lambdas = vec![1.0 / n; members.len()];
        }
        Renormalization::Uniform => {
            lambdas = vec![1.0 / members.len() as f64; members.len()];
            delta = weighted_sum(&members, &lambdas);
        }
        Renormalization::Proportional => {
            let rest = total - removed;
            if rest == 0.0 {
                return Err(Error::Composition("surviving weights sum to zero".into()));
            }
            let s = total / rest;
            delta.scale_mut(s);
            lambdas.iter_mut().for_each(|l| *l *= s);
        }
    }
    Ok(ComposedModel {
        delta,
        members,
        lambdas,
        base_fingerprint: cm.base_fingerprint.clone(),
    })
}

/// Adds a component and reweights uniformly over `N + 1` members.
pub fn add_component(cm: &ComposedModel, model: ShardModel) -> Result<ComposedModel> {
    let mut members = cm.members.clone();
    members.push(model);
    check_members(&members)?;
    let n = members.len() as f64;
    let lambdas = vec![1.0 / n; members.len()];
    let delta = if cm.is_uniform() {
        let mut d = cm.delta.scaled((n - 1.0) / n);
        d.axpy(1.0 / n, &members[members.len() - 1].delta);
        d
    } else {
        weighted_sum(&members, &lambdas)
    };
    Ok(ComposedModel {
        delta,
        members,
        lambdas,
        base_fingerprint: cm.base_fingerprint.clone(),
    })
}

/// Replaces a component with one retrained from zero on its shard minus
/// `forget_ids`, then recomposes with the same weights. `train` receives the
/// retained shard and must apply the same seed policy as the original run.
/// Forgetting the whole shard reduces to [`unlearn_subtract`].
pub fn unlearn_retrain<F>(
    cm: &ComposedModel,
    shard_id: &str,
    forget_ids: &[u64],
    mut train: F,
) -> Result<ComposedModel>
where
    F: FnMut(&Shard) -> Result<ShardModel>,
{
    let i = cm.position(shard_id)?;
    let old = &cm.members[i];
    let owned: HashSet<u64> = old.sample_ids.iter().copied().collect();
    if let Some(id) = forget_ids.iter().find(|id| !owned.contains(id)) {
        return Err(Error::Parameter(format!("sample {id} is not in shard {shard_id}")));
    }
    let forget: HashSet<u64> = forget_ids.iter().copied().collect();
    let retained: Vec<u64> = old.sample_ids.iter().copied().filter(|id| !forget.contains(id)).collect();
    if retained.is_empty() {
        return unlearn_subtract(cm, shard_id, Renormalization::Uniform);
    }
    let fresh = train(&Shard {
        shard_id: shard_id.to_string(),
        sample_ids: retained.clone(),
    })?;
    if fresh.base_fingerprint != cm.base_fingerprint {
        return Err(Error::Fingerprint {
            expected: cm.base_fingerprint.clone(),
            found: fresh.base_fingerprint,
        });
    }
    if fresh.sample_ids != retained {
        return Err(Error::State("retrained shard reports different sample ids".into()));
    }
    let mut members = cm.members.clone();
    members[i] = fresh;
    compose(&members, Some(&cm.lambdas))
}

/// `‖Δ_after − Δ_before‖₂`.
pub fn delta_norm_change(before: &ComposedModel, after: &ComposedModel) -> Result<f64> {
    if before.base_fingerprint != after.base_fingerprint {
        return Err(Error::Fingerprint {
            expected: before.base_fingerprint.clone(),
            found: after.base_fingerprint.clone(),
        });
    }
    Ok(after.delta.minus(&before.delta).norm())
}

/// Fails unless `fingerprint` is the model's linearization point.
pub fn check_fingerprint(model: &TangentModel, fingerprint: &str) -> Result<()> {
    if model.fingerprint() != fingerprint {
        return Err(Error::Fingerprint {
            expected: model.fingerprint().to_string(),
            found: fingerprint.to_string(),
        });
    }
    Ok(())
}
