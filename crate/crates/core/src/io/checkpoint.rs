//! Checkpoints for base weights, deltas, shard models and compositions.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compose::{ComposedModel, ShardModel};
use crate::error::{Error, Result};
use crate::model::{BaseWeights, ModelConfig, TangentModel, TangentWeights};
use crate::params::TensorSet;
use crate::tensor::Tensor;

use super::container::{read_container, write_container, Header};

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

const KIND_BASE: &str = "base";
const KIND_DELTA: &str = "delta";
const KIND_SHARD: &str = "shard";
const KIND_COMPOSED: &str = "composed";

pub fn ids_digest(ids: &[u64]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct BaseMeta {
    library_version: String,
    config: ModelConfig,
    fingerprint: String,
    provenance: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct DeltaMeta {
    library_version: String,
    config: ModelConfig,
    base_fingerprint: String,
    provenance: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardProvenance {
    pub shard_id: String,
    pub sample_ids: Vec<u64>,
    pub sample_ids_digest: String,
    pub train_config_digest: String,
}

impl ShardProvenance {
    fn of(m: &ShardModel) -> Self {
        Self {
            shard_id: m.shard_id.clone(),
            sample_ids: m.sample_ids.clone(),
            sample_ids_digest: ids_digest(&m.sample_ids),
            train_config_digest: m.train_config_digest.clone(),
        }
    }

    fn into_model(self, delta: TangentWeights, base_fingerprint: String) -> Result<ShardModel> {
        if ids_digest(&self.sample_ids) != self.sample_ids_digest {
            return Err(Error::Data(format!("sample id digest mismatch for shard {}", self.shard_id)));
        }
        Ok(ShardModel {
            shard_id: self.shard_id,
            delta,
            base_fingerprint,
            sample_ids: self.sample_ids,
            train_config_digest: self.train_config_digest,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ShardMeta {
    library_version: String,
    config: ModelConfig,
    base_fingerprint: String,
    shard: ShardProvenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct Component {
    lambda: f64,
    #[serde(flatten)]
    shard: ShardProvenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct ComposedMeta {
    library_version: String,
    config: ModelConfig,
    base_fingerprint: String,
    components: Vec<Component>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn open(path: &Path) -> Result<(Header, Vec<(String, Tensor)>)> {
    let f = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_container(BufReader::new(f)).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn expect_kind(path: &Path, header: &Header, kind: &str) -> Result<()> {
    if header.kind != kind {
        return Err(Error::Data(format!(
            "{}: expected a {kind} checkpoint, found {}",
            path.display(),
            header.kind
        )));
    }
    Ok(())
}

fn meta<T: for<'de> Deserialize<'de>>(path: &Path, header: &Header) -> Result<T> {
    serde_json::from_value(header.meta.clone())
        .map_err(|e| Error::Data(format!("{}: malformed metadata: {e}", path.display())))
}

fn named<T: TensorSet>(set: &T, names: Vec<String>, prefix: &str) -> Vec<(String, Tensor)> {
    names
        .into_iter()
        .zip(set.tensors())
        .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
        .collect()
}

fn check_fingerprint(model: &TangentModel, found: &str) -> Result<()> {
    if model.fingerprint() != found {
        return Err(Error::Fingerprint {
            expected: model.fingerprint().to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

fn write(path: &Path, kind: &str, meta: impl Serialize, tensors: &[(String, Tensor)]) -> Result<()> {
    let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_container(create(path)?, kind, serde_json::to_value(meta)?, &refs)
}

/// Stores the model's configuration and base weights.
pub fn save_base(path: &Path, model: &TangentModel, provenance: serde_json::Value) -> Result<()> {
    let meta = BaseMeta {
        library_version: LIBRARY_VERSION.into(),
        config: model.config().clone(),
        fingerprint: model.fingerprint().into(),
        provenance,
    };
    write(path, KIND_BASE, meta, &named(model.base(), model.base().tensor_names(), ""))
}

pub fn load_base(path: &Path) -> Result<(TangentModel, serde_json::Value)> {
    let (header, tensors) = open(path)?;
    expect_kind(path, &header, KIND_BASE)?;
    let meta: BaseMeta = meta(path, &header)?;
    let base = BaseWeights::from_named(&meta.config, tensors)?;
    let model = TangentModel::new(meta.config, base)?;
    if model.fingerprint() != meta.fingerprint {
        return Err(Error::Data(format!(
            "{}: stored fingerprint does not match the weights (corrupt checkpoint)",
            path.display()
        )));
    }
    Ok((model, meta.provenance))
}

pub fn save_delta(path: &Path, model: &TangentModel, delta: &TangentWeights, provenance: serde_json::Value) -> Result<()> {
    delta.check_structure(model.config(), model.base())?;
    let meta = DeltaMeta {
        library_version: LIBRARY_VERSION.into(),
        config: model.config().clone(),
        base_fingerprint: model.fingerprint().into(),
        provenance,
    };
    write(path, KIND_DELTA, meta, &named(delta, delta.tensor_names(), ""))
}

/// Loads a delta trained against `model`'s linearization point.
pub fn load_delta(path: &Path, model: &TangentModel) -> Result<(TangentWeights, serde_json::Value)> {
    let (header, tensors) = open(path)?;
    expect_kind(path, &header, KIND_DELTA)?;
    let meta: DeltaMeta = meta(path, &header)?;
    check_fingerprint(model, &meta.base_fingerprint)?;
    let delta = TangentWeights::from_named(model.config(), model.base(), tensors)?;
    Ok((delta, meta.provenance))
}

pub fn save_shard(path: &Path, model: &TangentModel, shard: &ShardModel) -> Result<()> {
    check_fingerprint(model, &shard.base_fingerprint)?;
    let meta = ShardMeta {
        library_version: LIBRARY_VERSION.into(),
        config: model.config().clone(),
        base_fingerprint: shard.base_fingerprint.clone(),
        shard: ShardProvenance::of(shard),
    };
    write(path, KIND_SHARD, meta, &named(&shard.delta, shard.delta.tensor_names(), ""))
}

pub fn load_shard(path: &Path, model: &TangentModel) -> Result<ShardModel> {
    let (header, tensors) = open(path)?;
    expect_kind(path, &header, KIND_SHARD)?;
    let meta: ShardMeta = meta(path, &header)?;
    check_fingerprint(model, &meta.base_fingerprint)?;
    let delta = TangentWeights::from_named(model.config(), model.base(), tensors)?;
    meta.shard.into_model(delta, meta.base_fingerprint)
}

/// Stores the composed delta followed by every member delta, so that
/// members can later be subtracted without their original files.
pub fn save_composed(path: &Path, model: &TangentModel, cm: &ComposedModel) -> Result<()> {
    check_fingerprint(model, &cm.base_fingerprint)?;
    let mut tensors = named(&cm.delta, cm.delta.tensor_names(), "");
    for (k, m) in cm.members.iter().enumerate() {
        tensors.extend(named(&m.delta, m.delta.tensor_names(), &format!("members.{k}.")));
    }
    let meta = ComposedMeta {
        library_version: LIBRARY_VERSION.into(),
        config: model.config().clone(),
        base_fingerprint: cm.base_fingerprint.clone(),
        components: cm
            .members
            .iter()
            .zip(&cm.lambdas)
            .map(|(m, &lambda)| Component {
                lambda,
                shard: ShardProvenance::of(m),
            })
            .collect(),
    };
    write(path, KIND_COMPOSED, meta, &tensors)
}

pub fn load_composed(path: &Path, model: &TangentModel) -> Result<ComposedModel> {
    let (header, tensors) = open(path)?;
    expect_kind(path, &header, KIND_COMPOSED)?;
    let meta: ComposedMeta = meta(path, &header)?;
    check_fingerprint(model, &meta.base_fingerprint)?;
    let per = model.zero_delta().tensors().len();
    if tensors.len() != per * (meta.components.len() + 1) {
        return Err(Error::Data(format!(
            "{}: expected {} tensors for {} components",
            path.display(),
            per * (meta.components.len() + 1),
            meta.components.len()
        )));
    }
    let mut chunks = tensors.chunks(per);
    let delta = TangentWeights::from_named(model.config(), model.base(), chunks.next().unwrap_or(&[]).to_vec())?;
    let mut members = Vec::new();
    let mut lambdas = Vec::new();
    for (k, (comp, chunk)) in meta.components.into_iter().zip(chunks).enumerate() {
        let prefix = format!("members.{k}.");
        let stripped = chunk
            .iter()
            .map(|(n, t)| {
                n.strip_prefix(&prefix)
                    .map(|s| (s.to_string(), t.clone()))
                    .ok_or_else(|| Error::Data(format!("{}: unexpected tensor {n}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        let d = TangentWeights::from_named(model.config(), model.base(), stripped)?;
        lambdas.push(comp.lambda);
        members.push(comp.shard.into_model(d, meta.base_fingerprint.clone())?);
    }
    Ok(ComposedModel {
        delta,
        members,
        lambdas,
        base_fingerprint: meta.base_fingerprint,
    })
}
