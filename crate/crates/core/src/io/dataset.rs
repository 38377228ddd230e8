//! Dataset files: the binary container and a CSV import path.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::container::{read_container, write_container};

const KIND_DATASET: &str = "dataset";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    n_samples: usize,
    n_features: usize,
    n_tokens: usize,
    n_classes: usize,
    ids: Vec<u64>,
    labels: Vec<usize>,
    provenance: serde_json::Value,
}

/// Features are stored as one `n_samples x (n_features * n_tokens)` tensor,
/// each row the row-major flattening of a sample.
pub fn save_dataset(path: &Path, data: &Dataset, provenance: serde_json::Value) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("refusing to write an empty dataset".into()));
    }
    let width = data.n_features * data.n_tokens;
    let mut flat = Vec::with_capacity(data.len() * width);
    for s in &data.samples {
        flat.extend_from_slice(s.x.data());
    }
    let x = Tensor::from_vec(&[data.len(), width], flat)?;
    let meta = DatasetMeta {
        n_samples: data.len(),
        n_features: data.n_features,
        n_tokens: data.n_tokens,
        n_classes: data.n_classes,
        ids: data.ids(),
        labels: data.samples.iter().map(|s| s.label).collect(),
        provenance,
    };
    let f = File::create(path)?;
    write_container(BufWriter::new(f), KIND_DATASET, serde_json::to_value(meta)?, &[("x".into(), &x)])
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, serde_json::Value)> {
    let ctx = |m: String| Error::Data(format!("{}: {m}", path.display()));
    let f = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let (header, tensors) = read_container(BufReader::new(f)).map_err(|e| match e {
        Error::Data(m) => ctx(m),
        other => other,
    })?;
    if header.kind != KIND_DATASET {
        return Err(ctx(format!("expected a dataset file, found {}", header.kind)));
    }
    let meta: DatasetMeta =
        serde_json::from_value(header.meta).map_err(|e| ctx(format!("malformed metadata: {e}")))?;
    let width = meta.n_features * meta.n_tokens;
    let x = match tensors.as_slice() {
        [(name, x)] if name == "x" && x.shape() == [meta.n_samples, width] => x,
        _ => return Err(ctx("feature payload does not match the header".into())),
    };
    if meta.ids.len() != meta.n_samples || meta.labels.len() != meta.n_samples {
        return Err(ctx("id or label count does not match n_samples".into()));
    }
    let samples = (0..meta.n_samples)
        .map(|i| {
            Ok(Sample {
                id: meta.ids[i],
                x: Tensor::from_vec(&[meta.n_features, meta.n_tokens], x.data()[i * width..(i + 1) * width].to_vec())?,
                label: meta.labels[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset::new(meta.n_features, meta.n_tokens, meta.n_classes, samples).map_err(|e| match e {
        Error::Data(m) => ctx(m),
        other => other,
    })?;
    Ok((data, meta.provenance))
}

/// Reads `id,label,x_0,...` rows. Features are the row-major flattening of
/// an `n_features x n_tokens` matrix, so their count must be a multiple of
/// `n_tokens`. A first line whose first field is not an integer is treated
/// as a header. `n_classes` defaults to the largest label plus one.
pub fn import_csv(path: &Path, n_tokens: usize, n_classes: Option<usize>) -> Result<Dataset> {
    if n_tokens == 0 {
        return Err(Error::Config("n_tokens must be positive".into()));
    }
    let f = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut samples = Vec::new();
    let mut width = None;
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let at = |m: String| Error::Data(format!("{}:{}: {m}", path.display(), lineno + 1));
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let id = match fields[0].parse::<u64>() {
            Ok(id) => id,
            Err(_) if lineno == 0 => continue,
            Err(_) => return Err(at(format!("invalid id {:?}", fields[0]))),
        };
        if fields.len() < 3 {
            return Err(at("expected id, label and at least one feature".into()));
        }
        let label = fields[1]
            .parse::<usize>()
            .map_err(|_| at(format!("invalid label {:?}", fields[1])))?;
        let values = fields[2..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| at(format!("invalid number {v:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None if values.len() % n_tokens != 0 => {
                return Err(at(format!(
                    "{} features is not a multiple of {n_tokens} tokens",
                    values.len()
                )));
            }
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(at(format!("expected {w} features, found {}", values.len())));
            }
            Some(_) => {}
        }
        let n_features = values.len() / n_tokens;
        samples.push(Sample {
            id,
            x: Tensor::from_vec(&[n_features, n_tokens], values).map_err(|e| at(e.to_string()))?,
            label,
        });
    }
    let width = width.ok_or_else(|| Error::Data(format!("{}: no samples", path.display())))?;
    let n_classes = n_classes.unwrap_or_else(|| samples.iter().map(|s| s.label).max().unwrap_or(0) + 1);
    Dataset::new(width / n_tokens, n_tokens, n_classes, samples)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
