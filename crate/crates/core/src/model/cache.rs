use std::collections::HashMap;

use crate::error::Result;
use crate::tensor::Tensor;

use super::TangentModel;

/// Per-example outputs of every frozen prefix block, keyed by example id.
///
/// The base weights never change during tangent training, so the value
/// stream up to the first tunable block is a constant per example. Memory
/// cost is `examples × frozen_blocks × d_model × (n_tokens + 1)` floats.
#[derive(Debug, Clone, Default)]
pub struct ActivationCache {
    fingerprint: String,
    entries: HashMap<u64, Vec<Tensor>>,
}

impl ActivationCache {
    pub fn build<'a>(model: &TangentModel, examples: impl IntoIterator<Item = (u64, &'a Tensor)>) -> Result<Self> {
        let mut entries = HashMap::new();
        for (id, x) in examples {
            entries.insert(id, model.frozen_prefix(x)?);
        }
        Ok(Self {
            fingerprint: model.fingerprint().to_string(),
            entries,
        })
    }

    pub(crate) fn tail_input(&self, model: &TangentModel, id: u64) -> Option<&Tensor> {
        if self.fingerprint != model.fingerprint() {
            return None;
        }
        self.entries.get(&id).and_then(|v| v.last())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn float_count(&self) -> usize {
        self.entries.values().flat_map(|v| v.iter().map(|t| t.len())).sum()
    }
}
