//! In-memory labelled datasets.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Stable identifier; survives sharding and unlearning.
    pub id: u64,
    /// `n_features x n_tokens`, one column per token.
    pub x: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_features: usize,
    pub n_tokens: usize,
    pub n_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(n_features: usize, n_tokens: usize, n_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self {
            n_features,
            n_tokens,
            n_classes,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !seen.insert(s.id) {
                return Err(Error::Data(format!("duplicate sample id {}", s.id)));
            }
            if s.label >= self.n_classes {
                return Err(Error::Data(format!(
                    "sample {} has label {} outside [0, {})",
                    s.id, s.label, self.n_classes
                )));
            }
            if s.x.shape() != [self.n_features, self.n_tokens] {
                return Err(Error::Data(format!(
                    "sample {} has shape {:?}, expected [{}, {}]",
                    s.id,
                    s.x.shape(),
                    self.n_features,
                    self.n_tokens
                )));
            }
            if !s.x.is_finite() {
                return Err(Error::Data(format!("sample {} has non-finite features", s.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    /// Samples whose id is in `ids`, in dataset order.
    pub fn subset(&self, ids: &[u64]) -> Result<Self> {
        let wanted: HashSet<u64> = ids.iter().copied().collect();
        let samples: Vec<Sample> = self.samples.iter().filter(|s| wanted.contains(&s.id)).cloned().collect();
        if samples.len() != wanted.len() {
            return Err(Error::Data(format!(
                "{} of {} requested ids are not in the dataset",
                wanted.len() - samples.len(),
                wanted.len()
            )));
        }
        Ok(Self {
            samples,
            ..self.empty_like()
        })
    }

    pub fn without(&self, ids: &[u64]) -> Self {
        let drop: HashSet<u64> = ids.iter().copied().collect();
        Self {
            samples: self.samples.iter().filter(|s| !drop.contains(&s.id)).cloned().collect(),
            ..self.empty_like()
        }
    }

    fn empty_like(&self) -> Self {
        Self {
            n_features: self.n_features,
            n_tokens: self.n_tokens,
            n_classes: self.n_classes,
            samples: Vec::new(),
        }
    }
}

mod synth;

pub use synth::{SynthSpec, SynthTask};
