//! Mixture-of-Gaussians token sequences.
//!
//! A task holds one mean matrix per class (`n_features x n_tokens`); a sample
//! of class `c` is `separation * M_c + noise * N(0, I)`. Related tasks share
//! a controllable fraction of their class means, which gives a pretraining
//! source and a downstream target with transferable features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

use super::{Dataset, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_features: usize,
    pub n_tokens: usize,
    pub separation: f64,
    pub noise: f64,
    pub task_seed: u64,
    /// Correlation between this task's class means and those of the source
    /// task drawn from `source_seed`; `None` makes an independent task.
    #[serde(default)]
    pub source_seed: Option<u64>,
    #[serde(default)]
    pub similarity: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_features: 8,
            n_tokens: 8,
            separation: 0.5,
            noise: 1.0,
            task_seed: 0,
            source_seed: None,
            similarity: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    spec: SynthSpec,
    means: Vec<Tensor>,
}

impl SynthTask {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        if spec.n_classes < 2 || spec.n_features == 0 || spec.n_tokens == 0 {
            return Err(Error::Config("synthetic task needs >= 2 classes and nonzero shapes".into()));
        }
        if !(spec.noise >= 0.0) || !spec.separation.is_finite() {
            return Err(Error::Config("noise must be >= 0 and separation finite".into()));
        }
        if !(0.0..=1.0).contains(&spec.similarity) {
            return Err(Error::Config(format!("similarity must lie in [0, 1], got {}", spec.similarity)));
        }
        let shape = [spec.n_features, spec.n_tokens];
        let draw = |seed: u64| -> Vec<Tensor> {
            let mut rng = RngState::new(seed).derive("class-means");
            (0..spec.n_classes)
                .map(|_| rng.gaussian(&shape, 0.0, 1.0).expect("unit std"))
                .collect()
        };
        let own = draw(spec.task_seed);
        let means = match spec.source_seed {
            None => own,
            Some(src) => {
                let rho = spec.similarity;
                let orth = (1.0 - rho * rho).sqrt();
                draw(src)
                    .iter()
                    .zip(&own)
                    .map(|(s, o)| {
                        let mut m = s.scale(rho);
                        m.axpy(orth, o).expect("equal shapes");
                        m
                    })
                    .collect()
            }
        };
        Ok(Self { spec, means })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    /// `n` samples with balanced labels, ids `first_id..first_id + n`.
    pub fn sample(&self, n: usize, seed: u64, first_id: u64) -> Result<Dataset> {
        let mut rng = RngState::new(seed).derive("samples");
        let k = self.spec.n_classes;
        let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        rng.shuffle(&mut labels);
        let shape = [self.spec.n_features, self.spec.n_tokens];
        let samples = labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                let mut x = rng.gaussian(&shape, 0.0, self.spec.noise)?;
                x.axpy(self.spec.separation, &self.means[label])?;
                Ok(Sample {
                    id: first_id + i as u64,
                    x,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.spec.n_features, self.spec.n_tokens, k, samples)
    }
}
