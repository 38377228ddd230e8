use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    AttentionDeltas, AttentionParams, LayerNormDeltas, LayerNormParams, LinearDeltas, LinearParams,
};
use crate::params::TensorSet;
use crate::rng::RngState;
use crate::tensor::Tensor;

use super::ModelConfig;

/// Parameters of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub proj: LinearParams,
    pub ln2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockDeltas {
    pub ln1: LayerNormDeltas,
    pub attn: AttentionDeltas,
    pub proj: LinearDeltas,
    pub ln2: LayerNormDeltas,
    pub fc1: LinearDeltas,
    pub fc2: LinearDeltas,
}

const BLOCK_PARAM_NAMES: [&str; 13] = [
    "ln1.gamma", "ln1.beta", "attn.w_q", "attn.w_k", "attn.w_v", "proj.w", "proj.b", "ln2.gamma",
    "ln2.beta", "fc1.w", "fc1.b", "fc2.w", "fc2.b",
];

impl BlockParams {
    pub fn random(cfg: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        let d = cfg.d_model;
        let hidden = cfg.hidden_dim();
        let std_d = 1.0 / (d as f64).sqrt();
        let std_h = 1.0 / (hidden as f64).sqrt();
        let ln = || LayerNormParams::new(Tensor::full(&[d], 1.0), Tensor::zeros(&[d]), cfg.ln_eps);
        let (ln1, ln2) = (ln()?, ln()?);
        Ok(Self {
            ln1,
            attn: AttentionParams::new(
                rng.truncated_normal(&[d, d], std_d),
                rng.truncated_normal(&[d, d], std_d),
                rng.truncated_normal(&[d, d], std_d),
                cfg.heads,
            )?,
            proj: LinearParams::new(rng.truncated_normal(&[d, d], std_d), Tensor::zeros(&[d]))?,
            ln2,
            fc1: LinearParams::new(rng.truncated_normal(&[hidden, d], std_d), Tensor::zeros(&[hidden]))?,
            fc2: LinearParams::new(rng.truncated_normal(&[d, hidden], std_h), Tensor::zeros(&[d]))?,
        })
    }

    pub fn zero_deltas(&self) -> BlockDeltas {
        BlockDeltas {
            ln1: self.ln1.zero_deltas(),
            attn: self.attn.zero_deltas(),
            proj: self.proj.zero_deltas(),
            ln2: self.ln2.zero_deltas(),
            fc1: self.fc1.zero_deltas(),
            fc2: self.fc2.zero_deltas(),
        }
    }
}

impl TensorSet for BlockParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.ln1.tensors();
        v.extend(self.attn.tensors());
        v.extend(self.proj.tensors());
        v.extend(self.ln2.tensors());
        v.extend(self.fc1.tensors());
        v.extend(self.fc2.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.ln1.tensors_mut();
        v.extend(self.attn.tensors_mut());
        v.extend(self.proj.tensors_mut());
        v.extend(self.ln2.tensors_mut());
        v.extend(self.fc1.tensors_mut());
        v.extend(self.fc2.tensors_mut());
        v
    }
}

impl TensorSet for BlockDeltas {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.ln1.tensors();
        v.extend(self.attn.tensors());
        v.extend(self.proj.tensors());
        v.extend(self.ln2.tensors());
        v.extend(self.fc1.tensors());
        v.extend(self.fc2.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.ln1.tensors_mut();
        v.extend(self.attn.tensors_mut());
        v.extend(self.proj.tensors_mut());
        v.extend(self.ln2.tensors_mut());
        v.extend(self.fc1.tensors_mut());
        v.extend(self.fc2.tensors_mut());
        v
    }
}

/// The frozen linearization point `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    /// Token embedding, `d x n_features`.
    pub embed: LinearParams,
    /// Positional table, `d x (n_tokens + 1)`; column 0 belongs to CLS.
    pub pos: Tensor,
    pub cls_token: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm: LayerNormParams,
    pub head: LinearParams,
    /// Re-initialized CLS token injected in front of the tunable blocks when
    /// the CLS token is linearized.
    pub tail_cls: Option<Tensor>,
}

impl BaseWeights {
    pub fn random(cfg: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = LinearParams::new(
            rng.truncated_normal(&[d, cfg.n_features], 1.0 / (cfg.n_features as f64).sqrt()),
            Tensor::zeros(&[d]),
        )?;
        let pos = rng.truncated_normal(&[d, cfg.n_tokens + 1], 0.1);
        let cls_token = rng.truncated_normal(&[d], 0.1);
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams::random(cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNormParams::new(Tensor::full(&[d], 1.0), Tensor::zeros(&[d]), cfg.ln_eps)?;
        let head = Self::random_head(cfg, rng)?;
        Ok(Self {
            embed,
            pos,
            cls_token,
            blocks,
            final_norm,
            head,
            tail_cls: None,
        })
    }

    pub(crate) fn random_head(cfg: &ModelConfig, rng: &mut RngState) -> Result<LinearParams> {
        Ok(LinearParams::new(
            rng.truncated_normal(&[cfg.n_classes, cfg.d_model], 1.0 / (cfg.d_model as f64).sqrt()),
            Tensor::zeros(&[cfg.n_classes]),
        )?)
    }

    /// Names parallel to [`TensorSet::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["embed.w".to_string(), "embed.b".into(), "pos".into(), "cls".into()];
        for i in 0..self.blocks.len() {
            names.extend(BLOCK_PARAM_NAMES.iter().map(|n| format!("blocks.{i}.{n}")));
        }
        names.extend(["final_norm.gamma", "final_norm.beta", "head.w", "head.b"].map(String::from));
        if self.tail_cls.is_some() {
            names.push("tail_cls".into());
        }
        names
    }

    /// Rebuilds weights from named tensors produced by [`Self::tensor_names`].
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut template = Self::random(cfg, &mut RngState::new(0))?;
        let has_tail = named.iter().any(|(n, _)| n == "tail_cls");
        if has_tail {
            template.tail_cls = Some(Tensor::zeros(&[cfg.d_model]));
        }
        let names = template.tensor_names();
        if names.len() != named.len() {
            return Err(Error::Data(format!(
                "expected {} base tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        for ((slot, expect), (name, t)) in template.tensors_mut().into_iter().zip(&names).zip(named) {
            if *expect != name || slot.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "base tensor {name} {:?} does not match expected {expect} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(template)
    }

    /// `w + delta` for every parameter that carries a delta.
    pub fn apply_delta(&self, cfg: &ModelConfig, delta: &TangentWeights) -> Result<Self> {
        delta.check_structure(cfg, self)?;
        let mut out = self.clone();
        let first = cfg.first_tunable();
        for (k, bd) in delta.blocks.iter().enumerate() {
            for (w, dw) in out.blocks[first + k].tensors_mut().into_iter().zip(bd.tensors()) {
                w.add_assign(dw)?;
            }
        }
        for (w, dw) in out.final_norm.tensors_mut().into_iter().zip(delta.final_norm.tensors()) {
            w.add_assign(dw)?;
        }
        for (w, dw) in out.head.tensors_mut().into_iter().zip(delta.head.tensors()) {
            w.add_assign(dw)?;
        }
        if let (Some(c), Some(dc)) = (out.tail_cls.as_mut(), delta.cls.as_ref()) {
            c.add_assign(dc)?;
        }
        Ok(out)
    }
}

impl TensorSet for BaseWeights {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.embed.tensors();
        v.push(&self.pos);
        v.push(&self.cls_token);
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend(self.final_norm.tensors());
        v.extend(self.head.tensors());
        if let Some(c) = &self.tail_cls {
            v.push(c);
        }
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.embed.tensors_mut();
        v.push(&mut self.pos);
        v.push(&mut self.cls_token);
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend(self.final_norm.tensors_mut());
        v.extend(self.head.tensors_mut());
        if let Some(c) = &mut self.tail_cls {
            v.push(c);
        }
        v
    }
}

/// Which delta tensors are trained. Every preset also trains the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TunableSubset {
    /// All deltas of the tunable blocks, final norm, head and CLS.
    #[default]
    Full,
    /// Linear-layer biases of the tunable blocks.
    BiasOnly,
    /// LayerNorm affine parameters, including the final norm.
    LayerNormOnly,
    HeadOnly,
}

impl TunableSubset {
    pub fn admits(self, name: &str) -> bool {
        if name.starts_with("head.") {
            return true;
        }
        match self {
            TunableSubset::Full => true,
            TunableSubset::BiasOnly => name.ends_with(".db"),
            TunableSubset::LayerNormOnly => name.contains("ln1.") || name.contains("ln2.") || name.starts_with("final_norm."),
            TunableSubset::HeadOnly => false,
        }
    }
}

/// The learnable deltas `Δw`, structurally parallel to the tunable part of
/// [`BaseWeights`]. Forms a vector space via [`crate::params::ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct TangentWeights {
    /// Deltas for the last `blocks.len()` blocks, in block order.
    pub blocks: Vec<BlockDeltas>,
    pub final_norm: LayerNormDeltas,
    pub head: LinearDeltas,
    pub cls: Option<Tensor>,
    /// Absolute index of the first tunable block.
    pub first_block: usize,
}

impl TangentWeights {
    pub fn zeros(cfg: &ModelConfig, base: &BaseWeights) -> Self {
        let first = cfg.first_tunable();
        Self {
            blocks: base.blocks[first..].iter().map(|b| b.zero_deltas()).collect(),
            final_norm: base.final_norm.zero_deltas(),
            head: base.head.zero_deltas(),
            cls: cfg.linearize_cls.then(|| Tensor::zeros(&[cfg.d_model])),
            first_block: first,
        }
    }

    /// Random deltas with entries `N(0, std²)`; test and demo helper.
    pub fn random(cfg: &ModelConfig, base: &BaseWeights, rng: &mut RngState, std: f64) -> Self {
        let mut out = Self::zeros(cfg, base);
        for t in out.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = rng.gaussian(&shape, 0.0, std).expect("std >= 0");
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for k in 0..self.blocks.len() {
            let i = self.first_block + k;
            names.extend(BLOCK_PARAM_NAMES.iter().map(|n| {
                let (layer, field) = n.split_once('.').expect("dotted");
                format!("blocks.{i}.{layer}.d{field}")
            }));
        }
        names.extend(["final_norm.dgamma", "final_norm.dbeta", "head.dw", "head.db"].map(String::from));
        if self.cls.is_some() {
            names.push("cls".into());
        }
        names
    }

    /// Zeroes every tensor the subset does not train.
    pub fn mask(&mut self, subset: TunableSubset) {
        if subset == TunableSubset::Full {
            return;
        }
        let names = self.tensor_names();
        for (t, name) in self.tensors_mut().into_iter().zip(names) {
            if !subset.admits(&name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn check_structure(&self, cfg: &ModelConfig, base: &BaseWeights) -> Result<()> {
        let expected = Self::zeros(cfg, base);
        let ok = self.first_block == expected.first_block
            && self.cls.is_some() == expected.cls.is_some()
            && self.tensors().len() == expected.tensors().len()
            && self
                .tensors()
                .iter()
                .zip(expected.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(
                "tangent weights do not mirror the tunable part of the base weights".into(),
            ))
        }
    }

    pub fn from_named(cfg: &ModelConfig, base: &BaseWeights, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut out = Self::zeros(cfg, base);
        let names = out.tensor_names();
        if names.len() != named.len() {
            return Err(Error::Data(format!(
                "expected {} delta tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        for ((slot, expect), (name, t)) in out.tensors_mut().into_iter().zip(&names).zip(named) {
            if *expect != name || slot.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "delta tensor {name} {:?} does not match expected {expect} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(out)
    }
}

impl TensorSet for TangentWeights {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend(self.final_norm.tensors());
        v.extend(self.head.tensors());
        if let Some(c) = &self.cls {
            v.push(c);
        }
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend(self.final_norm.tensors_mut());
        v.extend(self.head.tensors_mut());
        if let Some(c) = &mut self.cls {
            v.push(c);
        }
        v
    }
}
