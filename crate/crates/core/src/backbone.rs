//! GPT-2 shaped transformer stack with attention and feed-forward weights
//! frozen and layer norms left trainable.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::weights::{self, TensorRecord};
use crate::nn::{cast, CausalSelfAttention, Float, Gelu, Init, LayerNorm, Linear, ParamStore};

pub const DEFAULT_MAX_SEQ: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "path")]
pub enum WeightSource {
    RandomInit,
    ImportedWeights(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub causal: bool,
    pub max_seq: usize,
    pub source: WeightSource,
    /// Freeze attention and feed-forward tensors after building.
    pub freeze: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n_layers: 2,
            dim: 128,
            n_heads: 4,
            mlp_ratio: 4,
            causal: true,
            max_seq: DEFAULT_MAX_SEQ,
            source: WeightSource::RandomInit,
            freeze: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        if self.dim == 0 || self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.n_heads
            )));
        }
        if self.mlp_ratio == 0 || self.max_seq == 0 {
            return Err(Error::Config("mlp ratio and max sequence length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block<F> {
    pub ln_1: LayerNorm<F>,
    pub attn: CausalSelfAttention<F>,
    pub ln_2: LayerNorm<F>,
    pub c_fc: Linear<F>,
    gelu: Gelu<F>,
    pub c_proj: Linear<F>,
}

impl<F: Float> Block<F> {
    fn new(ps: &mut ParamStore<F>, i: usize, cfg: &BackboneConfig, init: &mut Init) -> Self {
        let e = cfg.dim;
        let proj_std = 0.02 / ((2 * cfg.n_layers) as f64).sqrt();
        let p = format!("h.{i}");
        Block {
            ln_1: LayerNorm::new(ps, &format!("{p}.ln_1"), e),
            attn: CausalSelfAttention::new(ps, &format!("{p}.attn"), e, cfg.n_heads, cfg.causal, proj_std, init),
            ln_2: LayerNorm::new(ps, &format!("{p}.ln_2"), e),
            c_fc: Linear::new(ps, &format!("{p}.mlp.c_fc"), e, cfg.mlp_ratio * e, true, 0.02, init),
            gelu: Gelu::default(),
            c_proj: Linear::new(ps, &format!("{p}.mlp.c_proj"), cfg.mlp_ratio * e, e, true, proj_std, init),
        }
    }

    fn forward(&mut self, ps: &ParamStore<F>, x: &Array2<F>, batch: usize, seq: usize) -> Array2<F> {
        let h = self.ln_1.forward(ps, x);
        let x = x + &self.attn.forward(ps, &h, batch, seq);
        let h = self.ln_2.forward(ps, &x);
        let h = self.c_fc.forward(ps, &h);
        let h = self.gelu.forward(&h);
        &x + &self.c_proj.forward(ps, &h)
    }

    fn backward(&mut self, ps: &mut ParamStore<F>, dy: &Array2<F>) -> Array2<F> {
        let d = self.c_proj.backward(ps, dy);
        let d = self.gelu.backward(&d);
        let d = self.c_fc.backward(ps, &d);
        let dx = dy + &self.ln_2.backward(ps, &d);
        let d = self.attn.backward(ps, &dx);
        &dx + &self.ln_1.backward(ps, &d)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamPartition {
    pub frozen: BTreeSet<String>,
    pub trainable: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct Backbone<F> {
    pub cfg: BackboneConfig,
    pub store: ParamStore<F>,
    pub blocks: Vec<Block<F>>,
    pub ln_f: LayerNorm<F>,
    shape: (usize, usize),
}

/// Attention and feed-forward tensors, by name.
pub fn is_frozen_by_policy(name: &str) -> bool {
    name.contains(".attn.") || name.contains(".mlp.")
}

pub fn build_backbone<F: Float>(cfg: &BackboneConfig, seed: u64) -> Result<Backbone<F>> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let mut store = ParamStore::new();
    let blocks = (0..cfg.n_layers)
        .map(|i| Block::new(&mut store, i, cfg, &mut init))
        .collect();
    let ln_f = LayerNorm::new(&mut store, "ln_f", cfg.dim);
    let mut bb = Backbone {
        cfg: cfg.clone(),
        store,
        blocks,
        ln_f,
        shape: (0, 0),
    };
    if let WeightSource::ImportedWeights(path) = &cfg.source {
        bb.import_weights(path).map_err(|e| match e {
            Error::ShapeMismatch(m) => Error::ConfigMismatch(m),
            other => other,
        })?;
    }
    if cfg.freeze {
        bb.apply_freeze_policy();
    }
    Ok(bb)
}

impl<F: Float> Backbone<F> {
    /// Freezes every attention and feed-forward tensor; layer norms stay trainable.
    pub fn apply_freeze_policy(&mut self) -> ParamPartition {
        for e in self.store.entries_mut() {
            e.frozen = is_frozen_by_policy(&e.name);
        }
        self.partition()
    }

    pub fn partition(&self) -> ParamPartition {
        let mut p = ParamPartition::default();
        for e in self.store.entries() {
            if e.frozen {
                p.frozen.insert(e.name.clone());
            } else {
                p.trainable.insert(e.name.clone());
            }
        }
        p
    }

    /// `x` holds `batch` sequences of `seq` rows, width `E`.
    pub fn forward(&mut self, x: &Array2<F>, batch: usize, seq: usize) -> Result<Array2<F>> {
        if seq > self.cfg.max_seq {
            return Err(Error::LengthOverflow {
                len: seq,
                max: self.cfg.max_seq,
            });
        }
        if x.dim() != (batch * seq, self.cfg.dim) {
            return Err(Error::ShapeMismatch(format!(
                "backbone input {:?}, expected ({}, {})",
                x.dim(),
                batch * seq,
                self.cfg.dim
            )));
        }
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward(&self.store, &h, batch, seq);
        }
        self.shape = (batch, seq);
        Ok(self.ln_f.forward(&self.store, &h))
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Array2<F> {
        let mut d = self.ln_f.backward(&mut self.store, dy);
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&mut self.store, &d);
        }
        d
    }

    /// Loads every tensor of this stack from a weight file. Names may carry a
    /// `transformer.` prefix; layers beyond `n_layers` are ignored.
    pub fn import_weights(&mut self, path: &Path) -> Result<()> {
        let records = weights::read_file(path)?;
        self.load_records(&records)
    }

    pub fn load_records(&mut self, records: &[TensorRecord]) -> Result<()> {
        let find = |name: &str| {
            records.iter().find(|r| {
                r.name == name || r.name.strip_prefix("transformer.").is_some_and(|n| n == name)
            })
        };
        let mut staged = Vec::new();
        for (i, e) in self.store.entries().iter().enumerate() {
            let r = find(&e.name).ok_or_else(|| Error::MissingTensor(e.name.clone()))?;
            if r.dims != e.value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{}: model {:?}, file {:?}",
                    e.name,
                    e.value.shape(),
                    r.dims
                )));
            }
            staged.push((i, r));
        }
        for (i, r) in staged {
            let e = &mut self.store.entries_mut()[i];
            e.value = ArrayD::from_shape_vec(IxDyn(&r.dims), r.data.iter().map(|&v| cast(v as f64)).collect())
                .expect("checked shape");
        }
        Ok(())
    }

    pub fn last_shape(&self) -> (usize, usize) {
        self.shape
    }
}
