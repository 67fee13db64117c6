//! Full pipeline: embedding, backbone, decoder, plus checkpoint I/O.

use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, Backbone, BackboneConfig, ParamPartition, WeightSource};
use crate::decode::{Decoder, DecoderConfig};
use crate::embed::{EmbedConfig, EmbedInput, Embedding, Modalities};
use crate::error::{Error, Result};
use crate::nn::weights::{self, TensorRecord};
use crate::nn::{cast, Float, Mode, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed: EmbedConfig,
    pub backbone: BackboneConfig,
    pub decode: DecoderConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small enough to train on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            embed: EmbedConfig {
                kernel: 8,
                dim: 128,
                resolution: 32,
                ..EmbedConfig::default()
            },
            backbone: BackboneConfig {
                n_layers: 2,
                dim: 128,
                n_heads: 4,
                ..BackboneConfig::default()
            },
            decode: DecoderConfig {
                n_blocks: 2,
                channels: vec![128, 64, 32],
                leaky_slope: 0.2,
                patch_side: 4,
            },
            seed: 0,
        }
    }

    /// GPT-2 small widths with six layers, 64x64 inputs and outputs.
    pub fn paper() -> Self {
        ModelConfig {
            embed: EmbedConfig {
                kernel: 8,
                dim: 768,
                resolution: 64,
                ..EmbedConfig::default()
            },
            backbone: BackboneConfig {
                n_layers: 6,
                dim: 768,
                n_heads: 12,
                ..BackboneConfig::default()
            },
            decode: DecoderConfig {
                n_blocks: 3,
                channels: vec![768, 256, 64, 16],
                leaky_slope: 0.2,
                patch_side: 8,
            },
            seed: 0,
        }
    }

    /// Same structure at a different token width: every channel plan entry
    /// is rescaled proportionally.
    pub fn with_width(mut self, dim: usize, n_heads: usize) -> Self {
        let old = self.embed.dim as f64;
        self.embed.dim = dim;
        self.backbone.dim = dim;
        self.backbone.n_heads = n_heads;
        let scaled: Vec<usize> = self
            .decode
            .channels
            .iter()
            .map(|&c| ((c as f64 * dim as f64 / old).round() as usize).max(1))
            .collect();
        self.decode.channels = scaled;
        self.decode.channels[0] = dim;
        self
    }

    pub fn with_modalities(mut self, m: Modalities) -> Self {
        self.embed.modalities = m;
        self
    }

    pub fn output_side(&self) -> usize {
        self.decode.output_side()
    }

    pub fn validate(&self) -> Result<()> {
        self.embed.validate()?;
        self.backbone.validate()?;
        self.decode.validate()?;
        if self.embed.dim != self.backbone.dim || self.decode.channels[0] != self.embed.dim {
            return Err(Error::Config(format!(
                "widths disagree: embed {}, backbone {}, decoder input {}",
                self.embed.dim, self.backbone.dim, self.decode.channels[0]
            )));
        }
        if self.decode.patch_side != self.embed.patch_side() {
            return Err(Error::Config(format!(
                "decoder grid side {} != patch grid side {}",
                self.decode.patch_side,
                self.embed.patch_side()
            )));
        }
        if self.embed.seq_len() > self.backbone.max_seq {
            return Err(Error::Config(format!(
                "sequence length {} exceeds backbone maximum {}",
                self.embed.seq_len(),
                self.backbone.max_seq
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub embed: usize,
    pub backbone: usize,
    pub decode: usize,
    pub backbone_frozen: usize,
    pub trainable: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub embed: Embedding<F>,
    pub backbone: Backbone<F>,
    pub decoder: Decoder<F>,
}

const COMPONENTS: [&str; 3] = ["embed", "backbone", "decode"];

impl<F: Float> Model<F> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        // Distinct streams per component so widths can change independently.
        let s = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Ok(Model {
            cfg: cfg.clone(),
            embed: Embedding::new(&cfg.embed, s ^ 1)?,
            backbone: build_backbone(&cfg.backbone, s ^ 2)?,
            decoder: Decoder::new(&cfg.decode, s ^ 3)?,
        })
    }

    pub fn forward(&mut self, input: &EmbedInput<F>, mode: Mode) -> Result<Array2<F>> {
        let seq = self.embed.forward(input, mode)?;
        let ctx = self.backbone.forward(&seq.tokens, seq.batch, seq.seq_len())?;
        self.decoder.forward(&ctx, seq.batch, seq.n_r, seq.n_d, mode)
    }

    /// Accumulates parameter gradients for `d(loss)/d(output)`.
    pub fn backward(&mut self, d: &Array2<F>) {
        let d = self.decoder.backward(d);
        let d = self.backbone.backward(&d);
        self.embed.backward(&d);
    }

    pub fn stores(&self) -> [&ParamStore<F>; 3] {
        [&self.embed.store, &self.backbone.store, &self.decoder.store]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore<F>; 3] {
        [&mut self.embed.store, &mut self.backbone.store, &mut self.decoder.store]
    }

    pub fn zero_grad(&mut self) {
        for s in self.stores_mut() {
            s.zero_grad();
        }
    }

    pub fn partition(&self) -> ParamPartition {
        self.backbone.partition()
    }

    /// Exact enumeration over every learnable tensor (buffers excluded).
    pub fn counts(&self) -> ParamCounts {
        let [e, b, d] = self.stores();
        let frozen = b
            .entries()
            .iter()
            .filter(|x| x.frozen && x.role == crate::nn::Role::Weight)
            .map(|x| x.numel())
            .sum();
        ParamCounts {
            embed: e.numel(),
            backbone: b.numel(),
            decode: d.numel(),
            backbone_frozen: frozen,
            trainable: e.trainable_numel() + b.trainable_numel() + d.trainable_numel(),
            total: e.numel() + b.numel() + d.numel(),
        }
    }

    /// Every tensor, buffers included, as `component.name` records.
    pub fn export(&self) -> Vec<TensorRecord> {
        let mut out = Vec::new();
        for (prefix, store) in COMPONENTS.iter().zip(self.stores()) {
            for e in store.entries() {
                out.push(TensorRecord {
                    name: format!("{prefix}.{}", e.name),
                    dims: e.value.shape().to_vec(),
                    data: e.value.iter().map(|v| v.to_f32().expect("finite")).collect(),
                });
            }
        }
        out
    }

    pub fn import(&mut self, records: &[TensorRecord]) -> Result<()> {
        for (prefix, store) in COMPONENTS.iter().zip(self.stores_mut()) {
            for e in store.entries_mut() {
                let name = format!("{prefix}.{}", e.name);
                let r = records
                    .iter()
                    .find(|r| r.name == name)
                    .ok_or_else(|| Error::MissingTensor(name.clone()))?;
                if r.dims != e.value.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "{name}: model {:?}, checkpoint {:?}",
                        e.value.shape(),
                        r.dims
                    )));
                }
                e.value = ArrayD::from_shape_vec(IxDyn(&r.dims), r.data.iter().map(|&v| cast(v as f64)).collect())
                    .expect("checked shape");
            }
        }
        Ok(())
    }

    /// Writes `config.json` and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut cfg = self.cfg.clone();
        // Weights are in the checkpoint; do not re-import on load.
        cfg.backbone.source = WeightSource::RandomInit;
        let json = serde_json::to_string_pretty(&cfg)?;
        let p = dir.join("config.json");
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        weights::write_file(&dir.join("weights.bin"), &self.export())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("config.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        let mut m = Model::new(&cfg)?;
        m.import(&weights::read_file(&dir.join("weights.bin"))?)?;
        Ok(m)
    }

    /// Same parameters in another precision.
    pub fn cast<G: Float>(&self) -> Result<Model<G>> {
        let mut m = Model::<G>::new(&self.cfg)?;
        m.embed.store.load_from(&self.embed.store)?;
        m.backbone.store.load_from(&self.backbone.store)?;
        m.decoder.store.load_from(&self.decoder.store)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed: EmbedConfig {
                kernel: 4,
                dim: 8,
                resolution: 8,
                freq_hidden: 4,
                ..Default::default()
            },
            backbone: BackboneConfig {
                n_layers: 1,
                dim: 8,
                n_heads: 2,
                ..Default::default()
            },
            decode: DecoderConfig {
                n_blocks: 1,
                channels: vec![8, 4],
                leaky_slope: 0.2,
                patch_side: 2,
            },
            seed: 4,
        }
    }

    fn input(b: usize, r: usize) -> EmbedInput<f32> {
        EmbedInput {
            rgb: Array4::from_shape_fn((b, 3, r, r), |(i, c, y, x)| ((i + c * 3 + y * 5 + x * 7) % 11) as f32 / 11.0),
            depth: Array4::from_shape_fn((b, 1, r, r), |(i, _, y, x)| ((i * 2 + y + x) % 5) as f32 / 5.0),
            frequency_hz: vec![28e9; b],
        }
    }

    #[test]
    fn profiles_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        let mut bad = ModelConfig::desk();
        bad.embed.resolution = 60;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = ModelConfig::desk();
        bad.decode.patch_side = 8;
        assert!(bad.validate().is_err());
        let narrow = ModelConfig::desk().with_width(64, 4);
        narrow.validate().unwrap();
        assert_eq!(narrow.decode.channels, vec![64, 32, 16]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::<f32>::new(&tiny()).unwrap();
        // Move running statistics off their defaults.
        m.forward(&input(2, 8), Mode::Train).unwrap();
        m.save(dir.path()).unwrap();
        let mut back = Model::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.export(), m.export());
        let x = input(1, 8);
        assert_eq!(back.forward(&x, Mode::Eval).unwrap(), m.forward(&x, Mode::Eval).unwrap());
    }

    #[test]
    fn counts_are_enumerations() {
        let m = Model::<f32>::new(&tiny()).unwrap();
        let c = m.counts();
        let by_hand: usize = m
            .stores()
            .iter()
            .flat_map(|s| s.entries())
            .filter(|e| e.role == crate::nn::Role::Weight)
            .map(|e| e.value.len())
            .sum();
        assert_eq!(c.total, by_hand);
        assert_eq!(c.total, c.embed + c.backbone + c.decode);
        assert_eq!(c.trainable, c.total - c.backbone_frozen);
        assert!(c.trainable < c.total);
    }

    #[test]
    fn cast_preserves_outputs_closely() {
        let mut m = Model::<f32>::new(&tiny()).unwrap();
        let mut d = m.cast::<f64>().unwrap();
        let x32 = input(2, 8);
        let x64 = EmbedInput {
            rgb: x32.rgb.mapv(|v| v as f64),
            depth: x32.depth.mapv(|v| v as f64),
            frequency_hz: x32.frequency_hz.clone(),
        };
        let a = m.forward(&x32, Mode::Train).unwrap();
        let b = d.forward(&x64, Mode::Train).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((*p as f64 - q).abs() < 1e-4);
        }
    }
}
