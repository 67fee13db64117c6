//! Token-to-grid bridge and the transposed-convolution decoder.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, ConvTranspose2d, Float, Init, LayerNorm, LeakyRelu, Linear, Mode, ParamStore, Sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub n_blocks: usize,
    /// `n_blocks + 1` widths; the first is the token width.
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
    pub patch_side: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_blocks: 3,
            channels: vec![128, 64, 32, 16],
            leaky_slope: 0.2,
            patch_side: 8,
        }
    }
}

impl DecoderConfig {
    pub fn output_side(&self) -> usize {
        self.patch_side << self.n_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.patch_side == 0 {
            return Err(Error::Config("decoder needs at least one block and a non-empty grid".into()));
        }
        if self.channels.len() != self.n_blocks + 1 {
            return Err(Error::Config(format!(
                "channel plan has {} entries, expected {}",
                self.channels.len(),
                self.n_blocks + 1
            )));
        }
        if self.channels.windows(2).any(|w| w[1] >= w[0]) || self.channels.last() == Some(&0) {
            return Err(Error::Config(format!(
                "channel plan {:?} must strictly decrease to at least 1",
                self.channels
            )));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }
}

/// Sums the stream tokens of each grid cell and the broadcast frequency
/// token: `(B*n) x E` rows in row-major cell order. Streams of length 0 are
/// skipped.
pub fn grid_sum<F: Float>(seq: &Array2<F>, batch: usize, n_r: usize, n_d: usize) -> Result<Array2<F>> {
    let n = n_r.max(n_d);
    if n == 0 || (n_r != 0 && n_d != 0 && n_r != n_d) {
        return Err(Error::ShapeMismatch(format!("stream lengths {n_r} and {n_d} do not share a grid")));
    }
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::ShapeMismatch(format!("{n} tokens do not form a square grid")));
    }
    let l = n_r + n_d + 1;
    if seq.nrows() != batch * l {
        return Err(Error::ShapeMismatch(format!(
            "sequence has {} rows, expected {batch} x {l}",
            seq.nrows()
        )));
    }
    let mut out = Array2::zeros((batch * n, seq.ncols()));
    for b in 0..batch {
        let base = b * l;
        let mut cells = out.slice_mut(s![b * n..(b + 1) * n, ..]);
        if n_r > 0 {
            cells += &seq.slice(s![base..base + n_r, ..]);
        }
        if n_d > 0 {
            cells += &seq.slice(s![base + n_r..base + n_r + n_d, ..]);
        }
        cells += &seq.row(base + l - 1);
    }
    Ok(out)
}

fn grid_sum_backward<F: Float>(d: &Array2<F>, batch: usize, n_r: usize, n_d: usize) -> Array2<F> {
    let n = n_r.max(n_d);
    let l = n_r + n_d + 1;
    let mut out = Array2::zeros((batch * l, d.ncols()));
    for b in 0..batch {
        let base = b * l;
        let cells = d.slice(s![b * n..(b + 1) * n, ..]);
        if n_r > 0 {
            out.slice_mut(s![base..base + n_r, ..]).assign(&cells);
        }
        if n_d > 0 {
            out.slice_mut(s![base + n_r..base + n_r + n_d, ..]).assign(&cells);
        }
        out.row_mut(base + l - 1).assign(&cells.sum_axis(ndarray::Axis(0)));
    }
    out
}

#[derive(Debug, Clone)]
pub struct UpBlock<F> {
    pub conv: ConvTranspose2d<F>,
    pub bn: BatchNorm<F>,
    pub act: LeakyRelu<F>,
}

#[derive(Debug, Clone)]
pub struct Decoder<F> {
    pub cfg: DecoderConfig,
    pub store: ParamStore<F>,
    pub bridge: LayerNorm<F>,
    pub blocks: Vec<UpBlock<F>>,
    pub head: Linear<F>,
    sigmoid: Sigmoid<F>,
    streams: (usize, usize),
    batch: usize,
}

impl<F: Float> Decoder<F> {
    pub fn new(cfg: &DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        let bridge = LayerNorm::new(&mut store, "bridge.ln", cfg.channels[0]);
        let blocks = (0..cfg.n_blocks)
            .map(|i| UpBlock {
                conv: ConvTranspose2d::new(&mut store, &format!("up.{i}.conv"), cfg.channels[i], cfg.channels[i + 1], &mut init),
                bn: BatchNorm::new(&mut store, &format!("up.{i}.bn"), cfg.channels[i + 1]),
                act: LeakyRelu::new(cfg.leaky_slope),
            })
            .collect();
        let c = *cfg.channels.last().expect("validated");
        let head = Linear::new(&mut store, "head", c, 1, true, (1.0 / c as f64).sqrt(), &mut init);
        Ok(Decoder {
            cfg: cfg.clone(),
            store,
            bridge,
            blocks,
            head,
            sigmoid: Sigmoid::default(),
            streams: (0, 0),
            batch: 0,
        })
    }

    /// Layer sequence of the upsampling path, for introspection.
    pub fn layout(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        for _ in &self.blocks {
            v.extend(["conv_transpose", "batch_norm", "leaky_relu"]);
        }
        v.extend(["conv1x1", "sigmoid"]);
        v
    }

    /// Layer-normalised grid, `(B*n) x E` rows in cell order.
    pub fn tokens_to_grid(&mut self, seq: &Array2<F>, batch: usize, n_r: usize, n_d: usize) -> Result<Array2<F>> {
        if seq.ncols() != self.cfg.channels[0] {
            return Err(Error::ShapeMismatch(format!(
                "token width {} != decoder input width {}",
                seq.ncols(),
                self.cfg.channels[0]
            )));
        }
        let summed = grid_sum(seq, batch, n_r, n_d)?;
        let side = ((n_r.max(n_d)) as f64).sqrt().round() as usize;
        if side != self.cfg.patch_side {
            return Err(Error::ShapeMismatch(format!(
                "grid side {side} != configured {}",
                self.cfg.patch_side
            )));
        }
        self.streams = (n_r, n_d);
        self.batch = batch;
        Ok(self.bridge.forward(&self.store, &summed))
    }

    /// Grid rows to `B x p^2` maps in `(0, 1)`.
    pub fn decode(&mut self, grid: &Array2<F>, batch: usize, mode: Mode) -> Result<Array2<F>> {
        let side = self.cfg.patch_side;
        if grid.dim() != (batch * side * side, self.cfg.channels[0]) {
            return Err(Error::ShapeMismatch(format!(
                "grid {:?}, expected ({}, {})",
                grid.dim(),
                batch * side * side,
                self.cfg.channels[0]
            )));
        }
        let mut h = grid.clone();
        let mut s = side;
        for blk in &mut self.blocks {
            h = blk.conv.forward(&self.store, &h, batch, s);
            h = blk.bn.forward(&mut self.store, &h, mode);
            h = blk.act.forward(&h);
            s *= 2;
        }
        let y = self.sigmoid.forward(&self.head.forward(&self.store, &h));
        Ok(y.into_shape_with_order((batch, s * s)).expect("contiguous"))
    }

    pub fn forward(&mut self, seq: &Array2<F>, batch: usize, n_r: usize, n_d: usize, mode: Mode) -> Result<Array2<F>> {
        let grid = self.tokens_to_grid(seq, batch, n_r, n_d)?;
        self.decode(&grid, batch, mode)
    }

    /// Gradient w.r.t. the token sequence given `d(output)` of shape `B x p^2`.
    pub fn backward(&mut self, dy: &Array2<F>) -> Array2<F> {
        let rows = dy.len();
        let d = dy.to_owned().into_shape_with_order((rows, 1)).expect("contiguous");
        let d = self.sigmoid.backward(&d);
        let mut d = self.head.backward(&mut self.store, &d);
        for blk in self.blocks.iter_mut().rev() {
            d = blk.act.backward(&d);
            d = blk.bn.backward(&mut self.store, &d);
            d = blk.conv.backward(&mut self.store, &d);
        }
        let d = self.bridge.backward(&mut self.store, &d);
        grid_sum_backward(&d, self.batch, self.streams.0, self.streams.1)
    }
}
