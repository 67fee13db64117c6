//! Turns RGB and depth images plus the carrier frequency into one token
//! sequence: strided-conv patch tokens with learned position tables per
//! stream, and a single frequency token from a small MLP.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cast, extract_patches, BatchNorm, Float, Init, Linear, Mode, ParamId, ParamStore, Relu, Role};
use crate::scene::{ImageKind, SensingImage};

/// Which image streams enter the fused sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modalities {
    pub rgb: bool,
    pub depth: bool,
}

impl Modalities {
    pub const RGBD: Modalities = Modalities { rgb: true, depth: true };
    pub const RGB: Modalities = Modalities { rgb: true, depth: false };
    pub const DEPTH: Modalities = Modalities { rgb: false, depth: true };

    pub fn label(self) -> &'static str {
        match (self.rgb, self.depth) {
            (true, true) => "rgb-d",
            (true, false) => "rgb",
            (false, true) => "depth",
            (false, false) => "none",
        }
    }
}

impl Default for Modalities {
    fn default() -> Self {
        Modalities::RGBD
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub kernel: usize,
    pub dim: usize,
    pub resolution: usize,
    /// Depth values are divided by this and clamped to `[0, 1]`.
    pub depth_scale_m: f64,
    pub frequency_unit_hz: f64,
    pub freq_hidden: usize,
    pub position_std: f64,
    pub trainable_positions: bool,
    pub modalities: Modalities,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            kernel: 8,
            dim: 128,
            resolution: 64,
            depth_scale_m: 250.0,
            frequency_unit_hz: 1e9,
            freq_hidden: 64,
            position_std: 0.02,
            trainable_positions: true,
            modalities: Modalities::RGBD,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.resolution == 0 || self.resolution % self.kernel != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by kernel {}",
                self.resolution, self.kernel
            )));
        }
        if self.dim == 0 || self.freq_hidden == 0 {
            return Err(Error::Config("embedding widths must be positive".into()));
        }
        if !(self.depth_scale_m > 0.0) || !(self.frequency_unit_hz > 0.0) {
            return Err(Error::Config("depth scale and frequency unit must be positive".into()));
        }
        if !self.modalities.rgb && !self.modalities.depth {
            return Err(Error::Config("at least one image stream is required".into()));
        }
        Ok(())
    }

    /// Side of the patch grid.
    pub fn patch_side(&self) -> usize {
        self.resolution / self.kernel
    }

    /// Tokens per image stream.
    pub fn patches(&self) -> usize {
        self.patch_side() * self.patch_side()
    }

    pub fn stream_lengths(&self) -> (usize, usize) {
        let n = self.patches();
        (
            if self.modalities.rgb { n } else { 0 },
            if self.modalities.depth { n } else { 0 },
        )
    }

    pub fn seq_len(&self) -> usize {
        let (r, d) = self.stream_lengths();
        r + d + 1
    }
}

/// `rgb / 255` as a `3 x r x r` planar tensor.
pub fn normalize_rgb(img: &SensingImage) -> Result<ndarray::Array3<f32>> {
    let bytes = img
        .rgb_bytes()
        .filter(|_| img.kind == ImageKind::Rgb && img.channels == 3)
        .ok_or_else(|| Error::ShapeMismatch("expected a 3-channel rgb image".into()))?;
    let (h, w) = (img.height, img.width);
    if bytes.len() != h * w * 3 {
        return Err(Error::ShapeMismatch(format!("rgb payload {} != {h}x{w}x3", bytes.len())));
    }
    let hwc = ndarray::ArrayView3::from_shape((h, w, 3), bytes).expect("checked length");
    Ok(hwc.permuted_axes([2, 0, 1]).mapv(|v| v as f32 / 255.0))
}

/// `depth / scale` clamped to `[0, 1]`, as `1 x r x r`.
pub fn normalize_depth(img: &SensingImage, scale_m: f64) -> Result<ndarray::Array3<f32>> {
    let vals = img
        .depth_values()
        .filter(|_| img.kind == ImageKind::Depth && img.channels == 1)
        .ok_or_else(|| Error::ShapeMismatch("expected a 1-channel depth image".into()))?;
    let (h, w) = (img.height, img.width);
    if vals.len() != h * w {
        return Err(Error::ShapeMismatch(format!("depth payload {} != {h}x{w}", vals.len())));
    }
    let inv = (1.0 / scale_m) as f32;
    Ok(ndarray::Array3::from_shape_fn((1, h, w), |(_, y, x)| {
        (vals[y * w + x] * inv).clamp(0.0, 1.0)
    }))
}

/// MLP input for a carrier frequency: `log10(f / unit)`.
pub fn frequency_input(frequency_hz: f64, unit_hz: f64) -> Result<f64> {
    if !(frequency_hz > 0.0) || !frequency_hz.is_finite() {
        return Err(Error::NonPositiveFrequency(frequency_hz));
    }
    Ok((frequency_hz / unit_hz).log10())
}

/// Patch tokens of one stream for a batch: `(B*n) x E`, row `b*n + i` is
/// patch `(i / n_p, i % n_p)` of sample `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens<F> {
    pub tokens: Array2<F>,
    pub stream: ImageKind,
}

/// Strided convolution (kernel = stride = k, no bias) then batch norm then ReLU.
#[derive(Debug, Clone)]
pub struct Patchifier<F> {
    pub proj: Linear<F>,
    pub bn: BatchNorm<F>,
    relu: Relu<F>,
    channels: usize,
    kernel: usize,
}

impl<F: Float> Patchifier<F> {
    pub fn new(ps: &mut ParamStore<F>, name: &str, channels: usize, kernel: usize, dim: usize, init: &mut Init) -> Self {
        let fan_in = channels * kernel * kernel;
        Patchifier {
            proj: Linear::new(ps, &format!("{name}.proj"), fan_in, dim, false, (2.0 / fan_in as f64).sqrt(), init),
            bn: BatchNorm::new(ps, &format!("{name}.bn"), dim),
            relu: Relu::default(),
            channels,
            kernel,
        }
    }

    pub fn forward(&mut self, ps: &mut ParamStore<F>, images: ArrayView4<'_, F>, mode: Mode) -> Result<Array2<F>> {
        let (_, c, h, w) = images.dim();
        if c != self.channels || h != w || h % self.kernel != 0 {
            return Err(Error::ShapeMismatch(format!(
                "patchifier expects {} x r x r with r divisible by {}, got {c} x {h} x {w}",
                self.channels, self.kernel
            )));
        }
        let cols = extract_patches(images, self.kernel);
        let y = self.proj.forward(ps, &cols);
        let y = self.bn.forward(ps, &y, mode);
        Ok(self.relu.forward(&y))
    }

    pub fn backward(&mut self, ps: &mut ParamStore<F>, dy: &Array2<F>) {
        let d = self.relu.backward(dy);
        let d = self.bn.backward(ps, &d);
        self.proj.backward(ps, &d);
    }
}

/// Adds the `n x E` table to every sample's block of `(B*n) x E` tokens.
pub fn add_positions<F: Float>(tokens: &Array2<F>, table: ArrayView2<'_, F>) -> Result<Array2<F>> {
    let (n, e) = table.dim();
    if n == 0 || tokens.ncols() != e || tokens.nrows() % n != 0 {
        return Err(Error::ShapeMismatch(format!(
            "tokens {:?} do not tile position table {:?}",
            tokens.dim(),
            table.dim()
        )));
    }
    let mut out = tokens.clone();
    for mut block in out.axis_chunks_iter_mut(Axis(0), n) {
        block += &table;
    }
    Ok(out)
}

/// Frequency MLP: `Linear(1, hidden) -> ReLU -> Linear(hidden, E)`.
#[derive(Debug, Clone)]
pub struct FreqMlp<F> {
    pub fc1: Linear<F>,
    relu: Relu<F>,
    pub fc2: Linear<F>,
}

impl<F: Float> FreqMlp<F> {
    pub fn new(ps: &mut ParamStore<F>, hidden: usize, dim: usize, init: &mut Init) -> Self {
        FreqMlp {
            fc1: Linear::new(ps, "freq.fc1", 1, hidden, true, 1.0, init),
            relu: Relu::default(),
            fc2: Linear::new(ps, "freq.fc2", hidden, dim, true, (1.0 / hidden as f64).sqrt(), init),
        }
    }

    /// `inputs` are already log-scaled; one output row per input.
    pub fn forward(&mut self, ps: &ParamStore<F>, inputs: &[f64]) -> Array2<F> {
        let x = Array2::from_shape_fn((inputs.len(), 1), |(i, _)| cast(inputs[i]));
        let h = self.fc1.forward(ps, &x);
        let h = self.relu.forward(&h);
        self.fc2.forward(ps, &h)
    }

    pub fn backward(&mut self, ps: &mut ParamStore<F>, dy: &Array2<F>) {
        let d = self.fc2.backward(ps, dy);
        let d = self.relu.backward(&d);
        self.fc1.backward(ps, &d);
    }
}

/// Per sample: `n_r` rgb rows, then `n_d` depth rows, then one frequency row.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSequence<F> {
    pub tokens: Array2<F>,
    pub batch: usize,
    pub n_r: usize,
    pub n_d: usize,
}

impl<F: Float> FusedSequence<F> {
    pub fn seq_len(&self) -> usize {
        self.n_r + self.n_d + 1
    }

    pub fn sample(&self, b: usize) -> ArrayView2<'_, F> {
        let l = self.seq_len();
        self.tokens.slice(s![b * l..(b + 1) * l, ..])
    }

    pub fn rgb(&self, b: usize) -> ArrayView2<'_, F> {
        let l = self.seq_len();
        self.tokens.slice(s![b * l..b * l + self.n_r, ..])
    }

    pub fn depth(&self, b: usize) -> ArrayView2<'_, F> {
        let l = self.seq_len();
        self.tokens.slice(s![b * l + self.n_r..b * l + self.n_r + self.n_d, ..])
    }

    pub fn freq(&self, b: usize) -> ArrayView2<'_, F> {
        let l = self.seq_len();
        self.tokens.slice(s![(b + 1) * l - 1..(b + 1) * l, ..])
    }
}

/// Concatenates per-sample blocks in the order rgb, depth, frequency.
/// Absent streams contribute no rows.
pub fn fuse<F: Float>(
    rgb: Option<&Array2<F>>,
    depth: Option<&Array2<F>>,
    freq: &Array2<F>,
) -> Result<FusedSequence<F>> {
    let batch = freq.nrows();
    let e = freq.ncols();
    if batch == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let per = |t: Option<&Array2<F>>, what: &str| -> Result<usize> {
        match t {
            None => Ok(0),
            Some(t) if t.ncols() == e && t.nrows() % batch == 0 => Ok(t.nrows() / batch),
            Some(t) => Err(Error::ShapeMismatch(format!(
                "{what} tokens {:?} incompatible with batch {batch} and width {e}",
                t.dim()
            ))),
        }
    };
    let (n_r, n_d) = (per(rgb, "rgb")?, per(depth, "depth")?);
    let l = n_r + n_d + 1;
    let mut tokens = Array2::zeros((batch * l, e));
    for b in 0..batch {
        let base = b * l;
        if let Some(r) = rgb {
            tokens.slice_mut(s![base..base + n_r, ..]).assign(&r.slice(s![b * n_r..(b + 1) * n_r, ..]));
        }
        if let Some(d) = depth {
            tokens
                .slice_mut(s![base + n_r..base + n_r + n_d, ..])
                .assign(&d.slice(s![b * n_d..(b + 1) * n_d, ..]));
        }
        tokens.row_mut(base + l - 1).assign(&freq.row(b));
    }
    Ok(FusedSequence { tokens, batch, n_r, n_d })
}

/// Inverse of [`fuse`] for gradients.
fn unfuse<F: Float>(d: &Array2<F>, batch: usize, n_r: usize, n_d: usize) -> (Array2<F>, Array2<F>, Array2<F>) {
    let l = n_r + n_d + 1;
    let e = d.ncols();
    let mut dr = Array2::zeros((batch * n_r, e));
    let mut dd = Array2::zeros((batch * n_d, e));
    let mut df = Array2::zeros((batch, e));
    for b in 0..batch {
        let base = b * l;
        dr.slice_mut(s![b * n_r..(b + 1) * n_r, ..]).assign(&d.slice(s![base..base + n_r, ..]));
        dd.slice_mut(s![b * n_d..(b + 1) * n_d, ..])
            .assign(&d.slice(s![base + n_r..base + n_r + n_d, ..]));
        df.row_mut(b).assign(&d.row(base + l - 1));
    }
    (dr, dd, df)
}

/// A batch of normalised model inputs. Absent streams may be empty arrays.
#[derive(Debug, Clone)]
pub struct EmbedInput<F> {
    /// `B x 3 x r x r`.
    pub rgb: Array4<F>,
    /// `B x 1 x r x r`.
    pub depth: Array4<F>,
    pub frequency_hz: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Stream<F> {
    patch: Patchifier<F>,
    pos: ParamId,
}

#[derive(Debug, Clone)]
pub struct Embedding<F> {
    pub cfg: EmbedConfig,
    pub store: ParamStore<F>,
    rgb: Option<Stream<F>>,
    depth: Option<Stream<F>>,
    pub freq: FreqMlp<F>,
    batch: usize,
}

impl<F: Float> Embedding<F> {
    pub fn new(cfg: &EmbedConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        let n = cfg.patches();
        let stream = |store: &mut ParamStore<F>, init: &mut Init, name: &str, channels| {
            let patch = Patchifier::new(store, name, channels, cfg.kernel, cfg.dim, init);
            let pos = store.add(format!("{name}.pos"), init.normal(&[n, cfg.dim], cfg.position_std), Role::Weight);
            store.entry_mut(pos).frozen = !cfg.trainable_positions;
            Stream { patch, pos }
        };
        let rgb = cfg.modalities.rgb.then(|| stream(&mut store, &mut init, "rgb", 3));
        let depth = cfg.modalities.depth.then(|| stream(&mut store, &mut init, "depth", 1));
        let freq = FreqMlp::new(&mut store, cfg.freq_hidden, cfg.dim, &mut init);
        Ok(Embedding {
            cfg: cfg.clone(),
            store,
            rgb,
            depth,
            freq,
            batch: 0,
        })
    }

    pub fn position_table(&self, kind: ImageKind) -> Option<ArrayView2<'_, F>> {
        let s = match kind {
            ImageKind::Rgb => self.rgb.as_ref(),
            ImageKind::Depth => self.depth.as_ref(),
        }?;
        Some(self.store.value2(s.pos))
    }

    /// Patch tokens before positions are added.
    pub fn patchify(&mut self, kind: ImageKind, images: ArrayView4<'_, F>, mode: Mode) -> Result<PatchTokens<F>> {
        let r = self.cfg.resolution;
        if images.dim().2 != r || images.dim().3 != r {
            return Err(Error::ShapeMismatch(format!(
                "expected {r} x {r} images, got {} x {}",
                images.dim().2,
                images.dim().3
            )));
        }
        let s = match kind {
            ImageKind::Rgb => self.rgb.as_mut(),
            ImageKind::Depth => self.depth.as_mut(),
        }
        .ok_or_else(|| Error::ConfigMismatch(format!("{kind:?} stream is disabled")))?;
        let tokens = s.patch.forward(&mut self.store, images, mode)?;
        Ok(PatchTokens { tokens, stream: kind })
    }

    pub fn embed_frequency(&mut self, frequency_hz: &[f64]) -> Result<Array2<F>> {
        let xs = frequency_hz
            .iter()
            .map(|&f| frequency_input(f, self.cfg.frequency_unit_hz))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.freq.forward(&self.store, &xs))
    }

    pub fn forward(&mut self, input: &EmbedInput<F>, mode: Mode) -> Result<FusedSequence<F>> {
        let batch = input.frequency_hz.len();
        let mut streams: [Option<Array2<F>>; 2] = [None, None];
        for (slot, kind, images) in [
            (0, ImageKind::Rgb, &input.rgb),
            (1, ImageKind::Depth, &input.depth),
        ] {
            let enabled = match kind {
                ImageKind::Rgb => self.cfg.modalities.rgb,
                ImageKind::Depth => self.cfg.modalities.depth,
            };
            if !enabled {
                continue;
            }
            if images.dim().0 != batch {
                return Err(Error::ShapeMismatch(format!(
                    "{kind:?} batch {} != frequency batch {batch}",
                    images.dim().0
                )));
            }
            let tokens = self.patchify(kind, images.view(), mode)?.tokens;
            let table = self.position_table(kind).expect("enabled stream");
            streams[slot] = Some(add_positions(&tokens, table)?);
        }
        let freq = self.embed_frequency(&input.frequency_hz)?;
        self.batch = batch;
        fuse(streams[0].as_ref(), streams[1].as_ref(), &freq)
    }

    pub fn backward(&mut self, d: &Array2<F>) {
        let (n_r, n_d) = self.cfg.stream_lengths();
        let (dr, dd, df) = unfuse(d, self.batch, n_r, n_d);
        for (s, g) in [(self.rgb.as_mut(), &dr), (self.depth.as_mut(), &dd)] {
            let Some(s) = s else { continue };
            if self.store.wants_grad(s.pos) {
                let n = self.cfg.patches();
                let mut gp = Array2::<F>::zeros((n, self.cfg.dim));
                for block in g.axis_chunks_iter(Axis(0), n) {
                    gp += &block;
                }
                self.store.grad2_mut(s.pos).scaled_add(F::one(), &gp);
            }
            s.patch.backward(&mut self.store, g);
        }
        self.freq.backward(&mut self.store, &df);
    }
}
