use ndarray::{Array2, ArrayView4};

use super::{Float, Init, ParamId, ParamStore, Role};

/// Rearranges `B x C x r x r` images into non-overlapping `k x k` patches:
/// one row per patch (sample-major, then patch row-major), columns ordered
/// `(channel, ky, kx)` to match a `[out, C, k, k]` convolution kernel.
pub fn extract_patches<F: Float>(images: ArrayView4<'_, F>, k: usize) -> Array2<F> {
    let (b, c, r, _) = images.dim();
    let np = r / k;
    let mut out = Array2::zeros((b * np * np, c * k * k));
    for bi in 0..b {
        for u in 0..np {
            for v in 0..np {
                let row = bi * np * np + u * np + v;
                let mut col = 0;
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            out[[row, col]] = images[[bi, ch, u * k + ky, v * k + kx]];
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

const KERNEL: usize = 4;
const TAPS: usize = KERNEL * KERNEL;

/// Transposed convolution with kernel 4, stride 2, padding 1 (doubles the
/// spatial side) and no bias. Feature maps are `(B*H*W) x C` matrices in
/// row-major pixel order. The weight has the usual `[C_in, C_out, 4, 4]` layout.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F> {
    pub weight: ParamId,
    c_in: usize,
    c_out: usize,
    input: Option<Array2<F>>,
    batch: usize,
    side: usize,
}

impl<F: Float> ConvTranspose2d<F> {
    pub fn new(ps: &mut ParamStore<F>, name: &str, c_in: usize, c_out: usize, init: &mut Init) -> Self {
        // Each output pixel receives 4 taps per input channel.
        let std = (2.0 / (4 * c_in) as f64).sqrt();
        let weight = ps.add(
            format!("{name}.weight"),
            init.normal(&[c_in, c_out, KERNEL, KERNEL], std),
            Role::Weight,
        );
        ConvTranspose2d {
            weight,
            c_in,
            c_out,
            input: None,
            batch: 0,
            side: 0,
        }
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    /// Input pixel `(iy, ix)` with tap `(ky, kx)` lands on output
    /// `(2*iy - 1 + ky, 2*ix - 1 + kx)`.
    fn for_each_tap(side: usize, mut f: impl FnMut(usize, usize, usize)) {
        let out_side = 2 * side;
        for iy in 0..side {
            for ix in 0..side {
                let src = iy * side + ix;
                for ky in 0..KERNEL {
                    let oy = (2 * iy + ky) as isize - 1;
                    if oy < 0 || oy >= out_side as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ox = (2 * ix + kx) as isize - 1;
                        if ox < 0 || ox >= out_side as isize {
                            continue;
                        }
                        f(src, oy as usize * out_side + ox as usize, ky * KERNEL + kx);
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, ps: &ParamStore<F>, x: &Array2<F>, batch: usize, side: usize) -> Array2<F> {
        debug_assert_eq!(x.dim(), (batch * side * side, self.c_in));
        let cols = x.dot(&ps.value2(self.weight));
        let out_px = 4 * side * side;
        let mut out = Array2::zeros((batch * out_px, self.c_out));
        let in_px = side * side;
        for b in 0..batch {
            Self::for_each_tap(side, |src, dst, tap| {
                let c = cols.row(b * in_px + src);
                let mut o = out.row_mut(b * out_px + dst);
                for co in 0..self.c_out {
                    o[co] += c[co * TAPS + tap];
                }
            });
        }
        self.input = Some(x.clone());
        self.batch = batch;
        self.side = side;
        out
    }

    pub fn backward(&mut self, ps: &mut ParamStore<F>, dy: &Array2<F>) -> Array2<F> {
        let x = self.input.as_ref().expect("forward before backward");
        let (batch, side) = (self.batch, self.side);
        let in_px = side * side;
        let out_px = 4 * in_px;
        let mut dcols = Array2::zeros((batch * in_px, self.c_out * TAPS));
        for b in 0..batch {
            Self::for_each_tap(side, |src, dst, tap| {
                let g = dy.row(b * out_px + dst);
                let mut d = dcols.row_mut(b * in_px + src);
                for co in 0..self.c_out {
                    d[co * TAPS + tap] = g[co];
                }
            });
        }
        if ps.wants_grad(self.weight) {
            let gw = x.t().dot(&dcols);
            ps.grad2_mut(self.weight).scaled_add(F::one(), &gw);
        }
        dcols.dot(&ps.value2(self.weight).t())
    }
}
