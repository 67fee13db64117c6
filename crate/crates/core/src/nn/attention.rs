use ndarray::{s, Array2, Axis};

use super::{cast, Float, Init, Linear, ParamStore};

/// GPT-2 style multi-head self-attention with a fused QKV projection.
#[derive(Debug, Clone)]
pub struct CausalSelfAttention<F> {
    pub c_attn: Linear<F>,
    pub c_proj: Linear<F>,
    n_heads: usize,
    dim: usize,
    causal: bool,
    qkv: Option<Array2<F>>,
    /// Attention probabilities per (sample, head).
    probs: Vec<Array2<F>>,
    batch: usize,
    seq: usize,
}

impl<F: Float> CausalSelfAttention<F> {
    pub fn new(
        ps: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        n_heads: usize,
        causal: bool,
        proj_std: f64,
        init: &mut Init,
    ) -> Self {
        assert!(dim % n_heads == 0, "dim must be divisible by heads");
        CausalSelfAttention {
            c_attn: Linear::new(ps, &format!("{name}.c_attn"), dim, 3 * dim, true, 0.02, init),
            c_proj: Linear::new(ps, &format!("{name}.c_proj"), dim, dim, true, proj_std, init),
            n_heads,
            dim,
            causal,
            qkv: None,
            probs: Vec::new(),
            batch: 0,
            seq: 0,
        }
    }

    /// `x` holds `batch` sequences of `seq` rows each.
    pub fn forward(&mut self, ps: &ParamStore<F>, x: &Array2<F>, batch: usize, seq: usize) -> Array2<F> {
        let qkv = self.c_attn.forward(ps, x);
        let (e, hd) = (self.dim, self.dim / self.n_heads);
        let scale: F = cast(1.0 / (hd as f64).sqrt());
        let mut out = Array2::zeros((batch * seq, e));
        self.probs.clear();
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.n_heads {
                let q = qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
                let k = qkv.slice(s![rows.clone(), e + h * hd..e + (h + 1) * hd]);
                let v = qkv.slice(s![rows.clone(), 2 * e + h * hd..2 * e + (h + 1) * hd]);
                let mut p = q.dot(&k.t());
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let limit = if self.causal { i + 1 } else { seq };
                    let mut max = F::neg_infinity();
                    for j in 0..limit {
                        row[j] = row[j] * scale;
                        max = max.max(row[j]);
                    }
                    let mut sum = F::zero();
                    for j in 0..limit {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    }
                    for j in 0..seq {
                        row[j] = if j < limit { row[j] / sum } else { F::zero() };
                    }
                }
                out.slice_mut(s![rows.clone(), h * hd..(h + 1) * hd]).assign(&p.dot(&v));
                self.probs.push(p);
            }
        }
        self.qkv = Some(qkv);
        self.batch = batch;
        self.seq = seq;
        self.c_proj.forward(ps, &out)
    }

    pub fn backward(&mut self, ps: &mut ParamStore<F>, dy: &Array2<F>) -> Array2<F> {
        let dout = self.c_proj.backward(ps, dy);
        let qkv = self.qkv.as_ref().expect("forward before backward");
        let (e, hd, seq) = (self.dim, self.dim / self.n_heads, self.seq);
        let scale: F = cast(1.0 / (hd as f64).sqrt());
        let mut dqkv = Array2::zeros(qkv.raw_dim());
        for b in 0..self.batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.n_heads {
                let p = &self.probs[b * self.n_heads + h];
                let q = qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
                let k = qkv.slice(s![rows.clone(), e + h * hd..e + (h + 1) * hd]);
                let v = qkv.slice(s![rows.clone(), 2 * e + h * hd..2 * e + (h + 1) * hd]);
                let d_o = dout.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
                let dv = p.t().dot(&d_o);
                let dp = d_o.dot(&v.t());
                let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = (dp - &row_dot) * p * scale;
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![rows.clone(), h * hd..(h + 1) * hd]).assign(&dq);
                dqkv.slice_mut(s![rows.clone(), e + h * hd..e + (h + 1) * hd]).assign(&dk);
                dqkv.slice_mut(s![rows.clone(), 2 * e + h * hd..2 * e + (h + 1) * hd]).assign(&dv);
            }
        }
        self.c_attn.backward(ps, &dqkv)
    }
}
