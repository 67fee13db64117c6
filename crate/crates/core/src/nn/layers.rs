use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn, Zip};

use super::{cast, Float, Init, Mode, ParamId, ParamStore, Role};

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    input: Option<Array2<F>>,
}

impl<F: Float> Linear<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        init: &mut Init,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            init.normal(&[fan_in, fan_out], std),
            Role::Weight,
        );
        let bias = bias.then(|| {
            ps.add(
                format!("{name}.bias"),
                ArrayD::zeros(IxDyn(&[fan_out])),
                Role::Weight,
            )
        });
        Linear {
            weight,
            bias,
            input: None,
        }
    }

    pub fn forward(&mut self, ps: &ParamStore<F>, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&ps.value2(self.weight));
        if let Some(b) = self.bias {
            let b = ps.value(b).view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
            y += &b;
        }
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, ps: &mut ParamStore<F>, dy: &Array2<F>) -> Array2<F> {
        let x = self.input.as_ref().expect("forward before backward");
        if ps.wants_grad(self.weight) {
            let gw = x.t().dot(dy);
            ps.grad2_mut(self.weight).scaled_add(F::one(), &gw);
        }
        if let Some(b) = self.bias {
            if ps.wants_grad(b) {
                let gb = dy.sum_axis(Axis(0));
                *ps.grad_mut(b) += &gb.into_dyn();
            }
        }
        dy.dot(&ps.value2(self.weight).t())
    }
}

/// Row-wise normalisation over the channel dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm<F> {
    pub gain: ParamId,
    pub bias: ParamId,
    eps: F,
    xhat: Option<Array2<F>>,
    inv_std: Option<Array1<F>>,
}

impl<F: Float> LayerNorm<F> {
    pub fn new(ps: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gain = ps.add(format!("{name}.weight"), ArrayD::ones(IxDyn(&[dim])), Role::Weight);
        let bias = ps.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[dim])), Role::Weight);
        LayerNorm {
            gain,
            bias,
            eps: cast(1e-5),
            xhat: None,
            inv_std: None,
        }
    }

    pub fn forward(&mut self, ps: &ParamStore<F>, x: &Array2<F>) -> Array2<F> {
        let n: F = cast(x.ncols() as f64);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / n;
            let is = F::one() / (var + self.eps).sqrt();
            row.mapv_inplace(|v| v * is);
            *s = is;
        }
        let g = ps.value(self.gain).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b = ps.value(self.bias).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let y = &xhat * &g + &b;
        self.xhat = Some(xhat);
        self.inv_std = Some(inv_std);
        y
    }

    pub fn backward(&mut self, ps: &mut ParamStore<F>, dy: &Array2<F>) -> Array2<F> {
        let xhat = self.xhat.as_ref().expect("forward before backward");
        let inv_std = self.inv_std.as_ref().unwrap();
        if ps.wants_grad(self.gain) {
            let gg = (dy * xhat).sum_axis(Axis(0));
            *ps.grad_mut(self.gain) += &gg.into_dyn();
        }
        if ps.wants_grad(self.bias) {
            *ps.grad_mut(self.bias) += &dy.sum_axis(Axis(0)).into_dyn();
        }
        let g = ps.value(self.gain).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let dxhat = dy * &g;
        let n: F = cast(dy.ncols() as f64);
        let mut dx = Array2::zeros(dy.raw_dim());
        Zip::from(dx.rows_mut())
            .and(dxhat.rows())
            .and(xhat.rows())
            .and(inv_std)
            .for_each(|mut out, d, xh, &is| {
                let sum_d = d.sum();
                let sum_dx = d.iter().zip(xh).fold(F::zero(), |a, (&p, &q)| a + p * q);
                Zip::from(&mut out).and(&d).and(&xh).for_each(|o, &dv, &xv| {
                    *o = is / n * (n * dv - sum_d - xv * sum_dx);
                });
            });
        dx
    }
}

/// Per-column normalisation with batch statistics (train) or running
/// statistics (eval). Rows are samples x spatial positions.
#[derive(Debug, Clone)]
pub struct BatchNorm<F> {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    eps: F,
    momentum: F,
    xhat: Option<Array2<F>>,
    inv_std: Option<Array1<F>>,
    mode: Mode,
}

impl<F: Float> BatchNorm<F> {
    pub fn new(ps: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let shape = IxDyn(&[channels]);
        BatchNorm {
            gain: ps.add(format!("{name}.weight"), ArrayD::ones(shape.clone()), Role::Weight),
            bias: ps.add(format!("{name}.bias"), ArrayD::zeros(shape.clone()), Role::Weight),
            running_mean: ps.add(format!("{name}.running_mean"), ArrayD::zeros(shape.clone()), Role::Buffer),
            running_var: ps.add(format!("{name}.running_var"), ArrayD::ones(shape), Role::Buffer),
            eps: cast(1e-5),
            momentum: cast(0.1),
            xhat: None,
            inv_std: None,
            mode: Mode::Eval,
        }
    }

    pub fn forward(&mut self, ps: &mut ParamStore<F>, x: &Array2<F>, mode: Mode) -> Array2<F> {
        let rows = x.nrows();
        let (mean, var) = match mode {
            Mode::Train => {
                let n: F = cast(rows as f64);
                let mean = x.sum_axis(Axis(0)) / n;
                let centered = x - &mean;
                let var = (&centered * &centered).sum_axis(Axis(0)) / n;
                let m = self.momentum;
                let unbiased = if rows > 1 {
                    &var * (n / (n - F::one()))
                } else {
                    var.clone()
                };
                let rm = ps.value_mut(self.running_mean);
                rm.zip_mut_with(&mean.view().into_dyn(), |r, &b| *r = (F::one() - m) * *r + m * b);
                let rv = ps.value_mut(self.running_var);
                rv.zip_mut_with(&unbiased.view().into_dyn(), |r, &b| *r = (F::one() - m) * *r + m * b);
                (mean, var)
            }
            Mode::Eval => {
                let to1 = |id| ps.value(id).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
                (to1(self.running_mean), to1(self.running_var))
            }
        };
        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        let xhat = (x - &mean) * &inv_std;
        let g = ps.value(self.gain).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b = ps.value(self.bias).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let y = &xhat * &g + &b;
        self.xhat = Some(xhat);
        self.inv_std = Some(inv_std);
        self.mode = mode;
        y
    }

    pub fn backward(&mut self, ps: &mut ParamStore<F>, dy: &Array2<F>) -> Array2<F> {
        let xhat = self.xhat.as_ref().expect("forward before backward");
        let inv_std = self.inv_std.as_ref().unwrap();
        if ps.wants_grad(self.gain) {
            *ps.grad_mut(self.gain) += &(dy * xhat).sum_axis(Axis(0)).into_dyn();
        }
        if ps.wants_grad(self.bias) {
            *ps.grad_mut(self.bias) += &dy.sum_axis(Axis(0)).into_dyn();
        }
        let g = ps.value(self.gain).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let dxhat = dy * &g;
        match self.mode {
            Mode::Eval => dxhat * inv_std,
            Mode::Train => {
                let n: F = cast(dy.nrows() as f64);
                let sum_d = dxhat.sum_axis(Axis(0));
                let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                let scale = inv_std / n;
                (dxhat * n - &sum_d - xhat * &sum_dx) * &scale
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<F> {
    mask: Option<Array2<F>>,
}

impl<F: Float> Relu<F> {
    pub fn forward(&mut self, x: &Array2<F>) -> Array2<F> {
        self.mask = Some(x.mapv(|v| if v > F::zero() { F::one() } else { F::zero() }));
        x.mapv(|v| v.max(F::zero()))
    }

    pub fn backward(&self, dy: &Array2<F>) -> Array2<F> {
        dy * self.mask.as_ref().expect("forward before backward")
    }
}

#[derive(Debug, Clone)]
pub struct LeakyRelu<F> {
    slope: F,
    input: Option<Array2<F>>,
}

impl<F: Float> LeakyRelu<F> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu {
            slope: cast(slope),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<F>) -> Array2<F> {
        let s = self.slope;
        let y = x.mapv(|v| if v > F::zero() { v } else { v * s });
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&self, dy: &Array2<F>) -> Array2<F> {
        let s = self.slope;
        let x = self.input.as_ref().expect("forward before backward");
        let mut dx = dy.clone();
        Zip::from(&mut dx).and(x).for_each(|d, &v| {
            if v <= F::zero() {
                *d = *d * s;
            }
        });
        dx
    }
}

/// Tanh approximation of GELU, as used by GPT-2.
#[derive(Debug, Clone, Default)]
pub struct Gelu<F> {
    input: Option<Array2<F>>,
}

impl<F: Float> Gelu<F> {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

    pub fn forward(&mut self, x: &Array2<F>) -> Array2<F> {
        let c: F = cast(Self::C);
        let a: F = cast(0.044715);
        let half: F = cast(0.5);
        let y = x.mapv(|v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()));
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&self, dy: &Array2<F>) -> Array2<F> {
        let c: F = cast(Self::C);
        let a: F = cast(0.044715);
        let a3: F = cast(3.0 * 0.044715);
        let half: F = cast(0.5);
        let x = self.input.as_ref().expect("forward before backward");
        let mut dx = dy.clone();
        Zip::from(&mut dx).and(x).for_each(|d, &v| {
            let u = c * (v + a * v * v * v);
            let t = u.tanh();
            let du = c * (F::one() + a3 * v * v);
            let grad = half * (F::one() + t) + half * v * (F::one() - t * t) * du;
            *d = *d * grad;
        });
        dx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid<F> {
    output: Option<Array2<F>>,
}

impl<F: Float> Sigmoid<F> {
    pub fn forward(&mut self, x: &Array2<F>) -> Array2<F> {
        let y = x.mapv(|v| F::one() / (F::one() + (-v).exp()));
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&self, dy: &Array2<F>) -> Array2<F> {
        let y = self.output.as_ref().expect("forward before backward");
        let mut dx = dy.clone();
        Zip::from(&mut dx).and(y).for_each(|d, &s| *d = *d * s * (F::one() - s));
        dx
    }
}
