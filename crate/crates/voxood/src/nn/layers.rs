//! Differentiable layers with per-layer hand-written backward passes.
//!
//! Each layer caches what its backward pass needs during forward. Gradients
//! accumulate into `Param::grad`; callers zero them between optimizer steps.
//! Forward passes validate shapes and return `Result`; backward passes assert
//! internal consistency.

use super::ops::{
    col2im, conv3x3s1_backward_dw, conv3x3s1_backward_dx, conv3x3s1_forward, conv_out_extent,
    im2col,
};
use super::scalar::Scalar;
use super::tensor::{Param, ParamSet, Tensor};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal_init<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let n: f64 = rng.sample(StandardNormal);
        T::from_f64(n * std)
    })
}

/// Largest of {8, 4, 2, 1} dividing the channel count while keeping at least
/// two channels per group. Single-channel groups would zero-center each
/// channel on its own, erasing the additive time-conditioning bias.
pub fn default_groups(channels: usize) -> usize {
    for g in [8, 4, 2] {
        if channels % g == 0 && channels / g >= 2 {
            return g;
        }
    }
    1
}

// ---------------------------------------------------------------------------
// Conv3d
// ---------------------------------------------------------------------------

/// 3D cross-correlation with cubic kernel, zero padding, stride 1 or 2.
#[derive(Debug, Clone)]
pub struct Conv3d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
enum ConvCache<T> {
    /// im2col column matrix (general path).
    Cols { cols: Array2<T>, in_shape: (usize, usize, usize, usize) },
    /// Cached input for the direct stencil path (k=3, s=1, p=1).
    Direct { x: ArrayD<T> },
}

/// Spatial size above which the stride-1 3x3x3 path switches from
/// im2col+GEMM to the direct stencil (im2col packing dominates there).
const DIRECT_CONV_MIN_POSITIONS: usize = 16384;

impl<T: Scalar> Conv3d<T> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidInput(format!("conv stride must be 1 or 2, got {stride}")));
        }
        if k == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::InvalidInput("conv dims must be positive".into()));
        }
        let fan_in = c_in * k * k * k;
        let std = if zero_init { 0.0 } else { (2.0 / fan_in as f64).sqrt() };
        let weight = normal_init(rng, &[c_out, c_in, k, k, k], std);
        Ok(Conv3d {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c_out]))),
            c_in,
            c_out,
            k,
            stride,
            pad,
            cache: None,
        })
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> (usize, usize, usize, usize) {
        (
            self.c_out,
            conv_out_extent(in_shape[1], self.k, self.stride, self.pad),
            conv_out_extent(in_shape[2], self.k, self.stride, self.pad),
            conv_out_extent(in_shape[3], self.k, self.stride, self.pad),
        )
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[0] != self.c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv {} expects [{}, H, W, D], got {:?}",
                self.weight.name, self.c_in, shape
            )));
        }
        for &ext in &shape[1..] {
            if ext + 2 * self.pad < self.k {
                return Err(Error::ShapeMismatch(format!(
                    "kernel {} does not fit extent {} with pad {}",
                    self.k, ext, self.pad
                )));
            }
        }
        let (c_out, oh, ow, od) = self.out_shape(shape);
        let p_out = oh * ow * od;
        if self.k == 3 && self.stride == 1 && self.pad == 1 && p_out >= DIRECT_CONV_MIN_POSITIONS
        {
            let y = conv3x3s1_forward(x, &self.weight.value, &self.bias.value);
            self.cache = Some(ConvCache::Direct { x: x.clone() });
            return Ok(y);
        }
        let kdim = self.c_in * self.k * self.k * self.k;
        let cols = im2col(x, self.k, self.stride, self.pad);
        let w2 = self
            .weight
            .value
            .to_shape((c_out, kdim))
            .expect("weight reshape");
        let mut y2 = w2.dot(&cols);
        for (mut row, b) in y2.rows_mut().into_iter().zip(self.bias.value.iter()) {
            row.mapv_inplace(|v| v + *b);
        }
        self.cache = Some(ConvCache::Cols {
            cols,
            in_shape: (shape[0], shape[1], shape[2], shape[3]),
        });
        Ok(y2.into_shape_with_order(IxDyn(&[c_out, oh, ow, od])).expect("output reshape"))
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        match self.cache.take().expect("backward before forward") {
            ConvCache::Direct { x } => {
                conv3x3s1_backward_dw(dy, &x, &mut self.weight.grad, &mut self.bias.grad);
                let s = x.shape();
                conv3x3s1_backward_dx(dy, &self.weight.value, (s[0], s[1], s[2], s[3]))
            }
            ConvCache::Cols { cols, in_shape } => {
                let p_out = cols.shape()[1];
                let kdim = cols.shape()[0];
                let dy2 = dy.to_shape((self.c_out, p_out)).expect("dy reshape");

                let dw2 = dy2.dot(&cols.t());
                let dw = dw2
                    .into_shape_with_order(self.weight.value.raw_dim())
                    .expect("grad reshape");
                self.weight.grad += &dw;
                for (c, row) in dy2.rows().into_iter().enumerate() {
                    self.bias.grad[c] = self.bias.grad[c] + row.sum();
                }

                let w2 = self
                    .weight
                    .value
                    .to_shape((self.c_out, kdim))
                    .expect("weight reshape");
                let dcols = w2.t().dot(&dy2);
                col2im(&dcols, in_shape, self.k, self.stride, self.pad)
            }
        }
    }
}

impl<T: Scalar> ParamSet<T> for Conv3d<T> {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
    fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }
}

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

/// Per-group zero-mean unit-variance normalization with a per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    channels: usize,
    groups: usize,
    eps: f64,
    cache: Option<GnCache<T>>,
}

#[derive(Debug, Clone)]
struct GnCache<T> {
    x_hat: ArrayD<T>,
    inv_std: Vec<f64>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::InvalidInput(format!(
                "channels {channels} not divisible by groups {groups}"
            )));
        }
        Ok(GroupNorm {
            gamma: Param::new(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            channels,
            groups,
            eps: 1e-5,
            cache: None,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        if shape.is_empty() || shape[0] != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "group norm {} expects {} channels, got {:?}",
                self.gamma.name, self.channels, shape
            )));
        }
        let spatial: usize = shape[1..].iter().product();
        let ch_per_group = self.channels / self.groups;
        let group_len = ch_per_group * spatial;
        let xs = x.as_slice().expect("contiguous");
        let mut x_hat = ArrayD::<T>::zeros(x.raw_dim());
        let xh = x_hat.as_slice_mut().unwrap();
        let mut inv_std = Vec::with_capacity(self.groups);
        let mut y = ArrayD::<T>::zeros(x.raw_dim());
        let ys = y.as_slice_mut().unwrap();
        for g in 0..self.groups {
            let base = g * group_len;
            let chunk = &xs[base..base + group_len];
            let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / group_len as f64;
            let var = chunk.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>()
                / group_len as f64;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std.push(istd);
            for c_local in 0..ch_per_group {
                let c = g * ch_per_group + c_local;
                let gamma = self.gamma.value[c].as_f64();
                let beta = self.beta.value[c].as_f64();
                let off = base + c_local * spatial;
                for i in 0..spatial {
                    let xn = (xs[off + i].as_f64() - mean) * istd;
                    xh[off + i] = T::from_f64(xn);
                    ys[off + i] = T::from_f64(gamma * xn + beta);
                }
            }
        }
        self.cache = Some(GnCache { x_hat, inv_std });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("backward before forward");
        let shape = dy.shape().to_vec();
        let spatial: usize = shape[1..].iter().product();
        let ch_per_group = self.channels / self.groups;
        let group_len = ch_per_group * spatial;
        let dys = dy.as_slice().expect("contiguous");
        let xh = cache.x_hat.as_slice().unwrap();
        let mut dx = ArrayD::<T>::zeros(dy.raw_dim());
        let dxs = dx.as_slice_mut().unwrap();

        for g in 0..self.groups {
            let base = g * group_len;
            let istd = cache.inv_std[g];
            // Accumulate parameter grads and the two group-level sums of
            // dxhat and dxhat * xhat.
            let mut sum_dxh = 0.0f64;
            let mut sum_dxh_xh = 0.0f64;
            for c_local in 0..ch_per_group {
                let c = g * ch_per_group + c_local;
                let gamma = self.gamma.value[c].as_f64();
                let off = base + c_local * spatial;
                let mut dgamma = 0.0f64;
                let mut dbeta = 0.0f64;
                for i in 0..spatial {
                    let dyv = dys[off + i].as_f64();
                    let xhv = xh[off + i].as_f64();
                    dgamma += dyv * xhv;
                    dbeta += dyv;
                    let dxh = dyv * gamma;
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhv;
                }
                self.gamma.grad[c] = T::from_f64(self.gamma.grad[c].as_f64() + dgamma);
                self.beta.grad[c] = T::from_f64(self.beta.grad[c].as_f64() + dbeta);
            }
            let n = group_len as f64;
            for c_local in 0..ch_per_group {
                let c = g * ch_per_group + c_local;
                let gamma = self.gamma.value[c].as_f64();
                let off = base + c_local * spatial;
                for i in 0..spatial {
                    let dxh = dys[off + i].as_f64() * gamma;
                    let xhv = xh[off + i].as_f64();
                    let v = istd * (dxh - sum_dxh / n - xhv * sum_dxh_xh / n);
                    dxs[off + i] = T::from_f64(v);
                }
            }
        }
        dx
    }
}

impl<T: Scalar> ParamSet<T> for GroupNorm<T> {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
    fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// x * sigmoid(x).
#[derive(Debug, Clone, Default)]
pub struct Silu<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Silu<T> {
    pub fn new() -> Self {
        Silu { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.cache = Some(x.clone());
        x.mapv(|v| v * sigmoid_t(v))
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.take().expect("backward before forward");
        let mut dx = dy.clone();
        ndarray::Zip::from(&mut dx).and(&x).for_each(|d, &xv| {
            let s = sigmoid_t(xv);
            *d = *d * s * (T::one() + xv * (T::one() - s));
        });
        dx
    }
}

/// Elementwise logistic sigmoid.
#[derive(Debug, Clone, Default)]
pub struct Sigmoid<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Sigmoid { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = x.mapv(sigmoid_t);
        self.cache = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.cache.take().expect("backward before forward");
        let mut dx = dy.clone();
        ndarray::Zip::from(&mut dx).and(&y).for_each(|d, &yv| {
            *d = *d * yv * (T::one() - yv);
        });
        dx
    }
}

impl<T: Scalar> ParamSet<T> for Silu<T> {
    fn collect_params<'a>(&'a mut self, _out: &mut Vec<&'a mut Param<T>>) {}
    fn collect_params_ref<'a>(&'a self, _out: &mut Vec<&'a Param<T>>) {}
}

impl<T: Scalar> ParamSet<T> for Sigmoid<T> {
    fn collect_params<'a>(&'a mut self, _out: &mut Vec<&'a mut Param<T>>) {}
    fn collect_params_ref<'a>(&'a self, _out: &mut Vec<&'a Param<T>>) {}
}

#[inline]
fn sigmoid_t<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// ---------------------------------------------------------------------------
// Upsample (nearest, 2x per spatial axis)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Upsample2x;

impl Upsample2x {
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(format!("upsample expects [C,H,W,D], got {s:?}")));
        }
        let (c, h, w, d) = (s[0], s[1], s[2], s[3]);
        let mut y = ArrayD::<T>::zeros(IxDyn(&[c, 2 * h, 2 * w, 2 * d]));
        let xs = x.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for ci in 0..c {
            for hi in 0..2 * h {
                for wi in 0..2 * w {
                    let src = ((ci * h + hi / 2) * w + wi / 2) * d;
                    let dst = ((ci * 2 * h + hi) * 2 * w + wi) * 2 * d;
                    for di in 0..2 * d {
                        ys[dst + di] = xs[src + di / 2];
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
        let (c, h, w, d) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let mut dx = ArrayD::<T>::zeros(IxDyn(&[c, h, w, d]));
        let dys = dy.as_slice().unwrap();
        let dxs = dx.as_slice_mut().unwrap();
        for ci in 0..c {
            for hi in 0..2 * h {
                for wi in 0..2 * w {
                    let dst = ((ci * h + hi / 2) * w + wi / 2) * d;
                    let src = ((ci * 2 * h + hi) * 2 * w + wi) * 2 * d;
                    for di in 0..2 * d {
                        dxs[dst + di / 2] = dxs[dst + di / 2] + dys[src + di];
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Dense layer on 1-d vectors (time-embedding pathway).
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    n_in: usize,
    n_out: usize,
    cache: Option<Array1<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / n_in as f64).sqrt();
        Linear {
            weight: Param::new(format!("{name}.weight"), normal_init(rng, &[n_out, n_in], std)),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[n_out]))),
            n_in,
            n_out,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array1<T>) -> Result<Array1<T>> {
        if x.len() != self.n_in {
            return Err(Error::ShapeMismatch(format!(
                "linear {} expects {} inputs, got {}",
                self.weight.name,
                self.n_in,
                x.len()
            )));
        }
        let w = self.weight.value.to_shape((self.n_out, self.n_in)).unwrap();
        let mut y = w.dot(x);
        for (yv, b) in y.iter_mut().zip(self.bias.value.iter()) {
            *yv = *yv + *b;
        }
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array1<T>) -> Array1<T> {
        let x = self.cache.take().expect("backward before forward");
        for o in 0..self.n_out {
            for i in 0..self.n_in {
                let g = self.weight.grad[[o, i]] + dy[o] * x[i];
                self.weight.grad[[o, i]] = g;
            }
            self.bias.grad[o] = self.bias.grad[o] + dy[o];
        }
        let w = self.weight.value.to_shape((self.n_out, self.n_in)).unwrap();
        w.t().dot(dy)
    }
}

impl<T: Scalar> ParamSet<T> for Linear<T> {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
    fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }
}

// ---------------------------------------------------------------------------
// Residual block: norm -> silu -> conv, twice, plus skip
// ---------------------------------------------------------------------------

/// Residual block with optional additive time conditioning after the first
/// convolution. When channel counts change, the skip path is a 1x1x1 conv.
#[derive(Debug, Clone)]
pub struct ResBlock3d<T> {
    norm1: GroupNorm<T>,
    act1: Silu<T>,
    conv1: Conv3d<T>,
    emb: Option<(Silu<T>, Linear<T>)>,
    norm2: GroupNorm<T>,
    act2: Silu<T>,
    conv2: Conv3d<T>,
    skip: Option<Conv3d<T>>,
    c_out: usize,
}

impl<T: Scalar> ResBlock3d<T> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        emb_dim: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let norm1 = GroupNorm::new(&format!("{name}.norm1"), c_in, default_groups(c_in))?;
        let conv1 = Conv3d::new(&format!("{name}.conv1"), c_in, c_out, 3, 1, 1, false, rng)?;
        let emb = match emb_dim {
            Some(dim) => Some((Silu::new(), Linear::new(&format!("{name}.emb"), dim, c_out, rng))),
            None => None,
        };
        let norm2 = GroupNorm::new(&format!("{name}.norm2"), c_out, default_groups(c_out))?;
        let conv2 = Conv3d::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false, rng)?;
        let skip = if c_in != c_out {
            Some(Conv3d::new(&format!("{name}.skip"), c_in, c_out, 1, 1, 0, false, rng)?)
        } else {
            None
        };
        Ok(ResBlock3d {
            norm1,
            act1: Silu::new(),
            conv1,
            emb,
            norm2,
            act2: Silu::new(),
            conv2,
            skip,
            c_out,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, temb: Option<&Array1<T>>) -> Result<Tensor<T>> {
        let h = self.norm1.forward(x)?;
        let h = self.act1.forward(&h);
        let mut h = self.conv1.forward(&h)?;
        if let Some((act, lin)) = self.emb.as_mut() {
            let temb = temb.ok_or_else(|| {
                Error::InvalidInput("res block built with conditioning but no embedding given".into())
            })?;
            let e = act.forward(&temb.clone().into_dyn());
            let e1 = Array1::from_iter(e.iter().copied());
            let bias = lin.forward(&e1)?;
            let spatial: usize = h.shape()[1..].iter().product();
            let hs = h.as_slice_mut().unwrap();
            for c in 0..self.c_out {
                let b = bias[c];
                for v in &mut hs[c * spatial..(c + 1) * spatial] {
                    *v = *v + b;
                }
            }
        }
        let h2 = self.norm2.forward(&h)?;
        let h2 = self.act2.forward(&h2);
        let h2 = self.conv2.forward(&h2)?;
        let skip = match self.skip.as_mut() {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok(h2 + &skip)
    }

    /// Returns `(dx, d_temb)`; `d_temb` is `None` for unconditioned blocks.
    pub fn backward(&mut self, dy: &Tensor<T>) -> (Tensor<T>, Option<Array1<T>>) {
        let dh2 = self.conv2.backward(dy);
        let dh2 = self.act2.backward(&dh2);
        let dh = self.norm2.backward(&dh2);

        let d_temb = if let Some((act, lin)) = self.emb.as_mut() {
            let spatial: usize = dh.shape()[1..].iter().product();
            let dhs = dh.as_slice().unwrap();
            let mut dbias = Array1::<T>::zeros(self.c_out);
            for c in 0..self.c_out {
                let mut acc = T::zero();
                for v in &dhs[c * spatial..(c + 1) * spatial] {
                    acc = acc + *v;
                }
                dbias[c] = acc;
            }
            let de = lin.backward(&dbias);
            let de = act.backward(&de.into_dyn());
            Some(Array1::from_iter(de.iter().copied()))
        } else {
            None
        };

        let dh = self.conv1.backward(&dh);
        let dh = self.act1.backward(&dh);
        let mut dx = self.norm1.backward(&dh);
        match self.skip.as_mut() {
            Some(conv) => dx += &conv.backward(dy),
            None => dx += dy,
        }
        (dx, d_temb)
    }
}

impl<T: Scalar> ParamSet<T> for ResBlock3d<T> {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.norm1.collect_params(out);
        self.conv1.collect_params(out);
        if let Some((_, lin)) = self.emb.as_mut() {
            lin.collect_params(out);
        }
        self.norm2.collect_params(out);
        self.conv2.collect_params(out);
        if let Some(conv) = self.skip.as_mut() {
            conv.collect_params(out);
        }
    }
    fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        self.norm1.collect_params_ref(out);
        self.conv1.collect_params_ref(out);
        if let Some((_, lin)) = self.emb.as_ref() {
            lin.collect_params_ref(out);
        }
        self.norm2.collect_params_ref(out);
        self.conv2.collect_params_ref(out);
        if let Some(conv) = self.skip.as_ref() {
            conv.collect_params_ref(out);
        }
    }
}

// ---------------------------------------------------------------------------
// Self-attention over flattened spatial positions
// ---------------------------------------------------------------------------

/// Pre-normalized single-head scaled dot-product attention with a residual
/// connection. The output projection is zero-initialized so the layer is the
/// identity at initialization.
#[derive(Debug, Clone)]
pub struct SelfAttention3d<T> {
    norm: GroupNorm<T>,
    wq: Param<T>,
    wk: Param<T>,
    wv: Param<T>,
    wo: Param<T>,
    bq: Param<T>,
    bk: Param<T>,
    bv: Param<T>,
    bo: Param<T>,
    channels: usize,
    cap: usize,
    cache: Option<AttnCache<T>>,
}

#[derive(Debug, Clone)]
struct AttnCache<T> {
    xn: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: Array2<T>,
    attn_out: Array2<T>,
    spatial_shape: Vec<usize>,
}

/// Default cap on h*w*d for attention inputs.
pub const ATTENTION_POSITION_CAP: usize = 512;

impl<T: Scalar> SelfAttention3d<T> {
    pub fn new(name: &str, channels: usize, cap: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let norm = GroupNorm::new(&format!("{name}.norm"), channels, default_groups(channels))?;
        let std = (1.0 / channels as f64).sqrt();
        let mk = |nm: &str, zero: bool, rng: &mut ChaCha8Rng| {
            let w = if zero {
                ArrayD::zeros(IxDyn(&[channels, channels]))
            } else {
                normal_init(rng, &[channels, channels], std)
            };
            Param::new(format!("{name}.{nm}"), w)
        };
        Ok(SelfAttention3d {
            norm,
            wq: mk("wq", false, rng),
            wk: mk("wk", false, rng),
            wv: mk("wv", false, rng),
            wo: mk("wo", true, rng),
            bq: Param::new(format!("{name}.bq"), ArrayD::zeros(IxDyn(&[channels]))),
            bk: Param::new(format!("{name}.bk"), ArrayD::zeros(IxDyn(&[channels]))),
            bv: Param::new(format!("{name}.bv"), ArrayD::zeros(IxDyn(&[channels]))),
            bo: Param::new(format!("{name}.bo"), ArrayD::zeros(IxDyn(&[channels]))),
            channels,
            cap,
            cache: None,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        if shape.len() != 4 || shape[0] != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "attention expects [{}, h, w, d], got {:?}",
                self.channels, shape
            )));
        }
        let p: usize = shape[1..].iter().product();
        if p > self.cap {
            return Err(Error::InvalidInput(format!(
                "attention sequence length {p} exceeds cap {}",
                self.cap
            )));
        }
        let xn_full = self.norm.forward(x)?;
        let xn = xn_full.to_shape((self.channels, p)).unwrap().to_owned();
        let proj = |w: &Param<T>, b: &Param<T>, xn: &Array2<T>| -> Array2<T> {
            let w2 = w.value.to_shape((self.channels, self.channels)).unwrap();
            let mut out = w2.dot(xn);
            for (mut row, bv) in out.rows_mut().into_iter().zip(b.value.iter()) {
                row.mapv_inplace(|v| v + *bv);
            }
            out
        };
        let q = proj(&self.wq, &self.bq, &xn);
        let k = proj(&self.wk, &self.bk, &xn);
        let v = proj(&self.wv, &self.bv, &xn);
        let scale = T::from_f64(1.0 / (self.channels as f64).sqrt());
        let mut scores = q.t().dot(&k);
        scores.mapv_inplace(|s| s * scale);
        // Row softmax over keys.
        let mut attn = scores;
        for mut row in attn.rows_mut() {
            let max = row.iter().copied().fold(T::from_f64(f64::NEG_INFINITY), |a, b| {
                if b > a {
                    b
                } else {
                    a
                }
            });
            let mut sum = 0.0f64;
            for v in row.iter_mut() {
                let e = (v.as_f64() - max.as_f64()).exp();
                *v = T::from_f64(e);
                sum += e;
            }
            let inv = T::from_f64(1.0 / sum);
            row.mapv_inplace(|v| v * inv);
        }
        let attn_out = v.dot(&attn.t());
        let wo2 = self.wo.value.to_shape((self.channels, self.channels)).unwrap();
        let mut y2 = wo2.dot(&attn_out);
        for (mut row, bv) in y2.rows_mut().into_iter().zip(self.bo.value.iter()) {
            row.mapv_inplace(|v| v + *bv);
        }
        let y = y2.into_shape_with_order(IxDyn(&shape)).unwrap() + x;
        self.cache = Some(AttnCache {
            xn,
            q,
            k,
            v,
            attn,
            attn_out,
            spatial_shape: shape,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("backward before forward");
        let p: usize = cache.spatial_shape[1..].iter().product();
        let c = self.channels;
        let dy2 = dy.to_shape((c, p)).unwrap().to_owned();

        // Output projection.
        self.wo.grad += &dy2.dot(&cache.attn_out.t()).into_dyn();
        for (i, row) in dy2.rows().into_iter().enumerate() {
            self.bo.grad[i] = self.bo.grad[i] + row.sum();
        }
        let wo2 = self.wo.value.to_shape((c, c)).unwrap();
        let d_attn_out = wo2.t().dot(&dy2);

        // attn_out = v . attn^T
        let dv = d_attn_out.dot(&cache.attn);
        let d_attn = d_attn_out.t().dot(&cache.v);

        // Softmax backward per row.
        let mut d_scores = Array2::<T>::zeros((p, p));
        for i in 0..p {
            let mut dot = T::zero();
            for j in 0..p {
                dot = dot + d_attn[[i, j]] * cache.attn[[i, j]];
            }
            for j in 0..p {
                d_scores[[i, j]] = cache.attn[[i, j]] * (d_attn[[i, j]] - dot);
            }
        }
        let scale = T::from_f64(1.0 / (c as f64).sqrt());
        d_scores.mapv_inplace(|v| v * scale);

        // scores = q^T . k
        let dq = cache.k.dot(&d_scores.t());
        let dk = cache.q.dot(&d_scores);

        // Projections back to xn.
        let mut dxn = Array2::<T>::zeros((c, p));
        for (w, b, d, act) in [
            (&mut self.wq, &mut self.bq, &dq, &cache.xn),
            (&mut self.wk, &mut self.bk, &dk, &cache.xn),
            (&mut self.wv, &mut self.bv, &dv, &cache.xn),
        ] {
            w.grad += &d.dot(&act.t()).into_dyn();
            for (i, row) in d.rows().into_iter().enumerate() {
                b.grad[i] = b.grad[i] + row.sum();
            }
            let w2 = w.value.to_shape((c, c)).unwrap();
            dxn += &w2.t().dot(d);
        }
        let dxn_full =
            dxn.into_shape_with_order(IxDyn(&cache.spatial_shape)).unwrap();
        let dx_norm = self.norm.backward(&dxn_full);
        dx_norm + dy
    }
}

impl<T: Scalar> ParamSet<T> for SelfAttention3d<T> {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.norm.collect_params(out);
        for p in [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ] {
            out.push(p);
        }
    }
    fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        self.norm.collect_params_ref(out);
        for p in [&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo] {
            out.push(p);
        }
    }
}
