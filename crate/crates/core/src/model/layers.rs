//! Layer primitives over candle tensors.
//!
//! Parameters are drawn from a seeded ChaCha stream (candle's own CPU
//! sampler cannot be seeded). Batch-norm running statistics live in
//! separate buffers so they never reach the optimizer.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// Collects named learnable parameters and buffers while a network is built.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
    pub params: Vec<(String, Var)>,
    pub buffers: Vec<(String, Var)>,
}

impl ParamBuilder {
    pub fn new(rng: ChaCha8Rng, dtype: DType) -> Self {
        Self {
            rng,
            dtype,
            device: Device::Cpu,
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn tensor(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn param(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let var = Var::from_tensor(&self.tensor(values, shape)?)?;
        self.params.push((name, var.clone()));
        Ok(var)
    }

    fn buffer(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let var = Var::from_tensor(&self.tensor(values, shape)?)?;
        self.buffers.push((name, var.clone()));
        Ok(var)
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).unwrap();
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
    }
}

pub struct Conv2d {
    weight: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Kaiming-normal init over fan-out, no bias (a batch norm follows).
    pub fn new(b: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        let std = (2.0 / (c_out * k * k) as f64).sqrt();
        let values = b.normal(c_out * c_in * k * k, std);
        let weight = b.param(format!("{name}.weight"), values, &[c_out, c_in, k, k])?;
        Ok(Self { weight, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let op = Conv {
            stride: self.stride,
            padding: self.padding,
        };
        Ok(x.contiguous()?.apply_op2(self.weight.as_tensor(), op)?)
    }
}

/// Plain convolution with its own backward pass. The built-in kernel
/// gradient runs the CPU convolution on transposed (strided) views and comes
/// out wrong for kernels wider than 1; here every operand is made contiguous
/// first.
struct Conv {
    stride: usize,
    padding: usize,
}

fn cpu_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let dev = Device::Cpu;
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(contiguous(v, l)?, l.shape(), &dev),
        CpuStorage::F64(v) => Tensor::from_slice(contiguous(v, l)?, l.shape(), &dev),
        _ => candle_core::bail!("convolution supports f32 and f64"),
    }
}

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = cpu_tensor(s1, l1)?;
        let w = cpu_tensor(s2, l2)?;
        let y = x.conv2d(&w, self.padding, self.stride, 1, 1)?;
        let shape = y.shape().clone();
        let y = y.flatten_all()?;
        let out = match y.dtype() {
            DType::F32 => CpuStorage::F32(y.to_vec1()?),
            _ => CpuStorage::F64(y.to_vec1()?),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (p, s) = (self.padding, self.stride);
        let grad = grad.contiguous()?;
        let (_, _, k0, k1) = w.dims4()?;
        // Transposed convolution spelled out: spread the gradient back onto
        // the stride grid, then correlate with the flipped kernel. The
        // trailing zero padding makes the result exactly input-sized.
        let (n, co, oh, ow) = grad.dims4()?;
        let mut d = grad.clone();
        if s > 1 {
            d = d.unsqueeze(4)?.pad_with_zeros(4, 0, s - 1)?.reshape((n, co, oh, ow * s))?.narrow(3, 0, (ow - 1) * s + 1)?;
            let dw = (ow - 1) * s + 1;
            d = d.unsqueeze(3)?.pad_with_zeros(3, 0, s - 1)?.reshape((n, co, oh * s, dw))?.narrow(2, 0, (oh - 1) * s + 1)?;
        }
        let flip = |t: Tensor, dim: usize, len: usize| -> candle_core::Result<Tensor> {
            let idx = Tensor::from_vec((0..len as u32).rev().collect::<Vec<_>>(), len, &Device::Cpu)?;
            t.index_select(&idx, dim)
        };
        let wf = flip(flip(w.transpose(0, 1)?.contiguous()?, 2, k0)?, 3, k1)?.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let (dh, dw) = d.dims4().map(|(_, _, a, b)| (a, b))?;
        let (lead0, lead1) = (k0 - 1 - p, k1 - 1 - p);
        let d = d.pad_with_zeros(2, lead0, h + k0 - 1 - lead0 - dh)?.pad_with_zeros(3, lead1, wd + k1 - 1 - lead1 - dw)?;
        let grad_x = d.contiguous()?.conv2d(&wf, 0, 1, 1, 1)?;
        // Correlate the input with the output gradient, dilated by the stride.
        let xt = x.transpose(0, 1)?.contiguous()?;
        let gt = grad.transpose(0, 1)?.contiguous()?;
        let grad_w = xt.conv2d(&gt, p, 1, s, 1)?.narrow(2, 0, k0)?.narrow(3, 0, k1)?.transpose(0, 1)?.contiguous()?;
        Ok((Some(grad_x), Some(grad_w)))
    }
}

pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param(format!("{name}.weight"), vec![1.0; channels], &[channels])?,
            bias: b.param(format!("{name}.bias"), vec![0.0; channels], &[channels])?,
            running_mean: b.buffer(format!("{name}.running_mean"), vec![0.0; channels], &[channels])?,
            running_var: b.buffer(format!("{name}.running_var"), vec![1.0; channels], &[channels])?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.channels;
        let w = self.weight.as_tensor().reshape((1, c, 1, 1))?;
        let bias = self.bias.as_tensor().reshape((1, c, 1, 1))?;
        if train {
            let (n, _, h, wd) = x.dims4()?;
            let count = (n * h * wd) as f64;
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let xhat = centered.broadcast_div(&(var.clone() + BN_EPS)?.sqrt()?)?;
            // Running variance uses the unbiased estimate.
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = BN_MOMENTUM;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (var.detach().flatten_all()? * (m * unbias))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            Ok(xhat.broadcast_mul(&w)?.broadcast_add(&bias)?)
        } else {
            let scale = (self.running_var.as_tensor() + BN_EPS)?.sqrt()?.recip()?.reshape((1, c, 1, 1))?;
            let mean = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
            Ok(x.broadcast_sub(&mean)?.broadcast_mul(&scale)?.broadcast_mul(&w)?.broadcast_add(&bias)?)
        }
    }
}

pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    /// Uniform init in ±1/sqrt(fan_in) for weight and bias.
    pub fn new(b: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = b.uniform(d_in * d_out, bound);
        let bias = b.uniform(d_out, bound);
        Ok(Self {
            weight: b.param(format!("{name}.weight"), w, &[d_out, d_in])?,
            bias: b.param(format!("{name}.bias"), bias, &[d_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// 3×3 max pooling with stride 2 and padding 1 over NCHW input. Padding
/// never wins the max; the gradient goes to the first maximum of a window
/// in row-major order.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(MaxPool)?)
}

const K: usize = 3;
const S: usize = 2;
const P: usize = 1;

fn pooled(n: usize) -> usize {
    (n + 2 * P - K) / S + 1
}

/// Index (within the plane) of the first maximum of output cell (oy, ox).
fn argmax<T: PartialOrd + Copy>(plane: &[T], h: usize, w: usize, oy: usize, ox: usize) -> usize {
    let mut best: Option<(usize, T)> = None;
    for ky in 0..K {
        let y = (oy * S + ky) as isize - P as isize;
        if y < 0 || y >= h as isize {
            continue;
        }
        for kx in 0..K {
            let x = (ox * S + kx) as isize - P as isize;
            if x < 0 || x >= w as isize {
                continue;
            }
            let i = y as usize * w + x as usize;
            if best.is_none_or(|(_, v)| plane[i] > v) {
                best = Some((i, plane[i]));
            }
        }
    }
    best.expect("window overlaps the input").0
}

fn pool_fwd<T: PartialOrd + Copy>(src: &[T], dims: &[usize]) -> Vec<T> {
    let (h, w) = (dims[2], dims[3]);
    let (oh, ow) = (pooled(h), pooled(w));
    let mut out = Vec::with_capacity(src.len() / (h * w) * oh * ow);
    for plane in src.chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(plane[argmax(plane, h, w, oy, ox)]);
            }
        }
    }
    out
}

fn pool_bwd<T: PartialOrd + Copy + std::ops::AddAssign + Default>(src: &[T], grad: &[T], dims: &[usize]) -> Vec<T> {
    let (h, w) = (dims[2], dims[3]);
    let (oh, ow) = (pooled(h), pooled(w));
    let mut out = vec![T::default(); src.len()];
    for (p, (plane, g)) in src.chunks(h * w).zip(grad.chunks(oh * ow)).enumerate() {
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[argmax(plane, h, w, oy, ox)] += g[oy * ow + ox];
            }
        }
    }
    out
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("expected a contiguous tensor"),
    }
}

struct MaxPool;

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "max-pool-3x3-s2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let dims = [dims.0, dims.1, dims.2, dims.3];
        let shape = Shape::from((dims[0], dims[1], pooled(dims[2]), pooled(dims[3])));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(pool_fwd(contiguous(v, layout)?, &dims)),
            CpuStorage::F64(v) => CpuStorage::F64(pool_fwd(contiguous(v, layout)?, &dims)),
            _ => candle_core::bail!("max pool supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = arg.apply_op2_no_bwd(&grad_res.contiguous()?, &MaxPoolGrad)?;
        Ok(Some(grad))
    }
}

struct MaxPoolGrad;

impl CustomOp2 for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "max-pool-3x3-s2-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let dims = [dims.0, dims.1, dims.2, dims.3];
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(g)) => CpuStorage::F32(pool_bwd(contiguous(a, l1)?, contiguous(g, l2)?, &dims)),
            (CpuStorage::F64(a), CpuStorage::F64(g)) => CpuStorage::F64(pool_bwd(contiguous(a, l1)?, contiguous(g, l2)?, &dims)),
            _ => candle_core::bail!("max pool gradient supports f32 and f64"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Global average pooling: (N, C, H, W) → (N, C).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean((D::Minus2, D::Minus1))?)
}
