//! Parameter storage and the small set of layers shared by every network.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

/// Named, ordered collection of trainable variables belonging to one
/// sub-network. Initialization draws from a seeded generator so that two
/// stores built with the same seed hold identical values.
pub struct VarStore {
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl VarStore {
    pub fn new(dtype: DType, device: &Device, seed: u64) -> Self {
        Self {
            vars: Vec::new(),
            index: HashMap::new(),
            dtype,
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.index.insert(name.to_string(), self.vars.len());
        self.vars.push((name.to_string(), var.clone()));
        Ok(var)
    }

    /// Gaussian-initialized variable.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.vars[i].1)
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.vars.iter().map(|(_, v)| v)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites every variable with the value of the same name in `other`.
    pub fn copy_from(&self, other: &VarStore) -> Result<()> {
        for (name, var) in &self.vars {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Sum of squares of all parameters, used as a cheap change detector.
    pub fn checksum(&self) -> Result<f64> {
        let mut acc = 0.0;
        for v in self.vars() {
            acc += v
                .as_tensor()
                .to_dtype(DType::F64)?
                .sqr()?
                .sum_all()?
                .to_scalar::<f64>()?;
        }
        Ok(acc)
    }
}

/// He-normal standard deviation for a layer with the given fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}

/// Left/right zero padding so that a stride-`s` convolution with a `k`-wide
/// kernel maps an extent divisible by `s` to exactly `extent / s`.
pub fn same_padding(kernel: usize, stride: usize) -> (usize, usize) {
    let total = kernel.saturating_sub(stride);
    (total / 2, total - total / 2)
}

/// Convolution with "same" output extent `H / stride`.
pub fn conv2d_same(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    let (_, _, kh, kw) = w.dims4()?;
    if kh != kw {
        return Err(shape_err!("square kernels only, got {kh}x{kw}"));
    }
    let (_, _, h, wd) = x.dims4()?;
    if h % stride != 0 || wd % stride != 0 {
        return Err(shape_err!(
            "spatial dims {h}x{wd} not divisible by stride {stride}"
        ));
    }
    let (lo, hi) = same_padding(kh, stride);
    let y = if lo == hi {
        x.conv2d(w, lo, stride, 1, 1)?
    } else {
        let xp = x.pad_with_zeros(2, lo, hi)?.pad_with_zeros(3, lo, hi)?;
        xp.conv2d(w, 0, stride, 1, 1)?
    };
    Ok(y)
}

/// Transposed convolution producing exactly `H * stride`. Kernel layout is
/// `(in, out, k, k)`.
pub fn conv_transpose2d_same(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    let (_, _, kh, kw) = w.dims4()?;
    if kh != kw {
        return Err(shape_err!("square kernels only, got {kh}x{kw}"));
    }
    if kh < stride {
        return Err(shape_err!(
            "transposed kernel {kh} smaller than stride {stride}"
        ));
    }
    // Full output cropped by narrow: the backend's backward pass ignores
    // output_padding.
    let (_, _, h, wd) = x.dims4()?;
    let lead = (kh - stride).div_ceil(2);
    let full = x.conv_transpose2d(w, 0, 0, stride, 1)?;
    Ok(full.narrow(2, lead, h * stride)?.narrow(3, lead, wd * stride)?)
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("average pooling needs even dims, got {h}x{w}"));
    }
    Ok(x.avg_pool2d(2)?)
}

/// Nearest-neighbour x2 upsampling built from a broadcast so that its
/// gradient accumulates correctly when the input feeds several consumers.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let y = x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((n, c, 2 * h, 2 * w))?;
    Ok(y)
}

/// Per-sample, per-channel normalization over the spatial dims.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let y = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(y.reshape((n, c, h, w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Numerically stable softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// One-hot rows `(n, classes)` in the requested dtype.
pub fn one_hot(labels: &[usize], classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0f64; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(shape_err!("label {l} out of range for {classes} classes"));
        }
        v[i * classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), classes), device)?.to_dtype(dtype)?)
}

/// Column vector of per-sample weights `(n,)`.
pub fn vector(values: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(values, values.len(), device)?.to_dtype(dtype)?)
}

/// Host copy of a rank-2 tensor as `f64` rows.
pub fn rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Standard 2-D convolution with optional bias and "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
}

impl Conv2d {
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let std = he_std(in_channels * kernel * kernel);
        let weight = vs.normal(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            std,
        )?;
        let bias = if bias {
            Some(vs.constant(&format!("{name}.bias"), &[out_channels], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_same(x, self.weight.as_tensor(), self.stride)?;
        match &self.bias {
            Some(b) => {
                let c = b.dim(0)?;
                Ok(y.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?)
            }
            None => Ok(y),
        }
    }
}

/// Fully connected layer, weight stored `(out, in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(vs: &mut VarStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let weight = vs.normal(&format!("{name}.weight"), &[outputs, inputs], he_std(inputs))?;
        let bias = vs.constant(&format!("{name}.bias"), &[outputs], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Mean over the last two (spatial) dims, `(n, c, h, w) -> (n, c)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}
