//! Octave convolution.
//!
//! A feature map is carried as two branches: a high-frequency branch at full
//! resolution and a low-frequency branch at half resolution. An octave layer
//! mixes them through four paths:
//!
//! ```text
//! v_high = conv(u_high)        + upsample(conv(u_low))
//! v_low  = conv(avgpool(u_high)) + conv(u_low)
//! ```
//!
//! The transposed variant uses transposed kernels on every path and keeps the
//! same resampling placement, so the 2:1 resolution ratio survives.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, avg_pool2, upsample2, VarStore};

/// Splits a channel budget: `low = round(alpha * total)`, `high = total - low`.
pub fn split_channels(total: usize, alpha: f64) -> (usize, usize) {
    let low = (alpha * total as f64).round() as usize;
    let low = low.min(total);
    (total - low, low)
}

/// Two-branch feature map. An absent branch has zero channels.
#[derive(Clone, Debug)]
pub struct OctFeature {
    high: Option<Tensor>,
    low: Option<Tensor>,
}

impl OctFeature {
    pub fn new(high: Option<Tensor>, low: Option<Tensor>) -> Result<Self> {
        match (&high, &low) {
            (None, None) => return Err(shape_err!("octave feature with no branches")),
            (Some(h), Some(l)) => {
                let (hn, _, hh, hw) = h.dims4()?;
                let (ln, _, lh, lw) = l.dims4()?;
                if hn != ln {
                    return Err(shape_err!("branch batch sizes differ: {hn} vs {ln}"));
                }
                if hh != 2 * lh || hw != 2 * lw {
                    return Err(shape_err!(
                        "low branch {lh}x{lw} is not half of high branch {hh}x{hw}"
                    ));
                }
            }
            (Some(h), None) => {
                h.dims4()?;
            }
            (None, Some(l)) => {
                l.dims4()?;
            }
        }
        Ok(Self { high, low })
    }

    pub fn from_high(high: Tensor) -> Result<Self> {
        Self::new(Some(high), None)
    }

    pub fn high(&self) -> Option<&Tensor> {
        self.high.as_ref()
    }

    pub fn low(&self) -> Option<&Tensor> {
        self.low.as_ref()
    }

    pub fn batch(&self) -> usize {
        match (&self.high, &self.low) {
            (Some(h), _) => h.dims()[0],
            (None, Some(l)) => l.dims()[0],
            _ => unreachable!(),
        }
    }

    /// `(high, low)` channel counts.
    pub fn channels(&self) -> (usize, usize) {
        let c = |t: &Option<Tensor>| t.as_ref().map(|t| t.dims()[1]).unwrap_or(0);
        (c(&self.high), c(&self.low))
    }

    pub fn total_channels(&self) -> usize {
        let (h, l) = self.channels();
        h + l
    }

    pub fn alpha(&self) -> f64 {
        let (h, l) = self.channels();
        l as f64 / (h + l) as f64
    }

    /// Spatial extent of the full-resolution grid.
    pub fn spatial(&self) -> (usize, usize) {
        match (&self.high, &self.low) {
            (Some(h), _) => (h.dims()[2], h.dims()[3]),
            (None, Some(l)) => (2 * l.dims()[2], 2 * l.dims()[3]),
            _ => unreachable!(),
        }
    }

    /// Applies `f` to each present branch.
    pub fn map<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&Tensor) -> Result<Tensor>,
    {
        let high = self.high.as_ref().map(&mut f).transpose()?;
        let low = self.low.as_ref().map(&mut f).transpose()?;
        Self::new(high, low)
    }

    /// Branch-wise sum, as used by residual connections.
    pub fn add(&self, other: &OctFeature) -> Result<Self> {
        if self.channels() != other.channels() {
            return Err(shape_err!(
                "cannot add octave features with channels {:?} and {:?}",
                self.channels(),
                other.channels()
            ));
        }
        let sum = |a: &Option<Tensor>, b: &Option<Tensor>| -> Result<Option<Tensor>> {
            match (a, b) {
                (Some(a), Some(b)) => Ok(Some((a + b)?)),
                _ => Ok(None),
            }
        };
        Self::new(sum(&self.high, &other.high)?, sum(&self.low, &other.low)?)
    }

    pub fn relu(&self) -> Result<Self> {
        self.map(|t| Ok(t.relu()?))
    }

    pub fn instance_norm(&self) -> Result<Self> {
        self.map(|t| nn::instance_norm(t, 1e-5))
    }

    pub fn detach(&self) -> Self {
        Self {
            high: self.high.as_ref().map(|t| t.detach()),
            low: self.low.as_ref().map(|t| t.detach()),
        }
    }

    /// Both branches on the full-resolution grid, concatenated high-first.
    pub fn to_full_resolution(&self) -> Result<Tensor> {
        let mut parts = Vec::with_capacity(2);
        if let Some(h) = &self.high {
            parts.push(h.clone());
        }
        if let Some(l) = &self.low {
            parts.push(upsample2(l)?);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    /// Global average of each channel, high channels first: `(n, C_h + C_l)`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let mut parts = Vec::with_capacity(2);
        if let Some(h) = &self.high {
            parts.push(nn::global_avg_pool(h)?);
        }
        if let Some(l) = &self.low {
            parts.push(nn::global_avg_pool(l)?);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }
}

/// Entry adapter: the first `(1 - alpha)` share of channels stays at full
/// resolution, the rest is average-pooled by two.
pub fn oct_split(x: &Tensor, alpha: f64) -> Result<OctFeature> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let (_, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("octave split needs even spatial dims, got {h}x{w}"));
    }
    let (ch, cl) = split_channels(c, alpha);
    let high = (ch > 0).then(|| x.narrow(1, 0, ch)).transpose()?;
    let low = if cl > 0 {
        Some(avg_pool2(&x.narrow(1, ch, cl)?)?)
    } else {
        None
    };
    OctFeature::new(high, low)
}

/// Exit adapter: returns the high branch, which must be the only one.
pub fn oct_merge(u: &OctFeature) -> Result<Tensor> {
    if u.low.is_some() {
        return Err(shape_err!(
            "cannot merge an octave feature with a non-empty low branch"
        ));
    }
    u.high
        .clone()
        .ok_or_else(|| shape_err!("cannot merge an octave feature with an empty high branch"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OctConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub alpha_in: f64,
    pub alpha_out: f64,
    pub kernel: usize,
    pub stride: usize,
    pub transposed: bool,
    pub bias: bool,
}

impl OctConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        alpha_in: f64,
        alpha_out: f64,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            alpha_in,
            alpha_out,
            kernel,
            stride,
            transposed: false,
            bias: false,
        }
    }

    pub fn transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for a in [self.alpha_in, self.alpha_out] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
            }
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("octave layer with zero channels".into()));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config("kernel and stride must be positive".into()));
        }
        if self.transposed && self.kernel < self.stride {
            return Err(Error::Config(format!(
                "transposed kernel {} smaller than stride {}",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    pub fn in_split(&self) -> (usize, usize) {
        split_channels(self.in_channels, self.alpha_in)
    }

    pub fn out_split(&self) -> (usize, usize) {
        split_channels(self.out_channels, self.alpha_out)
    }

    fn kernel_shape(&self, cin: usize, cout: usize) -> [usize; 4] {
        if self.transposed {
            [cin, cout, self.kernel, self.kernel]
        } else {
            [cout, cin, self.kernel, self.kernel]
        }
    }
}

/// Kernels of the four paths. A path is absent when either of its branches
/// has no channels.
#[derive(Clone, Debug, Default)]
pub struct OctConvParams {
    pub high_to_high: Option<Tensor>,
    pub high_to_low: Option<Tensor>,
    pub low_to_high: Option<Tensor>,
    pub low_to_low: Option<Tensor>,
    pub bias_high: Option<Tensor>,
    pub bias_low: Option<Tensor>,
}

fn path(spec: &OctConvSpec, x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if spec.transposed {
        nn::conv_transpose2d_same(x, w, spec.stride)
    } else {
        nn::conv2d_same(x, w, spec.stride)
    }
}

fn add_opt(acc: Option<Tensor>, t: Tensor) -> Result<Option<Tensor>> {
    Ok(Some(match acc {
        Some(a) => (a + t)?,
        None => t,
    }))
}

fn add_bias(t: Option<Tensor>, bias: &Option<Tensor>) -> Result<Option<Tensor>> {
    match (t, bias) {
        (Some(t), Some(b)) => {
            let c = b.dim(0)?;
            Ok(Some(t.broadcast_add(&b.reshape((1, c, 1, 1))?)?))
        }
        (t, _) => Ok(t),
    }
}

fn check_input(spec: &OctConvSpec, u: &OctFeature) -> Result<()> {
    let expected = spec.in_split();
    if u.channels() != expected {
        return Err(shape_err!(
            "octave input channels {:?} do not match layer split {:?}",
            u.channels(),
            expected
        ));
    }
    Ok(())
}

/// Octave (transposed) convolution; routing depends on `spec.transposed`.
pub fn oct_conv_forward(
    spec: &OctConvSpec,
    params: &OctConvParams,
    u: &OctFeature,
) -> Result<OctFeature> {
    check_input(spec, u)?;
    let (ch_out, cl_out) = spec.out_split();
    let mut high: Option<Tensor> = None;
    let mut low: Option<Tensor> = None;

    if let Some(uh) = u.high() {
        if ch_out > 0 {
            let w = params
                .high_to_high
                .as_ref()
                .ok_or_else(|| shape_err!("missing high->high kernel"))?;
            high = add_opt(high, path(spec, uh, w)?)?;
        }
        if cl_out > 0 {
            let w = params
                .high_to_low
                .as_ref()
                .ok_or_else(|| shape_err!("missing high->low kernel"))?;
            low = add_opt(low, path(spec, &avg_pool2(uh)?, w)?)?;
        }
    }
    if let Some(ul) = u.low() {
        if cl_out > 0 {
            let w = params
                .low_to_low
                .as_ref()
                .ok_or_else(|| shape_err!("missing low->low kernel"))?;
            low = add_opt(low, path(spec, ul, w)?)?;
        }
        if ch_out > 0 {
            let w = params
                .low_to_high
                .as_ref()
                .ok_or_else(|| shape_err!("missing low->high kernel"))?;
            high = add_opt(high, upsample2(&path(spec, ul, w)?)?)?;
        }
    }
    let high = add_bias(high, &params.bias_high)?;
    let low = add_bias(low, &params.bias_low)?;
    OctFeature::new(high, low)
}

/// Same as [`oct_conv_forward`] but asserts the transposed routing.
pub fn oct_conv_transposed(
    spec: &OctConvSpec,
    params: &OctConvParams,
    u: &OctFeature,
) -> Result<OctFeature> {
    if !spec.transposed {
        return Err(Error::Config("layer spec is not transposed".into()));
    }
    oct_conv_forward(spec, params, u)
}

/// Trainable octave layer.
#[derive(Clone, Debug)]
pub struct OctConv {
    spec: OctConvSpec,
    high_to_high: Option<Var>,
    high_to_low: Option<Var>,
    low_to_high: Option<Var>,
    low_to_low: Option<Var>,
    bias_high: Option<Var>,
    bias_low: Option<Var>,
}

impl OctConv {
    pub fn new(vs: &mut VarStore, name: &str, spec: OctConvSpec) -> Result<Self> {
        spec.validate()?;
        let (ch_in, cl_in) = spec.in_split();
        let (ch_out, cl_out) = spec.out_split();
        let k2 = spec.kernel * spec.kernel;
        // Each output branch sums up to two paths.
        let paths_into = |c_out_other_in: usize| -> f64 { if c_out_other_in > 0 { 2.0 } else { 1.0 } };
        let kernel = |vs: &mut VarStore, tag: &str, cin: usize, cout: usize, sibling: usize| {
            if cin == 0 || cout == 0 {
                return Ok(None);
            }
            let std = nn::he_std(cin * k2) / paths_into(sibling).sqrt();
            vs.normal(&format!("{name}.{tag}"), &spec.kernel_shape(cin, cout), std)
                .map(Some)
        };
        let high_to_high = kernel(vs, "hh", ch_in, ch_out, cl_in)?;
        let high_to_low = kernel(vs, "hl", ch_in, cl_out, cl_in)?;
        let low_to_high = kernel(vs, "lh", cl_in, ch_out, ch_in)?;
        let low_to_low = kernel(vs, "ll", cl_in, cl_out, ch_in)?;
        let (bias_high, bias_low) = if spec.bias {
            (
                (ch_out > 0)
                    .then(|| vs.constant(&format!("{name}.bh"), &[ch_out], 0.0))
                    .transpose()?,
                (cl_out > 0)
                    .then(|| vs.constant(&format!("{name}.bl"), &[cl_out], 0.0))
                    .transpose()?,
            )
        } else {
            (None, None)
        };
        Ok(Self {
            spec,
            high_to_high,
            high_to_low,
            low_to_high,
            low_to_low,
            bias_high,
            bias_low,
        })
    }

    pub fn spec(&self) -> &OctConvSpec {
        &self.spec
    }

    pub fn params(&self) -> OctConvParams {
        let t = |v: &Option<Var>| v.as_ref().map(|v| v.as_tensor().clone());
        OctConvParams {
            high_to_high: t(&self.high_to_high),
            high_to_low: t(&self.high_to_low),
            low_to_high: t(&self.low_to_high),
            low_to_low: t(&self.low_to_low),
            bias_high: t(&self.bias_high),
            bias_low: t(&self.bias_low),
        }
    }

    pub fn vars(&self) -> Vec<&Var> {
        [
            &self.high_to_high,
            &self.high_to_low,
            &self.low_to_high,
            &self.low_to_low,
            &self.bias_high,
            &self.bias_low,
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    pub fn forward(&self, u: &OctFeature) -> Result<OctFeature> {
        oct_conv_forward(&self.spec, &self.params(), u)
    }
}
