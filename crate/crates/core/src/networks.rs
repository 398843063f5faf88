//! Translation sub-networks (pose encoder, appearance encoder, AdaIN mapping
//! network, generator, feature regulator, discriminator) and the dual-head
//! pseudo-labeling classifier.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, Conv2d, Linear, VarStore};
use crate::octconv::{oct_merge, oct_split, split_channels, OctConv, OctConvSpec, OctFeature};

/// Architecture hyper-parameters. Widths are recorded in checkpoints so a
/// model can be rebuilt exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub resolution: usize,
    /// Number of classes seen during training (`C`).
    pub num_classes: usize,
    /// Share of low-frequency channels in every octave layer.
    pub alpha: f64,
    /// Width of the entry layer of the encoders; doubles per stride-2 layer.
    pub base_width: usize,
    pub max_width: usize,
    pub res_blocks: usize,
    pub appearance_dim: usize,
    pub mlp_hidden: usize,
    /// Total scalars emitted by the mapping network for all AdaIN layers.
    pub adain_params: usize,
    pub disc_base_width: usize,
    pub disc_max_width: usize,
    pub labeler_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            num_classes: 8,
            alpha: 0.5,
            base_width: 64,
            max_width: 256,
            res_blocks: 6,
            appearance_dim: 8,
            mlp_hidden: 256,
            adain_params: 4096,
            disc_base_width: 32,
            disc_max_width: 256,
            labeler_width: 16,
        }
    }
}

impl NetConfig {
    /// Narrow preset for single-core machines.
    pub fn compact() -> Self {
        Self {
            base_width: 8,
            max_width: 32,
            disc_base_width: 8,
            disc_max_width: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "resolution {} must be a positive multiple of 16",
                self.resolution
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.base_width < 4 || self.max_width < self.base_width {
            return Err(Error::Config("invalid encoder widths".into()));
        }
        if self.disc_base_width == 0 || self.disc_max_width < self.disc_base_width {
            return Err(Error::Config("invalid discriminator widths".into()));
        }
        if self.res_blocks == 0 || self.appearance_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("empty network stage".into()));
        }
        if self.adain_params < 2 * self.adain_layers() {
            return Err(Error::Config(format!(
                "{} AdaIN scalars cannot cover {} layers",
                self.adain_params,
                self.adain_layers()
            )));
        }
        Ok(())
    }

    /// Encoder widths after the entry layer and the two stride-2 layers.
    pub fn encoder_widths(&self) -> [usize; 3] {
        let w0 = self.base_width.min(self.max_width);
        let w1 = (2 * w0).min(self.max_width);
        let w2 = (2 * w1).min(self.max_width);
        [w0, w1, w2]
    }

    /// Channel width of the pose code and generator residual stage.
    pub fn code_width(&self) -> usize {
        self.encoder_widths()[2]
    }

    pub fn adain_layers(&self) -> usize {
        2 * self.res_blocks
    }

    pub fn disc_widths(&self) -> [usize; 5] {
        let mut w = [0; 5];
        w[0] = self.disc_base_width;
        for i in 1..5 {
            w[i] = (2 * w[i - 1]).min(self.disc_max_width);
        }
        w
    }
}

/// Placement of each AdaIN layer's parameters inside the flat mapping output:
/// `(offset, pairs)`. The scalars are split into `(scale, shift)` pairs spread
/// evenly across layers, remainder pairs going to the earliest layers. Each
/// slice holds `pairs` scales followed by `pairs` shifts.
pub fn adain_layout(total: usize, layers: usize) -> Vec<(usize, usize)> {
    let pairs = total / 2;
    let base = pairs / layers;
    let rem = pairs % layers;
    let mut offset = 0;
    (0..layers)
        .map(|i| {
            let n = base + usize::from(i < rem);
            let entry = (offset, n);
            offset += 2 * n;
            entry
        })
        .collect()
}

/// Pose code `P(x)`: an octave feature at a quarter of the input resolution.
#[derive(Clone, Debug)]
pub struct PoseCode(pub OctFeature);

/// Appearance code `A(x)`, shape `(n, appearance_dim)`.
#[derive(Clone, Debug)]
pub struct AppearanceCode(pub Tensor);

/// Per-layer AdaIN `(scale, shift)`, each `(n, channels)`.
#[derive(Clone, Debug)]
pub struct AdaInParams {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl AdaInParams {
    /// Scale one, shift zero on every layer.
    pub fn identity(cfg: &NetConfig, batch: usize, dtype: DType, device: &Device) -> Result<Self> {
        let w = cfg.code_width();
        let layers = (0..cfg.adain_layers())
            .map(|_| {
                Ok((
                    Tensor::ones((batch, w), dtype, device)?,
                    Tensor::zeros((batch, w), dtype, device)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Slices the mapping network output into per-layer parameters for layers
    /// of `width` channels. Channels beyond a layer's share get identity
    /// affine parameters; surplus scalars in a share are unused.
    pub fn from_flat(flat: &Tensor, cfg: &NetConfig) -> Result<Self> {
        let (batch, total) = flat.dims2()?;
        if total != cfg.adain_params {
            return Err(shape_err!(
                "mapping output has {total} scalars, expected {}",
                cfg.adain_params
            ));
        }
        let width = cfg.code_width();
        let layers = adain_layout(total, cfg.adain_layers())
            .into_iter()
            .map(|(offset, pairs)| {
                let used = pairs.min(width);
                let mut scale = flat.narrow(1, offset, used)?;
                let mut shift = flat.narrow(1, offset + pairs, used)?;
                if used < width {
                    let pad = width - used;
                    scale = Tensor::cat(
                        &[scale, Tensor::ones((batch, pad), flat.dtype(), flat.device())?],
                        1,
                    )?;
                    shift = Tensor::cat(
                        &[shift, Tensor::zeros((batch, pad), flat.dtype(), flat.device())?],
                        1,
                    )?;
                }
                Ok((scale, shift))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn num_scalars(&self) -> usize {
        self.layers
            .iter()
            .map(|(s, b)| s.elem_count() + b.elem_count())
            .sum::<usize>()
    }
}

/// Instance-normalizes each branch and applies per-channel affine parameters,
/// high channels first.
fn adain(u: &OctFeature, scale: &Tensor, shift: &Tensor) -> Result<OctFeature> {
    let (ch, cl) = u.channels();
    let (n, w) = scale.dims2()?;
    if w != ch + cl {
        return Err(shape_err!("AdaIN width {w} vs feature channels {}", ch + cl));
    }
    let apply = |t: &Tensor, start: usize, c: usize| -> Result<Tensor> {
        let s = scale.narrow(1, start, c)?.reshape((n, c, 1, 1))?;
        let b = shift.narrow(1, start, c)?.reshape((n, c, 1, 1))?;
        Ok(nn::instance_norm(t, 1e-5)?.broadcast_mul(&s)?.broadcast_add(&b)?)
    };
    let high = u.high().map(|t| apply(t, 0, ch)).transpose()?;
    let low = u.low().map(|t| apply(t, ch, cl)).transpose()?;
    OctFeature::new(high, low)
}

/// Two 3x3 octave convolutions with a skip connection.
#[derive(Clone, Debug)]
struct OctResBlock {
    conv1: OctConv,
    conv2: OctConv,
}

impl OctResBlock {
    fn new(vs: &mut VarStore, name: &str, width: usize, alpha: f64) -> Result<Self> {
        let spec = OctConvSpec::new(width, width, alpha, alpha, 3, 1);
        Ok(Self {
            conv1: OctConv::new(vs, &format!("{name}.conv1"), spec)?,
            conv2: OctConv::new(vs, &format!("{name}.conv2"), spec)?,
        })
    }

    fn forward_in(&self, x: &OctFeature) -> Result<OctFeature> {
        let h = self.conv1.forward(x)?.instance_norm()?.relu()?;
        let h = self.conv2.forward(&h)?.instance_norm()?;
        x.add(&h)
    }

    fn forward_adain(&self, x: &OctFeature, p1: &(Tensor, Tensor), p2: &(Tensor, Tensor)) -> Result<OctFeature> {
        let h = adain(&self.conv1.forward(x)?, &p1.0, &p1.1)?.relu()?;
        let h = adain(&self.conv2.forward(&h)?, &p2.0, &p2.1)?;
        x.add(&h)
    }
}

fn check_image(x: &Tensor, multiple: usize) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(shape_err!("expected RGB input, got {c} channels"));
    }
    if h != w || h % multiple != 0 {
        return Err(shape_err!(
            "input must be square with dims divisible by {multiple}, got {h}x{w}"
        ));
    }
    Ok(())
}

/// `P`: entry 7x7 octave layer, two 4x4 stride-2 octave layers, residual
/// blocks. Instance norm and ReLU follow every layer.
#[derive(Clone, Debug)]
pub struct PoseEncoder {
    entry: OctConv,
    down1: OctConv,
    down2: OctConv,
    blocks: Vec<OctResBlock>,
}

impl PoseEncoder {
    pub fn new(vs: &mut VarStore, cfg: &NetConfig) -> Result<Self> {
        let [w0, w1, w2] = cfg.encoder_widths();
        let a = cfg.alpha;
        Ok(Self {
            entry: OctConv::new(vs, "pose.entry", OctConvSpec::new(3, w0, 0.0, a, 7, 1))?,
            down1: OctConv::new(vs, "pose.down1", OctConvSpec::new(w0, w1, a, a, 4, 2))?,
            down2: OctConv::new(vs, "pose.down2", OctConvSpec::new(w1, w2, a, a, 4, 2))?,
            blocks: (0..cfg.res_blocks)
                .map(|i| OctResBlock::new(vs, &format!("pose.res{i}"), w2, a))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<PoseCode> {
        check_image(x, 4)?;
        let u = oct_split(x, 0.0)?;
        let mut h = self.entry.forward(&u)?.instance_norm()?.relu()?;
        h = self.down1.forward(&h)?.instance_norm()?.relu()?;
        h = self.down2.forward(&h)?.instance_norm()?.relu()?;
        for b in &self.blocks {
            h = b.forward_in(&h)?;
        }
        Ok(PoseCode(h))
    }
}

/// `A`: three octave layers, global average pooling, 1x1 projection.
/// No normalization: per-channel statistics carry the appearance.
#[derive(Clone, Debug)]
pub struct AppearanceEncoder {
    layers: [OctConv; 3],
    proj: Linear,
}

impl AppearanceEncoder {
    pub fn new(vs: &mut VarStore, cfg: &NetConfig) -> Result<Self> {
        let [w0, w1, w2] = cfg.encoder_widths();
        let a = cfg.alpha;
        let bias = |s: OctConvSpec| s.with_bias();
        Ok(Self {
            layers: [
                OctConv::new(vs, "appearance.l0", bias(OctConvSpec::new(3, w0, 0.0, a, 7, 1)))?,
                OctConv::new(vs, "appearance.l1", bias(OctConvSpec::new(w0, w1, a, a, 4, 2)))?,
                OctConv::new(vs, "appearance.l2", bias(OctConvSpec::new(w1, w2, a, a, 4, 2)))?,
            ],
            proj: Linear::new(vs, "appearance.proj", w2, cfg.appearance_dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<AppearanceCode> {
        check_image(x, 4)?;
        let mut h = oct_split(x, 0.0)?;
        for l in &self.layers {
            h = l.forward(&h)?.relu()?;
        }
        Ok(AppearanceCode(self.proj.forward(&h.global_avg_pool()?)?))
    }
}

/// `M`: appearance code -> hidden -> flat AdaIN parameters.
#[derive(Clone, Debug)]
pub struct AdainMlp {
    cfg: NetConfig,
    fc1: Linear,
    fc2: Linear,
}

impl AdainMlp {
    pub fn new(vs: &mut VarStore, cfg: &NetConfig) -> Result<Self> {
        let fc1 = Linear::new(vs, "mlp.fc1", cfg.appearance_dim, cfg.mlp_hidden)?;
        let fc2 = Linear::new(vs, "mlp.fc2", cfg.mlp_hidden, cfg.adain_params)?;
        // Start every scale at one.
        let mut bias = vec![0f64; cfg.adain_params];
        for (offset, pairs) in adain_layout(cfg.adain_params, cfg.adain_layers()) {
            bias[offset..offset + pairs].fill(1.0);
        }
        let b = Tensor::from_vec(bias, cfg.adain_params, vs.device())?.to_dtype(vs.dtype())?;
        fc2.bias().set(&b)?;
        // Small output weights keep the initial modulation near identity.
        fc2.weight().set(&(fc2.weight().as_tensor() * 0.1)?)?;
        Ok(Self {
            cfg: cfg.clone(),
            fc1,
            fc2,
        })
    }

    pub fn output_layer(&self) -> &Linear {
        &self.fc2
    }

    /// Flat mapping output, `(n, adain_params)`.
    pub fn forward_flat(&self, code: &AppearanceCode) -> Result<Tensor> {
        let h = self.fc1.forward(&code.0)?.relu()?;
        self.fc2.forward(&h)
    }

    pub fn forward(&self, code: &AppearanceCode) -> Result<AdaInParams> {
        AdaInParams::from_flat(&self.forward_flat(code)?, &self.cfg)
    }
}

/// `G`: AdaIN residual blocks on the pose code, two transposed octave
/// layers back to full resolution, 7x7 RGB projection with tanh.
#[derive(Clone, Debug)]
pub struct Generator {
    blocks: Vec<OctResBlock>,
    up1: OctConv,
    up2: OctConv,
    to_rgb: Conv2d,
}

impl Generator {
    pub fn new(vs: &mut VarStore, cfg: &NetConfig) -> Result<Self> {
        let w = cfg.code_width();
        let a = cfg.alpha;
        let w1 = (w / 2).max(2);
        let w2 = (w / 4).max(2);
        Ok(Self {
            blocks: (0..cfg.res_blocks)
                .map(|i| OctResBlock::new(vs, &format!("generator.res{i}"), w, a))
                .collect::<Result<_>>()?,
            up1: OctConv::new(
                vs,
                "generator.up1",
                OctConvSpec::new(w, w1, a, a, 4, 2).transposed().with_bias(),
            )?,
            up2: OctConv::new(
                vs,
                "generator.up2",
                OctConvSpec::new(w1, w2, a, 0.0, 4, 2).transposed().with_bias(),
            )?,
            to_rgb: Conv2d::new(vs, "generator.to_rgb", w2, 3, 7, 1, true)?,
        })
    }

    pub fn forward(&self, pose: &PoseCode, adain_params: &AdaInParams) -> Result<Tensor> {
        if adain_params.layers.len() != 2 * self.blocks.len() {
            return Err(shape_err!(
                "{} AdaIN layers supplied, generator has {}",
                adain_params.layers.len(),
                2 * self.blocks.len()
            ));
        }
        let mut h = pose.0.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward_adain(&h, &adain_params.layers[2 * i], &adain_params.layers[2 * i + 1])?;
        }
        h = self.up1.forward(&h)?.relu()?;
        h = self.up2.forward(&h)?.relu()?;
        let x = oct_merge(&h)?;
        Ok(self.to_rgb.forward(&x)?.tanh()?)
    }
}

/// Feature regulator `F`: parameter-free, two stride-2 average pools over the
/// pose code brought to its full-resolution grid.
pub fn regulate_pose(pose: &PoseCode) -> Result<Tensor> {
    let full = pose.0.to_full_resolution()?;
    nn::avg_pool2(&nn::avg_pool2(&full)?)
}

/// Discriminator outputs: per-class adversarial logits, per-class
/// classification logits, and the shared trunk features they are computed
/// from.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    pub adv_logits: Tensor,
    pub cls_logits: Tensor,
    pub features: Tensor,
}

/// Pre-activation residual block with leaky ReLU.
#[derive(Clone, Debug)]
struct ActFirstResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ActFirstResBlock {
    fn new(vs: &mut VarStore, name: &str, width: usize) -> Result<Self> {
        let conv1 = Conv2d::new(vs, &format!("{name}.conv1"), width, width, 3, 1, true)?;
        let conv2 = Conv2d::new(vs, &format!("{name}.conv2"), width, width, 3, 1, true)?;
        // Damp the residual branch so stacked blocks keep unit-scale features.
        conv2.weight().set(&(conv2.weight().as_tensor() * 0.3)?)?;
        Ok(Self { conv1, conv2 })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&nn::leaky_relu(x, 0.2)?)?;
        let h = self.conv2.forward(&nn::leaky_relu(&h, 0.2)?)?;
        Ok((x + h)?)
    }
}

#[derive(Clone, Debug)]
struct DiscBlock {
    res: [ActFirstResBlock; 2],
    proj: Conv2d,
}

/// `D`: 7x7 entry convolution, four blocks of two residual blocks, average
/// pooling and a 1x1 convolution, then two parallel 3x3 heads. Plain
/// convolutions throughout.
#[derive(Clone, Debug)]
pub struct Discriminator {
    entry: Conv2d,
    blocks: Vec<DiscBlock>,
    adv_head: Conv2d,
    cls_head: Conv2d,
}

impl Discriminator {
    pub fn new(vs: &mut VarStore, cfg: &NetConfig) -> Result<Self> {
        let w = cfg.disc_widths();
        let entry = Conv2d::new(vs, "disc.entry", 3, w[0], 7, 1, true)?;
        let blocks = (0..4)
            .map(|i| {
                Ok(DiscBlock {
                    res: [
                        ActFirstResBlock::new(vs, &format!("disc.b{i}.res0"), w[i])?,
                        ActFirstResBlock::new(vs, &format!("disc.b{i}.res1"), w[i])?,
                    ],
                    proj: Conv2d::new(vs, &format!("disc.b{i}.proj"), w[i], w[i + 1], 1, 1, true)?,
                })
            })
            .collect::<Result<_>>()?;
        let adv_head = Conv2d::new(vs, "disc.adv", w[4], cfg.num_classes, 3, 1, true)?;
        let cls_head = Conv2d::new(vs, "disc.cls", w[4], cfg.num_classes, 3, 1, true)?;
        Ok(Self {
            entry,
            blocks,
            adv_head,
            cls_head,
        })
    }

    /// Trunk features `F_Xi(x)` only.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        check_image(x, 16)?;
        let mut h = self.entry.forward(x)?;
        for b in &self.blocks {
            h = b.res[0].forward(&h)?;
            h = b.res[1].forward(&h)?;
            h = b.proj.forward(&nn::avg_pool2(&h)?)?;
        }
        Ok(h)
    }

    pub fn heads(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let a = nn::leaky_relu(features, 0.2)?;
        Ok((self.adv_head.forward(&a)?, self.cls_head.forward(&a)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<DiscOutput> {
        let features = self.features(x)?;
        let (adv_logits, cls_logits) = self.heads(&features)?;
        Ok(DiscOutput {
            adv_logits,
            cls_logits,
            features,
        })
    }
}

/// Four stride-2 3x3 convolutions with leaky ReLU and global average pooling.
#[derive(Clone, Debug)]
pub struct Backbone {
    convs: Vec<Conv2d>,
    out_dim: usize,
}

impl Backbone {
    pub fn new(vs: &mut VarStore, name: &str, width: usize) -> Result<Self> {
        let widths = [3, width, 2 * width, 4 * width, 4 * width];
        let convs = (0..4)
            .map(|i| Conv2d::new(vs, &format!("{name}.conv{i}"), widths[i], widths[i + 1], 3, 2, true))
            .collect::<Result<_>>()?;
        Ok(Self {
            convs,
            out_dim: widths[4],
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = nn::leaky_relu(&c.forward(&h)?, 0.1)?;
        }
        nn::global_avg_pool(&h)
    }
}

/// Backbone with two independent classification heads.
pub struct LabelerModel {
    store: VarStore,
    backbone: Backbone,
    head_m: Linear,
    head_m2: Linear,
    num_classes: usize,
}

impl LabelerModel {
    pub fn new(num_classes: usize, width: usize, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let mut store = VarStore::new(dtype, device, seed);
        let backbone = Backbone::new(&mut store, "labeler.backbone", width)?;
        let d = backbone.out_dim();
        let head_m = Linear::new(&mut store, "labeler.head_m", d, num_classes)?;
        let head_m2 = Linear::new(&mut store, "labeler.head_m2", d, num_classes)?;
        Ok(Self {
            store,
            backbone,
            head_m,
            head_m2,
            num_classes,
        })
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn vars(&self) -> Vec<Var> {
        self.store.vars().cloned().collect()
    }

    /// Logits of both heads, each `(n, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.backbone.forward(x)?;
        Ok((self.head_m.forward(&f)?, self.head_m2.forward(&f)?))
    }
}

pub fn labeler_forward(model: &LabelerModel, x: &Tensor) -> Result<(Tensor, Tensor)> {
    model.forward(x)
}

/// Single-head classifier; also serves as the frozen evaluation feature
/// extractor.
pub struct Classifier {
    store: VarStore,
    backbone: Backbone,
    head: Linear,
    num_classes: usize,
}

impl Classifier {
    pub fn new(num_classes: usize, width: usize, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let mut store = VarStore::new(dtype, device, seed);
        let backbone = Backbone::new(&mut store, "classifier.backbone", width)?;
        let head = Linear::new(&mut store, "classifier.head", backbone.out_dim(), num_classes)?;
        Ok(Self {
            store,
            backbone,
            head,
            num_classes,
        })
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.out_dim()
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.forward(x)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.features(x)?)
    }
}

/// The translation model: generator-side networks in one store, the
/// discriminator in another, so each player's optimizer sees only its own
/// parameters.
pub struct TranslationModel {
    pub cfg: NetConfig,
    pub pose: PoseEncoder,
    pub appearance: AppearanceEncoder,
    pub mlp: AdainMlp,
    pub generator: Generator,
    pub discriminator: Discriminator,
    gen_store: VarStore,
    disc_store: VarStore,
}

impl TranslationModel {
    pub fn new(cfg: &NetConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut gen_store = VarStore::new(dtype, device, seed);
        let pose = PoseEncoder::new(&mut gen_store, cfg)?;
        let appearance = AppearanceEncoder::new(&mut gen_store, cfg)?;
        let mlp = AdainMlp::new(&mut gen_store, cfg)?;
        let generator = Generator::new(&mut gen_store, cfg)?;
        let mut disc_store = VarStore::new(dtype, device, seed ^ 0x9e37_79b9_7f4a_7c15);
        let discriminator = Discriminator::new(&mut disc_store, cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            pose,
            appearance,
            mlp,
            generator,
            discriminator,
            gen_store,
            disc_store,
        })
    }

    pub fn gen_store(&self) -> &VarStore {
        &self.gen_store
    }

    pub fn disc_store(&self) -> &VarStore {
        &self.disc_store
    }

    pub fn dtype(&self) -> DType {
        self.gen_store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.gen_store.device()
    }

    pub fn encode_pose(&self, x: &Tensor) -> Result<PoseCode> {
        self.pose.forward(x)
    }

    pub fn encode_appearance(&self, x: &Tensor) -> Result<AppearanceCode> {
        self.appearance.forward(x)
    }

    pub fn map_adain(&self, code: &AppearanceCode) -> Result<AdaInParams> {
        self.mlp.forward(code)
    }

    pub fn generate(&self, pose: &PoseCode, params: &AdaInParams) -> Result<Tensor> {
        self.generator.forward(pose, params)
    }

    pub fn discriminate(&self, x: &Tensor) -> Result<DiscOutput> {
        self.discriminator.forward(x)
    }

    /// `G(P(source), M(A(target)))`.
    pub fn translate(&self, source: &Tensor, target: &Tensor) -> Result<Tensor> {
        let pose = self.encode_pose(source)?;
        let code = self.encode_appearance(target)?;
        self.generate(&pose, &self.map_adain(&code)?)
    }
}

/// Channel split of the pose code for a config, `(high, low)`.
pub fn pose_channels(cfg: &NetConfig) -> (usize, usize) {
    split_channels(cfg.code_width(), cfg.alpha)
}
