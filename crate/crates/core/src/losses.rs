//! Objectives of the translation phase.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::nn;
use crate::ntpl::{self, Taus};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub lambda_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_a: 1.0,
            lambda_c: 0.1,
            lambda_r: 0.1,
            lambda_e: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_a, self.lambda_c, self.lambda_r, self.lambda_e];
        if all.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Form of the adversarial loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvForm {
    #[default]
    Hinge,
    /// Saturating cross-entropy form.
    Log,
}

/// Picks channel `labels[i]` of sample `i` from `(n, C, H, W)` logits,
/// giving `(n, H, W)`.
pub fn gather_class_maps(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c, _, _) = logits
        .dims4()
        .map_err(|_| contract_err!("class maps must be (n, C, H, W), got {:?}", logits.dims()))?;
    if labels.len() != n {
        return Err(contract_err!("{} labels for {n} samples", labels.len()));
    }
    let mask = nn::one_hot(labels, c, logits.dtype(), logits.device())?.reshape((n, c, 1, 1))?;
    Ok(logits.broadcast_mul(&mask)?.sum(1)?)
}

fn per_sample_spatial_mean(maps: &Tensor) -> Result<Tensor> {
    Ok(maps.flatten_from(1)?.mean(1)?)
}

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((pos + tail)?)
}

fn real_term(v: &Tensor, form: AdvForm) -> Result<Tensor> {
    match form {
        AdvForm::Hinge => Ok(v.neg()?.affine(1.0, 1.0)?.relu()?),
        AdvForm::Log => softplus(&v.neg()?),
    }
}

fn fake_term(v: &Tensor, form: AdvForm) -> Result<Tensor> {
    match form {
        AdvForm::Hinge => Ok(v.affine(1.0, 1.0)?.relu()?),
        AdvForm::Log => softplus(v),
    }
}

/// Discriminator adversarial loss, averaged over samples and positions:
/// `max(0, 1 - D(real)[l_real]) + max(0, 1 + D(fake)[l_fake])` in hinge form.
/// `weights` masks samples of the real and fake batches respectively.
pub fn adv_loss_d(
    real: &Tensor,
    label_real: &[usize],
    fake: &Tensor,
    label_fake: &[usize],
    weights: (Option<&Tensor>, Option<&Tensor>),
    form: AdvForm,
) -> Result<Tensor> {
    let r = per_sample_spatial_mean(&real_term(&gather_class_maps(real, label_real)?, form)?)?;
    let f = per_sample_spatial_mean(&fake_term(&gather_class_maps(fake, label_fake)?, form)?)?;
    Ok((ntpl::weighted_mean(&r, weights.0)? + ntpl::weighted_mean(&f, weights.1)?)?)
}

/// One generator-side adversarial term: `-mean D(fake)[l]` in hinge form,
/// `mean softplus(-D(fake)[l])` in log form.
pub fn adv_loss_g_term(fake: &Tensor, labels: &[usize], weights: Option<&Tensor>, form: AdvForm) -> Result<Tensor> {
    let v = gather_class_maps(fake, labels)?;
    let per = match form {
        AdvForm::Hinge => per_sample_spatial_mean(&v)?.neg()?,
        AdvForm::Log => per_sample_spatial_mean(&softplus(&v.neg()?)?)?,
    };
    ntpl::weighted_mean(&per, weights)
}

/// Generator adversarial loss on the translation at `l_tg`, plus the cycle
/// image at `l_sc` when given.
pub fn adv_loss_g(
    fake_tg: &Tensor,
    label_tg: &[usize],
    cycle: Option<(&Tensor, &[usize], Option<&Tensor>)>,
    form: AdvForm,
) -> Result<Tensor> {
    let main = adv_loss_g_term(fake_tg, label_tg, None, form)?;
    match cycle {
        None => Ok(main),
        Some((logits, labels, w)) => Ok((main + adv_loss_g_term(logits, labels, w, form)?)?),
    }
}

/// Head loss applied to spatially averaged classification maps.
pub fn gan_classification_loss(
    cls_logits: &Tensor,
    y_tilde: &Tensor,
    y_h: &Tensor,
    taus: &Taus,
    weights: Option<&Tensor>,
) -> Result<Tensor> {
    let (n, c, _, _) = cls_logits
        .dims4()
        .map_err(|_| contract_err!("class maps must be (n, C, H, W)"))?;
    let pooled = cls_logits.mean((2, 3))?.reshape((n, c))?;
    let pred = nn::softmax(&pooled, 1)?;
    ntpl::head_loss_weighted(&pred, y_tilde, y_h, taus, weights)
}

fn l1_mean(a: &Tensor, b: &Tensor, what: &str) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(contract_err!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Inputs of the reconstruction loss.
pub struct ReconInputs<'a> {
    pub x_sc: &'a Tensor,
    pub x_sc_rec: &'a Tensor,
    pub x_sc_cycle: &'a Tensor,
    pub feat_sc: &'a Tensor,
    pub feat_sc_rec: &'a Tensor,
    pub feat_tg: &'a Tensor,
    pub feat_tg_fake: &'a Tensor,
}

/// Sum of four mean absolute errors: self-reconstruction, cycle
/// reconstruction, source feature matching and target feature matching.
pub fn reconstruction_loss(r: &ReconInputs) -> Result<Tensor> {
    Ok(Tensor::stack(&reconstruction_terms(r)?, 0)?.sum_all()?)
}

/// The four terms of [`reconstruction_loss`], in order.
pub fn reconstruction_terms(r: &ReconInputs) -> Result<[Tensor; 4]> {
    Ok([
        l1_mean(r.x_sc, r.x_sc_rec, "self reconstruction")?,
        l1_mean(r.x_sc, r.x_sc_cycle, "cycle reconstruction")?,
        l1_mean(r.feat_sc, r.feat_sc_rec, "source features")?,
        l1_mean(r.feat_tg, r.feat_tg_fake, "target features")?,
    ])
}

/// Mean over positions of the channel-softmax entropy of `(n, C, H, W)` maps.
pub fn pose_entropy_loss(regulated: &Tensor) -> Result<Tensor> {
    regulated
        .dims4()
        .map_err(|_| contract_err!("pose maps must be (n, C, H, W)"))?;
    let p = nn::softmax(regulated, 1)?;
    let logp = nn::log_softmax(regulated, 1)?;
    Ok((p * logp)?.sum(1)?.neg()?.mean_all()?)
}

/// Discriminator-side partial losses.
pub struct DiscPartials {
    pub adv: Tensor,
    pub cls_real: Tensor,
}

/// Generator-side partial losses.
pub struct GenPartials {
    pub adv: Tensor,
    pub cls_fake: Tensor,
    pub recon: Tensor,
    pub pose_entropy: Tensor,
}

pub fn loss_d(p: &DiscPartials, w: &LossWeights) -> Result<Tensor> {
    Ok(((&p.adv * w.lambda_a)? + (&p.cls_real * w.lambda_c)?)?)
}

pub fn loss_g(p: &GenPartials, w: &LossWeights) -> Result<Tensor> {
    let a = ((&p.adv * w.lambda_a)? + (&p.cls_fake * w.lambda_c)?)?;
    let b = ((&p.recon * w.lambda_r)? + (&p.pose_entropy * w.lambda_e)?)?;
    Ok((a + b)?)
}

/// `(loss_d, loss_g)`: reconstruction and pose entropy drive only the
/// generator side; real-image classification drives the discriminator and
/// fake-image classification the generator.
pub fn total_objective(d: &DiscPartials, g: &GenPartials, w: &LossWeights) -> Result<(Tensor, Tensor)> {
    w.validate()?;
    Ok((loss_d(d, w)?, loss_g(g, w)?))
}

/// Zero-valued scalar in the given dtype, for disabled terms.
pub fn zero(dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, device)?)
}
