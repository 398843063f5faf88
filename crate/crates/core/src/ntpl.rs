//! Noise-tolerant pseudo-labeling: the two-head classifier objective, label
//! variables, high-confidence selection and the progressive retraining loop.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CorpusManifest, ImageSet, Split};
use crate::error::{contract_err, Error, Result};
use crate::networks::LabelerModel;
use crate::nn;
use crate::optim::RmsProp;

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;
/// Scale used to initialize label variables from soft labels.
pub const LABEL_SCALE: f64 = 1000.0;

fn distribution_tolerance(dtype: DType) -> f64 {
    if dtype == DType::F64 {
        1e-6
    } else {
        1e-4
    }
}

/// Fails unless every row of `t` (shape `(n, C)`) is non-negative and sums to
/// one.
pub fn check_distribution(t: &Tensor, what: &str) -> Result<()> {
    let (_, c) = t.dims2().map_err(|_| contract_err!("{what} must be (n, C), got {:?}", t.dims()))?;
    if c == 0 {
        return Err(contract_err!("{what} has zero classes"));
    }
    let tol = distribution_tolerance(t.dtype());
    for (i, row) in nn::rows_f64(t)?.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| !(*p >= -tol)) || (sum - 1.0).abs() > tol {
            return Err(contract_err!("{what} row {i} is not a distribution (sum {sum})"));
        }
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(contract_err!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    Ok(())
}

fn safe_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.maximum(LOG_FLOOR)?.log()?)
}

/// Per-sample `-sum_c y_tilde log y_h`, shape `(n,)`.
pub fn compat_loss_per_sample(y_tilde: &Tensor, y_h: &Tensor) -> Result<Tensor> {
    same_shape(y_tilde, y_h, "compat_loss")?;
    check_distribution(y_tilde, "assigned label")?;
    check_distribution(y_h, "label estimate")?;
    Ok((y_tilde * safe_log(y_h)?)?.sum(1)?.neg()?)
}

/// Per-sample `KL(pred || y_h)`, shape `(n,)`.
pub fn flipped_kl_loss_per_sample(pred: &Tensor, y_h: &Tensor) -> Result<Tensor> {
    same_shape(pred, y_h, "flipped_kl_loss")?;
    check_distribution(pred, "prediction")?;
    check_distribution(y_h, "label estimate")?;
    let diff = (safe_log(pred)? - safe_log(y_h)?)?;
    Ok((pred * diff)?.sum(1)?)
}

/// Per-sample entropy of `pred`, shape `(n,)`.
pub fn entropy_loss_per_sample(pred: &Tensor) -> Result<Tensor> {
    check_distribution(pred, "prediction")?;
    Ok((pred * safe_log(pred)?)?.sum(1)?.neg()?)
}

pub fn compat_loss(y_tilde: &Tensor, y_h: &Tensor) -> Result<Tensor> {
    Ok(compat_loss_per_sample(y_tilde, y_h)?.mean_all()?)
}

pub fn flipped_kl_loss(pred: &Tensor, y_h: &Tensor) -> Result<Tensor> {
    Ok(flipped_kl_loss_per_sample(pred, y_h)?.mean_all()?)
}

pub fn entropy_loss(pred: &Tensor) -> Result<Tensor> {
    Ok(entropy_loss_per_sample(pred)?.mean_all()?)
}

/// Weights of the three head-loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taus {
    pub cls: f64,
    pub cmp: f64,
    pub ent: f64,
}

impl Taus {
    pub fn for_classes(num_classes: usize) -> Self {
        let c = num_classes as f64;
        Self {
            cls: 1.0 / c,
            cmp: 0.1 / c,
            ent: 0.8 / c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.cls, self.cmp, self.ent].iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::Config(format!("head-loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Weighted mean of a per-sample loss. An all-zero weight vector yields zero.
pub fn weighted_mean(per_sample: &Tensor, weights: Option<&Tensor>) -> Result<Tensor> {
    match weights {
        None => Ok(per_sample.mean_all()?),
        Some(w) => {
            same_shape(per_sample, w, "sample weights")?;
            let total = nn::scalar_f64(&w.sum_all()?)?;
            let weighted = (per_sample * w)?.sum_all()?;
            if total > 0.0 {
                Ok((weighted / total)?)
            } else {
                Ok((weighted * 0.0)?)
            }
        }
    }
}

/// Per-sample head loss `tau_cls L_cls + tau_cmp L_cmp + tau_ent L_ent`.
pub fn head_loss_per_sample(pred: &Tensor, y_tilde: &Tensor, y_h: &Tensor, taus: &Taus) -> Result<Tensor> {
    let cls = flipped_kl_loss_per_sample(pred, y_h)?;
    let cmp = compat_loss_per_sample(y_tilde, y_h)?;
    let ent = entropy_loss_per_sample(pred)?;
    Ok(((cls * taus.cls)? + (cmp * taus.cmp)?)?.add(&(ent * taus.ent)?)?)
}

pub fn head_loss(pred: &Tensor, y_tilde: &Tensor, y_h: &Tensor, taus: &Taus) -> Result<Tensor> {
    head_loss_weighted(pred, y_tilde, y_h, taus, None)
}

pub fn head_loss_weighted(
    pred: &Tensor,
    y_tilde: &Tensor,
    y_h: &Tensor,
    taus: &Taus,
    weights: Option<&Tensor>,
) -> Result<Tensor> {
    weighted_mean(&head_loss_per_sample(pred, y_tilde, y_h, taus)?, weights)
}

/// Sum of the head losses of both classifier heads.
pub fn classifier_loss(
    pred_m: &Tensor,
    pred_m2: &Tensor,
    y_tilde: &Tensor,
    y_h: &Tensor,
    taus: &Taus,
) -> Result<Tensor> {
    Ok((head_loss(pred_m, y_tilde, y_h, taus)? + head_loss(pred_m2, y_tilde, y_h, taus)?)?)
}

/// Trainable label estimates for a fixed list of samples. Rows of clean
/// samples always evaluate to their one-hot label and receive zero gradient.
pub struct LabelVariables {
    y_prime: Var,
    assigned: Tensor,
    pseudo_mask: Tensor,
    clean_mask: Tensor,
}

impl LabelVariables {
    /// `assigned` holds one soft label per sample; `clean[i]` freezes row `i`.
    pub fn new(assigned: &[Vec<f64>], clean: &[bool], dtype: DType, device: &Device) -> Result<Self> {
        if assigned.len() != clean.len() || assigned.is_empty() {
            return Err(contract_err!("label variables need one clean flag per label"));
        }
        let c = assigned[0].len();
        if assigned.iter().any(|r| r.len() != c) {
            return Err(contract_err!("ragged label rows"));
        }
        let flat: Vec<f64> = assigned.iter().flatten().copied().collect();
        let assigned_t = Tensor::from_vec(flat, (assigned.len(), c), device)?.to_dtype(dtype)?;
        check_distribution(&assigned_t, "assigned label")?;
        for (i, (row, &is_clean)) in assigned.iter().zip(clean).enumerate() {
            if is_clean && !row.iter().all(|&p| p == 0.0 || p == 1.0) {
                return Err(contract_err!("clean label {i} is not one-hot"));
            }
        }
        let y_prime = Var::from_tensor(&(&assigned_t * LABEL_SCALE)?)?;
        let mask: Vec<f64> = clean.iter().map(|&c| if c { 0.0 } else { 1.0 }).collect();
        let pseudo_mask = Tensor::from_vec(mask, (clean.len(), 1), device)?.to_dtype(dtype)?;
        let clean_mask = (pseudo_mask.ones_like()? - &pseudo_mask)?;
        Ok(Self {
            y_prime,
            assigned: assigned_t,
            pseudo_mask,
            clean_mask,
        })
    }

    pub fn var(&self) -> &Var {
        &self.y_prime
    }

    pub fn len(&self) -> usize {
        self.assigned.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Assigned labels of the given rows.
    pub fn assigned(&self, rows: &Tensor) -> Result<Tensor> {
        Ok(self.assigned.index_select(rows, 0)?)
    }

    /// Current estimates of the given rows.
    pub fn y_h(&self, rows: &Tensor) -> Result<Tensor> {
        let yp = self.y_prime.as_tensor().index_select(rows, 0)?;
        let soft = nn::softmax(&yp, 1)?;
        let pm = self.pseudo_mask.index_select(rows, 0)?;
        let cm = self.clean_mask.index_select(rows, 0)?;
        let fixed = self.assigned.index_select(rows, 0)?;
        Ok((soft.broadcast_mul(&pm)? + fixed.broadcast_mul(&cm)?)?)
    }

    pub fn y_h_all(&self) -> Result<Tensor> {
        let rows = Tensor::arange(0u32, self.len() as u32, self.y_prime.device())?;
        self.y_h(&rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Clean,
    Pseudo,
}

/// One decision of the selection rule.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub label: Vec<f64>,
    pub class: usize,
    pub head_classes: [usize; 2],
    pub head_confidences: [f64; 2],
}

impl Selection {
    pub fn confidence(&self) -> f64 {
        self.head_confidences[0].min(self.head_confidences[1])
    }
}

fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best })
}

/// Accepts sample `i` iff both heads pick the same class and both heads' top
/// probability is at least `threshold`. The accepted label is the mean of the
/// two softmax vectors, or its argmax one-hot when `hard` is set.
pub fn select_pseudo_labels(
    logits_m: &Tensor,
    logits_m2: &Tensor,
    threshold: f64,
    hard: bool,
) -> Result<Vec<Selection>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    same_shape(logits_m, logits_m2, "select_pseudo_labels")?;
    let pa = nn::rows_f64(&nn::softmax(&logits_m.to_dtype(DType::F64)?, 1)?)?;
    let pb = nn::rows_f64(&nn::softmax(&logits_m2.to_dtype(DType::F64)?, 1)?)?;
    let mut out = Vec::new();
    for (i, (a, b)) in pa.iter().zip(&pb).enumerate() {
        let (ca, conf_a) = argmax(a);
        let (cb, conf_b) = argmax(b);
        if ca != cb || conf_a < threshold || conf_b < threshold {
            continue;
        }
        let label = if hard {
            (0..a.len()).map(|c| if c == ca { 1.0 } else { 0.0 }).collect()
        } else {
            a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
        };
        out.push(Selection {
            index: i,
            label,
            class: ca,
            head_classes: [ca, cb],
            head_confidences: [conf_a, conf_b],
        });
    }
    Ok(out)
}

/// One member of the soft-labeled training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledEntry {
    /// Index into the training pool.
    pub sample: usize,
    pub path: String,
    pub label: Vec<f64>,
    pub origin: Origin,
    pub confidence: f64,
    pub round: usize,
    pub heads_agree: bool,
    pub head_confidences: [f64; 2],
}

impl LabeledEntry {
    pub fn class(&self) -> usize {
        argmax(&self.label).0
    }
}

/// Clean entries followed by accepted pseudo entries.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PseudoLabeledSet {
    pub entries: Vec<LabeledEntry>,
}

impl PseudoLabeledSet {
    pub fn clean_from_pool(pool: &TrainingPool) -> Self {
        let entries = pool
            .clean
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                c.map(|class| {
                    let mut label = vec![0.0; pool.num_classes];
                    label[class] = 1.0;
                    LabeledEntry {
                        sample: i,
                        path: pool.paths[i].clone(),
                        label,
                        origin: Origin::Clean,
                        confidence: 1.0,
                        round: 0,
                        heads_agree: true,
                        head_confidences: [1.0, 1.0],
                    }
                })
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clean(&self) -> impl Iterator<Item = &LabeledEntry> {
        self.entries.iter().filter(|e| e.origin == Origin::Clean)
    }

    pub fn pseudo(&self) -> impl Iterator<Item = &LabeledEntry> {
        self.entries.iter().filter(|e| e.origin == Origin::Pseudo)
    }

    pub fn num_pseudo(&self) -> usize {
        self.pseudo().count()
    }

    /// Re-checks every pseudo entry against the selection rule from its own
    /// stored metadata.
    pub fn audit(&self, threshold: f64) -> Result<()> {
        for e in self.pseudo() {
            if !e.heads_agree || e.head_confidences.iter().any(|&c| c < threshold) || e.confidence < threshold {
                return Err(contract_err!("pseudo entry {} violates the selection rule", e.path));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        {
            let f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            for e in &self.entries {
                writeln!(w, "{}", serde_json::to_string(e)?).map_err(|e| Error::io(&tmp, e))?;
            }
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { entries })
    }
}

/// The images available for labeler training: every non-external train-seen
/// record, with its visible label if any.
pub struct TrainingPool {
    pub images: ImageSet,
    pub paths: Vec<String>,
    pub records: Vec<usize>,
    pub clean: Vec<Option<usize>>,
    pub num_classes: usize,
}

impl TrainingPool {
    pub fn from_manifest(manifest: &CorpusManifest, resolution: usize) -> Result<Self> {
        let records = manifest.indices_where(|r| r.split == Split::TrainSeen && !r.external);
        let images = ImageSet::load(manifest, &records, resolution)?;
        Ok(Self {
            images,
            paths: records.iter().map(|&i| manifest.records[i].path.clone()).collect(),
            clean: records.iter().map(|&i| manifest.records[i].class).collect(),
            records,
            num_classes: manifest.num_seen,
        })
    }

    pub fn from_images(images: ImageSet, clean: Vec<Option<usize>>, num_classes: usize) -> Result<Self> {
        if images.len() != clean.len() {
            return Err(contract_err!("pool needs one label slot per image"));
        }
        if clean.iter().flatten().any(|&c| c >= num_classes) {
            return Err(contract_err!("pool label out of range"));
        }
        Ok(Self {
            paths: (0..clean.len()).map(|i| format!("pool/{i:05}")).collect(),
            records: (0..clean.len()).collect(),
            images,
            clean,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn unlabeled(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.clean[i].is_none()).collect()
    }
}

/// Labeled evaluation images.
pub struct HeldOut {
    pub images: ImageSet,
    pub labels: Vec<usize>,
}

impl HeldOut {
    /// Every record of `manifest`, which must all carry visible labels.
    pub fn from_manifest(manifest: &CorpusManifest, resolution: usize) -> Result<Self> {
        let labels = manifest
            .records
            .iter()
            .map(|r| r.class.ok_or_else(|| contract_err!("held-out record {} is unlabeled", r.path)))
            .collect::<Result<Vec<_>>>()?;
        let all: Vec<usize> = (0..labels.len()).collect();
        Ok(Self {
            images: ImageSet::load(manifest, &all, resolution)?,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtplConfig {
    /// Pseudo-labeling iterations after the initial clean-only training.
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub label_lr_multiplier: f64,
    pub threshold: f64,
    pub hard_labels: bool,
    pub taus: Option<Taus>,
    pub width: usize,
    pub seed: u64,
}

impl Default for NtplConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            epochs_per_round: 5,
            batch_size: 16,
            lr: 1e-3,
            label_lr_multiplier: 100.0,
            threshold: 0.95,
            hard_labels: false,
            taus: None,
            width: 16,
            seed: 0,
        }
    }
}

impl NtplConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_round == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.label_lr_multiplier > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if let Some(t) = &self.taus {
            t.validate()?;
        }
        Ok(())
    }

    pub fn taus_for(&self, num_classes: usize) -> Taus {
        self.taus.unwrap_or_else(|| Taus::for_classes(num_classes))
    }
}

/// Per-round summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub train_size: usize,
    pub mean_loss: f64,
    pub accepted: usize,
    pub heldout_error: Option<f64>,
}

/// Labeler plus its optimizer; the optimizer state persists across rounds.
pub struct LabelerTrainer {
    pub model: LabelerModel,
    opt: RmsProp,
    rng: ChaCha8Rng,
}

impl LabelerTrainer {
    pub fn new(num_classes: usize, cfg: &NtplConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let model = LabelerModel::new(num_classes, cfg.width, dtype, device, cfg.seed)?;
        let opt = RmsProp::new(model.vars(), cfg.lr)?;
        Ok(Self {
            model,
            opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x007a_11e7),
        })
    }

    /// Trains for the configured epochs on `set`; returns the mean loss.
    pub fn train_on(&mut self, pool: &TrainingPool, set: &PseudoLabeledSet, cfg: &NtplConfig) -> Result<f64> {
        if set.is_empty() {
            return Err(contract_err!("cannot train on an empty labeled set"));
        }
        let dtype = self.model.store().dtype();
        let device = self.model.store().device().clone();
        let taus = cfg.taus_for(pool.num_classes);
        let labels: Vec<Vec<f64>> = set.entries.iter().map(|e| e.label.clone()).collect();
        let clean: Vec<bool> = set.entries.iter().map(|e| e.origin == Origin::Clean).collect();
        let vars = LabelVariables::new(&labels, &clean, dtype, &device)?;
        let mut label_opt = RmsProp::new(vec![vars.var().clone()], cfg.lr * cfg.label_lr_multiplier)?;
        let mut order: Vec<usize> = (0..set.len()).collect();
        let (mut total, mut steps) = (0.0, 0usize);
        for _ in 0..cfg.epochs_per_round {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(cfg.batch_size) {
                let rows = Tensor::from_vec(chunk.iter().map(|&r| r as u32).collect::<Vec<_>>(), chunk.len(), &device)?;
                let samples: Vec<usize> = chunk.iter().map(|&r| set.entries[r].sample).collect();
                let x = pool.images.batch(&samples, dtype)?;
                let (lm, lm2) = self.model.forward(&x)?;
                let loss = classifier_loss(
                    &nn::softmax(&lm, 1)?,
                    &nn::softmax(&lm2, 1)?,
                    &vars.assigned(&rows)?,
                    &vars.y_h(&rows)?,
                    &taus,
                )?;
                let value = nn::scalar_f64(&loss)?;
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        iteration: steps,
                        detail: format!("labeler loss {value}"),
                    });
                }
                let grads = loss.backward()?;
                self.opt.step(&grads)?;
                label_opt.step(&grads)?;
                total += value;
                steps += 1;
            }
        }
        Ok(total / steps as f64)
    }

    /// Logits of both heads for the given pool samples, in batches.
    pub fn score(&self, images: &ImageSet, samples: &[usize], batch: usize) -> Result<(Tensor, Tensor)> {
        let dtype = self.model.store().dtype();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for chunk in samples.chunks(batch.max(1)) {
            let (lm, lm2) = self.model.forward(&images.batch(chunk, dtype)?)?;
            a.push(lm.detach());
            b.push(lm2.detach());
        }
        if a.is_empty() {
            let c = self.model.num_classes();
            let empty = Tensor::zeros((0, c), dtype, self.model.store().device())?;
            return Ok((empty.clone(), empty));
        }
        Ok((Tensor::cat(&a, 0)?, Tensor::cat(&b, 0)?))
    }

    /// Class prediction from the averaged head probabilities.
    pub fn predict(&self, images: &ImageSet, batch: usize) -> Result<Vec<usize>> {
        let samples: Vec<usize> = (0..images.len()).collect();
        let (lm, lm2) = self.score(images, &samples, batch)?;
        let p = ((nn::softmax(&lm, 1)? + nn::softmax(&lm2, 1)?)? * 0.5)?;
        Ok(nn::rows_f64(&p)?.iter().map(|r| argmax(r).0).collect())
    }

    pub fn error_rate(&self, heldout: &HeldOut, batch: usize) -> Result<f64> {
        let pred = self.predict(&heldout.images, batch)?;
        let wrong = pred.iter().zip(&heldout.labels).filter(|(p, l)| p != l).count();
        Ok(wrong as f64 / heldout.labels.len().max(1) as f64)
    }
}

/// Trains on `current`, re-scores every unlabeled pool sample and returns the
/// clean entries plus the newly accepted pseudo entries.
pub fn ntpl_round(
    trainer: &mut LabelerTrainer,
    pool: &TrainingPool,
    current: &PseudoLabeledSet,
    cfg: &NtplConfig,
    round: usize,
) -> Result<(PseudoLabeledSet, f64)> {
    let loss = trainer.train_on(pool, current, cfg)?;
    let unlabeled = pool.unlabeled();
    let (lm, lm2) = trainer.score(&pool.images, &unlabeled, 64)?;
    let mut next = PseudoLabeledSet {
        entries: current.clean().cloned().collect(),
    };
    for s in select_pseudo_labels(&lm, &lm2, cfg.threshold, cfg.hard_labels)? {
        let sample = unlabeled[s.index];
        next.entries.push(LabeledEntry {
            sample,
            path: pool.paths[sample].clone(),
            confidence: s.confidence(),
            label: s.label,
            origin: Origin::Pseudo,
            round,
            heads_agree: s.head_classes[0] == s.head_classes[1],
            head_confidences: s.head_confidences,
        });
    }
    Ok((next, loss))
}

pub struct NtplOutcome {
    pub set: PseudoLabeledSet,
    pub reports: Vec<RoundReport>,
}

/// Round 0 trains on clean labels only; rounds `1..=cfg.rounds` retrain the
/// same model on clean plus pseudo entries. `heldout_error` in report `r` is
/// measured right after round `r`'s training.
pub fn ntpl_progressive(
    trainer: &mut LabelerTrainer,
    pool: &TrainingPool,
    cfg: &NtplConfig,
    heldout: Option<&HeldOut>,
    mut on_round: impl FnMut(&RoundReport, &PseudoLabeledSet) -> Result<()>,
) -> Result<NtplOutcome> {
    cfg.validate()?;
    let mut set = PseudoLabeledSet::clean_from_pool(pool);
    if set.is_empty() {
        return Err(Error::Config("no labeled samples in the training pool".into()));
    }
    let mut reports = Vec::new();
    for round in 0..=cfg.rounds {
        let train_size = set.len();
        let (next, mean_loss) = ntpl_round(trainer, pool, &set, cfg, round)?;
        let heldout_error = heldout.map(|h| trainer.error_rate(h, 64)).transpose()?;
        let report = RoundReport {
            round,
            train_size,
            mean_loss,
            accepted: next.num_pseudo(),
            heldout_error,
        };
        log::info!(
            "ntpl round {round}: trained on {train_size}, loss {mean_loss:.4}, accepted {}, held-out error {:?}",
            report.accepted,
            heldout_error
        );
        on_round(&report, &next)?;
        reports.push(report);
        set = next;
    }
    Ok(NtplOutcome { set, reports })
}
