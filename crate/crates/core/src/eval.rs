//! Evaluation: k-shot translation, Inception Score and FID over a frozen
//! classifier's features, per-class mean FID, and translation accuracy.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, CorpusManifest, ImageSet, Split};
use crate::error::{contract_err, Error, Result};
use crate::networks::{AppearanceCode, Classifier, TranslationModel};
use crate::nn;
use crate::optim::RmsProp;

/// Translates every source with the appearance code averaged over the `k`
/// target exemplars.
pub fn k_shot_translate(model: &TranslationModel, x_sc: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let n = x_sc.dims()[0];
    let code = model.encode_appearance(targets)?.0.mean_keepdim(0)?;
    let code = AppearanceCode(code.broadcast_as((n, code.dims()[1]))?.contiguous()?);
    let pose = model.encode_pose(x_sc)?;
    model.generate(&pose, &model.map_adain(&code)?)
}

/// One row per source: the source, the `k` exemplars, then the
/// translation. Returns the images in row-major order; the grid has `k + 2`
/// columns.
pub fn translation_grid(model: &TranslationModel, x_sc: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let out = k_shot_translate(model, x_sc, targets)?;
    let mut cells = Vec::new();
    for i in 0..x_sc.dims()[0] {
        cells.push(x_sc.narrow(0, i, 1)?);
        cells.push(targets.clone());
        cells.push(out.narrow(0, i, 1)?);
    }
    Ok(Tensor::cat(&cells, 0)?)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.ln() - b.max(1e-300).ln()))
        .sum()
}

/// `exp(E_x KL(p(y|x) || p(y)))` averaged over `splits` contiguous splits.
pub fn inception_score_from_probs(probs: &[Vec<f64>], splits: usize) -> Result<f64> {
    if probs.is_empty() || splits == 0 || splits > probs.len() {
        return Err(contract_err!("need at least one sample per split"));
    }
    let chunk = probs.len().div_ceil(splits);
    let mut scores = Vec::new();
    for part in probs.chunks(chunk) {
        let c = part[0].len();
        let mut marginal = vec![0.0; c];
        for p in part {
            for (m, v) in marginal.iter_mut().zip(p) {
                *m += v / part.len() as f64;
            }
        }
        let mean_kl = part.iter().map(|p| kl(p, &marginal)).sum::<f64>() / part.len() as f64;
        scores.push(mean_kl.exp());
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Softmax class probabilities of a classifier, in batches.
pub fn class_probs(classifier: &Classifier, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    nn::rows_f64(&nn::softmax(&logits_batched(classifier, images)?, 1)?)
}

pub fn logits_batched(classifier: &Classifier, images: &Tensor) -> Result<Tensor> {
    batched(images, |x| classifier.logits(x))
}

pub fn features_batched(classifier: &Classifier, images: &Tensor) -> Result<Tensor> {
    batched(images, |x| classifier.features(x))
}

fn batched(images: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = images.dims()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = 64.min(n - start);
        parts.push(f(&images.narrow(0, start, len)?)?.detach());
        start += len;
    }
    if parts.is_empty() {
        return Err(contract_err!("no images"));
    }
    Ok(Tensor::cat(&parts, 0)?)
}

pub fn inception_score(images: &Tensor, classifier: &Classifier, splits: usize) -> Result<f64> {
    inception_score_from_probs(&class_probs(classifier, images)?, splits)
}

fn moments(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    if n < 2 {
        return Err(contract_err!("need at least two feature vectors"));
    }
    let d = x[0].len();
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let mut centered = m;
    for j in 0..d {
        let mu = mean[j];
        centered.column_mut(j).add_scalar_mut(-mu);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussians fitted to two feature sets.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map(|r| r.len()).unwrap_or(0);
    if d == 0 || b.iter().chain(a).any(|r| r.len() != d) {
        return Err(contract_err!("feature sets must share a positive dimension"));
    }
    let (mu_a, mut cov_a) = moments(a)?;
    let (mu_b, mut cov_b) = moments(b)?;
    if a.len() <= d || b.len() <= d {
        log::warn!(
            "FID with {} and {} samples in {d} dimensions: covariance is rank-deficient, regularizing",
            a.len(),
            b.len()
        );
        let eye = DMatrix::<f64>::identity(d, d) * 1e-6;
        cov_a += &eye;
        cov_b += eye;
    }
    let s = sym_sqrt(&cov_a);
    let inner = &s * &cov_b * &s;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    let v = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(v.max(0.0))
}

pub fn fid(set_a: &Tensor, set_b: &Tensor, extractor: &Classifier) -> Result<f64> {
    fid_from_features(
        &nn::rows_f64(&features_batched(extractor, set_a)?)?,
        &nn::rows_f64(&features_batched(extractor, set_b)?)?,
    )
}

/// Unweighted mean of per-class FIDs over `(translations, reals)` pairs.
pub fn mfid_from_features(groups: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)]) -> Result<f64> {
    if groups.is_empty() {
        return Err(contract_err!("mFID needs at least one class"));
    }
    let mut total = 0.0;
    for (fake, real) in groups {
        total += fid_from_features(fake, real)?;
    }
    Ok(total / groups.len() as f64)
}

pub fn mfid(groups: &[(Tensor, Tensor)], extractor: &Classifier) -> Result<f64> {
    let feats = groups
        .iter()
        .map(|(f, r)| {
            Ok((
                nn::rows_f64(&features_batched(extractor, f)?)?,
                nn::rows_f64(&features_batched(extractor, r)?)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    mfid_from_features(&feats)
}

/// Whether `label` is among the `k` largest entries of `row`. Ties are broken
/// against the label.
pub fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    let v = row[label];
    let better = row.iter().enumerate().filter(|(i, x)| *i != label && **x >= v).count();
    better < k
}

/// Percentage of rows whose label is in the top-1 and top-5 scores.
pub fn top_k_accuracy(scores: &[Vec<f64>], labels: &[usize]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(contract_err!("need one label per score row"));
    }
    let n = labels.len() as f64;
    let t1 = scores.iter().zip(labels).filter(|(s, &l)| in_top_k(s, l, 1)).count() as f64;
    let t5 = scores.iter().zip(labels).filter(|(s, &l)| in_top_k(s, l, 5)).count() as f64;
    Ok((100.0 * t1 / n, 100.0 * t5 / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1_all: f64,
    pub top5_all: f64,
    pub top1_test: f64,
    pub top5_test: f64,
}

/// `labels_all` index the all-class classifier; `labels_test` index the
/// unseen-class classifier.
pub fn translation_accuracy(
    translations: &Tensor,
    labels_all: &[usize],
    labels_test: &[usize],
    classifier_all: &Classifier,
    classifier_test: &Classifier,
) -> Result<Accuracy> {
    let sa = nn::rows_f64(&logits_batched(classifier_all, translations)?)?;
    let st = nn::rows_f64(&logits_batched(classifier_test, translations)?)?;
    let (top1_all, top5_all) = top_k_accuracy(&sa, labels_all)?;
    let (top1_test, top5_test) = top_k_accuracy(&st, labels_test)?;
    Ok(Accuracy {
        top1_all,
        top5_all,
        top1_test,
        top5_test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub top1_all: f64,
    pub top5_all: f64,
    pub top1_test: f64,
    pub top5_test: f64,
    pub is_all: f64,
    pub is_test: f64,
    pub mfid: f64,
}

impl EvalReport {
    pub const COLUMNS: [&'static str; 7] = ["Top1-all", "Top5-all", "Top1-test", "Top5-test", "IS-all", "IS-test", "mFID"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.top1_all,
            self.top5_all,
            self.top1_test,
            self.top5_test,
            self.is_all,
            self.is_test,
            self.mfid,
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let header: Vec<String> = Self::COLUMNS.iter().map(|c| format!("{c:>10}")).collect();
        let row: Vec<String> = self.values().iter().map(|v| format!("{v:>10.2}")).collect();
        writeln!(f, "{}", header.join(" "))?;
        write!(f, "{}", row.join(" "))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            width: 16,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Trains a classifier with cross-entropy on `labels` (already mapped to
/// `0..num_classes`).
pub fn train_classifier(
    images: &ImageSet,
    labels: &[usize],
    num_classes: usize,
    cfg: &ClassifierConfig,
    dtype: DType,
) -> Result<Classifier> {
    if labels.len() != images.len() || labels.is_empty() {
        return Err(contract_err!("need one label per image"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("classifier epochs and batch size must be positive".into()));
    }
    let model = Classifier::new(num_classes, cfg.width, dtype, &Device::Cpu, cfg.seed)?;
    let mut opt = RmsProp::new(model.store().vars().cloned().collect(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc1a5);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = images.batch(chunk, dtype)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let target = nn::one_hot(&y, num_classes, dtype, &Device::Cpu)?;
            let loss = (nn::log_softmax(&model.logits(&x)?, 1)? * target)?.sum(1)?.neg()?.mean_all()?;
            opt.backward_step(&loss)?;
        }
    }
    Ok(model)
}

/// Fraction of translations whose mean colour is closer to the target
/// class's mean colour than to the source class's.
pub fn palette_oracle(
    translations: &Tensor,
    source_classes: &[usize],
    target_classes: &[usize],
    class_colors: &[[f64; 3]],
) -> Result<f64> {
    let colors = data::mean_colors(translations)?;
    if colors.len() != source_classes.len() || colors.len() != target_classes.len() || colors.is_empty() {
        return Err(contract_err!("need one source and target class per translation"));
    }
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let hits = colors
        .iter()
        .zip(source_classes.iter().zip(target_classes))
        .filter(|(c, (&s, &t))| d2(c, &class_colors[t]) < d2(c, &class_colors[s]))
        .count();
    Ok(hits as f64 / colors.len() as f64)
}

/// Mean colour of each class's images in the manifest.
pub fn class_mean_colors(manifest: &CorpusManifest, resolution: usize) -> Result<Vec<[f64; 3]>> {
    let total = manifest.num_seen + manifest.num_unseen;
    let mut out = Vec::with_capacity(total);
    for c in 0..total {
        let idx = manifest.indices_where(|r| r.class.or_else(|| r.sealed_class()) == Some(c));
        if idx.is_empty() {
            return Err(contract_err!("class {c} has no images"));
        }
        let colors = ImageSet::load(manifest, &idx, resolution)?.mean_colors()?;
        let mut m = [0.0; 3];
        for col in &colors {
            for i in 0..3 {
                m[i] += col[i] / colors.len() as f64;
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// k-shot protocol settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub sources_per_class: usize,
    pub is_splits: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 1,
            sources_per_class: 100,
            is_splits: 1,
            seed: 0,
        }
    }
}

/// Translations into each unseen class with their provenance.
pub struct EpisodeResults {
    pub translations: Tensor,
    pub source_classes: Vec<usize>,
    pub target_classes: Vec<usize>,
    /// `(translations, reals)` per unseen class.
    pub per_class: Vec<(Tensor, Tensor)>,
}

/// Runs the k-shot protocol: for every unseen class, `sources_per_class`
/// train-seen sources are translated with a fresh `k`-exemplar episode per
/// source. Source classes are ground truth and used only for reporting.
pub fn run_episodes<F>(manifest: &CorpusManifest, cfg: &EvalConfig, resolution: usize, mut translate: F) -> Result<EpisodeResults>
where
    F: FnMut(&Tensor, &Tensor) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1);
    let (mut all, mut sc_classes, mut tg_classes, mut per_class) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for class in manifest.unseen_classes() {
        let mut outs = Vec::new();
        for _ in 0..cfg.sources_per_class {
            let ep = data::episode_for_class(manifest, class, cfg.k, 1, &mut rng)?;
            let src = ImageSet::load(manifest, &ep.source, resolution)?;
            let tgt = ImageSet::load(manifest, &ep.targets, resolution)?;
            outs.push(translate(src.tensor(), tgt.tensor())?.to_dtype(DType::F32)?.detach());
            sc_classes.push(
                manifest.records[ep.source[0]]
                    .ground_truth()
                    .ok_or_else(|| contract_err!("source without ground truth"))?,
            );
            tg_classes.push(class);
        }
        let fakes = Tensor::cat(&outs, 0)?;
        let real_idx = manifest.indices_where(|r| r.split == Split::TestUnseen && r.class == Some(class));
        let reals = ImageSet::load(manifest, &real_idx, resolution)?.tensor().clone();
        all.push(fakes.clone());
        per_class.push((fakes, reals));
    }
    if all.is_empty() {
        return Err(contract_err!("manifest has no unseen classes"));
    }
    Ok(EpisodeResults {
        translations: Tensor::cat(&all, 0)?,
        source_classes: sc_classes,
        target_classes: tg_classes,
        per_class,
    })
}

/// Scores episode results with the all-class classifier (also the feature
/// extractor) and the unseen-class classifier.
pub fn report(
    results: &EpisodeResults,
    num_seen: usize,
    classifier_all: &Classifier,
    classifier_test: &Classifier,
    is_splits: usize,
) -> Result<EvalReport> {
    let dtype = classifier_all.store().dtype();
    let x = results.translations.to_dtype(dtype)?;
    let labels_test: Vec<usize> = results.target_classes.iter().map(|c| c - num_seen).collect();
    let acc = translation_accuracy(&x, &results.target_classes, &labels_test, classifier_all, classifier_test)?;
    let groups = results
        .per_class
        .iter()
        .map(|(f, r)| Ok((f.to_dtype(dtype)?, r.to_dtype(dtype)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        top1_all: acc.top1_all,
        top5_all: acc.top5_all,
        top1_test: acc.top1_test,
        top5_test: acc.top5_test,
        is_all: inception_score(&x, classifier_all, is_splits)?,
        is_test: inception_score(&x, classifier_test, is_splits)?,
        mfid: mfid(&groups, classifier_all)?,
    })
}

/// Trains the all-class and unseen-class evaluation classifiers on the
/// corpus ground truth.
pub fn train_eval_classifiers(
    manifest: &CorpusManifest,
    resolution: usize,
    cfg: &ClassifierConfig,
    dtype: DType,
) -> Result<(Classifier, Classifier)> {
    let all_idx = manifest.indices_where(|r| !r.external);
    let all_labels = all_idx
        .iter()
        .map(|&i| manifest.records[i].ground_truth().ok_or_else(|| contract_err!("record {i} has no ground truth")))
        .collect::<Result<Vec<_>>>()?;
    let images = ImageSet::load(manifest, &all_idx, resolution)?;
    let total = manifest.num_seen + manifest.num_unseen;
    let classifier_all = train_classifier(&images, &all_labels, total, cfg, dtype)?;
    let test_pos: Vec<usize> = (0..all_idx.len()).filter(|&i| all_labels[i] >= manifest.num_seen).collect();
    let test_images = ImageSet::from_tensor(images.batch(&test_pos, DType::F32)?)?;
    let test_labels: Vec<usize> = test_pos.iter().map(|&i| all_labels[i] - manifest.num_seen).collect();
    let test_cfg = ClassifierConfig {
        seed: cfg.seed ^ 1,
        ..cfg.clone()
    };
    let classifier_test = train_classifier(&test_images, &test_labels, manifest.num_unseen, &test_cfg, dtype)?;
    Ok((classifier_all, classifier_test))
}
