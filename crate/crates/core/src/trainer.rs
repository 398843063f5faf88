//! Training orchestration: the labeling phase and the alternating
//! discriminator/generator translation phase.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, CorpusManifest, ImageSet};
use crate::error::{contract_err, Error, Result};
use crate::losses::{self, AdvForm, DiscPartials, GenPartials, LossWeights, ReconInputs};
use crate::networks::{self, Classifier, LabelerModel, NetConfig, PoseCode, TranslationModel};
use crate::nn;
use crate::ntpl::{self, HeldOut, LabelVariables, LabelerTrainer, NtplConfig, NtplOutcome, PseudoLabeledSet, Taus, TrainingPool};
use crate::optim::RmsProp;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub weights: LossWeights,
    /// Head-loss weights; `None` derives them from the class count.
    pub taus: Option<Taus>,
    pub adv_form: AdvForm,
    /// Adds the generator adversarial term of the cycle image at the source
    /// class.
    pub cycle_adv: bool,
    pub label_lr_multiplier: f64,
    /// Draws sources from external unlabeled images as well.
    pub external_unlabeled: bool,
    pub precision: Precision,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub sample_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            lr: 1e-4,
            batch_size: 16,
            iterations: 20_000,
            weights: LossWeights::default(),
            taus: None,
            adv_form: AdvForm::Hinge,
            cycle_adv: true,
            label_lr_multiplier: 100.0,
            external_unlabeled: false,
            precision: Precision::F32,
            seed: 0,
            log_every: 10,
            checkpoint_every: 1000,
            sample_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        if let Some(t) = &self.taus {
            t.validate()?;
        }
        if !(self.lr > 0.0) || !(self.label_lr_multiplier > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 || self.sample_every == 0 {
            return Err(Error::Config("logging intervals must be positive".into()));
        }
        Ok(())
    }

    pub fn taus(&self) -> Taus {
        self.taus.unwrap_or_else(|| Taus::for_classes(self.net.num_classes))
    }
}

/// Training images for the translation phase. Rows with a label index into
/// the label variables; rows without one are external unlabeled images.
pub struct TranslationData {
    pub images: ImageSet,
    pub label_rows: Vec<Option<usize>>,
    pub soft_labels: Vec<Vec<f64>>,
    pub clean: Vec<bool>,
}

impl TranslationData {
    pub fn new(
        images: ImageSet,
        label_rows: Vec<Option<usize>>,
        soft_labels: Vec<Vec<f64>>,
        clean: Vec<bool>,
    ) -> Result<Self> {
        if label_rows.len() != images.len() || soft_labels.len() != clean.len() {
            return Err(contract_err!("translation data sizes disagree"));
        }
        let mut seen = vec![false; soft_labels.len()];
        for r in label_rows.iter().flatten() {
            if *r >= seen.len() || std::mem::replace(&mut seen[*r], true) {
                return Err(contract_err!("label row {r} missing or reused"));
            }
        }
        if seen.iter().any(|s| !s) || seen.is_empty() {
            return Err(contract_err!("every label must belong to exactly one image"));
        }
        Ok(Self {
            images,
            label_rows,
            soft_labels,
            clean,
        })
    }

    /// Images of the soft-labeled set, followed by the manifest's external
    /// images when `include_external` is set.
    pub fn from_labeled_set(
        manifest: &CorpusManifest,
        set: &PseudoLabeledSet,
        resolution: usize,
        include_external: bool,
    ) -> Result<Self> {
        let mut pixels = Vec::new();
        let mut label_rows = Vec::new();
        for (i, e) in set.entries.iter().enumerate() {
            let p = Path::new(&e.path);
            let p = if p.is_absolute() { p.to_path_buf() } else { manifest.root.join(p) };
            pixels.extend(data::load_image(&p, resolution)?);
            label_rows.push(Some(i));
        }
        if include_external {
            for r in manifest.records.iter().filter(|r| r.external) {
                pixels.extend(data::load_image(&manifest.resolve(r), resolution)?);
                label_rows.push(None);
            }
        }
        let n = label_rows.len();
        let images = ImageSet::from_tensor(Tensor::from_vec(pixels, (n, 3, resolution, resolution), &Device::Cpu)?)?;
        Self::new(
            images,
            label_rows,
            set.entries.iter().map(|e| e.label.clone()).collect(),
            set.entries.iter().map(|e| e.origin == ntpl::Origin::Clean).collect(),
        )
    }

    pub fn labeled_rows(&self) -> Vec<usize> {
        (0..self.label_rows.len()).filter(|&i| self.label_rows[i].is_some()).collect()
    }

    /// Independent uniform draws: sources from all rows (labeled only unless
    /// `with_external`), targets from labeled rows.
    pub fn sample<R: Rng>(&self, n: usize, with_external: bool, rng: &mut R, dtype: DType) -> Result<Batch> {
        let labeled = self.labeled_rows();
        let sc: Vec<usize> = (0..n)
            .map(|_| {
                if with_external {
                    rng.random_range(0..self.label_rows.len())
                } else {
                    labeled[rng.random_range(0..labeled.len())]
                }
            })
            .collect();
        let tg: Vec<usize> = (0..n).map(|_| labeled[rng.random_range(0..labeled.len())]).collect();
        self.batch(&sc, &tg, dtype)
    }

    pub fn batch(&self, sc: &[usize], tg: &[usize], dtype: DType) -> Result<Batch> {
        if sc.len() != tg.len() || sc.is_empty() {
            return Err(contract_err!("source and target batches must be equal and non-empty"));
        }
        let tg_rows = tg
            .iter()
            .map(|&i| self.label_rows[i].ok_or_else(|| contract_err!("target {i} is unlabeled")))
            .collect::<Result<_>>()?;
        Ok(Batch {
            x_sc: self.images.batch(sc, dtype)?,
            x_tg: self.images.batch(tg, dtype)?,
            sc_rows: sc.iter().map(|&i| self.label_rows[i]).collect(),
            tg_rows,
        })
    }
}

/// One training batch. `sc_rows[i] == None` marks an external source.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x_sc: Tensor,
    pub x_tg: Tensor,
    pub sc_rows: Vec<Option<usize>>,
    pub tg_rows: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tg_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tg_rows.is_empty()
    }

    pub fn external_mask(&self) -> Vec<bool> {
        self.sc_rows.iter().map(|r| r.is_none()).collect()
    }
}

/// Outputs of the forward translation pass.
pub struct Translations {
    /// `G(P(x_sc), M(A(x_tg)))`
    pub fake_tg: Tensor,
    /// `G(P(x_sc), M(A(x_sc)))`
    pub rec_sc: Tensor,
    /// `G(P(fake_tg), M(A(x_sc)))`
    pub cycle_sc: Tensor,
    pub pose_sc: PoseCode,
}

pub fn translate_step(model: &TranslationModel, x_sc: &Tensor, x_tg: &Tensor) -> Result<Translations> {
    let pose_sc = model.encode_pose(x_sc)?;
    let params_tg = model.map_adain(&model.encode_appearance(x_tg)?)?;
    let params_sc = model.map_adain(&model.encode_appearance(x_sc)?)?;
    let fake_tg = model.generate(&pose_sc, &params_tg)?;
    let rec_sc = model.generate(&pose_sc, &params_sc)?;
    let cycle_sc = model.generate(&model.encode_pose(&fake_tg)?, &params_sc)?;
    Ok(Translations {
        fake_tg,
        rec_sc,
        cycle_sc,
        pose_sc,
    })
}

/// Scalars recorded for one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterStats {
    pub iter: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_ent")]
    pub l_ent: f64,
    pub lr: f64,
    pub adv_d: f64,
    pub cls_d: f64,
    pub adv_g: f64,
    pub cls_g: f64,
    /// Self, cycle, source-feature and target-feature reconstruction terms.
    pub recon_terms: [f64; 4],
}

/// Model, optimizers and label variables of the translation phase.
pub struct TrainState {
    pub model: TranslationModel,
    pub labels: LabelVariables,
    pub cfg: TrainConfig,
    pub iteration: usize,
    opt_g: RmsProp,
    opt_d: RmsProp,
    opt_labels: RmsProp,
    taus: Taus,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, data: &TranslationData) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.precision.dtype();
        if data.soft_labels.iter().any(|l| l.len() != cfg.net.num_classes) {
            return Err(contract_err!("label width differs from {} classes", cfg.net.num_classes));
        }
        let model = TranslationModel::new(&cfg.net, dtype, &Device::Cpu, cfg.seed)?;
        let labels = LabelVariables::new(&data.soft_labels, &data.clean, dtype, &Device::Cpu)?;
        let opt_g = RmsProp::new(model.gen_store().vars().cloned().collect(), cfg.lr)?;
        let opt_d = RmsProp::new(model.disc_store().vars().cloned().collect(), cfg.lr)?;
        let opt_labels = RmsProp::new(vec![labels.var().clone()], cfg.lr * cfg.label_lr_multiplier)?;
        Ok(Self {
            model,
            labels,
            taus: cfg.taus(),
            cfg: cfg.clone(),
            iteration: 0,
            opt_g,
            opt_d,
            opt_labels,
        })
    }

    fn rows(&self, rows: &[usize]) -> Result<Tensor> {
        let v: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
        Ok(Tensor::from_vec(v, rows.len(), self.model.device())?)
    }

    /// Current class of each label row: argmax of its label estimate.
    pub fn classes(&self, rows: &[usize]) -> Result<Vec<usize>> {
        let yh = nn::rows_f64(&self.labels.y_h(&self.rows(rows)?)?)?;
        Ok(yh
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &p)| if p > b.1 { (i, p) } else { b })
                    .0
            })
            .collect())
    }

    /// Source rows with externals mapped to row 0, their classes, and the
    /// 0/1 weight that masks externals out.
    fn source_rows(&self, batch: &Batch) -> Result<(Vec<usize>, Vec<usize>, Tensor)> {
        let rows: Vec<usize> = batch.sc_rows.iter().map(|r| r.unwrap_or(0)).collect();
        let classes = self.classes(&rows)?;
        let w: Vec<f64> = batch.sc_rows.iter().map(|r| if r.is_some() { 1.0 } else { 0.0 }).collect();
        Ok((rows, classes, nn::vector(&w, self.model.dtype(), self.model.device())?))
    }

    /// Discriminator-side partial losses. Reals are `x_sc` at `l_sc` and
    /// `x_tg` at `l_tg`; fakes are the detached translation at `l_tg` and,
    /// with `cycle_adv`, the detached cycle image at `l_sc`. External sources
    /// are masked out of every term that needs their class.
    pub fn disc_partials(&self, batch: &Batch, t: &Translations) -> Result<DiscPartials> {
        let n = batch.len();
        let dtype = self.model.dtype();
        let device = self.model.device().clone();
        let l_tg = self.classes(&batch.tg_rows)?;
        let (sc_rows, l_sc, sc_w) = self.source_rows(batch)?;
        let ones = Tensor::ones(n, dtype, &device)?;

        let mut images = vec![batch.x_sc.clone(), batch.x_tg.clone(), t.fake_tg.detach()];
        if self.cfg.cycle_adv {
            images.push(t.cycle_sc.detach());
        }
        let out = self.model.discriminate(&Tensor::cat(&images, 0)?)?;
        let real_w = Tensor::cat(&[&sc_w, &ones], 0)?;
        let real_labels: Vec<usize> = l_sc.iter().chain(&l_tg).copied().collect();
        let (fake_labels, fake_w): (Vec<usize>, Tensor) = if self.cfg.cycle_adv {
            (l_tg.iter().chain(&l_sc).copied().collect(), Tensor::cat(&[&ones, &sc_w], 0)?)
        } else {
            (l_tg.clone(), ones.clone())
        };
        let adv = losses::adv_loss_d(
            &out.adv_logits.narrow(0, 0, 2 * n)?,
            &real_labels,
            &out.adv_logits.narrow(0, 2 * n, images.len() * n - 2 * n)?,
            &fake_labels,
            (Some(&real_w), Some(&fake_w)),
            self.cfg.adv_form,
        )?;
        let rows: Vec<usize> = sc_rows.iter().chain(&batch.tg_rows).copied().collect();
        let rows = self.rows(&rows)?;
        let cls_real = losses::gan_classification_loss(
            &out.cls_logits.narrow(0, 0, 2 * n)?,
            &self.labels.assigned(&rows)?,
            &self.labels.y_h(&rows)?,
            &self.taus,
            Some(&real_w),
        )?;
        Ok(DiscPartials { adv, cls_real })
    }

    /// Generator-side partial losses through the full translation graph,
    /// with the four reconstruction terms.
    pub fn gen_partials(&self, batch: &Batch, t: &Translations) -> Result<(GenPartials, [Tensor; 4])> {
        let n = batch.len();
        let tg = self.rows(&batch.tg_rows)?;
        let l_tg = self.classes(&batch.tg_rows)?;
        let (_, l_sc, sc_weight) = self.source_rows(batch)?;

        let all = Tensor::cat(&[&t.fake_tg, &t.cycle_sc, &t.rec_sc, &batch.x_sc, &batch.x_tg], 0)?;
        let out = self.model.discriminate(&all)?;
        let feats = nn::global_avg_pool(&out.features)?;
        let part = |i: usize, x: &Tensor| x.narrow(0, i * n, n);

        let cycle = if self.cfg.cycle_adv {
            Some(part(1, &out.adv_logits)?)
        } else {
            None
        };
        let adv = losses::adv_loss_g(
            &part(0, &out.adv_logits)?,
            &l_tg,
            cycle.as_ref().map(|c| (c, l_sc.as_slice(), Some(&sc_weight))),
            self.cfg.adv_form,
        )?;
        let cls_fake = losses::gan_classification_loss(
            &part(0, &out.cls_logits)?,
            &self.labels.assigned(&tg)?,
            &self.labels.y_h(&tg)?.detach(),
            &self.taus,
            None,
        )?;
        let recon_terms = losses::reconstruction_terms(&ReconInputs {
            x_sc: &batch.x_sc,
            x_sc_rec: &t.rec_sc,
            x_sc_cycle: &t.cycle_sc,
            feat_sc: &part(3, &feats)?.detach(),
            feat_sc_rec: &part(2, &feats)?,
            feat_tg: &part(4, &feats)?.detach(),
            feat_tg_fake: &part(0, &feats)?,
        })?;
        let recon = Tensor::stack(&recon_terms, 0)?.sum_all()?;
        let pose_entropy = losses::pose_entropy_loss(&networks::regulate_pose(&t.pose_sc)?)?;
        Ok((
            GenPartials {
                adv,
                cls_fake,
                recon,
                pose_entropy,
            },
            recon_terms,
        ))
    }

    /// One discriminator update followed by one generator-side update.
    pub fn train_iteration(&mut self, batch: &Batch) -> Result<IterStats> {
        let w = self.cfg.weights;
        let t = translate_step(&self.model, &batch.x_sc, &batch.x_tg)?;

        let dp = self.disc_partials(batch, &t)?;
        let loss_d = losses::loss_d(&dp, &w)?;
        let ld = nn::scalar_f64(&loss_d)?;
        self.check_finite("loss_d", ld)?;
        let grads = loss_d.backward()?;
        self.opt_d.step(&grads)?;
        self.opt_labels.step(&grads)?;

        let (gp, terms) = self.gen_partials(batch, &t)?;
        let loss_g = losses::loss_g(&gp, &w)?;
        let lg = nn::scalar_f64(&loss_g)?;
        self.check_finite("loss_g", lg)?;
        let grads = loss_g.backward()?;
        self.opt_g.step(&grads)?;

        let stats = IterStats {
            iter: self.iteration,
            loss_d: ld,
            loss_g: lg,
            l_r: nn::scalar_f64(&gp.recon)?,
            l_ent: nn::scalar_f64(&gp.pose_entropy)?,
            lr: self.opt_g.lr(),
            adv_d: nn::scalar_f64(&dp.adv)?,
            cls_d: nn::scalar_f64(&dp.cls_real)?,
            adv_g: nn::scalar_f64(&gp.adv)?,
            cls_g: nn::scalar_f64(&gp.cls_fake)?,
            recon_terms: [
                nn::scalar_f64(&terms[0])?,
                nn::scalar_f64(&terms[1])?,
                nn::scalar_f64(&terms[2])?,
                nn::scalar_f64(&terms[3])?,
            ],
        };
        self.iteration += 1;
        Ok(stats)
    }

    fn check_finite(&self, what: &str, v: f64) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                iteration: self.iteration,
                detail: format!("{what} = {v}"),
            })
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_translation_model(path, &self.model, self.cfg.precision, self.iteration)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelManifest {
    Translation {
        net: NetConfig,
        precision: Precision,
        iteration: usize,
    },
    Labeler {
        num_classes: usize,
        width: usize,
        precision: Precision,
    },
    Classifier {
        num_classes: usize,
        width: usize,
        precision: Precision,
        classes: Vec<usize>,
    },
}

pub fn save_translation_model(path: &Path, model: &TranslationModel, precision: Precision, iteration: usize) -> Result<()> {
    checkpoint::save(
        path,
        &[("gen", model.gen_store()), ("disc", model.disc_store())],
        &ModelManifest::Translation {
            net: model.cfg.clone(),
            precision,
            iteration,
        },
    )
}

pub fn load_translation_model(path: &Path) -> Result<(TranslationModel, usize)> {
    match checkpoint::read_manifest(path)? {
        ModelManifest::Translation { net, precision, iteration } => {
            let model = TranslationModel::new(&net, precision.dtype(), &Device::Cpu, 0)?;
            checkpoint::load_into(path, &[("gen", model.gen_store()), ("disc", model.disc_store())])?;
            Ok((model, iteration))
        }
        other => Err(Error::Checkpoint(format!("expected a translation model, found {other:?}"))),
    }
}

pub fn save_labeler(path: &Path, model: &LabelerModel, width: usize, precision: Precision) -> Result<()> {
    checkpoint::save(
        path,
        &[("labeler", model.store())],
        &ModelManifest::Labeler {
            num_classes: model.num_classes(),
            width,
            precision,
        },
    )
}

pub fn load_labeler(path: &Path) -> Result<LabelerModel> {
    match checkpoint::read_manifest(path)? {
        ModelManifest::Labeler { num_classes, width, precision } => {
            let model = LabelerModel::new(num_classes, width, precision.dtype(), &Device::Cpu, 0)?;
            checkpoint::load_into(path, &[("labeler", model.store())])?;
            Ok(model)
        }
        other => Err(Error::Checkpoint(format!("expected a labeler, found {other:?}"))),
    }
}

/// `classes[i]` is the corpus class predicted by output `i`.
pub fn save_classifier(path: &Path, model: &Classifier, width: usize, precision: Precision, classes: &[usize]) -> Result<()> {
    if classes.len() != model.num_classes() {
        return Err(contract_err!("{} class ids for {} outputs", classes.len(), model.num_classes()));
    }
    checkpoint::save(
        path,
        &[("classifier", model.store())],
        &ModelManifest::Classifier {
            num_classes: model.num_classes(),
            width,
            precision,
            classes: classes.to_vec(),
        },
    )
}

pub fn load_classifier(path: &Path) -> Result<(Classifier, Vec<usize>)> {
    match checkpoint::read_manifest(path)? {
        ModelManifest::Classifier {
            num_classes,
            width,
            precision,
            classes,
        } => {
            let model = Classifier::new(num_classes, width, precision.dtype(), &Device::Cpu, 0)?;
            checkpoint::load_into(path, &[("classifier", model.store())])?;
            Ok((model, classes))
        }
        other => Err(Error::Checkpoint(format!("expected a classifier, found {other:?}"))),
    }
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(value)?).map_err(|e| Error::io(path, e))
}

/// Labeling phase: progressive pseudo-labeling over the manifest's
/// train-seen images. Writes `labeled_set.jsonl`, `labeler.safetensors` and
/// `rounds.jsonl` under `out_dir`.
pub fn run_phase1(
    cfg: &NtplConfig,
    manifest: &CorpusManifest,
    resolution: usize,
    precision: Precision,
    heldout: Option<&HeldOut>,
    out_dir: &Path,
) -> Result<NtplOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = TrainingPool::from_manifest(manifest, resolution)?;
    let mut trainer = LabelerTrainer::new(pool.num_classes, cfg, precision.dtype(), &Device::Cpu)?;
    let log = out_dir.join("rounds.jsonl");
    if log.exists() {
        fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    let outcome = ntpl::ntpl_progressive(&mut trainer, &pool, cfg, heldout, |report, set| {
        set.audit(cfg.threshold)?;
        append_jsonl(&log, report)
    })?;
    outcome.set.save(&out_dir.join("labeled_set.jsonl"))?;
    save_labeler(&out_dir.join("labeler.safetensors"), &trainer.model, cfg.width, precision)?;
    Ok(outcome)
}

/// Translation phase. Writes `train_log.jsonl`, periodic checkpoints under
/// `checkpoints/`, sample grids under `samples/` and the final
/// `model.safetensors`. A non-finite loss stops training after a diagnostic
/// snapshot is written to `nan_snapshot.safetensors`.
pub fn run_phase2(
    cfg: &TrainConfig,
    data: &TranslationData,
    out_dir: &Path,
    mut on_iter: impl FnMut(&IterStats),
) -> Result<TrainState> {
    let mut state = TrainState::new(cfg, data)?;
    let dtype = cfg.precision.dtype();
    fs::create_dir_all(out_dir.join("checkpoints")).map_err(|e| Error::io(out_dir, e))?;
    let log = out_dir.join("train_log.jsonl");
    if log.exists() {
        fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0ba7_c4e5);
    let preview = data.sample(cfg.batch_size.min(8), false, &mut ChaCha8Rng::seed_from_u64(cfg.seed), dtype)?;
    for _ in 0..cfg.iterations {
        let batch = data.sample(cfg.batch_size, cfg.external_unlabeled, &mut rng, dtype)?;
        let stats = match state.train_iteration(&batch) {
            Ok(s) => s,
            Err(e @ Error::NonFinite { .. }) => {
                let snap = out_dir.join("nan_snapshot.safetensors");
                state.save(&snap)?;
                log::error!("{e}; snapshot written to {}", snap.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let done = state.iteration;
        if done % cfg.log_every == 0 || done == cfg.iterations {
            append_jsonl(&log, &stats)?;
            log::info!(
                "iter {done}: loss_d {:.4} loss_g {:.4} L_r {:.4} L_ent {:.4}",
                stats.loss_d,
                stats.loss_g,
                stats.l_r,
                stats.l_ent
            );
        }
        if done % cfg.checkpoint_every == 0 {
            state.save(&checkpoint_path(out_dir, done))?;
        }
        if done % cfg.sample_every == 0 {
            save_preview(&state.model, &preview, &out_dir.join("samples").join(format!("iter_{done:06}.png")))?;
        }
        on_iter(&stats);
    }
    state.save(&out_dir.join("model.safetensors"))?;
    Ok(state)
}

pub fn checkpoint_path(out_dir: &Path, iteration: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("model_{iteration:06}.safetensors"))
}

/// Grid with one row per sample: source, target, translation.
pub fn save_preview(model: &TranslationModel, batch: &Batch, path: &Path) -> Result<()> {
    let fake = model.translate(&batch.x_sc, &batch.x_tg)?;
    let rows: Vec<Tensor> = (0..batch.len())
        .map(|i| {
            Ok(Tensor::cat(
                &[batch.x_sc.narrow(0, i, 1)?, batch.x_tg.narrow(0, i, 1)?, fake.narrow(0, i, 1)?],
                0,
            )?)
        })
        .collect::<Result<_>>()?;
    data::save_image_grid(&Tensor::cat(&rows, 0)?, 3, path)
}
