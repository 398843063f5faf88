//! Corpus manifests, the synthetic pose/appearance image generator, label
//! hiding, few-shot episode sampling and external-image merging.
//!
//! Manifest files are line-delimited JSON with one record per image:
//! `{"path", "class", "split", "external", "sealed_class"}`. Images live under
//! `<root>/<split>/<class or "unlabeled">/<id>.png`.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use image::{ImageBuffer, Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

static SEALED_READS: AtomicUsize = AtomicUsize::new(0);

/// Number of times any sealed ground-truth label has been read in this
/// process. Training code must never move this counter.
pub fn sealed_read_count() -> usize {
    SEALED_READS.load(Ordering::SeqCst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    TrainSeen,
    TestUnseen,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::TrainSeen => "train-seen",
            Split::TestUnseen => "test-unseen",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub path: String,
    pub class: Option<usize>,
    pub split: Split,
    pub external: bool,
    sealed_class: Option<usize>,
}

impl CorpusRecord {
    pub fn new(path: impl Into<String>, class: Option<usize>, split: Split, external: bool) -> Self {
        Self {
            path: path.into(),
            class,
            split,
            external,
            sealed_class: None,
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.class.is_some()
    }

    pub fn has_sealed_class(&self) -> bool {
        self.sealed_class.is_some()
    }

    /// Hidden ground truth, for evaluation only. Every call is counted.
    pub fn sealed_class(&self) -> Option<usize> {
        SEALED_READS.fetch_add(1, Ordering::SeqCst);
        self.sealed_class
    }

    /// Ground truth whether visible or sealed; evaluation only.
    pub fn ground_truth(&self) -> Option<usize> {
        self.class.or_else(|| self.sealed_class())
    }
}

/// A manifest plus the directory its relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub records: Vec<CorpusRecord>,
    pub num_seen: usize,
    pub num_unseen: usize,
}

impl CorpusManifest {
    pub fn resolve(&self, record: &CorpusRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn seen_classes(&self) -> std::ops::Range<usize> {
        0..self.num_seen
    }

    pub fn unseen_classes(&self) -> std::ops::Range<usize> {
        self.num_seen..self.num_seen + self.num_unseen
    }

    pub fn indices_where<F: Fn(&CorpusRecord) -> bool>(&self, f: F) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| f(r))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_seen(&self) -> Vec<usize> {
        self.indices_where(|r| r.split == Split::TrainSeen)
    }

    /// Checks that seen and unseen classes never share a split and that every
    /// class id is in range.
    pub fn validate(&self) -> Result<()> {
        let total = self.num_seen + self.num_unseen;
        for r in &self.records {
            let class = r.class.or(r.sealed_class);
            if r.class.is_some() && r.sealed_class.is_some() {
                return Err(contract_err!("{} has both visible and sealed class", r.path));
            }
            if let Some(c) = class {
                if c >= total {
                    return Err(contract_err!("{} has class {c} >= {total}", r.path));
                }
                let seen = c < self.num_seen;
                match (r.split, seen) {
                    (Split::TrainSeen, false) => {
                        return Err(contract_err!("unseen class {c} in train-seen split"))
                    }
                    (Split::TestUnseen, true) => {
                        return Err(contract_err!("seen class {c} in test-unseen split"))
                    }
                    _ => {}
                }
            }
            if r.external && (r.class.is_some() || r.sealed_class.is_some()) {
                return Err(contract_err!("external image {} carries a label", r.path));
            }
        }
        Ok(())
    }

    pub fn save(&self) -> Result<()> {
        self.save_to(&self.root.join(MANIFEST_FILE))
    }

    pub fn save_to(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header {
            num_seen: usize,
            num_unseen: usize,
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        {
            let f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            let header = serde_json::json!({ "classes": Header { num_seen: self.num_seen, num_unseen: self.num_unseen } });
            writeln!(w, "{header}").map_err(|e| Error::io(&tmp, e))?;
            for r in &self.records {
                writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&tmp, e))?;
            }
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Loads `root/manifest.jsonl`.
    pub fn load(root: &Path) -> Result<Self> {
        Self::load_from(&root.join(MANIFEST_FILE), root)
    }

    pub fn load_from(path: &Path, root: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            num_seen: usize,
            num_unseen: usize,
        }
        #[derive(Deserialize)]
        struct HeaderLine {
            classes: Header,
        }
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| contract_err!("empty manifest {}", path.display()))?
            .map_err(|e| Error::io(path, e))?;
        let header: HeaderLine = serde_json::from_str(&first)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        let m = Self {
            root: root.to_path_buf(),
            records,
            num_seen: header.classes.num_seen,
            num_unseen: header.classes.num_unseen,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Parameters of the synthetic corpus. Appearance (palette, texture) is a
/// function of the class; pose (shape kind, position, size, rotation) is drawn
/// independently of the class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes_seen: usize,
    pub n_classes_unseen: usize,
    pub images_per_class: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Per-image standard deviation of the palette colours (RGB in [0, 1]).
    pub color_jitter: f64,
    /// Per-pixel noise standard deviation.
    pub pixel_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes_seen: 8,
            n_classes_unseen: 2,
            images_per_class: 200,
            resolution: 64,
            seed: 0,
            color_jitter: 0.07,
            pixel_noise: 0.03,
        }
    }
}

impl SyntheticSpec {
    pub fn total_classes(&self) -> usize {
        self.n_classes_seen + self.n_classes_unseen
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes_seen < 2 {
            return Err(Error::Config("need at least two seen classes".into()));
        }
        if self.resolution < 16 || !self.resolution.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "resolution {} must be a multiple of 16",
                self.resolution
            )));
        }
        if self.images_per_class == 0 {
            return Err(Error::Config("images_per_class must be positive".into()));
        }
        if self.color_jitter < 0.0 || self.pixel_noise < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    /// Class palettes and textures, deterministic in `seed`.
    pub fn class_appearances(&self) -> Vec<ClassAppearance> {
        let n = self.total_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xa99e_a4a0);
        let hue0: f64 = rng.random();
        (0..n)
            .map(|c| {
                let hue = (hue0 + c as f64 / n as f64).fract();
                let fg_val = 0.75 + 0.2 * rng.random::<f64>();
                let bg_hue = (hue + 0.35 + 0.3 * rng.random::<f64>()).fract();
                let bg_val = 0.2 + 0.25 * rng.random::<f64>();
                ClassAppearance {
                    foreground: hsv_to_rgb(hue, 0.75, fg_val),
                    background: hsv_to_rgb(bg_hue, 0.5, bg_val),
                    stripe_frequency: 2.0 + 5.0 * (c % 4) as f64 + rng.random::<f64>(),
                    stripe_angle: PI * rng.random::<f64>(),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAppearance {
    pub foreground: [f64; 3],
    pub background: [f64; 3],
    pub stripe_frequency: f64,
    pub stripe_angle: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Cross,
}

/// Class-independent layout of one synthetic image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub size: f64,
    pub rotation: f64,
}

impl Pose {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let kind = match rng.random_range(0..4) {
            0 => ShapeKind::Disc,
            1 => ShapeKind::Square,
            2 => ShapeKind::Triangle,
            _ => ShapeKind::Cross,
        };
        Self {
            kind,
            center: (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)),
            size: rng.random_range(0.16..0.3),
            rotation: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        let u = (c * dx + s * dy) / self.size;
        let v = (-s * dx + c * dy) / self.size;
        match self.kind {
            ShapeKind::Disc => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            ShapeKind::Triangle => (-0.6..=1.0).contains(&v) && u.abs() <= (1.0 - v) * 0.65,
            ShapeKind::Cross => {
                (u.abs() <= 0.35 && v.abs() <= 1.0) || (v.abs() <= 0.35 && u.abs() <= 1.0)
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Renders one image in `[0, 1]` RGB.
pub fn render<R: Rng>(
    appearance: &ClassAppearance,
    pose: &Pose,
    resolution: usize,
    color_jitter: f64,
    pixel_noise: f64,
    rng: &mut R,
) -> RgbImage {
    let jitter = Normal::new(0.0, color_jitter.max(1e-12)).expect("valid std");
    let noise = Normal::new(0.0, pixel_noise.max(1e-12)).expect("valid std");
    let mut fg = appearance.foreground;
    let mut bg = appearance.background;
    for ch in 0..3 {
        fg[ch] += jitter.sample(rng);
        bg[ch] += jitter.sample(rng);
    }
    let (sa, ca) = appearance.stripe_angle.sin_cos();
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    ImageBuffer::from_fn(resolution as u32, resolution as u32, |px, py| {
        let x = (px as f64 + 0.5) / resolution as f64;
        let y = (py as f64 + 0.5) / resolution as f64;
        let base = if pose.contains(x, y) {
            let stripe = (2.0 * PI * appearance.stripe_frequency * (ca * x + sa * y) + phase).sin();
            let m = 1.0 + 0.25 * stripe;
            [fg[0] * m, fg[1] * m, fg[2] * m]
        } else {
            bg
        };
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let v = (base[ch] + noise.sample(rng)).clamp(0.0, 1.0);
            out[ch] = (v * 255.0).round() as u8;
        }
        Rgb(out)
    })
}

fn class_dir(class: Option<usize>) -> String {
    match class {
        Some(c) => format!("class_{c:03}"),
        None => "unlabeled".to_string(),
    }
}

fn image_seed(seed: u64, class: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ ((class as u64) << 32)
        ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Writes the synthetic corpus under `root` and returns its manifest (also
/// saved as `root/manifest.jsonl`). Output depends only on `spec`, not on the worker count.
pub fn generate_corpus(spec: &SyntheticSpec, root: &Path, workers: usize) -> Result<CorpusManifest> {
    spec.validate()?;
    let appearances = spec.class_appearances();
    let mut jobs = Vec::new();
    for class in 0..spec.total_classes() {
        let split = if class < spec.n_classes_seen {
            Split::TrainSeen
        } else {
            Split::TestUnseen
        };
        let dir = root.join(split.dir_name()).join(class_dir(Some(class)));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for index in 0..spec.images_per_class {
            let rel = format!("{}/{}/{:05}.png", split.dir_name(), class_dir(Some(class)), index);
            jobs.push((class, index, split, rel));
        }
    }
    let render_job = |(class, index, _, rel): &(usize, usize, Split, String)| -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(spec.seed, *class, *index));
        let pose = Pose::sample(&mut rng);
        let img = render(
            &appearances[*class],
            &pose,
            spec.resolution,
            spec.color_jitter,
            spec.pixel_noise,
            &mut rng,
        );
        let path = root.join(rel);
        img.save(&path)?;
        Ok(())
    };
    let workers = workers.max(1);
    if workers == 1 {
        jobs.iter().try_for_each(render_job)?;
    } else {
        let chunk = jobs.len().div_ceil(workers);
        std::thread::scope(|s| -> Result<()> {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().try_for_each(render_job)))
                .collect();
            for h in handles {
                h.join().expect("generator worker panicked")?;
            }
            Ok(())
        })?;
    }
    let records = jobs
        .into_iter()
        .map(|(class, _, split, rel)| CorpusRecord::new(rel, Some(class), split, false))
        .collect();
    let manifest = CorpusManifest {
        root: root.to_path_buf(),
        records,
        num_seen: spec.n_classes_seen,
        num_unseen: spec.n_classes_unseen,
    };
    manifest.save()?;
    Ok(manifest)
}

pub fn heldout_manifest_path(root: &Path) -> PathBuf {
    root.join("heldout").join(MANIFEST_FILE)
}

/// Renders `per_class` fresh labeled images of every seen class under `root`,
/// drawn from the same class appearances as the corpus but with image indices
/// past the corpus range, so no image repeats.
pub fn generate_heldout(spec: &SyntheticSpec, per_class: usize, root: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    let appearances = spec.class_appearances();
    let mut records = Vec::new();
    for class in 0..spec.n_classes_seen {
        let dir = root.join("heldout").join(class_dir(Some(class)));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for j in 0..per_class {
            let index = spec.images_per_class + j;
            let mut rng = ChaCha8Rng::seed_from_u64(image_seed(spec.seed, class, index));
            let pose = Pose::sample(&mut rng);
            let img = render(&appearances[class], &pose, spec.resolution, spec.color_jitter, spec.pixel_noise, &mut rng);
            let rel = format!("heldout/{}/{:05}.png", class_dir(Some(class)), index);
            img.save(root.join(&rel))?;
            records.push(CorpusRecord::new(rel, Some(class), Split::TrainSeen, false));
        }
    }
    let manifest = CorpusManifest {
        root: root.to_path_buf(),
        records,
        num_seen: spec.n_classes_seen,
        num_unseen: spec.n_classes_unseen,
    };
    manifest.save_to(&heldout_manifest_path(root))?;
    Ok(manifest)
}

/// Hides the labels of `1 - fraction` of each seen class. Hidden labels move
/// to the sealed field. Selection is stratified per class and seeded.
pub fn split_labels(manifest: &CorpusManifest, fraction: f64, seed: u64) -> Result<CorpusManifest> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("labeled fraction {fraction} outside [0, 1]")));
    }
    let mut out = manifest.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1abe);
    for class in manifest.seen_classes() {
        let mut members = manifest.indices_where(|r| {
            r.split == Split::TrainSeen && !r.external && r.class == Some(class)
        });
        members.shuffle(&mut rng);
        let keep = (fraction * members.len() as f64).round() as usize;
        for &i in &members[keep..] {
            let r = &mut out.records[i];
            r.sealed_class = r.class.take();
        }
    }
    out.validate()?;
    Ok(out)
}

/// A k-shot inference episode: source images from seen classes and `k`
/// exemplars of one unseen class.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub source: Vec<usize>,
    pub target_class: usize,
    pub targets: Vec<usize>,
}

/// Draws `n_source` train-seen images and `k` distinct exemplars of a random
/// unseen class. Unseen classes must be labeled in the manifest.
pub fn sample_episode<R: Rng>(
    manifest: &CorpusManifest,
    k: usize,
    n_source: usize,
    rng: &mut R,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let unseen: Vec<usize> = manifest.unseen_classes().collect();
    if unseen.is_empty() {
        return Err(contract_err!("manifest has no unseen classes"));
    }
    let target_class = *unseen.choose(rng).expect("non-empty");
    episode_for_class(manifest, target_class, k, n_source, rng)
}

pub fn episode_for_class<R: Rng>(
    manifest: &CorpusManifest,
    target_class: usize,
    k: usize,
    n_source: usize,
    rng: &mut R,
) -> Result<Episode> {
    let pool = manifest.indices_where(|r| r.split == Split::TestUnseen && r.class == Some(target_class));
    if pool.len() < k {
        return Err(contract_err!(
            "class {target_class} has {} images, {k} requested",
            pool.len()
        ));
    }
    let targets: Vec<usize> = pool.choose_multiple(rng, k).copied().collect();
    let sources = manifest.indices_where(|r| r.split == Split::TrainSeen && !r.external);
    let source = (0..n_source)
        .map(|_| *sources.choose(rng).expect("train-seen split is empty"))
        .collect();
    Ok(Episode {
        source,
        target_class,
        targets,
    })
}

/// Appends every PNG in `external_dir` (sorted by name) as an unlabeled
/// external train-seen record.
pub fn merge_external(manifest: &CorpusManifest, external_dir: &Path) -> Result<CorpusManifest> {
    let mut files = BTreeSet::new();
    for entry in fs::read_dir(external_dir).map_err(|e| Error::io(external_dir, e))? {
        let entry = entry.map_err(|e| Error::io(external_dir, e))?;
        let p = entry.path();
        if p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true) {
            files.insert(p);
        }
    }
    let mut out = manifest.clone();
    for p in files {
        let abs = fs::canonicalize(&p).map_err(|e| Error::io(&p, e))?;
        out.records.push(CorpusRecord::new(
            abs.to_string_lossy().into_owned(),
            None,
            Split::TrainSeen,
            true,
        ));
    }
    out.validate()?;
    Ok(out)
}

/// Reads a PNG as CHW floats in `[-1, 1]`, resizing if needed.
pub fn load_image(path: &Path, resolution: usize) -> Result<Vec<f32>> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.width() as usize != resolution || img.height() as usize != resolution {
        image::imageops::resize(
            &img,
            resolution as u32,
            resolution as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        img
    };
    let plane = resolution * resolution;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            out[ch * plane + i] = px[ch] as f32 / 127.5 - 1.0;
        }
    }
    Ok(out)
}

/// Images held in memory as one `(n, 3, H, W)` f32 tensor.
#[derive(Clone, Debug)]
pub struct ImageSet {
    images: Tensor,
}

impl ImageSet {
    pub fn from_tensor(images: Tensor) -> Result<Self> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != w {
            return Err(contract_err!("image set must be (n, 3, H, H)"));
        }
        Ok(Self {
            images: images.to_dtype(DType::F32)?,
        })
    }

    /// Loads the given manifest records, in order.
    pub fn load(manifest: &CorpusManifest, indices: &[usize], resolution: usize) -> Result<Self> {
        let paths = indices
            .iter()
            .map(|&i| {
                manifest
                    .records
                    .get(i)
                    .map(|rec| manifest.resolve(rec))
                    .ok_or_else(|| contract_err!("record {i} out of range"))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_paths(&paths, resolution)
    }

    pub fn from_paths<P: AsRef<Path>>(paths: &[P], resolution: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(paths.len() * 3 * resolution * resolution);
        for p in paths {
            data.extend(load_image(p.as_ref(), resolution)?);
        }
        let images = Tensor::from_vec(data, (paths.len(), 3, resolution, resolution), &Device::Cpu)?;
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        self.images.dims()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.images
    }

    /// Gathers a batch in the requested dtype.
    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<Tensor> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let ids = Tensor::from_vec(idx, indices.len(), self.images.device())?;
        Ok(self.images.index_select(&ids, 0)?.to_dtype(dtype)?)
    }

    /// Mean RGB of each image in `[-1, 1]` units.
    pub fn mean_colors(&self) -> Result<Vec<[f64; 3]>> {
        mean_colors(&self.images)
    }
}

pub fn mean_colors(images: &Tensor) -> Result<Vec<[f64; 3]>> {
    let m = images.to_dtype(DType::F64)?.mean((2, 3))?.to_vec2::<f64>()?;
    Ok(m.into_iter().map(|r| [r[0], r[1], r[2]]).collect())
}

/// Writes a batch `(n, 3, H, W)` in `[-1, 1]` as a PNG grid with `cols`
/// columns.
pub fn save_image_grid(images: &Tensor, cols: usize, path: &Path) -> Result<()> {
    let (n, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(contract_err!("grid images must be RGB"));
    }
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let data = images.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut grid = RgbImage::new((cols * w) as u32, (rows * h) as u32);
    let plane = h * w;
    for i in 0..n {
        let (gr, gc) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let mut px = [0u8; 3];
                for ch in 0..3 {
                    let v = data[i * 3 * plane + ch * plane + y * w + x];
                    px[ch] = (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8;
                }
                grid.put_pixel((gc * w + x) as u32, (gr * h + y) as u32, Rgb(px));
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    grid.save(path)?;
    Ok(())
}
