//! Run configuration file: everything one experiment needs, as JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::{ClassifierConfig, EvalConfig};
use crate::networks::NetConfig;
use crate::ntpl::NtplConfig;
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Directory of extra unlabeled PNGs merged into the training split.
    pub external_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("runs/data"),
            out_dir: PathBuf::from("runs/exp"),
            external_dir: None,
        }
    }
}

/// Values used at full scale, kept for reference only; nothing reads them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullScale {
    pub batch_size: usize,
    pub rounds: usize,
    pub lr: f64,
    pub net: NetConfig,
}

impl Default for FullScale {
    fn default() -> Self {
        Self {
            batch_size: 128,
            rounds: 100,
            lr: 1e-4,
            net: NetConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub labeled_fraction: f64,
    /// Images per seen class in the held-out set used to report labeler
    /// error; 0 disables it.
    pub heldout_per_class: usize,
    pub data: SyntheticSpec,
    pub ntpl: NtplConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub classifier: ClassifierConfig,
    pub paths: Paths,
    pub full_scale: FullScale,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SyntheticSpec::default();
        let mut cfg = Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            labeled_fraction: 0.1,
            heldout_per_class: 50,
            train: TrainConfig {
                net: NetConfig {
                    resolution: data.resolution,
                    num_classes: data.n_classes_seen,
                    ..NetConfig::compact()
                },
                ..TrainConfig::default()
            },
            data,
            ntpl: NtplConfig::default(),
            eval: EvalConfig::default(),
            classifier: ClassifierConfig::default(),
            paths: Paths::default(),
            full_scale: FullScale::default(),
        };
        cfg.apply_seed(0);
        cfg
    }
}

impl RunConfig {
    /// Derives every component seed from `seed`.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.ntpl.seed = seed.wrapping_add(1);
        self.train.seed = seed.wrapping_add(2);
        self.eval.seed = seed.wrapping_add(3);
        self.classifier.seed = seed.wrapping_add(4);
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return Err(Error::Config(format!("labeled_fraction {} outside [0, 1]", self.labeled_fraction)));
        }
        self.data.validate()?;
        self.ntpl.validate()?;
        self.train.validate()?;
        if self.train.net.num_classes != self.data.n_classes_seen {
            return Err(Error::Config(format!(
                "network has {} classes but the corpus has {} seen classes",
                self.train.net.num_classes, self.data.n_classes_seen
            )));
        }
        if self.train.net.resolution != self.data.resolution {
            return Err(Error::Config("network and corpus resolutions differ".into()));
        }
        if self.eval.k == 0 || self.eval.sources_per_class == 0 {
            return Err(Error::Config("evaluation needs k >= 1 and at least one source".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
