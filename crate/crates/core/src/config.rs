//! TOML run configuration, its content hash, and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LmdError, Result};
use crate::mae::MaeConfig;
use crate::optim::OptimizerKind;
use crate::params::hex;
use crate::projector::ProjectorConfig;
use crate::schedule::ScheduleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Recorded in the manifest; every kernel is single-threaded and
    /// deterministic regardless.
    pub deterministic: bool,
    /// EMA window of the loss-decrease event counter.
    pub ema_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            batch_size: 16,
            total_steps: 2000,
            seed: 0,
            optimizer: OptimizerKind::Adan,
            deterministic: true,
            ema_window: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LspConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// Fraction of steps before the adversarial term switches on.
    pub disc_warmup_frac: f64,
}

impl Default for LspConfig {
    fn default() -> Self {
        LspConfig {
            steps: 1000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            optimizer: OptimizerKind::AdamW,
            disc_warmup_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub eval_every: u64,
    pub top_k: usize,
    /// Freeze the encoder and train only the head.
    pub linear_probe: bool,
    /// Every n-th item (by sorted path) is held out for evaluation.
    pub holdout_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 300,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.05,
            eval_every: 10,
            top_k: 5,
            linear_probe: false,
            holdout_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// `[H, W]` every image is resized to.
    pub image_size: [usize; 2],
    pub flip: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: [32, 32],
            flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub projector: ProjectorConfig,
    pub lsp: LspConfig,
    pub mae: MaeConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(s).map_err(|e| LmdError::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LmdError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            LmdError::Config(m) => LmdError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The schedule always spans the training run.
    pub fn resolve(&mut self) {
        self.schedule.total_steps = self.train.total_steps;
    }

    pub fn validate(&self) -> Result<()> {
        self.projector.validate()?;
        self.mae.validate()?;
        self.schedule.validate()?;
        let [h, w] = self.data.image_size;
        self.projector.check_image_dims(h, w)?;
        let f = self.projector.scale_factor;
        self.mae.patch_grid(h / f, w / f)?;
        let t = &self.train;
        if (t.base_lr.is_nan() || t.base_lr <= 0.0) || t.total_steps == 0 || t.batch_size == 0 || t.ema_window == 0 {
            return Err(LmdError::Config(
                "train needs base_lr > 0, total_steps >= 1, batch_size >= 1, ema_window >= 1".into(),
            ));
        }
        if t.weight_decay < 0.0 || self.lsp.weight_decay < 0.0 || self.finetune.weight_decay < 0.0 {
            return Err(LmdError::Config("weight_decay must be >= 0".into()));
        }
        if self.lsp.steps == 0 || self.lsp.batch_size == 0 || (self.lsp.lr.is_nan() || self.lsp.lr <= 0.0) {
            return Err(LmdError::Config("lsp needs steps >= 1, batch_size >= 1, lr > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.lsp.disc_warmup_frac) {
            return Err(LmdError::Config("lsp.disc_warmup_frac must lie in [0, 1]".into()));
        }
        let ft = &self.finetune;
        if ft.steps == 0
            || ft.batch_size == 0
            || (ft.lr.is_nan() || ft.lr <= 0.0)
            || ft.eval_every == 0
            || ft.top_k == 0
        {
            return Err(LmdError::Config(
                "finetune needs steps, batch_size, eval_every, top_k >= 1 and lr > 0".into(),
            ));
        }
        Ok(())
    }

    /// Canonical JSON rendering used for hashing.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Git-style blob hash (`sha256("blob <len>\0" ‖ canonical)`), hex.
    pub fn content_hash(&self) -> String {
        let body = self.canonical();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        hex(&h.finalize())
    }

    /// `<command>-<hash12>-s<seed>`.
    pub fn run_dir_name(&self, command: &str) -> String {
        format!("{command}-{}-s{}", &self.content_hash()[..12], self.train.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: RunConfig,
    pub seed: u64,
    pub config_hash: String,
    pub out_dir: PathBuf,
    /// Input paths and extra arguments by name.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: &RunConfig, out_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config: config.clone(),
            seed: config.train.seed,
            config_hash: config.content_hash(),
            out_dir: out_dir.to_path_buf(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| LmdError::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| LmdError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| LmdError::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::Scheme;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.train.base_lr, 1.5e-4);
        assert_eq!(cfg.train.weight_decay, 0.05);
        assert_eq!(cfg.schedule.total_steps, cfg.train.total_steps);
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let cfg = RunConfig::from_toml_str(
            "[train]\ntotal_steps = 10\nseed = 3\n[schedule]\nscheme = { fixed = 0.75 }\n[mae]\nd_model = 16\nd_decoder = 32\nencoder_blocks = 1\ndecoder_blocks = 2\nheads = 2\nmode = \"custom\"\n",
        )
        .unwrap();
        assert_eq!(cfg.schedule.scheme, Scheme::Fixed(0.75));
        let again = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.content_hash(), cfg.content_hash());
        let mut other = cfg.clone();
        other.train.seed = 4;
        assert_ne!(other.content_hash(), cfg.content_hash());
        assert!(cfg.run_dir_name("train").ends_with("-s3"));
    }

    #[test]
    fn unknown_section_and_bad_values_rejected() {
        assert!(RunConfig::from_toml_str("[bogus]\nx = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\nbase_lr = 0.0\n").is_err());
        assert!(RunConfig::from_toml_str("[data]\nimage_size = [36, 32]\n").is_err());
    }
}
