//! `key = value` configuration files and training settings.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adversary::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::inpaint::InpainterConfig;
use crate::losses::LossWeights;
use crate::maskdetect::DetectorConfig;
use crate::tensor::{ParamStore, Tensor};

/// Parses `key = value` lines; `#` starts a comment. Later keys win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap_or("").trim();
        if !body.is_empty() {
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
                offset,
                msg: format!("expected 'key = value', got '{body}'"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    offset,
                    msg: "empty key".into(),
                });
            }
            out.insert(k.to_string(), v.trim().to_string());
        }
        offset += line.len();
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Detector,
    Joint,
    Inpainter,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detector" => Ok(Self::Detector),
            "joint" => Ok(Self::Joint),
            "inpainter" => Ok(Self::Inpainter),
            _ => Err(Error::Config(format!("unknown stage '{s}' (detector | joint | inpainter)"))),
        }
    }
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Detector => "detector",
            Self::Joint => "joint",
            Self::Inpainter => "inpainter",
        }
    }
}

/// Network widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSize {
    Toy,
    Full,
}

impl std::str::FromStr for ModelSize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!("unknown model '{s}' (toy | full)"))),
        }
    }
}

/// Architecture description; also stored inside checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub size: ModelSize,
    pub height: usize,
    pub width: usize,
    pub alpha: f64,
}

impl ModelSpec {
    pub fn detector(&self) -> Result<DetectorConfig> {
        let base = match self.size {
            ModelSize::Toy => DetectorConfig::toy(),
            ModelSize::Full => DetectorConfig::default(),
        };
        Ok(DetectorConfig {
            high_pass: crate::frequency::HighPassConfig::new(self.alpha)?,
            ..base
        })
    }

    pub fn inpainter(&self) -> InpainterConfig {
        match self.size {
            ModelSize::Toy => InpainterConfig::toy(),
            ModelSize::Full => InpainterConfig::default(),
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        let cin = 3 + self.inpainter().landmarks;
        match self.size {
            ModelSize::Toy => DiscriminatorConfig::toy(cin),
            ModelSize::Full => DiscriminatorConfig::new(cin),
        }
    }

    pub fn write_meta(&self, store: &mut ParamStore) {
        let kind = match self.size {
            ModelSize::Toy => 0.0,
            ModelSize::Full => 1.0,
        };
        store.insert("meta.model", Tensor::scalar(kind));
        store.insert(
            "meta.size",
            Tensor::new(&[2], vec![self.height as f64, self.width as f64]).expect("two dims"),
        );
        store.insert("meta.alpha", Tensor::scalar(self.alpha));
    }

    pub fn read_meta(store: &ParamStore) -> Result<Self> {
        let missing = |k: &str| Error::Checkpoint(format!("missing {k}"));
        let kind = store.get("meta.model").ok_or_else(|| missing("meta.model"))?.data()[0];
        let size = store.get("meta.size").ok_or_else(|| missing("meta.size"))?;
        // Checkpoints store f32; alpha is a short decimal in practice.
        let alpha = (store.get("meta.alpha").ok_or_else(|| missing("meta.alpha"))?.data()[0] * 1e6).round() / 1e6;
        Ok(Self {
            size: if kind == 0.0 { ModelSize::Toy } else { ModelSize::Full },
            height: size.data()[0] as usize,
            width: size.data()[1] as usize,
            alpha,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `None` runs the detector stage followed by the joint stage.
    pub stage: Option<Stage>,
    /// `None` uses 16 for the detector stage and 8 otherwise.
    pub batch_size: Option<usize>,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_detector: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub model: ModelSize,
    pub image_size: usize,
    pub alpha: f64,
    pub checkpoint_every: usize,
    pub lsgan_standard: bool,
    /// Weight of the detection loss during joint training.
    pub detection_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: None,
            batch_size: None,
            lr_generator: 1e-4,
            lr_discriminator: 1e-5,
            lr_detector: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            steps: 1000,
            seed: 0,
            weights: LossWeights::celeba_hq(),
            model: ModelSize::Full,
            image_size: 256,
            alpha: crate::frequency::HighPassConfig::DEFAULT_ALPHA,
            checkpoint_every: 0,
            lsgan_standard: true,
            detection_weight: 1.0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

impl TrainConfig {
    pub fn batch(&self, stage: Stage) -> usize {
        self.batch_size.unwrap_or(match stage {
            Stage::Detector => 16,
            _ => 8,
        })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            size: self.model,
            height: self.image_size,
            width: self.image_size,
            alpha: self.alpha,
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "stage" => {
                self.stage = match v {
                    "two_stage" => None,
                    _ => Some(v.parse()?),
                }
            }
            "batch_size" => self.batch_size = Some(num(key, v)?),
            "lr_generator" => self.lr_generator = num(key, v)?,
            "lr_discriminator" => self.lr_discriminator = num(key, v)?,
            "lr_detector" => self.lr_detector = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "loss_preset" => self.weights = LossWeights::preset(v)?,
            "lambda_recons" => self.weights.recons = num(key, v)?,
            "lambda_adv" => self.weights.adv = num(key, v)?,
            "lambda_perc" => self.weights.perc = num(key, v)?,
            "lambda_style" => self.weights.style = num(key, v)?,
            "lambda_tv" => self.weights.tv = num(key, v)?,
            "model" => self.model = v.parse()?,
            "image_size" => self.image_size = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "lsgan_standard" => self.lsgan_standard = num(key, v)?,
            "detection_weight" => self.detection_weight = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` pairs. The preset is applied before individual
    /// weights regardless of order.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        if let Some(p) = kv.get("loss_preset") {
            self.set("loss_preset", p)?;
        }
        for (k, v) in kv.iter().filter(|(k, _)| *k != "loss_preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let lrs = [self.lr_generator, self.lr_discriminator, self.lr_detector];
        if lrs.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of 8", self.image_size)));
        }
        crate::frequency::HighPassConfig::new(self.alpha)?;
        Ok(())
    }
}
