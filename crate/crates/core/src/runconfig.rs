//! Run settings as `key = value` text with `#` comments.

use std::path::{Path, PathBuf};

use crate::error::{CtsError, Result};
use crate::model::{EmptyClassMask, LossConfig, ModelConfig};
use crate::trainer::{AdamConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub parallel: bool,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            model: ModelConfig::default(),
            loss: t.loss,
            adam: t.adam,
            epochs: t.epochs,
            batch: t.batch,
            seed: t.seed,
            parallel: false,
            data: None,
            out: None,
        }
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| CtsError::config(format!("invalid value `{}` for `{}`", value, key)))
}

impl RunConfig {
    /// Whether evaluation drops entries whose class is absent from the
    /// ground truth; follows the loss masking switch.
    pub fn eval_mask_empty(&self) -> bool {
        self.loss.mask_empty != EmptyClassMask::None
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
            adam: self.adam,
            loss: self.loss.clone(),
            out_dir: self.out.clone(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        match key {
            "alpha" => self.loss.alpha = parse_num(key, value)?,
            "beta" => self.loss.beta = parse_num(key, value)?,
            "smoothing" => self.loss.smoothing = parse_num(key, value)?,
            "mask_empty" => self.loss.mask_empty = EmptyClassMask::parse(value)?,
            "lr" => self.adam.lr = parse_num(key, value)?,
            "beta1" => self.adam.beta1 = parse_num(key, value)?,
            "beta2" => self.adam.beta2 = parse_num(key, value)?,
            "eps" => self.adam.eps = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "parallel" => self.parallel = parse_num(key, value)?,
            "data" => self.data = (!value.is_empty()).then(|| value.into()),
            "out" => self.out = (!value.is_empty()).then(|| value.into()),
            _ => return Err(CtsError::config(format!("unknown config key `{}`", key))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CtsError::config(format!("config line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CtsError::config(format!("config line {}: {}", i + 1, e)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CtsError::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut v = self.model.to_pairs();
        v.extend([
            ("alpha", self.loss.alpha.to_string()),
            ("beta", self.loss.beta.to_string()),
            ("smoothing", self.loss.smoothing.to_string()),
            ("mask_empty", self.loss.mask_empty.as_str().to_string()),
            ("lr", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("eps", self.adam.eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("parallel", self.parallel.to_string()),
            ("data", path(&self.data)),
            ("out", path(&self.out)),
        ]);
        v
    }

    pub fn render(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        crate::model::derive_dims(&self.model)?;
        self.train_config().validate()
    }
}
