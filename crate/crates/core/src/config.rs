//! Flat `key=value` run configuration covering data generation, model,
//! training and paths. Blank lines and `#` comments are ignored; unknown keys
//! are errors; every key has a default.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Drives data generation, the subject split, weight init and training order.
    pub seed: u64,
    pub synth: SynthConfig,
    pub split: (f64, f64, f64),
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            split: (0.7, 0.1, 0.2),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value for {key}: {value:?} (expected true/false)"))),
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// All keys in serialization order.
    pub const KEYS: [&'static str; 35] = [
        "seed",
        "samples",
        "classes",
        "image_size",
        "class_prior",
        "images_per_subject",
        "label_noise",
        "split_train",
        "split_val",
        "split_eval",
        "input_channels",
        "stem_channels",
        "stem_stride",
        "num_blocks",
        "layers_per_block",
        "growth_rate",
        "compression",
        "se_reduction",
        "use_se",
        "maps_per_class",
        "k_plus",
        "k_minus",
        "alpha",
        "batch_size",
        "lr0",
        "beta1",
        "beta2",
        "adam_eps",
        "plateau_patience",
        "plateau_min_delta",
        "lr_decay_factor",
        "max_epochs",
        "crop_size",
        "data_dir",
        "out_dir",
    ];

    pub fn get(&self, key: &str) -> Result<String> {
        let (bb, head, tr, sy) = (&self.model.backbone, &self.model.head, &self.train, &self.synth);
        Ok(match key {
            "seed" => self.seed.to_string(),
            "samples" => sy.samples.to_string(),
            "classes" => sy.classes.to_string(),
            "image_size" => sy.image_size.to_string(),
            "class_prior" => join(&sy.class_prior),
            "images_per_subject" => sy.images_per_subject.to_string(),
            "label_noise" => sy.label_noise.to_string(),
            "split_train" => self.split.0.to_string(),
            "split_val" => self.split.1.to_string(),
            "split_eval" => self.split.2.to_string(),
            "input_channels" => bb.input_channels.to_string(),
            "stem_channels" => bb.stem_channels.to_string(),
            "stem_stride" => bb.stem_stride.to_string(),
            "num_blocks" => bb.num_blocks.to_string(),
            "layers_per_block" => bb.layers_per_block.to_string(),
            "growth_rate" => bb.growth_rate.to_string(),
            "compression" => bb.compression.to_string(),
            "se_reduction" => bb.se_reduction.to_string(),
            "use_se" => bb.use_se.to_string(),
            "maps_per_class" => head.maps_per_class.to_string(),
            "k_plus" => head.k_plus.to_string(),
            "k_minus" => head.k_minus.to_string(),
            "alpha" => head.alpha.to_string(),
            "batch_size" => tr.batch_size.to_string(),
            "lr0" => tr.lr0.to_string(),
            "beta1" => tr.beta1.to_string(),
            "beta2" => tr.beta2.to_string(),
            "adam_eps" => tr.adam_eps.to_string(),
            "plateau_patience" => tr.plateau_patience.to_string(),
            "plateau_min_delta" => tr.plateau_min_delta.to_string(),
            "lr_decay_factor" => tr.lr_decay_factor.to_string(),
            "max_epochs" => tr.max_epochs.to_string(),
            "crop_size" => tr.crop_size.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (bb, head, tr, sy) = (&mut self.model.backbone, &mut self.model.head, &mut self.train, &mut self.synth);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "samples" => sy.samples = parse(key, v)?,
            "classes" => {
                sy.classes = parse(key, v)?;
                head.classes = sy.classes;
            }
            "image_size" => sy.image_size = parse(key, v)?,
            "class_prior" => sy.class_prior = v.split(',').map(|p| parse(key, p)).collect::<Result<_>>()?,
            "images_per_subject" => sy.images_per_subject = parse(key, v)?,
            "label_noise" => sy.label_noise = parse(key, v)?,
            "split_train" => self.split.0 = parse(key, v)?,
            "split_val" => self.split.1 = parse(key, v)?,
            "split_eval" => self.split.2 = parse(key, v)?,
            "input_channels" => bb.input_channels = parse(key, v)?,
            "stem_channels" => bb.stem_channels = parse(key, v)?,
            "stem_stride" => bb.stem_stride = parse(key, v)?,
            "num_blocks" => bb.num_blocks = parse(key, v)?,
            "layers_per_block" => bb.layers_per_block = parse(key, v)?,
            "growth_rate" => bb.growth_rate = parse(key, v)?,
            "compression" => bb.compression = parse(key, v)?,
            "se_reduction" => bb.se_reduction = parse(key, v)?,
            "use_se" => bb.use_se = parse_bool(key, v)?,
            "maps_per_class" => head.maps_per_class = parse(key, v)?,
            "k_plus" => head.k_plus = parse(key, v)?,
            "k_minus" => head.k_minus = parse(key, v)?,
            "alpha" => head.alpha = parse(key, v)?,
            "batch_size" => tr.batch_size = parse(key, v)?,
            "lr0" => tr.lr0 = parse(key, v)?,
            "beta1" => tr.beta1 = parse(key, v)?,
            "beta2" => tr.beta2 = parse(key, v)?,
            "adam_eps" => tr.adam_eps = parse(key, v)?,
            "plateau_patience" => tr.plateau_patience = parse(key, v)?,
            "plateau_min_delta" => tr.plateau_min_delta = parse(key, v)?,
            "lr_decay_factor" => tr.lr_decay_factor = parse(key, v)?,
            "max_epochs" => tr.max_epochs = parse(key, v)?,
            "crop_size" => tr.crop_size = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.sync_seeds();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Copies `seed` into the data and training sub-configs.
    pub fn sync_seeds(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.head.classes != self.synth.classes {
            return Err(Error::Config("head classes must match dataset classes".into()));
        }
        if self.train.crop_size > self.synth.image_size {
            return Err(Error::Config(format!(
                "crop_size {} exceeds image_size {}",
                self.train.crop_size, self.synth.image_size
            )));
        }
        self.model.backbone.check_input(self.train.crop_size, self.train.crop_size)?;
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in Self::KEYS {
            writeln!(f, "{key}={}", self.get(key).map_err(|_| fmt::Error)?)?;
        }
        Ok(())
    }
}
