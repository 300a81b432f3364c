//! Flat `section.key = value` run configuration.
//!
//! Every tunable of the training loop, the classifier, the splitter, and
//! the recapture simulator appears exactly once; unknown keys are rejected
//! so typos fail loudly. `#` starts a comment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::classifier::{BackboneConfig, FinetuneConfig, ModalitySet};
use crate::data::RecaptureParams;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            split_train: 0.8,
            split_val: 0.1,
            split_test: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patch_side: usize,
    pub token_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ama_hidden: usize,
    pub num_classes: usize,
    pub input_side: usize,
    pub modalities: ModalitySet,
    pub seed: u64,
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            learning_rate: 1e-4,
            weight_decay: 0.05,
            batch_size: 64,
            max_epochs: 30,
            patch_side: 16,
            token_dim: 768,
            depth: 12,
            heads: 12,
            ama_hidden: 64,
            num_classes: 2,
            input_side: 224,
            modalities: ModalitySet::all(),
            seed: 0,
            pretrained_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_iterations: usize,
    pub checkpoint_every: usize,
    pub patch_side: usize,
    /// 0 means one pass over the training set.
    pub epoch_size: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: 2e-5,
            batch_size: 4,
            total_iterations: 100_000,
            checkpoint_every: 1000,
            patch_side: 224,
            epoch_size: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainSection,
    pub loss: LossWeights,
    pub classifier: ClassifierSection,
    pub data: DataSection,
    pub simulator: RecaptureParams,
}

impl Default for RecaptureParams {
    fn default() -> Self {
        crate::data::recapture_preset("base", 0).expect("base preset exists")
    }
}

impl RunConfig {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            total_iterations: self.train.total_iterations,
            weights: self.loss,
            seed: self.train.seed,
            checkpoint_every: self.train.checkpoint_every,
            epoch_size: if self.train.epoch_size == 0 {
                None
            } else {
                Some(self.train.epoch_size)
            },
        }
    }

    pub fn to_backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            patch_side: self.classifier.patch_side,
            token_dim: self.classifier.token_dim,
            depth: self.classifier.depth,
            heads: self.classifier.heads,
            ama_hidden: self.classifier.ama_hidden,
            num_classes: self.classifier.num_classes,
            input_side: self.classifier.input_side,
            pretrained_weights: self.classifier.pretrained_weights.clone(),
        }
    }

    pub fn to_finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            learning_rate: self.classifier.learning_rate,
            weight_decay: self.classifier.weight_decay,
            batch_size: self.classifier.batch_size,
            max_epochs: self.classifier.max_epochs,
            seed: self.classifier.seed,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let _ = writeln!(s, "train.learning_rate = {}", t.learning_rate);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.total_iterations = {}", t.total_iterations);
        let _ = writeln!(s, "train.checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(s, "train.patch_side = {}", t.patch_side);
        let _ = writeln!(s, "train.epoch_size = {}", t.epoch_size);
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let w = &self.loss;
        let _ = writeln!(s, "loss.lambda1 = {}", w.lambda1);
        let _ = writeln!(s, "loss.lambda2 = {}", w.lambda2);
        let _ = writeln!(s, "loss.lambda3 = {}", w.lambda3);
        let _ = writeln!(s, "loss.lambda4 = {}", w.lambda4);
        let _ = writeln!(s, "loss.alpha1 = {}", w.alpha1);
        let _ = writeln!(s, "loss.alpha2 = {}", w.alpha2);
        let c = &self.classifier;
        let _ = writeln!(s, "classifier.learning_rate = {}", c.learning_rate);
        let _ = writeln!(s, "classifier.weight_decay = {}", c.weight_decay);
        let _ = writeln!(s, "classifier.batch_size = {}", c.batch_size);
        let _ = writeln!(s, "classifier.max_epochs = {}", c.max_epochs);
        let _ = writeln!(s, "classifier.patch_side = {}", c.patch_side);
        let _ = writeln!(s, "classifier.token_dim = {}", c.token_dim);
        let _ = writeln!(s, "classifier.depth = {}", c.depth);
        let _ = writeln!(s, "classifier.heads = {}", c.heads);
        let _ = writeln!(s, "classifier.ama_hidden = {}", c.ama_hidden);
        let _ = writeln!(s, "classifier.num_classes = {}", c.num_classes);
        let _ = writeln!(s, "classifier.input_side = {}", c.input_side);
        let _ = writeln!(s, "classifier.modalities = {}", c.modalities.tag());
        let _ = writeln!(s, "classifier.seed = {}", c.seed);
        let _ = writeln!(
            s,
            "classifier.pretrained_weights = {}",
            c.pretrained_weights
                .as_deref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        let d = &self.data;
        let _ = writeln!(s, "data.split_train = {}", d.split_train);
        let _ = writeln!(s, "data.split_val = {}", d.split_val);
        let _ = writeln!(s, "data.split_test = {}", d.split_test);
        let _ = writeln!(s, "data.seed = {}", d.seed);
        let p = &self.simulator;
        let _ = writeln!(s, "simulator.blur_sigma1 = {}", p.blur_sigma1);
        let _ = writeln!(s, "simulator.dither_blend = {}", p.dither_blend);
        let _ = writeln!(s, "simulator.dither_cell = {}", p.dither_cell);
        let _ = writeln!(s, "simulator.color_gain_r = {}", p.color_gain[0]);
        let _ = writeln!(s, "simulator.color_gain_g = {}", p.color_gain[1]);
        let _ = writeln!(s, "simulator.color_gain_b = {}", p.color_gain[2]);
        let _ = writeln!(s, "simulator.color_offset_r = {}", p.color_offset[0]);
        let _ = writeln!(s, "simulator.color_offset_g = {}", p.color_offset[1]);
        let _ = writeln!(s, "simulator.color_offset_b = {}", p.color_offset[2]);
        let _ = writeln!(s, "simulator.blur_sigma2 = {}", p.blur_sigma2);
        let _ = writeln!(s, "simulator.noise_std = {}", p.noise_std);
        let _ = writeln!(s, "simulator.seed = {}", p.seed);
        s
    }

    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'section.key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.to_train_config().validate()?;
        self.to_backbone_config().validate()?;
        self.simulator.validate()?;
        let d = &self.data;
        if (d.split_train + d.split_val + d.split_test - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "data splits {} + {} + {} must sum to 1",
                d.split_train, d.split_val, d.split_test
            )));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>()
                .map_err(|_| Error::Config(format!("value {v:?} invalid for {key}")))
        }
        match key {
            "train.learning_rate" => self.train.learning_rate = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.total_iterations" => self.train.total_iterations = num(key, value)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(key, value)?,
            "train.patch_side" => self.train.patch_side = num(key, value)?,
            "train.epoch_size" => self.train.epoch_size = num(key, value)?,
            "train.seed" => self.train.seed = num(key, value)?,
            "loss.lambda1" => self.loss.lambda1 = num(key, value)?,
            "loss.lambda2" => self.loss.lambda2 = num(key, value)?,
            "loss.lambda3" => self.loss.lambda3 = num(key, value)?,
            "loss.lambda4" => self.loss.lambda4 = num(key, value)?,
            "loss.alpha1" => self.loss.alpha1 = num(key, value)?,
            "loss.alpha2" => self.loss.alpha2 = num(key, value)?,
            "classifier.learning_rate" => self.classifier.learning_rate = num(key, value)?,
            "classifier.weight_decay" => self.classifier.weight_decay = num(key, value)?,
            "classifier.batch_size" => self.classifier.batch_size = num(key, value)?,
            "classifier.max_epochs" => self.classifier.max_epochs = num(key, value)?,
            "classifier.patch_side" => self.classifier.patch_side = num(key, value)?,
            "classifier.token_dim" => self.classifier.token_dim = num(key, value)?,
            "classifier.depth" => self.classifier.depth = num(key, value)?,
            "classifier.heads" => self.classifier.heads = num(key, value)?,
            "classifier.ama_hidden" => self.classifier.ama_hidden = num(key, value)?,
            "classifier.num_classes" => self.classifier.num_classes = num(key, value)?,
            "classifier.input_side" => self.classifier.input_side = num(key, value)?,
            "classifier.modalities" => self.classifier.modalities = ModalitySet::parse(value)?,
            "classifier.seed" => self.classifier.seed = num(key, value)?,
            "classifier.pretrained_weights" => {
                self.classifier.pretrained_weights = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "data.split_train" => self.data.split_train = num(key, value)?,
            "data.split_val" => self.data.split_val = num(key, value)?,
            "data.split_test" => self.data.split_test = num(key, value)?,
            "data.seed" => self.data.seed = num(key, value)?,
            "simulator.blur_sigma1" => self.simulator.blur_sigma1 = num(key, value)?,
            "simulator.dither_blend" => self.simulator.dither_blend = num(key, value)?,
            "simulator.dither_cell" => self.simulator.dither_cell = num(key, value)?,
            "simulator.color_gain_r" => self.simulator.color_gain[0] = num(key, value)?,
            "simulator.color_gain_g" => self.simulator.color_gain[1] = num(key, value)?,
            "simulator.color_gain_b" => self.simulator.color_gain[2] = num(key, value)?,
            "simulator.color_offset_r" => self.simulator.color_offset[0] = num(key, value)?,
            "simulator.color_offset_g" => self.simulator.color_offset[1] = num(key, value)?,
            "simulator.color_offset_b" => self.simulator.color_offset[2] = num(key, value)?,
            "simulator.blur_sigma2" => self.simulator.blur_sigma2 = num(key, value)?,
            "simulator.noise_std" => self.simulator.noise_std = num(key, value)?,
            "simulator.seed" => self.simulator.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.loss.lambda1, 1.0);
        assert_eq!(cfg.loss.lambda2, 1.0);
        assert_eq!(cfg.loss.lambda3, 1.0);
        assert_eq!(cfg.loss.lambda4, 10.0);
        assert_eq!(cfg.loss.alpha1, 10.0);
        assert_eq!(cfg.loss.alpha2, 1e-4);
        assert_eq!(cfg.train.learning_rate, 2e-5);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.total_iterations, 100_000);
        assert_eq!(cfg.train.patch_side, 224);
        assert_eq!(cfg.classifier.learning_rate, 1e-4);
        assert_eq!(cfg.classifier.weight_decay, 0.05);
        assert_eq!(cfg.classifier.batch_size, 64);
        assert_eq!(cfg.classifier.max_epochs, 30);
        assert_eq!(cfg.classifier.token_dim, 768);
        assert_eq!(cfg.classifier.ama_hidden, 64);
        assert_eq!(cfg.classifier.depth, 12);
        assert_eq!(cfg.classifier.heads, 12);
        assert_eq!(
            (cfg.data.split_train, cfg.data.split_val, cfg.data.split_test),
            (0.8, 0.1, 0.1)
        );
    }

    #[test]
    fn every_default_key_appears_exactly_once() {
        let text = RunConfig::default().to_text();
        let mut keys: Vec<&str> = text
            .lines()
            .map(|l| l.split('=').next().unwrap().trim())
            .collect();
        let n = keys.len();
        keys.sort();
        keys.dedup();
        assert_eq!(n, keys.len(), "duplicate keys in default config");
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.patch_side = 48;
        cfg.train.total_iterations = 1234;
        cfg.classifier.modalities = ModalitySet::parse("rgb+t").unwrap();
        cfg.simulator.dither_cell = 8;
        let text = cfg.to_text();
        let back = RunConfig::parse_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = RunConfig::parse_str(
            "# full line comment\n\ntrain.batch_size = 8   # trailing comment\n",
        )
        .unwrap();
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse_str("train.batch_sizes = 8\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
    }

    #[test]
    fn bad_value_rejected() {
        assert!(RunConfig::parse_str("train.batch_size = abc\n").is_err());
        assert!(RunConfig::parse_str("train.batch_size\n").is_err());
        // Validation failures surface too (odd batch size).
        assert!(RunConfig::parse_str("train.batch_size = 3\n").is_err());
    }
}
