//! Flat `key = value` configuration files with `[section]` headers and
//! `#` comments, plus the typed configs parsed out of them.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::decoder::FusionStrategy;
use crate::error::{Error, Result};

/// Parsed config text: section -> key -> raw value string.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl KvConfig {
    pub fn new() -> KvConfig {
        KvConfig::default()
    }

    pub fn parse(text: &str) -> Result<KvConfig> {
        let mut cfg = KvConfig::new();
        let mut section = String::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') || line.len() < 3 {
                    return Err(Error::Parse(format!(
                        "config line {}: malformed section header '{line}'",
                        lineno + 1
                    )));
                }
                section = line[1..line.len() - 1].trim().to_string();
                cfg.sections.entry(section.clone()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("config line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.sections
                .entry(section.clone())
                .or_default()
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(cfg)
    }

    /// Canonical text form: sections and keys in sorted order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (section, entries) in &self.sections {
            if !section.is_empty() {
                out.push_str(&format!("[{section}]\n"));
            }
            for (key, value) in entries {
                out.push_str(&format!("{key} = {value}\n"));
            }
            out.push('\n');
        }
        out
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    fn parse_value<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.get(section, key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                Error::Config(format!("[{section}] {key}: cannot parse '{raw}'"))
            }),
        }
    }
}

/// Architecture knobs shared by training, decoding, and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub dropout_p: f64,
    pub strategy: FusionStrategy,
    pub use_dictionary: bool,
    pub fuse_linear: bool,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            d_model: 64,
            d_hidden: 64,
            num_heads: 4,
            num_blocks: 1,
            dropout_p: 0.1,
            strategy: FusionStrategy::Gate,
            use_dictionary: true,
            fuse_linear: false,
        }
    }
}

impl ModelConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let strategy = match kv.get("model", "strategy") {
            None => d.strategy,
            Some(raw) => raw.parse()?,
        };
        Ok(ModelConfig {
            d_model: kv.parse_value("model", "d_model", d.d_model)?,
            d_hidden: kv.parse_value("model", "d_hidden", d.d_hidden)?,
            num_heads: kv.parse_value("model", "num_heads", d.num_heads)?,
            num_blocks: kv.parse_value("model", "num_blocks", d.num_blocks)?,
            dropout_p: kv.parse_value("model", "dropout_p", d.dropout_p)?,
            strategy,
            use_dictionary: kv.parse_value("model", "use_dictionary", d.use_dictionary)?,
            fuse_linear: kv.parse_value("model", "fuse_linear", d.fuse_linear)?,
        })
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("model", "d_model", self.d_model);
        kv.set("model", "d_hidden", self.d_hidden);
        kv.set("model", "num_heads", self.num_heads);
        kv.set("model", "num_blocks", self.num_blocks);
        kv.set("model", "dropout_p", self.dropout_p);
        kv.set("model", "strategy", self.strategy);
        kv.set("model", "use_dictionary", self.use_dictionary);
        kv.set("model", "fuse_linear", self.fuse_linear);
    }
}

/// Optimization schedule and vocabulary rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Keep dictionary centers frozen during training; switch off for the
    /// jointly-trained variant.
    pub fixed_dictionary: bool,
    /// Fraction of videos held out for validation.
    pub val_fraction: f64,
    /// Vocabulary keeps words occurring strictly more often than this.
    pub min_occurrences: usize,
    pub max_caption_len: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: 5.0,
            seed: 0,
            fixed_dictionary: true,
            val_fraction: 0.1,
            min_occurrences: 2,
            max_caption_len: 26,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: kv.parse_value("train", "learning_rate", d.learning_rate)?,
            batch_size: kv.parse_value("train", "batch_size", d.batch_size)?,
            epochs: kv.parse_value("train", "epochs", d.epochs)?,
            beta1: kv.parse_value("train", "beta1", d.beta1)?,
            beta2: kv.parse_value("train", "beta2", d.beta2)?,
            eps: kv.parse_value("train", "eps", d.eps)?,
            grad_clip_norm: kv.parse_value("train", "grad_clip_norm", d.grad_clip_norm)?,
            seed: kv.parse_value("train", "seed", d.seed)?,
            fixed_dictionary: kv.parse_value("train", "fixed_dictionary", d.fixed_dictionary)?,
            val_fraction: kv.parse_value("train", "val_fraction", d.val_fraction)?,
            min_occurrences: kv.parse_value("train", "min_occurrences", d.min_occurrences)?,
            max_caption_len: kv.parse_value("train", "max_caption_len", d.max_caption_len)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("train", "learning_rate", self.learning_rate);
        kv.set("train", "batch_size", self.batch_size);
        kv.set("train", "epochs", self.epochs);
        kv.set("train", "beta1", self.beta1);
        kv.set("train", "beta2", self.beta2);
        kv.set("train", "eps", self.eps);
        kv.set("train", "grad_clip_norm", self.grad_clip_norm);
        kv.set("train", "seed", self.seed);
        kv.set("train", "fixed_dictionary", self.fixed_dictionary);
        kv.set("train", "val_fraction", self.val_fraction);
        kv.set("train", "min_occurrences", self.min_occurrences);
        kv.set("train", "max_caption_len", self.max_caption_len);
    }
}

/// Caption generation knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Optional length-normalization exponent; 0 disables it and scores
    /// stay plain sums of log-probabilities.
    pub length_norm: f64,
}

impl Default for DecodeConfig {
    fn default() -> DecodeConfig {
        DecodeConfig { beam_size: 5, max_len: 26, length_norm: 0.0 }
    }
}

impl DecodeConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<DecodeConfig> {
        let d = DecodeConfig::default();
        Ok(DecodeConfig {
            beam_size: kv.parse_value("decode", "beam_size", d.beam_size)?,
            max_len: kv.parse_value("decode", "max_len", d.max_len)?,
            length_norm: kv.parse_value("decode", "length_norm", d.length_norm)?,
        })
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("decode", "beam_size", self.beam_size);
        kv.set("decode", "max_len", self.max_len);
        kv.set("decode", "length_norm", self.length_norm);
    }
}
