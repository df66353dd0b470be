//! Run configuration and its flat `key = value` text form.
//!
//! Keys are the long CLI flag names without the leading dashes. Later
//! assignments override earlier ones, so CLI flags appended after the
//! file contents win.

use std::path::PathBuf;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::data::AugmentFlags;
use crate::error::{config_err, Result};
use crate::model::ModelConfig;
use crate::optim::ScheduleConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Directory(PathBuf),
    Synthetic { per_class: usize, classes: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `num_classes` is overwritten by the dataset's class count.
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub data_root: Option<PathBuf>,
    pub synth_per_class: Option<usize>,
    pub synth_classes: usize,
    pub synth_seed: u64,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub stratified: bool,
    pub skip_bad_images: bool,
    /// Seeds initialisation, shuffling and augmentation.
    pub seed: u64,
    pub eval_every: usize,
    pub out_dir: PathBuf,
    pub augment: AugmentFlags,
    /// Write measured wall time in the metrics log; `false` writes 0 so
    /// logs of identical runs compare byte for byte.
    pub log_seconds: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            data_root: None,
            synth_per_class: None,
            synth_classes: 5,
            synth_seed: 0,
            train_fraction: 0.8,
            split_seed: 0,
            stratified: false,
            skip_bad_images: false,
            seed: 0,
            eval_every: 1,
            out_dir: PathBuf::from("runs/default"),
            augment: AugmentFlags::default(),
            log_seconds: true,
        }
    }
}

/// Every recognised key, in rendering order.
pub const KEYS: &[&str] = &[
    "preset",
    "input-size",
    "stem-channels",
    "embed-dim",
    "blocks",
    "heads",
    "kv-reduction",
    "mlp-ratio",
    "cnn-channels",
    "ffn-expansion",
    "epochs",
    "warmup-epochs",
    "batch-size",
    "base-lr",
    "warmup-lr",
    "min-lr",
    "weight-decay",
    "data-root",
    "synth-per-class",
    "synth-classes",
    "synth-seed",
    "train-fraction",
    "split-seed",
    "stratified",
    "skip-bad-images",
    "seed",
    "eval-every",
    "out-dir",
    "augment",
    "precision",
    "log-seconds",
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return config_err(format!("line {}: expected `key = value`, got `{raw}`", n + 1));
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().or_else(|_| config_err(format!("{key}: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => config_err(format!("{key}: expected true or false, got `{v}`")),
    }
}

fn augment_flags(v: &str) -> Result<AugmentFlags> {
    let mut f = AugmentFlags::default();
    for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "none" => {}
            "flip" => f.flip = true,
            "rotate" => f.rotate = true,
            "shift" => f.shift = true,
            other => return config_err(format!("augment: unknown transform `{other}`")),
        }
    }
    Ok(f)
}

fn augment_text(f: AugmentFlags) -> String {
    let on: Vec<&str> = [("flip", f.flip), ("rotate", f.rotate), ("shift", f.shift)]
        .iter()
        .filter(|(_, b)| *b)
        .map(|(n, _)| *n)
        .collect();
    if on.is_empty() { "none".into() } else { on.join(",") }
}

impl RunConfig {
    /// Builds a config from assignments; the last value of a key wins and
    /// `preset` is applied before any other model key.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let cfg = Self::assemble(pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Just the architecture named by `pairs`; data keys are parsed but
    /// need not describe a usable source.
    pub fn model_from_pairs(pairs: &[(String, String)]) -> Result<ModelConfig> {
        let cfg = Self::assemble(pairs)?;
        cfg.model.validate()?;
        Ok(cfg.model)
    }

    fn assemble(pairs: &[(String, String)]) -> Result<Self> {
        let mut latest: IndexMap<&str, &str> = IndexMap::new();
        for (k, v) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return config_err(format!("unknown config key `{k}`"));
            }
            latest.insert(k.as_str(), v.as_str());
        }
        let mut cfg = RunConfig::default();
        if let Some(p) = latest.get("preset") {
            cfg.set("preset", p)?;
        }
        for (k, v) in latest.iter().filter(|(k, _)| **k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.schedule;
        match key {
            "preset" => {
                *m = match v {
                    "full" => ModelConfig::default(),
                    "miniature" => ModelConfig::miniature(),
                    _ => return config_err(format!("preset: expected full or miniature, got `{v}`")),
                }
            }
            "input-size" => m.input_size = num(key, v)?,
            "stem-channels" => m.stem_channels = num(key, v)?,
            "embed-dim" => m.embed_dim = num(key, v)?,
            "blocks" => m.num_lmhsa_blocks = num(key, v)?,
            "heads" => m.num_heads = num(key, v)?,
            "kv-reduction" => m.kv_reduction = num(key, v)?,
            "mlp-ratio" => m.mlp_conv_hidden_ratio = num(key, v)?,
            "cnn-channels" => {
                m.cnn_channels = v.split(',').map(|c| num(key, c.trim())).collect::<Result<_>>()?;
            }
            "ffn-expansion" => m.ffn_expansion = num(key, v)?,
            "epochs" => s.total_epochs = num(key, v)?,
            "warmup-epochs" => s.warmup_epochs = num(key, v)?,
            "batch-size" => s.batch_size = num(key, v)?,
            "base-lr" => s.base_lr = num(key, v)?,
            "warmup-lr" => s.warmup_lr = num(key, v)?,
            "min-lr" => s.min_lr = num(key, v)?,
            "weight-decay" => s.weight_decay = num(key, v)?,
            "data-root" => self.data_root = Some(PathBuf::from(v)),
            "synth-per-class" => self.synth_per_class = Some(num(key, v)?),
            "synth-classes" => self.synth_classes = num(key, v)?,
            "synth-seed" => self.synth_seed = num(key, v)?,
            "train-fraction" => self.train_fraction = num(key, v)?,
            "split-seed" => self.split_seed = num(key, v)?,
            "stratified" => self.stratified = flag(key, v)?,
            "skip-bad-images" => self.skip_bad_images = flag(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "eval-every" => self.eval_every = num(key, v)?,
            "out-dir" => self.out_dir = PathBuf::from(v),
            "augment" => self.augment = augment_flags(v)?,
            "precision" => {
                if v != "f64" {
                    return config_err(format!("precision: only f64 is supported, got `{v}`"));
                }
            }
            "log-seconds" => self.log_seconds = flag(key, v)?,
            _ => return config_err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data_source()?;
        self.schedule.validate()?;
        if self.eval_every == 0 {
            return config_err("eval-every must be at least 1");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return config_err(format!("train-fraction {} outside (0, 1)", self.train_fraction));
        }
        let mut model = self.model.clone();
        if self.synth_per_class.is_some() {
            model.num_classes = self.synth_classes;
        }
        model.validate()
    }

    pub fn data_source(&self) -> Result<DataSource> {
        match (&self.data_root, self.synth_per_class) {
            (Some(root), None) => Ok(DataSource::Directory(root.clone())),
            (None, Some(per_class)) => {
                Ok(DataSource::Synthetic { per_class, classes: self.synth_classes, seed: self.synth_seed })
            }
            (Some(_), Some(_)) => config_err("set exactly one of data-root and synth-per-class, not both"),
            (None, None) => config_err("no data source: set data-root or synth-per-class"),
        }
    }

    /// Canonical text: every key once, parseable by [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.schedule;
        let channels: Vec<String> = m.cnn_channels.iter().map(usize::to_string).collect();
        let mut lines = vec![
            ("input-size", m.input_size.to_string()),
            ("stem-channels", m.stem_channels.to_string()),
            ("embed-dim", m.embed_dim.to_string()),
            ("blocks", m.num_lmhsa_blocks.to_string()),
            ("heads", m.num_heads.to_string()),
            ("kv-reduction", m.kv_reduction.to_string()),
            ("mlp-ratio", m.mlp_conv_hidden_ratio.to_string()),
            ("cnn-channels", channels.join(",")),
            ("ffn-expansion", m.ffn_expansion.to_string()),
            ("epochs", s.total_epochs.to_string()),
            ("warmup-epochs", s.warmup_epochs.to_string()),
            ("batch-size", s.batch_size.to_string()),
            ("base-lr", format!("{:e}", s.base_lr)),
            ("warmup-lr", format!("{:e}", s.warmup_lr)),
            ("min-lr", format!("{:e}", s.min_lr)),
            ("weight-decay", format!("{:e}", s.weight_decay)),
        ];
        if let Some(root) = &self.data_root {
            lines.push(("data-root", root.display().to_string()));
        }
        if let Some(n) = self.synth_per_class {
            lines.push(("synth-per-class", n.to_string()));
        }
        lines.extend([
            ("synth-classes", self.synth_classes.to_string()),
            ("synth-seed", self.synth_seed.to_string()),
            ("train-fraction", self.train_fraction.to_string()),
            ("split-seed", self.split_seed.to_string()),
            ("stratified", self.stratified.to_string()),
            ("skip-bad-images", self.skip_bad_images.to_string()),
            ("seed", self.seed.to_string()),
            ("eval-every", self.eval_every.to_string()),
            ("out-dir", self.out_dir.display().to_string()),
            ("augment", augment_text(self.augment)),
            ("precision", "f64".to_string()),
            ("log-seconds", self.log_seconds.to_string()),
        ]);
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// The network actually built for a dataset with `num_classes` classes.
    pub fn model_for(&self, num_classes: usize) -> ModelConfig {
        ModelConfig { num_classes, seed: self.seed, ..self.model.clone() }
    }
}

/// Fingerprint of the architecture (not the seed): the first 8 bytes of a
/// SHA-256 over the canonical field listing, little endian.
pub fn config_hash(model: &ModelConfig) -> u64 {
    let channels: Vec<String> = model.cnn_channels.iter().map(usize::to_string).collect();
    let canonical = format!(
        "input_size={}\nin_channels={}\nstem_channels={}\nembed_dim={}\nblocks={}\nheads={}\n\
         kv_reduction={}\nmlp_ratio={}\ncnn_channels={}\nffn_expansion={}\nnum_classes={}\n",
        model.input_size,
        model.in_channels,
        model.stem_channels,
        model.embed_dim,
        model.num_lmhsa_blocks,
        model.num_heads,
        model.kv_reduction,
        model.mlp_conv_hidden_ratio,
        channels.join(","),
        model.ffn_expansion,
        model.num_classes,
    );
    let digest = Sha256::digest(canonical.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
