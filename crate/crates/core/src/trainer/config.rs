//! Flat `key = value` run configuration.
//!
//! Keys are namespaced (`train.lr0`, `distill.alpha_acm`, `attack.epsilon`,
//! ...). Blank lines and `#` comments are ignored; unknown keys are an error.
//! Real-valued fields accept fractions such as `8/255`.

use std::path::{Path, PathBuf};

use crate::acm::{ChannelTransform, DistillConfig, TransformSide};
use crate::attacks::AttackConfig;
use crate::augment::MixupConfig;
use crate::data::{load_idx, subsample, Dataset, Split, SynthConfig, Template};
use crate::error::{Error, Result};
use crate::model::ModelSpec;

use super::{Mode, Schedule, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub teacher_channels: Vec<usize>,
    pub student_channels: Vec<usize>,
    pub conv_layers: usize,
    pub use_bias: bool,
    pub use_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            teacher_channels: vec![32, 64, 128],
            student_channels: vec![16, 32, 64],
            conv_layers: 2,
            use_bias: true,
            use_residual: true,
        }
    }
}

impl ModelConfig {
    pub fn teacher_spec(&self, in_channels: usize, classes: usize) -> Result<ModelSpec> {
        ModelSpec::from_channels(in_channels, classes, &self.teacher_channels, self.conv_layers, self.use_bias, self.use_residual)
    }

    pub fn student_spec(&self, in_channels: usize, classes: usize) -> Result<ModelSpec> {
        ModelSpec::from_channels(in_channels, classes, &self.student_channels, self.conv_layers, self.use_bias, self.use_residual)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Idx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Generator settings; `per_class` sizes the training split.
    pub synth: SynthConfig,
    pub test_per_class: usize,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Stratified fraction of the training split to keep.
    pub fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            synth: SynthConfig::blobs(4, 250, 16, 0.1, 0),
            test_per_class: 100,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            fraction: 1.0,
        }
    }
}

impl DataConfig {
    /// Training and test splits, with `fraction` applied to training data.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.source {
            DataSource::Synth => {
                let train = self.synth.generate(Split::Train)?;
                let test = SynthConfig {
                    per_class: self.test_per_class,
                    ..self.synth.clone()
                }
                .generate(Split::Test)?;
                (train, test)
            }
            DataSource::Idx => {
                let need = |p: &Option<PathBuf>, key: &str| {
                    p.clone().ok_or_else(|| Error::config(format!("data.{key} is required for IDX data")))
                };
                let classes = Some(self.synth.classes);
                let mut train = load_idx(&need(&self.train_images, "train_images")?, &need(&self.train_labels, "train_labels")?, classes)?;
                let mut test = load_idx(&need(&self.test_images, "test_images")?, &need(&self.test_labels, "test_labels")?, classes)?;
                train.split = Split::Train;
                test.split = Split::Test;
                (train, test)
            }
        };
        Ok((subsample(&train, self.fraction, seed)?, test))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub mixup: MixupConfig,
    pub attack: AttackConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Teacher checkpoint for distillation.
    pub teacher: Option<PathBuf>,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            mixup: MixupConfig::default(),
            attack: AttackConfig::pgd(7),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            teacher: None,
            eval_batch_size: 128,
        }
    }
}

/// Parses a real number or a fraction `a/b`.
pub fn parse_real(s: &str) -> Result<f64> {
    let s = s.trim();
    let bad = || Error::config(format!("expected a number, got {s:?}"));
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            if b == 0.0 {
                return Err(bad());
            }
            a / b
        }
        None => s.parse().map_err(|_| bad())?,
    };
    if !v.is_finite() {
        return Err(bad());
    }
    Ok(v)
}

fn parse_int(s: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::config(format!("expected a non-negative integer, got {s:?}")))
}

fn parse_u64(s: &str) -> Result<u64> {
    s.trim().parse().map_err(|_| Error::config(format!("expected an integer, got {s:?}")))
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(format!("expected true or false, got {other:?}"))),
    }
}

/// Comma-separated positive integers.
pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(parse_int).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(s: &str) -> Option<PathBuf> {
    let s = s.trim();
    (!s.is_empty()).then(|| PathBuf::from(s))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.distill;
        let s = &mut self.data.synth;
        match key {
            "train.epochs" => t.epochs = parse_int(v)?,
            "train.batch_size" => t.batch_size = parse_int(v)?,
            "train.lr0" => t.lr0 = parse_real(v)?,
            "train.momentum" => t.momentum = parse_real(v)?,
            "train.weight_decay" => t.weight_decay = parse_real(v)?,
            "train.schedule" => {
                t.schedule = match v {
                    "cosine" => Schedule::Cosine,
                    "constant" => Schedule::Constant,
                    o => return Err(Error::config(format!("unknown schedule {o:?}"))),
                }
            }
            "train.seed" => t.seed = parse_u64(v)?,
            "train.mode" => {
                t.mode = match v {
                    "natural" => Mode::Natural,
                    "adv_train" => Mode::AdvTrain,
                    "mixacm" => Mode::MixAcm,
                    o => return Err(Error::config(format!("unknown mode {o:?}"))),
                }
            }
            "train.eval_robust" => t.eval_robust = parse_bool(v)?,
            "train.deterministic" => t.deterministic = parse_bool(v)?,
            "train.augment" => t.augment.enabled = parse_bool(v)?,
            "train.augment_pad" => t.augment.pad = parse_int(v)?,
            "train.attack_ramp_epochs" => t.attack_ramp_epochs = parse_int(v)?,
            "train.grad_clip" => t.grad_clip = if v == "none" { None } else { Some(parse_real(v)?) },
            "distill.alpha_acm" => d.alpha_acm = parse_real(v)?,
            "distill.alpha_kld" => d.alpha_kld = parse_real(v)?,
            "distill.gamma" => d.gamma = parse_real(v)?,
            "distill.transform" => {
                d.transform = match v {
                    "adaptive_max_pool" => ChannelTransform::AdaptiveMaxPool,
                    "adaptive_avg_pool" => ChannelTransform::AdaptiveAvgPool,
                    "affine" => ChannelTransform::Affine,
                    "none" => ChannelTransform::None,
                    o => return Err(Error::config(format!("unknown transform {o:?}"))),
                }
            }
            "distill.transform_side" => {
                d.transform_side = match v {
                    "teacher" => TransformSide::Teacher,
                    "student" => TransformSide::Student,
                    o => return Err(Error::config(format!("unknown transform side {o:?}"))),
                }
            }
            "distill.taps" => d.taps = if v == "all" { None } else { Some(parse_list(v)?) },
            "distill.cross_dataset" => d.cross_dataset = parse_bool(v)?,
            "distill.teacher" => self.teacher = opt_path(v),
            "mixup.alpha" => self.mixup.alpha_mixup = parse_real(v)?,
            "mixup.enabled" => self.mixup.enabled = parse_bool(v)?,
            "attack.epsilon" => self.attack.epsilon = parse_real(v)?,
            "attack.step_size" => self.attack.step_size = parse_real(v)?,
            "attack.iterations" => self.attack.iterations = parse_int(v)?,
            "attack.random_start" => self.attack.random_start = parse_bool(v)?,
            "model.teacher_channels" => self.model.teacher_channels = parse_list(v)?,
            "model.student_channels" => self.model.student_channels = parse_list(v)?,
            "model.conv_layers" => self.model.conv_layers = parse_int(v)?,
            "model.bias" => self.model.use_bias = parse_bool(v)?,
            "model.residual" => self.model.use_residual = parse_bool(v)?,
            "data.source" => {
                self.data.source = match v {
                    "synth" => DataSource::Synth,
                    "idx" => DataSource::Idx,
                    o => return Err(Error::config(format!("unknown data source {o:?}"))),
                }
            }
            "data.classes" => s.classes = parse_int(v)?,
            "data.per_class" => s.per_class = parse_int(v)?,
            "data.test_per_class" => self.data.test_per_class = parse_int(v)?,
            "data.image_size" => s.image_size = parse_int(v)?,
            "data.noise_sigma" => s.noise_sigma = parse_real(v)?,
            "data.seed" => s.seed = parse_u64(v)?,
            "data.template" => {
                s.template = match v {
                    "blob" => Template::Blob,
                    "glyph" => Template::Glyph,
                    o => return Err(Error::config(format!("unknown template {o:?}"))),
                }
            }
            "data.patch_size" => s.patch_size = parse_int(v)?,
            "data.background" => s.background = parse_real(v)?,
            "data.contrast" => s.contrast = parse_real(v)?,
            "data.texture_amplitude" => s.texture_amplitude = parse_real(v)?,
            "data.texture_jitter" => s.texture_jitter = parse_real(v)?,
            "data.distractor_prob" => s.distractor_prob = parse_real(v)?,
            "data.train_images" => self.data.train_images = opt_path(v),
            "data.train_labels" => self.data.train_labels = opt_path(v),
            "data.test_images" => self.data.test_images = opt_path(v),
            "data.test_labels" => self.data.test_labels = opt_path(v),
            "data.fraction" => self.data.fraction = parse_real(v)?,
            "eval.batch_size" => self.eval_batch_size = parse_int(v)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order. Parsing the
    /// output yields an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let d = &self.distill;
        let s = &self.data.synth;
        let pairs: Vec<(&str, String)> = vec![
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr0", t.lr0.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.schedule", match t.schedule {
                Schedule::Cosine => "cosine",
                Schedule::Constant => "constant",
            }
            .into()),
            ("train.seed", t.seed.to_string()),
            ("train.mode", match t.mode {
                Mode::Natural => "natural",
                Mode::AdvTrain => "adv_train",
                Mode::MixAcm => "mixacm",
            }
            .into()),
            ("train.eval_robust", t.eval_robust.to_string()),
            ("train.deterministic", t.deterministic.to_string()),
            ("train.augment", t.augment.enabled.to_string()),
            ("train.augment_pad", t.augment.pad.to_string()),
            ("train.attack_ramp_epochs", t.attack_ramp_epochs.to_string()),
            ("train.grad_clip", t.grad_clip.map_or("none".to_string(), |c| c.to_string())),
            ("distill.alpha_acm", d.alpha_acm.to_string()),
            ("distill.alpha_kld", d.alpha_kld.to_string()),
            ("distill.gamma", d.gamma.to_string()),
            ("distill.transform", match d.transform {
                ChannelTransform::AdaptiveMaxPool => "adaptive_max_pool",
                ChannelTransform::AdaptiveAvgPool => "adaptive_avg_pool",
                ChannelTransform::Affine => "affine",
                ChannelTransform::None => "none",
            }
            .into()),
            ("distill.transform_side", match d.transform_side {
                TransformSide::Teacher => "teacher",
                TransformSide::Student => "student",
            }
            .into()),
            ("distill.taps", d.taps.as_deref().map_or("all".into(), list)),
            ("distill.cross_dataset", d.cross_dataset.to_string()),
            ("distill.teacher", path(&self.teacher)),
            ("mixup.alpha", self.mixup.alpha_mixup.to_string()),
            ("mixup.enabled", self.mixup.enabled.to_string()),
            ("attack.epsilon", self.attack.epsilon.to_string()),
            ("attack.step_size", self.attack.step_size.to_string()),
            ("attack.iterations", self.attack.iterations.to_string()),
            ("attack.random_start", self.attack.random_start.to_string()),
            ("model.teacher_channels", list(&self.model.teacher_channels)),
            ("model.student_channels", list(&self.model.student_channels)),
            ("model.conv_layers", self.model.conv_layers.to_string()),
            ("model.bias", self.model.use_bias.to_string()),
            ("model.residual", self.model.use_residual.to_string()),
            ("data.source", match self.data.source {
                DataSource::Synth => "synth",
                DataSource::Idx => "idx",
            }
            .into()),
            ("data.classes", s.classes.to_string()),
            ("data.per_class", s.per_class.to_string()),
            ("data.test_per_class", self.data.test_per_class.to_string()),
            ("data.image_size", s.image_size.to_string()),
            ("data.noise_sigma", s.noise_sigma.to_string()),
            ("data.seed", s.seed.to_string()),
            ("data.template", match s.template {
                Template::Blob => "blob",
                Template::Glyph => "glyph",
            }
            .into()),
            ("data.patch_size", s.patch_size.to_string()),
            ("data.background", s.background.to_string()),
            ("data.contrast", s.contrast.to_string()),
            ("data.texture_amplitude", s.texture_amplitude.to_string()),
            ("data.texture_jitter", s.texture_jitter.to_string()),
            ("data.distractor_prob", s.distractor_prob.to_string()),
            ("data.train_images", path(&self.data.train_images)),
            ("data.train_labels", path(&self.data.train_labels)),
            ("data.test_images", path(&self.data.test_images)),
            ("data.test_labels", path(&self.data.test_labels)),
            ("data.fraction", self.data.fraction.to_string()),
            ("eval.batch_size", self.eval_batch_size.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Loads the configured data, recording generator settings beside it.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        self.data.load(self.train.seed)
    }
}

/// Re-export so callers can write the synthetic manifest.
pub fn synth_manifest(cfg: &RunConfig) -> Option<String> {
    (cfg.data.source == DataSource::Synth).then(|| cfg.data.synth.manifest())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions_are_exact() {
        assert_eq!(parse_real("8/255").unwrap(), 8.0 / 255.0);
        assert_eq!(parse_real("0.5").unwrap(), 0.5);
        assert!(parse_real("1/0").is_err());
        assert!(parse_real("abc").is_err());
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(matches!(RunConfig::parse("train.lr = 0.1"), Err(Error::Config(_))));
        assert!(RunConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn parses_namespaced_keys() {
        let cfg = RunConfig::parse(
            "# comment\ntrain.lr0 = 0.05\nattack.epsilon = 8/255\ndistill.taps = 3,4\ndistill.alpha_acm=100 # inline\n",
        )
        .unwrap();
        assert_eq!(cfg.train.lr0, 0.05);
        assert_eq!(cfg.attack.epsilon, 8.0 / 255.0);
        assert_eq!(cfg.distill.taps, Some(vec![3, 4]));
        assert_eq!(cfg.distill.alpha_acm, 100.0);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("distill.taps", "1,2").unwrap();
        cfg.set("attack.epsilon", "8/255").unwrap();
        cfg.set("data.train_images", "/tmp/x.idx").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
