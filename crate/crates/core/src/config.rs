//! Line-oriented run configuration: `section.key = value`.
//!
//! Sections are `model`, `train`, `data` and `paths`. Blank lines and lines
//! starting with `#` are ignored. Lists are comma separated. Keys that are
//! not given keep their default.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::model::DetectorConfig;
use crate::synth::SceneSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `section.key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key} given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for {key}")]
    BadValue { line: usize, key: String, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Paths {
    pub weights_in: Option<PathBuf>,
    pub weights_out: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: DetectorConfig,
    pub train: TrainConfig,
    pub data: SceneSpec,
    pub paths: Paths,
}

impl Default for RunConfig {
    /// The toy experiment: 64x64 scenes with one to three objects.
    fn default() -> Self {
        Self {
            model: DetectorConfig::default(),
            train: TrainConfig::default(),
            data: SceneSpec {
                height: 64,
                width: 64,
                num_classes: 3,
                min_objects: 1,
                max_objects: 3,
                min_size: 12,
                max_size: 28,
                noise: 0.1,
                seed: 42,
            },
            paths: Paths::default(),
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        vec![
            ("model.in_channels", m.backbone.in_channels.to_string()),
            ("model.stem_channels", m.backbone.stem_channels.to_string()),
            ("model.block_channels", list(&m.backbone.block_channels)),
            ("model.layers_per_block", m.backbone.layers_per_block.to_string()),
            ("model.fusion_width", m.fusion.width.to_string()),
            ("model.earlier_layers", list(&m.fusion.earlier_layers)),
            ("model.later_layers", list(&m.fusion.later_layers)),
            ("model.max_order", m.mlkp.max_order.to_string()),
            ("model.ranks", list(&m.mlkp.ranks)),
            ("model.location_weight", m.mlkp.location_weight.to_string()),
            ("model.location_hidden", m.mlkp.location_hidden.to_string()),
            ("model.pool_h", m.pool_h.to_string()),
            ("model.pool_w", m.pool_w.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.base_lr", t.base_lr.to_string()),
            ("train.lr_decay_step", t.lr_decay_step.to_string()),
            ("train.lr_decay_factor", t.lr_decay_factor.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.rois_per_image", t.rois_per_image.to_string()),
            ("train.background_fraction", t.background_fraction.to_string()),
            ("train.train_scenes", t.train_scenes.to_string()),
            ("train.eval_scenes", t.eval_scenes.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("data.height", d.height.to_string()),
            ("data.width", d.width.to_string()),
            ("data.num_classes", d.num_classes.to_string()),
            ("data.min_objects", d.min_objects.to_string()),
            ("data.max_objects", d.max_objects.to_string()),
            ("data.min_size", d.min_size.to_string()),
            ("data.max_size", d.max_size.to_string()),
            ("data.noise", d.noise.to_string()),
            ("data.seed", d.seed.to_string()),
            ("paths.weights_in", path(&self.paths.weights_in)),
            ("paths.weights_out", path(&self.paths.weights_out)),
            ("paths.report", path(&self.paths.report)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let head = key.split('.').next().unwrap_or("");
            if head != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                section = head;
            }
            writeln!(s, "{key} = {value}").expect("writing to a String");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Syntax { line, text: trimmed.into() });
            };
            let (key, value) = (key.trim(), value.trim());
            if !key.contains('.') {
                return Err(ConfigError::Syntax { line, text: trimmed.into() });
            }
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::DuplicateKey { line, key: key.into() });
            }
            cfg.set(line, key, value)?;
            seen.push(key.into());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            line,
            key: key.into(),
            value: value.into(),
        };
        fn one<T: FromStr>(v: &str) -> Option<T> {
            v.parse().ok()
        }
        fn many<T: FromStr>(v: &str) -> Option<Vec<T>> {
            if v.is_empty() {
                return Some(Vec::new());
            }
            v.split(',').map(|p| p.trim().parse().ok()).collect()
        }
        let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        macro_rules! put {
            ($field:expr, $parse:expr) => {
                $field = $parse.ok_or_else(bad)?
            };
        }
        match key {
            "model.in_channels" => put!(m.backbone.in_channels, one(value)),
            "model.stem_channels" => put!(m.backbone.stem_channels, one(value)),
            "model.block_channels" => put!(m.backbone.block_channels, many(value)),
            "model.layers_per_block" => put!(m.backbone.layers_per_block, one(value)),
            "model.fusion_width" => put!(m.fusion.width, one(value)),
            "model.earlier_layers" => put!(m.fusion.earlier_layers, many(value)),
            "model.later_layers" => put!(m.fusion.later_layers, many(value)),
            "model.max_order" => put!(m.mlkp.max_order, one(value)),
            "model.ranks" => put!(m.mlkp.ranks, many(value)),
            "model.location_weight" => put!(m.mlkp.location_weight, one(value)),
            "model.location_hidden" => put!(m.mlkp.location_hidden, one(value)),
            "model.pool_h" => put!(m.pool_h, one(value)),
            "model.pool_w" => put!(m.pool_w, one(value)),
            "model.num_classes" => put!(m.num_classes, one(value)),
            "train.iterations" => put!(t.iterations, one(value)),
            "train.base_lr" => put!(t.base_lr, one(value)),
            "train.lr_decay_step" => put!(t.lr_decay_step, one(value)),
            "train.lr_decay_factor" => put!(t.lr_decay_factor, one(value)),
            "train.momentum" => put!(t.momentum, one(value)),
            "train.weight_decay" => put!(t.weight_decay, one(value)),
            "train.seed" => put!(t.seed, one(value)),
            "train.rois_per_image" => put!(t.rois_per_image, one(value)),
            "train.background_fraction" => put!(t.background_fraction, one(value)),
            "train.train_scenes" => put!(t.train_scenes, one(value)),
            "train.eval_scenes" => put!(t.eval_scenes, one(value)),
            "train.eval_every" => put!(t.eval_every, one(value)),
            "data.height" => put!(d.height, one(value)),
            "data.width" => put!(d.width, one(value)),
            "data.num_classes" => put!(d.num_classes, one(value)),
            "data.min_objects" => put!(d.min_objects, one(value)),
            "data.max_objects" => put!(d.max_objects, one(value)),
            "data.min_size" => put!(d.min_size, one(value)),
            "data.max_size" => put!(d.max_size, one(value)),
            "data.noise" => put!(d.noise, one(value)),
            "data.seed" => put!(d.seed, one(value)),
            "paths.weights_in" => self.paths.weights_in = opt_path(value),
            "paths.weights_out" => self.paths.weights_out = opt_path(value),
            "paths.report" => self.paths.report = opt_path(value),
            _ => return Err(ConfigError::UnknownKey { line, key: key.into() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: crate::Error| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.data.validate().map_err(wrap)?;
        if self.model.num_classes != self.data.num_classes {
            return Err(ConfigError::Invalid(format!(
                "model.num_classes = {} but data.num_classes = {}",
                self.model.num_classes, self.data.num_classes
            )));
        }
        if !self.data.height.is_multiple_of(4) || !self.data.width.is_multiple_of(4) {
            return Err(ConfigError::Invalid("image sides must be multiples of 4".into()));
        }
        Ok(())
    }

    /// Same experiment with the kernel block reduced to its first-order pass-through.
    pub fn first_order_baseline(&self) -> Self {
        let mut c = self.clone();
        c.model.mlkp.max_order = 1;
        c.model.mlkp.ranks.clear();
        c
    }
}
