//! Flat `section.key = value` run configuration with `--kebab-case` overrides.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use can_core::augment::AugmentConfig;
use can_core::data::SyntheticSpec;
use can_core::model::ModelSpec;
use can_core::train::{RunSetup, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR-10 directory or `.bin` file.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Held-out fraction for probing synthetic data.
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model_preset: String,
    pub spec: ModelSpec,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_preset: "micro".into(),
            spec: ModelSpec::micro(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig {
                source: DataSource::Synthetic,
                path: None,
                synthetic: SyntheticSpec::default(),
                test_fraction: 0.2,
            },
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Every key, in the order written to resolved configs.
pub const KEYS: &[&str] = &[
    "model.preset",
    "model.image",
    "model.patch",
    "model.encoder.depth",
    "model.encoder.width",
    "model.encoder.heads",
    "model.encoder.mlp_dim",
    "model.decoder.depth",
    "model.decoder.width",
    "model.decoder.heads",
    "model.decoder.mlp_dim",
    "model.head.hidden_dim",
    "model.head.hidden_layers",
    "model.head.out_dim",
    "model.sigma_scale",
    "augment.crop_scale_min",
    "augment.crop_scale_max",
    "augment.jitter_strength",
    "augment.grayscale_prob",
    "augment.blur_prob",
    "augment.flip_prob",
    "train.method",
    "train.base_lr",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.batch_size",
    "train.warmup_epochs",
    "train.total_epochs",
    "train.mask_rate",
    "train.sigma_max",
    "train.lambda_infonce",
    "train.lambda",
    "train.tau",
    "train.seed",
    "train.views_per_image",
    "train.sigma_conditioning",
    "train.checkpoint_every",
    "train.max_steps",
    "train.log_wall_time",
    "data.source",
    "data.path",
    "data.synthetic_count",
    "data.synthetic_classes",
    "data.synthetic_side",
    "data.synthetic_seed",
    "data.test_fraction",
    "output.dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("{key}: cannot parse `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got `{value}`")),
    }
}

fn preset(name: &str) -> Option<ModelSpec> {
    match name {
        "micro" => Some(ModelSpec::micro()),
        "tiny" => Some(ModelSpec::tiny((16, 16), 4)),
        "vit-s" | "vit-b" | "vit-l" | "vit-h" => can_core::cost::named_spec(name).ok(),
        _ => None,
    }
}

impl RunConfig {
    /// Applies one key. `model.preset` replaces the whole model section, so it
    /// is applied before any other `model.*` key by [`RunConfig::resolve`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "model.preset" => {
                self.spec = preset(v).ok_or_else(|| format!("{key}: unknown preset `{v}` (micro, tiny, vit-s, vit-b, vit-l, vit-h)"))?;
                self.model_preset = v.to_string();
            }
            "model.image" => {
                let s: usize = parse(key, v)?;
                self.spec.image = (s, s);
            }
            "model.patch" => self.spec.patch = parse(key, v)?,
            "model.encoder.depth" => self.spec.encoder.depth = parse(key, v)?,
            "model.encoder.width" => self.spec.encoder.width = parse(key, v)?,
            "model.encoder.heads" => self.spec.encoder.heads = parse(key, v)?,
            "model.encoder.mlp_dim" => self.spec.encoder.mlp_dim = parse(key, v)?,
            "model.decoder.depth" => self.spec.decoder.depth = parse(key, v)?,
            "model.decoder.width" => self.spec.decoder.width = parse(key, v)?,
            "model.decoder.heads" => self.spec.decoder.heads = parse(key, v)?,
            "model.decoder.mlp_dim" => self.spec.decoder.mlp_dim = parse(key, v)?,
            "model.head.hidden_dim" => self.spec.head.hidden_dim = parse(key, v)?,
            "model.head.hidden_layers" => self.spec.head.hidden_layers = parse(key, v)?,
            "model.head.out_dim" => self.spec.head.out_dim = parse(key, v)?,
            "model.sigma_scale" => self.spec.sigma_scale = parse(key, v)?,
            "augment.crop_scale_min" => self.augment.crop_scale_range.0 = parse(key, v)?,
            "augment.crop_scale_max" => self.augment.crop_scale_range.1 = parse(key, v)?,
            "augment.jitter_strength" => self.augment.jitter_strength = parse(key, v)?,
            "augment.grayscale_prob" => self.augment.grayscale_prob = parse(key, v)?,
            "augment.blur_prob" => self.augment.blur_prob = parse(key, v)?,
            "augment.flip_prob" => self.augment.flip_prob = parse(key, v)?,
            "train.method" => self.train.method = v.parse().map_err(|_| format!("{key}: unknown method `{v}` (can, simclr, mae)"))?,
            "train.base_lr" => self.train.base_lr = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.beta1" => self.train.betas.0 = parse(key, v)?,
            "train.beta2" => self.train.betas.1 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.warmup_epochs" => self.train.warmup_epochs = parse(key, v)?,
            "train.total_epochs" => self.train.total_epochs = parse(key, v)?,
            "train.mask_rate" => self.train.mask_rate = parse(key, v)?,
            "train.sigma_max" => self.train.sigma_max = parse(key, v)?,
            "train.lambda_infonce" => self.train.lambda_infonce = parse(key, v)?,
            "train.lambda" => self.train.lambda = parse(key, v)?,
            "train.tau" => self.train.tau = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.views_per_image" => self.train.views_per_image = parse(key, v)?,
            "train.sigma_conditioning" => self.train.sigma_conditioning = parse_bool(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "train.max_steps" => {
                self.train.max_steps = if v == "none" || v.is_empty() { None } else { Some(parse(key, v)?) }
            }
            "train.log_wall_time" => self.train.log_wall_time = parse_bool(key, v)?,
            "data.source" => {
                self.data.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "cifar10" => DataSource::Cifar10,
                    _ => return Err(format!("{key}: expected synthetic or cifar10, got `{v}`")),
                }
            }
            "data.path" => self.data.path = if v.is_empty() || v == "none" { None } else { Some(PathBuf::from(v)) },
            "data.synthetic_count" => self.data.synthetic.count = parse(key, v)?,
            "data.synthetic_classes" => self.data.synthetic.num_classes = parse(key, v)?,
            "data.synthetic_side" => self.data.synthetic.side = parse(key, v)?,
            "data.synthetic_seed" => self.data.synthetic.seed = parse(key, v)?,
            "data.test_fraction" => self.data.test_fraction = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(format!("{key}: unknown key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        let s = &self.spec;
        let t = &self.train;
        match key {
            "model.preset" => self.model_preset.clone(),
            "model.image" => s.image.0.to_string(),
            "model.patch" => s.patch.to_string(),
            "model.encoder.depth" => s.encoder.depth.to_string(),
            "model.encoder.width" => s.encoder.width.to_string(),
            "model.encoder.heads" => s.encoder.heads.to_string(),
            "model.encoder.mlp_dim" => s.encoder.mlp_dim.to_string(),
            "model.decoder.depth" => s.decoder.depth.to_string(),
            "model.decoder.width" => s.decoder.width.to_string(),
            "model.decoder.heads" => s.decoder.heads.to_string(),
            "model.decoder.mlp_dim" => s.decoder.mlp_dim.to_string(),
            "model.head.hidden_dim" => s.head.hidden_dim.to_string(),
            "model.head.hidden_layers" => s.head.hidden_layers.to_string(),
            "model.head.out_dim" => s.head.out_dim.to_string(),
            "model.sigma_scale" => format!("{:?}", s.sigma_scale),
            "augment.crop_scale_min" => format!("{:?}", self.augment.crop_scale_range.0),
            "augment.crop_scale_max" => format!("{:?}", self.augment.crop_scale_range.1),
            "augment.jitter_strength" => format!("{:?}", self.augment.jitter_strength),
            "augment.grayscale_prob" => format!("{:?}", self.augment.grayscale_prob),
            "augment.blur_prob" => format!("{:?}", self.augment.blur_prob),
            "augment.flip_prob" => format!("{:?}", self.augment.flip_prob),
            "train.method" => t.method.to_string(),
            "train.base_lr" => format!("{:?}", t.base_lr),
            "train.weight_decay" => format!("{:?}", t.weight_decay),
            "train.beta1" => format!("{:?}", t.betas.0),
            "train.beta2" => format!("{:?}", t.betas.1),
            "train.eps" => format!("{:?}", t.eps),
            "train.batch_size" => t.batch_size.to_string(),
            "train.warmup_epochs" => format!("{:?}", t.warmup_epochs),
            "train.total_epochs" => format!("{:?}", t.total_epochs),
            "train.mask_rate" => format!("{:?}", t.mask_rate),
            "train.sigma_max" => format!("{:?}", t.sigma_max),
            "train.lambda_infonce" => format!("{:?}", t.lambda_infonce),
            "train.lambda" => format!("{:?}", t.lambda),
            "train.tau" => format!("{:?}", t.tau),
            "train.seed" => t.seed.to_string(),
            "train.views_per_image" => t.views_per_image.to_string(),
            "train.sigma_conditioning" => t.sigma_conditioning.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "train.max_steps" => t.max_steps.map_or("none".into(), |m| m.to_string()),
            "train.log_wall_time" => t.log_wall_time.to_string(),
            "data.source" => match self.data.source {
                DataSource::Synthetic => "synthetic".into(),
                DataSource::Cifar10 => "cifar10".into(),
            },
            "data.path" => self.data.path.as_ref().map_or("none".into(), |p| p.display().to_string()),
            "data.synthetic_count" => self.data.synthetic.count.to_string(),
            "data.synthetic_classes" => self.data.synthetic.num_classes.to_string(),
            "data.synthetic_side" => self.data.synthetic.side.to_string(),
            "data.synthetic_seed" => self.data.synthetic.seed.to_string(),
            "data.test_fraction" => format!("{:?}", self.data.test_fraction),
            "output.dir" => self.output_dir.display().to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// The resolved configuration in file syntax; reading it back gives the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let s = key.split('.').next().unwrap();
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    /// Every constraint violation, each prefixed with its key.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.train.problems();
        if let Err(e) = self.spec.validate() {
            p.push(format!("model: {e}"));
        }
        if let Err(e) = self.augment.validate() {
            p.push(format!("augment: {e}"));
        }
        if self.data.source == DataSource::Cifar10 {
            match &self.data.path {
                None => p.push("data.path: required when data.source = cifar10".into()),
                Some(path) if !path.exists() => p.push(format!("data.path: {} does not exist", path.display())),
                _ => {}
            }
        }
        if self.data.source == DataSource::Synthetic {
            if self.data.synthetic.count == 0 {
                p.push("data.synthetic_count: must be >= 1".into());
            }
            if self.data.synthetic.num_classes < 2 {
                p.push("data.synthetic_classes: must be >= 2".into());
            }
            if self.data.synthetic.side < 4 {
                p.push("data.synthetic_side: must be >= 4".into());
            }
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            p.push(format!("data.test_fraction: must lie in (0, 1), got {}", self.data.test_fraction));
        }
        p
    }

    pub fn setup(&self) -> RunSetup {
        RunSetup {
            spec: self.spec.clone(),
            augment: AugmentConfig {
                output_size: self.spec.image,
                ..self.augment.clone()
            },
            train: self.train.clone(),
        }
    }

    /// Builds a config from file text plus `(key, value)` overrides. The
    /// preset keys go first, then everything else in order, then the method
    /// preset is imposed. All errors are collected.
    pub fn resolve(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self, Vec<String>> {
        let mut errors = Vec::new();
        let mut pairs: Vec<(String, String, String)> = Vec::new();
        if let Some(text) = file {
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap().trim();
                if line.is_empty() {
                    continue;
                }
                match line.split_once('=') {
                    Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string(), format!("line {}", i + 1))),
                    None => errors.push(format!("line {}: expected `key = value`, got `{line}`", i + 1)),
                }
            }
        }
        for (k, v) in overrides {
            pairs.push((k.clone(), v.clone(), "flag".into()));
        }
        let mut cfg = RunConfig::default();
        let (presets, rest): (Vec<_>, Vec<_>) = pairs.into_iter().partition(|(k, _, _)| k == "model.preset");
        for (k, v, _) in presets.into_iter().chain(rest) {
            if let Err(e) = cfg.set(&k, &v) {
                errors.push(e);
            }
        }
        cfg.train = cfg.train.clone().with_method(cfg.train.method);
        errors.extend(cfg.problems());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }
}

/// Maps a flag name (without `--`) to a key: the full dotted key with dashes
/// for underscores, or just the last segment when that is unambiguous.
pub fn flag_to_key(flag: &str) -> Result<&'static str, String> {
    let norm = flag.replace('-', "_");
    if let Some(k) = KEYS.iter().find(|k| **k == norm) {
        return Ok(k);
    }
    let alias = match norm.as_str() {
        "out" | "output" => Some("output.dir"),
        "preset" | "model" => Some("model.preset"),
        "data" => Some("data.path"),
        _ => None,
    };
    if let Some(a) = alias {
        return Ok(a);
    }
    let hits: Vec<&'static str> = KEYS
        .iter()
        .copied()
        .filter(|k| k.rsplit('.').next() == Some(norm.as_str()))
        .collect();
    match hits.as_slice() {
        [one] => Ok(one),
        [] => Err(format!("--{flag}: unknown option")),
        many => Err(format!(
            "--{flag}: ambiguous, use one of {}",
            many.iter().map(|k| format!("--{}", k.replace('_', "-"))).collect::<Vec<_>>().join(", ")
        )),
    }
}

/// Splits `--key value` / `--key=value` pairs. Unknown flags are returned
/// as errors alongside the pairs that did resolve.
pub fn parse_overrides(args: &[String]) -> (Vec<(String, String)>, Vec<String>) {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let Some(flag) = a.strip_prefix("--") else {
            errors.push(format!("unexpected argument `{a}`"));
            i += 1;
            continue;
        };
        let (name, value) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let value = match value {
            Some(v) => v,
            None if i + 1 < args.len() => {
                i += 1;
                args[i].clone()
            }
            None => {
                errors.push(format!("--{name}: missing value"));
                break;
            }
        };
        match flag_to_key(&name) {
            Ok(k) => out.push((k.to_string(), value)),
            Err(e) => errors.push(e),
        }
        i += 1;
    }
    (out, errors)
}
