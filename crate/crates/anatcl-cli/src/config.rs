//! `key = value` run configuration.
//!
//! One flat namespace covers the generator, encoder, trainer, loss, and
//! probe settings; each command reads the subset it needs and ignores
//! nothing: unknown keys are rejected up front. Values left out fall back
//! to the library defaults (lr 1e-4, batch 32, epochs 300, lambda1 =
//! lambda2 = 1, tau 0.1, sigma 5).
//!
//! Grammar: one `key = value` per line; blank lines and `#` comments
//! (full-line or trailing) are ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anatcl::anatomy::{Measure, MeasureSet};
use anatcl::cohort::{LabelRule, LatentFactor, SyntheticConfig};
use anatcl::losses::{LossConfig, LossVariant};
use anatcl::model::{EncoderConfig, TrainConfig};

use crate::CliError;

/// Every accepted key, with the command(s) that read it.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    // synth
    ("n_subjects", "synth: cohort size (>= 10)"),
    ("atlas", "synth: desikan or destrieux"),
    ("measures", "synth: comma list of measure names"),
    ("noise_scale", "synth: feature noise multiplier (>= 0)"),
    ("label_rules", "synth: comma list of name:factor:threshold:flip_prob"),
    ("seed", "synth: generator seed"),
    // encoder (input_dim is shared with synth)
    ("input_dim", "synth/pretrain: feature width"),
    ("hidden", "pretrain: comma list of hidden widths"),
    ("representation_dim", "pretrain: encoder output width"),
    ("projection_dim", "pretrain: projection head output width"),
    ("encoder_seed", "pretrain: weight init seed"),
    // trainer
    ("learning_rate", "pretrain: Adam base learning rate"),
    ("batch_size", "pretrain: subjects per batch (>= 2)"),
    ("epochs", "pretrain: number of epochs (>= 1)"),
    ("train_seed", "pretrain: shuffling/augmentation seed"),
    ("augment_strength", "pretrain: augmentation noise scale (>= 0)"),
    // loss
    ("variant", "pretrain: loss variant name"),
    ("lambda1", "pretrain: anatomical term weight"),
    ("lambda2", "pretrain: age-kernel term weight"),
    ("temperature", "pretrain: contrastive temperature"),
    ("sigma", "pretrain: age kernel bandwidth"),
    // probe
    ("folds", "probe/feature-study: number of folds (>= 2)"),
    ("probe_seed", "probe/feature-study: fold shuffling seed"),
];

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

fn type_error(key: &str, expected: &str, raw: &str) -> CliError {
    CliError::validation(format!(
        "config key `{}`: expected {}, got `{}`",
        key, expected, raw
    ))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = match raw_line.split_once('#') {
                Some((before, _)) => before,
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::validation(format!(
                    "config line {}: expected `key = value`, got `{}`",
                    idx + 1,
                    raw_line.trim()
                ))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.iter().any(|(k, _)| *k == key) {
                return Err(CliError::validation(format!(
                    "unknown config key `{}` (line {})",
                    key,
                    idx + 1
                )));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(CliError::validation(format!(
                    "duplicate config key `{}` (line {})",
                    key,
                    idx + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::validation(format!("cannot read config {}: {}", p.display(), e))
                })?;
                Self::parse(&text)
            }
        }
    }

    fn get<T>(&self, key: &str, default: T, expected: &str) -> Result<T, CliError>
    where
        T: FromStr,
    {
        match self.entries.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| type_error(key, expected, raw)),
        }
    }

    pub fn synthetic_config(&self, seed_override: Option<u64>) -> Result<SyntheticConfig, CliError> {
        let defaults = SyntheticConfig::new(0);
        let mut config = SyntheticConfig::new(self.get(
            "n_subjects",
            2000,
            "an unsigned integer",
        )?);
        config.input_dim = self.get("input_dim", defaults.input_dim, "an unsigned integer")?;
        config.atlas = self.get("atlas", defaults.atlas, "desikan or destrieux")?;
        config.noise_scale = self.get("noise_scale", defaults.noise_scale, "a number")?;
        config.seed = match seed_override {
            Some(s) => s,
            None => self.get("seed", defaults.seed, "an unsigned integer")?,
        };
        if let Some(raw) = self.entries.get("measures") {
            let measures: Vec<Measure> = raw
                .split(',')
                .map(|m| {
                    m.trim()
                        .parse()
                        .map_err(|_| type_error("measures", "measure names", m.trim()))
                })
                .collect::<Result<_, _>>()?;
            config.measures = MeasureSet::new(measures)
                .map_err(|e| CliError::validation(format!("config key `measures`: {}", e)))?;
        }
        if let Some(raw) = self.entries.get("label_rules") {
            config.label_rules = parse_label_rules(raw)?;
        }
        config
            .validate()
            .map_err(|e| CliError::validation(format!("invalid synth config: {}", e)))?;
        Ok(config)
    }

    /// `fallback_input` is the cohort feature width, used when the config
    /// does not pin `input_dim` itself.
    pub fn encoder_config(&self, fallback_input: usize) -> Result<EncoderConfig, CliError> {
        let defaults = EncoderConfig::new(0);
        let mut config = EncoderConfig::new(self.get(
            "input_dim",
            fallback_input,
            "an unsigned integer",
        )?);
        if let Some(raw) = self.entries.get("hidden") {
            config.hidden = raw
                .split(',')
                .map(|d| {
                    d.trim()
                        .parse()
                        .map_err(|_| type_error("hidden", "unsigned integers", d.trim()))
                })
                .collect::<Result<_, _>>()?;
        }
        config.representation_dim = self.get(
            "representation_dim",
            defaults.representation_dim,
            "an unsigned integer",
        )?;
        config.projection_dim = self.get(
            "projection_dim",
            defaults.projection_dim,
            "an unsigned integer",
        )?;
        config.seed = self.get("encoder_seed", defaults.seed, "an unsigned integer")?;
        Ok(config)
    }

    pub fn train_config(&self, seed_override: Option<u64>) -> Result<TrainConfig, CliError> {
        let variant: LossVariant = self.get("variant", LossVariant::AnatclGlobal, "a loss variant name")?;
        let loss = LossConfig::build(
            variant,
            self.get("lambda1", 1.0, "a number")?,
            self.get("lambda2", 1.0, "a number")?,
            self.get("temperature", LossConfig::DEFAULT_TEMPERATURE, "a number")?,
            self.get("sigma", LossConfig::DEFAULT_SIGMA, "a number")?,
        )
        .map_err(|e| CliError::validation(format!("invalid loss config: {}", e)))?;
        let defaults = TrainConfig::new(loss.clone());
        let mut config = TrainConfig::new(loss);
        config.learning_rate = self.get("learning_rate", defaults.learning_rate, "a number")?;
        config.batch_size = self.get("batch_size", defaults.batch_size, "an unsigned integer")?;
        config.epochs = self.get("epochs", defaults.epochs, "an unsigned integer")?;
        config.augment_strength = self.get(
            "augment_strength",
            defaults.augment_strength,
            "a number",
        )?;
        config.seed = match seed_override {
            Some(s) => s,
            None => self.get("train_seed", defaults.seed, "an unsigned integer")?,
        };
        config
            .validate()
            .map_err(|e| CliError::validation(format!("invalid train config: {}", e)))?;
        Ok(config)
    }

    pub fn folds(&self) -> Result<usize, CliError> {
        let k = self.get("folds", 5usize, "an unsigned integer")?;
        if k < 2 {
            return Err(CliError::validation(format!(
                "config key `folds`: need at least 2 folds, got {}",
                k
            )));
        }
        Ok(k)
    }

    pub fn probe_seed(&self, seed_override: Option<u64>) -> Result<u64, CliError> {
        match seed_override {
            Some(s) => Ok(s),
            None => self.get("probe_seed", 0, "an unsigned integer"),
        }
    }

    /// Keys that only make sense for commands other than `command` are
    /// rejected so a typo like setting `epochs` on `synth` cannot pass
    /// silently.
    pub fn reject_foreign_keys(&self, command: &str, allowed: &[&str]) -> Result<(), CliError> {
        for key in self.entries.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(CliError::validation(format!(
                    "config key `{}` is not used by `{}`",
                    key, command
                )));
            }
        }
        Ok(())
    }
}

pub const SYNTH_KEYS: &[&str] = &[
    "n_subjects",
    "input_dim",
    "atlas",
    "measures",
    "noise_scale",
    "label_rules",
    "seed",
];

pub const PRETRAIN_KEYS: &[&str] = &[
    "input_dim",
    "hidden",
    "representation_dim",
    "projection_dim",
    "encoder_seed",
    "learning_rate",
    "batch_size",
    "epochs",
    "train_seed",
    "augment_strength",
    "variant",
    "lambda1",
    "lambda2",
    "temperature",
    "sigma",
];

pub const PROBE_KEYS: &[&str] = &["folds", "probe_seed"];

fn parse_label_rules(raw: &str) -> Result<Vec<LabelRule>, CliError> {
    raw.split(',')
        .map(|rule| {
            let parts: Vec<&str> = rule.trim().split(':').collect();
            if parts.len() != 4 {
                return Err(type_error(
                    "label_rules",
                    "name:factor:threshold:flip_prob entries",
                    rule.trim(),
                ));
            }
            let factor: LatentFactor = parts[1]
                .parse()
                .map_err(|_| type_error("label_rules", "a latent factor (age/size/sex)", parts[1]))?;
            Ok(LabelRule {
                name: parts[0].to_string(),
                factor,
                threshold: parts[2]
                    .parse()
                    .map_err(|_| type_error("label_rules", "a numeric threshold", parts[2]))?,
                flip_prob: parts[3]
                    .parse()
                    .map_err(|_| type_error("label_rules", "a flip probability", parts[3]))?,
            })
        })
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// The defaults-resolved settings a `synth` run actually used.
pub fn echo_synth(config: &SyntheticConfig, header: &str) -> String {
    let rules = config
        .label_rules
        .iter()
        .map(|r| format!("{}:{}:{}:{}", r.name, r.factor, r.threshold, r.flip_prob))
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "# {}\nn_subjects = {}\ninput_dim = {}\natlas = {}\nmeasures = {}\nnoise_scale = {}\nlabel_rules = {}\nseed = {}\n",
        header,
        config.n_subjects,
        config.input_dim,
        config.atlas,
        join(&config.measures.measures().iter().map(|m| m.name()).collect::<Vec<_>>()),
        config.noise_scale,
        rules,
        config.seed
    )
}

/// The defaults-resolved settings a `pretrain` run actually used.
pub fn echo_pretrain(encoder: &EncoderConfig, train: &TrainConfig, header: &str) -> String {
    let loss = &train.loss;
    format!(
        "# {}\ninput_dim = {}\nhidden = {}\nrepresentation_dim = {}\nprojection_dim = {}\nencoder_seed = {}\nlearning_rate = {}\nbatch_size = {}\nepochs = {}\ntrain_seed = {}\naugment_strength = {}\nvariant = {}\nlambda1 = {}\nlambda2 = {}\ntemperature = {}\nsigma = {}\n",
        header,
        encoder.input_dim,
        join(&encoder.hidden),
        encoder.representation_dim,
        encoder.projection_dim,
        encoder.seed,
        train.learning_rate,
        train.batch_size,
        train.epochs,
        train.seed,
        train.augment_strength,
        loss.variant(),
        loss.lambda1(),
        loss.lambda2(),
        loss.temperature(),
        loss.sigma()
    )
}
