//! Line-oriented `key = value` experiment configuration.
//!
//! Blank lines and text after `#` are ignored. `N`, `C`, `P`, `X` and `seed`
//! accept comma-separated lists and span a sweep; every other key takes a
//! single value. Missing keys keep their defaults.

use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::data::AttackKind;
use crate::orchestrator::{Algorithm, ExperimentConfig};
use crate::pool::Scale;
use crate::round::AggregationMode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Validation(String),
}

/// Which algorithms a sweep runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlgorithmSelector {
    Baseline,
    Proposed,
    #[default]
    Both,
}

impl AlgorithmSelector {
    pub fn includes(self, algorithm: Algorithm) -> bool {
        matches!(
            (self, algorithm),
            (AlgorithmSelector::Both, _)
                | (AlgorithmSelector::Baseline, Algorithm::Baseline)
                | (AlgorithmSelector::Proposed, Algorithm::Proposed)
        )
    }
}

impl FromStr for AlgorithmSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(AlgorithmSelector::Baseline),
            "proposed" => Ok(AlgorithmSelector::Proposed),
            "both" => Ok(AlgorithmSelector::Both),
            _ => Err(format!("unknown algorithm `{s}` (expected baseline, proposed or both)")),
        }
    }
}

/// Cartesian product of `N x C x P x X x seed` over a fixed base config.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub clients: Vec<usize>,
    pub clusters: Vec<usize>,
    pub poison_percents: Vec<f64>,
    pub expel_percents: Vec<f64>,
    pub seeds: Vec<u64>,
    pub algorithms: AlgorithmSelector,
    /// Every other setting; its list-valued fields are overridden per run.
    pub base: ExperimentConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let base = ExperimentConfig::default();
        Self {
            clients: vec![base.clients],
            clusters: vec![base.clusters],
            poison_percents: vec![base.poison_percent],
            expel_percents: vec![base.expel_percent],
            seeds: vec![base.seed],
            algorithms: AlgorithmSelector::default(),
            base,
        }
    }
}

impl SweepSpec {
    /// Checks every combination, so a failing `(N, C)` pair is reported
    /// before anything runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let lists = [
            ("N", self.clients.len()),
            ("C", self.clusters.len()),
            ("P", self.poison_percents.len()),
            ("X", self.expel_percents.len()),
            ("seed", self.seeds.len()),
        ];
        if let Some((key, _)) = lists.iter().find(|(_, n)| *n == 0) {
            return Err(ConfigError::Validation(format!("{key} needs at least one value")));
        }
        for config in self.proposed_configs() {
            config.validate().map_err(|e| ConfigError::Validation(strip_prefix(e.to_string())))?;
        }
        Ok(())
    }

    /// True when the sweep describes exactly one configuration.
    pub fn is_single(&self) -> bool {
        [
            self.clients.len(),
            self.clusters.len(),
            self.poison_percents.len(),
            self.expel_percents.len(),
            self.seeds.len(),
        ]
        .iter()
        .all(|&n| n == 1)
    }

    /// All proposed-run configs in product order.
    pub fn proposed_configs(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &clients in &self.clients {
            for &clusters in &self.clusters {
                for &poison_percent in &self.poison_percents {
                    for &expel_percent in &self.expel_percents {
                        for &seed in &self.seeds {
                            out.push(ExperimentConfig {
                                clients,
                                clusters,
                                poison_percent,
                                expel_percent,
                                seed,
                                ..self.base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Baseline configs: one per `(N, P, seed)`, since `C` and `X` do not
    /// affect the baseline. They carry `C = 1` and `X = 0`.
    pub fn baseline_configs(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &clients in &self.clients {
            for &poison_percent in &self.poison_percents {
                for &seed in &self.seeds {
                    out.push(ExperimentConfig {
                        clients,
                        clusters: 1,
                        poison_percent,
                        expel_percent: 0.0,
                        seed,
                        ..self.base.clone()
                    });
                }
            }
        }
        out
    }
}

fn strip_prefix(message: String) -> String {
    message.strip_prefix("invalid configuration: ").map(str::to_string).unwrap_or(message)
}

/// Parses a sweep description. Syntax errors carry the line number;
/// constraint violations name the constraint.
pub fn parse_sweep(text: &str) -> Result<SweepSpec, ConfigError> {
    let mut spec = SweepSpec::default();
    let mut epsilon = None;
    let mut attack = None;
    let mut idx_images = None;
    let mut idx_labels = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| ConfigError::Parse { line, message };
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, found `{content}`")))?;
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(err(format!("`{key}` has no value")));
        }
        let single = || -> Result<&str, ConfigError> {
            if value.contains(',') {
                Err(err(format!("`{key}` takes a single value")))
            } else {
                Ok(value)
            }
        };
        let base = &mut spec.base;
        match key {
            "N" => spec.clients = list(value, key, line)?,
            "C" => spec.clusters = list(value, key, line)?,
            "P" => spec.poison_percents = list(value, key, line)?,
            "X" => spec.expel_percents = list(value, key, line)?,
            "seed" | "seeds" => spec.seeds = list(value, key, line)?,
            "R" => base.rounds = scalar(single()?, key, line)?,
            "E" => base.epochs = scalar(single()?, key, line)?,
            "B" => base.batch_size = scalar(single()?, key, line)?,
            "R_c" => base.rounds_per_cluster = scalar(single()?, key, line)?,
            "lr" => base.learning_rate = scalar(single()?, key, line)?,
            "epsilon" => epsilon = Some(scalar::<f64>(single()?, key, line)?),
            "attack" => {
                attack = Some(match single()? {
                    "fgsm" => AttackKind::Fgsm { epsilon: 0.25 },
                    "label_flip" => AttackKind::LabelFlip,
                    other => return Err(err(format!("unknown attack `{other}` (expected fgsm or label_flip)"))),
                })
            }
            "aggregation" => {
                base.aggregation = match single()? {
                    "plain_mean" => AggregationMode::PlainMean,
                    "sample_weighted" => AggregationMode::SampleWeighted,
                    other => {
                        return Err(err(format!(
                            "unknown aggregation `{other}` (expected plain_mean or sample_weighted)"
                        )))
                    }
                }
            }
            "algorithm" => spec.algorithms = single()?.parse().map_err(err)?,
            "K" => base.dataset.class_count = scalar(single()?, key, line)?,
            "samples_per_client" => base.dataset.samples_per_client = scalar(single()?, key, line)?,
            "image_side" => base.dataset.image_side = scalar(single()?, key, line)?,
            "noise_sigma" => base.dataset.noise_sigma = scalar(single()?, key, line)?,
            "intensity" => base.dataset.intensity = scalar(single()?, key, line)?,
            "holdout_size" => base.dataset.holdout_size = scalar(single()?, key, line)?,
            "test_size" => base.dataset.test_size = scalar(single()?, key, line)?,
            "scale_factor" => {
                base.scale = single()?.parse::<Scale>().map_err(|e| err(e.to_string()))?;
            }
            "reference_epochs" => base.reference.epochs = scalar(single()?, key, line)?,
            "idx_images" => idx_images = Some(PathBuf::from(single()?)),
            "idx_labels" => idx_labels = Some(PathBuf::from(single()?)),
            _ => return Err(err(format!("unknown key `{key}`"))),
        }
    }
    let attack = attack.unwrap_or(spec.base.attack);
    spec.base.attack = match (attack, epsilon) {
        (AttackKind::Fgsm { .. }, Some(epsilon)) => AttackKind::Fgsm { epsilon },
        (AttackKind::LabelFlip, Some(_)) => {
            return Err(ConfigError::Validation("epsilon applies only to attack = fgsm".into()))
        }
        (kind, None) => kind,
    };
    spec.base.idx_files = match (idx_images, idx_labels) {
        (Some(images), Some(labels)) => Some((images, labels)),
        (None, None) => None,
        _ => return Err(ConfigError::Validation("idx_images and idx_labels must be given together".into())),
    };
    spec.validate()?;
    Ok(spec)
}

/// Parses a single-configuration file; list values other than singletons
/// are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let spec = parse_sweep(text)?;
    if !spec.is_single() {
        return Err(ConfigError::Validation("a single run takes one value per key; use a sweep".into()));
    }
    Ok(spec.proposed_configs().remove(0))
}

fn scalar<T: FromStr>(value: &str, key: &str, line: usize) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Parse {
        line,
        message: format!("cannot parse `{value}` for `{key}`"),
    })
}

fn list<T: FromStr>(value: &str, key: &str, line: usize) -> Result<Vec<T>, ConfigError> {
    value.split(',').map(|v| scalar(v.trim(), key, line)).collect()
}
