//! Neural estimator: a small fully connected regressor mapping cell feature
//! vectors to a statistic, trained on initial (oblivious or debiased)
//! estimates with optional confidence weights.

mod mlp;
mod train;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Attribute;
use crate::estimators::{CellEstimate, EstimateTable, Flag, Method};
use crate::features::FeatureScaler;
use crate::num::Real;

pub use mlp::{Dense, Mlp, HIDDEN};
pub use train::{gradient_check, loss, loss_and_grad, train, train_observed, EpochStats, GradCheck, Trained};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[default]
    Unweighted,
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TargetScaling {
    #[default]
    Standardize,
    None,
}

/// Label source plus weighting: `O`, `D`, `OW`, `DW`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    pub labels: Method,
    pub mode: LossMode,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant { labels: Method::Oblivious, mode: LossMode::Unweighted },
        Variant { labels: Method::Debiased, mode: LossMode::Unweighted },
        Variant { labels: Method::Oblivious, mode: LossMode::Weighted },
        Variant { labels: Method::Debiased, mode: LossMode::Weighted },
    ];

    pub fn as_str(self) -> &'static str {
        match (self.labels, self.mode) {
            (Method::Debiased, LossMode::Unweighted) => "D",
            (Method::Debiased, LossMode::Weighted) => "DW",
            (_, LossMode::Unweighted) => "O",
            (_, LossMode::Weighted) => "OW",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant `{s}` (expected O, D, OW or DW)"))
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of rows held out for early stopping; 0 disables it.
    pub validation_fraction: f64,
    pub patience: usize,
    pub target_scaling: TargetScaling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Unweighted,
            epochs: 500,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
            validation_fraction: 0.0,
            patience: 20,
            target_scaling: TargetScaling::Standardize,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.epochs == 0 {
            return Err(LearnerError::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(LearnerError::Config("learning rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(LearnerError::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(LearnerError::Config("validation fraction must lie in [0, 1)".into()));
        }
        if self.validation_fraction > 0.0 && self.patience == 0 {
            return Err(LearnerError::Config("patience must be at least 1 with a validation split".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample<T = f64> {
    pub cell: usize,
    pub features: Vec<T>,
    pub label: T,
    pub weight: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet<T = f64> {
    pub rows: Vec<Sample<T>>,
}

impl<T: Real> TrainingSet<T> {
    /// Pairs each cell's features with its label; cells without a label are
    /// dropped. Weights are the cell's observed stay-point count divided by
    /// the largest count among the kept rows.
    pub fn build(features: &[Vec<T>], labels: &[Option<T>], observed: &[u64]) -> Result<Self, LearnerError> {
        if features.len() != labels.len() || labels.len() != observed.len() {
            return Err(LearnerError::Shape(format!(
                "{} feature rows, {} labels, {} support counts",
                features.len(),
                labels.len(),
                observed.len()
            )));
        }
        let kept: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
        let max = kept.iter().map(|&i| observed[i]).max().unwrap_or(0);
        let rows = kept
            .into_iter()
            .map(|i| Sample {
                cell: i,
                features: features[i].clone(),
                label: labels[i].expect("kept rows have labels"),
                weight: if max == 0 { T::zero() } else { T::lit(observed[i] as f64) / T::lit(max as f64) },
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Affine map from training targets to the scale the network sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler<T = f64> {
    pub mean: T,
    pub spread: T,
}

impl<T: Real> TargetScaler<T> {
    pub fn identity() -> Self {
        Self { mean: T::zero(), spread: T::one() }
    }

    /// Mean and population standard deviation; a zero spread becomes 1.
    pub fn fit(labels: &[T], scaling: TargetScaling) -> Self {
        if scaling == TargetScaling::None || labels.is_empty() {
            return Self::identity();
        }
        let n = T::from_count(labels.len());
        let mean = labels.iter().copied().sum::<T>() / n;
        let sd = (labels.iter().map(|y| (*y - mean).powi(2)).sum::<T>() / n).sqrt();
        Self { mean, spread: if sd > T::zero() { sd } else { T::one() } }
    }

    pub fn scale(&self, y: T) -> T {
        (y - self.mean) / self.spread
    }

    pub fn unscale(&self, z: T) -> T {
        z * self.spread + self.mean
    }
}

/// One forward pass per cell. COUNT outputs below zero are clamped.
pub fn predict_all<T: Real>(
    model: &Mlp<T>,
    features: &[Vec<T>],
    target: &TargetScaler<T>,
    attribute: Attribute,
) -> Result<EstimateTable<T>, LearnerError> {
    use rayon::prelude::*;
    let raw: Vec<T> = features.par_iter().map(|x| model.forward(x)).collect::<Result<_, _>>()?;
    let cells = raw
        .into_iter()
        .map(|z| clamp_estimate(target.unscale(z), attribute))
        .collect();
    Ok(EstimateTable {
        method: Method::Learned,
        attribute,
        cells,
        skipped_home_cells: Vec::new(),
        weights: Vec::new(),
    })
}

fn clamp_estimate<T: Real>(y: T, attribute: Attribute) -> CellEstimate<T> {
    if attribute == Attribute::Visits && y < T::zero() {
        CellEstimate { value: Some(T::zero()), support: 0, flags: vec![Flag::Clamped] }
    } else {
        CellEstimate { value: Some(y), support: 0, flags: Vec::new() }
    }
}

/// Everything needed to reload a trained estimator bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile<T = f64> {
    pub attribute: Attribute,
    pub variant: Variant,
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
    pub config: TrainConfig,
    pub target_scaler: TargetScaler<T>,
    pub categories: Vec<String>,
    pub feature_scaler: FeatureScaler<T>,
    pub epochs_run: usize,
    pub model: Mlp<T>,
}

impl<T: Real> ModelFile<T> {
    pub fn write_json<W: Write>(&self, w: W) -> Result<(), LearnerError> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), LearnerError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_json(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LearnerError> {
        let file: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        if file.model.layer_sizes() != file.layer_sizes || !file.model.is_finite() {
            return Err(LearnerError::Shape("model file parameters do not match its layer sizes".into()));
        }
        Ok(file)
    }
}
