//! End-to-end experiment: synthetic city, biased resamples, initial
//! estimates, learned estimators and evaluation. Stages are plain functions
//! over in-memory values so the command-line tool and the acceptance suite
//! share one implementation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Attribute, Dataset, DatasetError};
use crate::estimators::{
    debiased_avg, debiased_count, oblivious_avg, oblivious_count, truth_stats, Denominator, EstimateTable,
    EstimatorError, Method, TruthTable,
};
use crate::eval::{
    correlation_table, quantile_buckets, variance_analysis, CorrelationTable, EvalError, EvalReport, MethodResult,
    QuantileBuckets, ReportMetadata, RunResult,
};
use crate::features::{FeatureError, FeatureMatrix};
use crate::geo::CityGrid;
use crate::ingest::{IngestError, SpdParams};
use crate::learner::{
    predict_all, train_observed, EpochStats, LearnerError, Mlp, ModelFile, TrainConfig, Trained, TrainingSet, Variant,
};
use crate::rng;
use crate::synth::{biased_sample, generate_city, generate_population, sample_seeds, CityModel, GenConfig, SamplingProfile, SynthError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// True for errors caused by the configuration rather than the data.
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_) | PipelineError::Synth(SynthError::Config(_)) | PipelineError::Learner(LearnerError::Config(_)))
    }
}

/// Training settings per attribute.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub visits: TrainConfig,
    pub duration: TrainConfig,
    pub distance: TrainConfig,
}

impl TrainSettings {
    pub fn get(&self, attribute: Attribute) -> &TrainConfig {
        match attribute {
            Attribute::Visits => &self.visits,
            Attribute::Duration => &self.duration,
            Attribute::Distance => &self.distance,
        }
    }

    pub fn get_mut(&mut self, attribute: Attribute) -> &mut TrainConfig {
        match attribute {
            Attribute::Visits => &mut self.visits,
            Attribute::Duration => &mut self.duration,
            Attribute::Distance => &mut self.distance,
        }
    }
}

/// Paths of externally supplied inputs; all optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputPaths {
    pub city: Option<PathBuf>,
    pub pings: Vec<PathBuf>,
    pub datasets: Vec<PathBuf>,
}

/// Configuration file of the command-line tool. Every field has a default,
/// so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Global seed; every stage derives named streams from it.
    pub seed: u64,
    /// Number of biased resamples.
    pub k: usize,
    pub out_dir: PathBuf,
    pub inputs: InputPaths,
    pub spd: SpdParams,
    pub synth: GenConfig,
    pub methods: Vec<Method>,
    pub variants: Vec<Variant>,
    pub train: TrainSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            k: 5,
            out_dir: PathBuf::from("out"),
            inputs: InputPaths::default(),
            spd: SpdParams::default(),
            synth: GenConfig::default(),
            methods: vec![Method::Oblivious, Method::Debiased],
            variants: Variant::ALL.to_vec(),
            train: TrainSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.k == 0 {
            return err("k must be at least 1".into());
        }
        if !(self.spd.dist_thresh_m > 0.0 && self.spd.dist_thresh_m.is_finite()) || self.spd.time_thresh_s <= 0 {
            return err("stay-point thresholds must be positive".into());
        }
        if self.methods.contains(&Method::Learned) {
            return err("methods lists initial estimators only (oblivious, debiased)".into());
        }
        let paths = self.inputs.city.iter().chain(&self.inputs.pings).chain(&self.inputs.datasets);
        for p in paths {
            if !p.exists() {
                return err(format!("input path {} does not exist", p.display()));
            }
        }
        self.synth.validate()?;
        for a in Attribute::ALL {
            self.train.get(a).validate().map_err(|e| PipelineError::Config(format!("train.{a}: {e}")))?;
        }
        Ok(())
    }

    /// Generator settings with the global seed applied.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig { seed: self.seed, ..self.synth.clone() }
    }

    pub fn resample_seeds(&self) -> Vec<u64> {
        sample_seeds(self.seed, self.k)
    }

    /// Training settings for one model, seeded from the global seed.
    pub fn train_config(&self, variant: Variant, attribute: Attribute, run: usize) -> TrainConfig {
        let name = format!("train/{variant}/{attribute}");
        TrainConfig { mode: variant.mode, seed: rng::derive_seed(self.seed, &name, run as u64), ..self.train.get(attribute).clone() }
    }
}

/// Synthetic city with its full population and per-cell truth.
#[derive(Debug, Clone)]
pub struct Lab {
    pub city: CityModel,
    pub truth: Dataset,
    pub truth_table: TruthTable<f64>,
    pub ratios: Vec<f64>,
    pub features: FeatureMatrix<f64>,
}

impl Lab {
    pub fn generate(cfg: &GenConfig) -> Result<Self, PipelineError> {
        let city = generate_city(cfg)?;
        let truth = generate_population(&city, cfg)?;
        Self::from_parts(city, truth, &cfg.ratio)
    }

    pub fn from_parts(city: CityModel, truth: Dataset, ratio: &crate::synth::RatioModel) -> Result<Self, PipelineError> {
        let truth_table = truth_stats(&truth, &city.grid);
        let ratios = city.sampling_ratios(ratio);
        let features = FeatureMatrix::build(&city)?;
        Ok(Self { city, truth, truth_table, ratios, features })
    }

    pub fn grid(&self) -> &CityGrid {
        &self.city.grid
    }

    pub fn truth_statistic(&self, attribute: Attribute) -> Vec<Option<f64>> {
        self.truth_table.statistic(attribute)
    }

    pub fn resample(&self, seed: u64) -> Resample {
        let (observed, profile) = biased_sample(&self.truth, &self.ratios, seed);
        Resample { seed, observed, profile }
    }
}

#[derive(Debug, Clone)]
pub struct Resample {
    pub seed: u64,
    pub observed: Dataset,
    pub profile: SamplingProfile,
}

pub type EstimateSet = BTreeMap<Attribute, EstimateTable<f64>>;

/// COUNT of visits and AVG of duration and distance with one initial
/// estimator. Debiased averages use the known true support when `truth` is
/// given and the estimated support otherwise.
pub fn initial_estimates(
    observed: &Dataset,
    profile: &SamplingProfile,
    grid: &CityGrid,
    method: Method,
    truth: Option<&TruthTable<f64>>,
) -> Result<EstimateSet, PipelineError> {
    let mut out = BTreeMap::new();
    match method {
        Method::Oblivious => {
            out.insert(Attribute::Visits, oblivious_count(observed, profile.total_true(), grid)?);
            for a in [Attribute::Duration, Attribute::Distance] {
                out.insert(a, oblivious_avg(observed, grid, a));
            }
        }
        Method::Debiased => {
            out.insert(Attribute::Visits, debiased_count(observed, profile, grid)?);
            let denom = truth.map_or(Denominator::Estimated, Denominator::Known);
            for a in [Attribute::Duration, Attribute::Distance] {
                out.insert(a, debiased_avg(observed, profile, grid, a, denom)?);
            }
        }
        Method::Learned => return Err(PipelineError::Config("learned estimates come from a trained model".into())),
    }
    Ok(out)
}

/// A trained model, its predictions and the per-epoch trace.
#[derive(Debug, Clone)]
pub struct LearnedRun {
    pub file: ModelFile<f64>,
    pub trace: Vec<EpochStats<f64>>,
    pub predictions: EstimateTable<f64>,
}

/// Trains one learned estimator on a resample's initial estimates.
#[allow(clippy::too_many_arguments)]
pub fn train_learned(
    features: &FeatureMatrix<f64>,
    labels: &EstimateTable<f64>,
    observed: &Dataset,
    variant: Variant,
    cfg: &TrainConfig,
    observer: impl FnMut(&EpochStats<f64>, &Mlp<f64>, &crate::learner::TargetScaler<f64>),
) -> Result<LearnedRun, PipelineError> {
    let attribute = labels.attribute;
    let inputs = features.inputs();
    let support = observed.visit_counts(inputs.len());
    let set = TrainingSet::build(&inputs, &labels.values(), &support)?;
    let model = Mlp::new(cfg.seed, features.dim())?;
    let cfg = TrainConfig { mode: variant.mode, ..cfg.clone() };
    let Trained { model, target, trace, epochs_run, .. } = train_observed(model, &set, &cfg, observer)?;
    let predictions = predict_all(&model, &inputs, &target, attribute)?;
    let file = ModelFile {
        attribute,
        variant,
        layer_sizes: model.layer_sizes(),
        seed: cfg.seed,
        config: cfg,
        target_scaler: target,
        categories: features.categories.clone(),
        feature_scaler: features.scaler.clone(),
        epochs_run,
        model,
    };
    Ok(LearnedRun { file, trace, predictions })
}

/// Label of a learned estimator in reports.
pub fn learned_label(variant: Variant) -> String {
    format!("learned-{variant}")
}

/// Everything computed for one resample.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub resample: Resample,
    pub buckets: QuantileBuckets,
    /// Keyed by report label (`oblivious`, `debiased`, `learned-OW`, ...).
    pub estimates: BTreeMap<String, EstimateSet>,
    pub models: BTreeMap<(String, Attribute), LearnedRun>,
}

/// Runs initial estimators and every configured learned variant on one resample.
pub fn run_resample(lab: &Lab, cfg: &PipelineConfig, run: usize, seed: u64) -> Result<RunOutputs, PipelineError> {
    let resample = lab.resample(seed);
    let grid = lab.grid();
    let buckets = quantile_buckets(&lab.truth, &resample.observed, grid);
    let mut estimates = BTreeMap::new();
    for &m in &cfg.methods {
        let set = initial_estimates(&resample.observed, &resample.profile, grid, m, Some(&lab.truth_table))?;
        estimates.insert(m.to_string(), set);
    }
    let mut models = BTreeMap::new();
    for &v in &cfg.variants {
        let labels = match estimates.get(v.labels.as_str()) {
            Some(s) => s.clone(),
            None => initial_estimates(&resample.observed, &resample.profile, grid, v.labels, Some(&lab.truth_table))?,
        };
        let mut learned = BTreeMap::new();
        for a in Attribute::ALL {
            let tc = cfg.train_config(v, a, run);
            let r = train_learned(&lab.features, &labels[&a], &resample.observed, v, &tc, |_, _, _| {})?;
            learned.insert(a, r.predictions.clone());
            models.insert((learned_label(v), a), r);
        }
        estimates.insert(learned_label(v), learned);
    }
    Ok(RunOutputs { resample, buckets, estimates, models })
}

/// Aggregates per-run errors of every estimator into a report.
pub fn evaluate(lab: &Lab, runs: &[RunOutputs]) -> Result<EvalReport, PipelineError> {
    let mut per_method: BTreeMap<(String, Attribute), Vec<RunResult>> = BTreeMap::new();
    for run in runs {
        for (label, set) in &run.estimates {
            for (a, table) in set {
                let truth = lab.truth_statistic(*a);
                let r = RunResult::evaluate(run.resample.seed, &truth, &table.values(), &run.buckets)?;
                per_method.entry((label.clone(), *a)).or_default().push(r);
            }
        }
    }
    let results = per_method
        .into_iter()
        .map(|((label, a), rs)| MethodResult::aggregate(label, a, rs))
        .collect::<Result<Vec<_>, _>>()?;
    let correlations: Vec<CorrelationTable> = runs.iter().map(|r| correlation_table(&lab.city, &r.resample.profile)).collect();
    let seeds = runs.iter().map(|r| r.resample.seed).collect();
    Ok(EvalReport::new(ReportMetadata::new(seeds), results, variance_analysis(&lab.truth, lab.grid()), &correlations))
}

/// Generates the lab, runs all resamples and evaluates them.
pub fn run_experiment(cfg: &PipelineConfig) -> Result<(Lab, Vec<RunOutputs>, EvalReport), PipelineError> {
    cfg.validate()?;
    let lab = Lab::generate(&cfg.gen_config())?;
    let runs = cfg
        .resample_seeds()
        .into_iter()
        .enumerate()
        .map(|(i, s)| run_resample(&lab, cfg, i, s))
        .collect::<Result<Vec<_>, _>>()?;
    let report = evaluate(&lab, &runs)?;
    Ok((lab, runs, report))
}
