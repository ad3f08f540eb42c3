//! Subcommand bodies. Each stage reads its inputs from the output directory,
//! writes its artifacts there and records them in the manifest.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::anyhow;
use popest::acceptance::{Suite, CRITERIA};
use popest::estimators::{truth_stats, EstimateTable, Method};
use popest::features::FeatureMatrix;
use popest::ingest::{build_dataset, parse_pings, PingsByUser};
use popest::learner::{EpochStats, Variant};
use popest::pipeline::{
    evaluate, initial_estimates, learned_label, train_learned, Lab, PipelineConfig, PipelineError, Resample, RunOutputs,
};
use popest::synth::{CityModel, SamplingProfile};
use popest::{Attribute, CityGrid, Dataset};

use crate::manifest::{sha256_file, sha256_json, Layout, RunManifest, StageRecord};

pub const EXIT_CHECK: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(msg: impl Display) -> Self {
        Self { code: EXIT_CONFIG, error: anyhow!("{msg}") }
    }

    pub fn data(msg: impl Display) -> Self {
        Self { code: EXIT_DATA, error: anyhow!("{msg}") }
    }

    fn context(self, ctx: impl Display) -> Self {
        Self { code: self.code, error: self.error.context(ctx.to_string()) }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = if e.is_config() { EXIT_CONFIG } else { EXIT_DATA };
        Self { code, error: e.into() }
    }
}

pub type CmdResult<T> = Result<T, Failure>;

/// Attaches a path to any core error and classifies it as a data error
/// unless the core says it is a configuration problem.
trait AtPath<T> {
    fn at(self, path: &Path) -> CmdResult<T>;
}

impl<T, E: Into<PipelineError>> AtPath<T> for Result<T, E> {
    fn at(self, path: &Path) -> CmdResult<T> {
        self.map_err(|e| Failure::from(e.into()).context(path.display()))
    }
}

fn create_dir(dir: &Path) -> CmdResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))
}

fn require(path: &Path, what: &str) -> CmdResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::data(format!("{what} missing: {}", path.display())))
    }
}

/// Records a finished stage in the manifest.
fn record_stage(
    layout: &Layout,
    stage: &str,
    cfg: &PipelineConfig,
    seeds: Vec<u64>,
    started: Instant,
    written: &[PathBuf],
) -> CmdResult<()> {
    let mut artifacts = BTreeMap::new();
    for p in written {
        let sum = sha256_file(p).map_err(|e| Failure { code: EXIT_DATA, error: e })?;
        artifacts.insert(layout.relative(p), sum);
    }
    let record = StageRecord {
        config_hash: sha256_json(cfg),
        seed: cfg.seed,
        seeds,
        elapsed_s: started.elapsed().as_secs_f64(),
        artifacts,
    };
    let path = layout.manifest();
    let mut manifest = RunManifest::load_or_default(&path);
    manifest.stages.insert(stage.to_string(), record);
    manifest.save(&path).map_err(|e| Failure { code: EXIT_DATA, error: e })
}

/// One observed dataset with its sampling profile.
#[derive(Debug, Clone)]
pub struct Source {
    pub seed: u64,
    pub observed: PathBuf,
    pub profile: PathBuf,
}

/// Observed datasets listed in the config, each paired with the
/// `<stem>.profile.csv` next to it, or else the synthetic samples.
pub fn sources(cfg: &PipelineConfig, layout: &Layout) -> Vec<Source> {
    if cfg.inputs.datasets.is_empty() {
        cfg.resample_seeds()
            .into_iter()
            .enumerate()
            .map(|(i, seed)| Source {
                seed,
                observed: layout.sample_dir(i).join("observed.csv"),
                profile: layout.sample_dir(i).join("profile.csv"),
            })
            .collect()
    } else {
        cfg.inputs
            .datasets
            .iter()
            .enumerate()
            .map(|(i, p)| Source { seed: i as u64, observed: p.clone(), profile: p.with_extension("profile.csv") })
            .collect()
    }
}

fn load_city(cfg: &PipelineConfig, layout: &Layout) -> CmdResult<CityModel> {
    let path = cfg.inputs.city.clone().unwrap_or_else(|| layout.city());
    require(&path, "city file")?;
    CityModel::load(&path).at(&path)
}

pub fn synth(cfg: &PipelineConfig, layout: &Layout) -> CmdResult<()> {
    let started = Instant::now();
    create_dir(&layout.root)?;
    let lab = Lab::generate(&cfg.gen_config())?;
    let mut written = vec![layout.city(), layout.truth(), layout.features(), layout.features().with_extension("json")];
    lab.city.save(&layout.city()).at(&layout.city())?;
    lab.truth.save(&layout.truth()).at(&layout.truth())?;
    lab.features.save(&layout.features()).at(&layout.features())?;
    let seeds = cfg.resample_seeds();
    for (i, &seed) in seeds.iter().enumerate() {
        let dir = layout.sample_dir(i);
        create_dir(&dir)?;
        let Resample { observed, profile, .. } = lab.resample(seed);
        let (obs_path, prof_path) = (dir.join("observed.csv"), dir.join("profile.csv"));
        observed.save(&obs_path).at(&obs_path)?;
        profile.save(&prof_path).at(&prof_path)?;
        written.extend([obs_path, prof_path]);
    }
    log::info!("synth: {} users, {} samples", lab.truth.len(), seeds.len());
    record_stage(layout, "synth", cfg, seeds, started, &written)
}

pub fn ingest(cfg: &PipelineConfig, layout: &Layout, pings: &[PathBuf]) -> CmdResult<()> {
    let started = Instant::now();
    let files = if pings.is_empty() { cfg.inputs.pings.clone() } else { pings.to_vec() };
    if files.is_empty() {
        return Err(Failure::config("no ping files given (pass paths or set inputs.pings)"));
    }
    let grid: CityGrid = match &cfg.inputs.city {
        Some(_) => load_city(cfg, layout)?.grid,
        None if layout.city().exists() => load_city(cfg, layout)?.grid,
        None => cfg.synth.grid().map_err(|e| Failure::from(PipelineError::from(e)))?,
    };
    let mut all = PingsByUser::new();
    for f in &files {
        require(f, "ping file")?;
        for (user, mut ps) in parse_pings(f).at(f)? {
            all.entry(user).or_default().append(&mut ps);
        }
    }
    for ps in all.values_mut() {
        ps.sort_by_key(|p| p.timestamp);
    }
    if all.is_empty() {
        log::warn!("no pings found; writing an empty dataset");
    }
    let (dataset, summary) = build_dataset(&all, &grid, cfg.spd).map_err(|e| Failure::from(PipelineError::from(e)))?;
    let dir = layout.ingest_dir();
    create_dir(&dir)?;
    let (data_path, summary_path) = (dir.join("staypoints.csv"), dir.join("summary.json"));
    dataset.save(&data_path).at(&data_path)?;
    write_json(&summary_path, &summary)?;
    log::info!("ingest: {} users in, {} kept, {} stay-points", summary.users_in, summary.users_out, summary.staypoints);
    record_stage(layout, "ingest", cfg, vec![], started, &[data_path, summary_path])
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CmdResult<()> {
    let write = || -> anyhow::Result<()> {
        let mut f = fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, value)?;
        f.write_all(b"\n")?;
        Ok(())
    };
    write().map_err(|e| Failure { code: EXIT_DATA, error: e.context(path.display().to_string()) })
}

fn load_source(src: &Source) -> CmdResult<(Dataset, SamplingProfile)> {
    require(&src.observed, "observed dataset")?;
    require(&src.profile, "sampling profile")?;
    let observed = Dataset::load(&src.observed).at(&src.observed)?;
    let profile = SamplingProfile::load(&src.profile).at(&src.profile)?;
    Ok((observed, profile))
}

pub fn estimate(cfg: &PipelineConfig, layout: &Layout, method: Option<Method>) -> CmdResult<()> {
    let started = Instant::now();
    let methods = match method {
        Some(Method::Learned) => return Err(Failure::config("--method takes oblivious or debiased")),
        Some(m) => vec![m],
        None => cfg.methods.clone(),
    };
    let city = load_city(cfg, layout)?;
    let truth = if layout.truth().exists() {
        Some(truth_stats(&Dataset::load(&layout.truth()).at(&layout.truth())?, &city.grid))
    } else {
        None
    };
    let srcs = sources(cfg, layout);
    let mut written = Vec::new();
    for (i, src) in srcs.iter().enumerate() {
        let (observed, profile) = load_source(src)?;
        create_dir(&layout.estimate_dir(i))?;
        for &m in &methods {
            let set = initial_estimates(&observed, &profile, &city.grid, m, truth.as_ref())?;
            for (a, table) in set {
                let path = layout.estimate(i, m.as_str(), a);
                table.save(&path).at(&path)?;
                written.push(path);
            }
        }
    }
    record_stage(layout, "estimate", cfg, srcs.iter().map(|s| s.seed).collect(), started, &written)
}

fn write_trace(path: &Path, trace: &[EpochStats<f64>]) -> CmdResult<()> {
    let write = || -> anyhow::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_loss"])?;
        for s in trace {
            let val = s.val_loss.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([s.epoch.to_string(), s.train_loss.to_string(), val])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| Failure { code: EXIT_DATA, error: e.context(path.display().to_string()) })
}

pub fn train(cfg: &PipelineConfig, layout: &Layout, variant: Option<Variant>, attribute: Option<Attribute>) -> CmdResult<()> {
    let started = Instant::now();
    let variants = variant.map_or_else(|| cfg.variants.clone(), |v| vec![v]);
    let attributes = attribute.map_or_else(|| Attribute::ALL.to_vec(), |a| vec![a]);
    let city = load_city(cfg, layout)?;
    let features = FeatureMatrix::<f64>::build(&city).map_err(|e| Failure::from(PipelineError::from(e)))?;
    let srcs = sources(cfg, layout);
    let mut written = Vec::new();
    for (i, src) in srcs.iter().enumerate() {
        require(&src.observed, "observed dataset")?;
        let observed = Dataset::load(&src.observed).at(&src.observed)?;
        for &v in &variants {
            for &a in &attributes {
                let label_path = layout.estimate(i, v.labels.as_str(), a);
                if !label_path.exists() {
                    return Err(Failure::data(format!(
                        "label table missing: {} (run `estimate --method {}` first)",
                        label_path.display(),
                        v.labels
                    )));
                }
                let labels = EstimateTable::<f64>::load(&label_path).at(&label_path)?;
                let tc = cfg.train_config(v, a, i);
                let run = train_learned(&features, &labels, &observed, v, &tc, |_, _, _| {})?;
                let model_path = layout.model(i, v, a);
                create_dir(model_path.parent().expect("model path has a parent"))?;
                run.file.save(&model_path).at(&model_path)?;
                let trace_path = layout.trace(i, v, a);
                write_trace(&trace_path, &run.trace)?;
                let pred_path = layout.estimate(i, &learned_label(v), a);
                run.predictions.save(&pred_path).at(&pred_path)?;
                log::info!("train: run {i} {v} {a}: {} epochs", run.file.epochs_run);
                written.extend([model_path, trace_path, pred_path]);
            }
        }
    }
    record_stage(layout, "train", cfg, srcs.iter().map(|s| s.seed).collect(), started, &written)
}

/// Every estimate table of one run, keyed by label then attribute.
fn load_estimates(dir: &Path) -> CmdResult<BTreeMap<String, BTreeMap<Attribute, EstimateTable<f64>>>> {
    let mut out: BTreeMap<String, BTreeMap<Attribute, EstimateTable<f64>>> = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Failure::data(format!("estimates missing: {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for path in paths.into_iter().filter(|p| p.extension().is_some_and(|e| e == "csv")) {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let Some((label, attr)) = stem.rsplit_once('_') else { continue };
        let Ok(attribute) = attr.parse::<Attribute>() else { continue };
        let table = EstimateTable::<f64>::load(&path).at(&path)?;
        out.entry(label.to_string()).or_default().insert(attribute, table);
    }
    if out.is_empty() {
        return Err(Failure::data(format!("no estimate tables in {}", dir.display())));
    }
    Ok(out)
}

pub fn evaluate_cmd(cfg: &PipelineConfig, layout: &Layout) -> CmdResult<()> {
    let started = Instant::now();
    let city = load_city(cfg, layout)?;
    require(&layout.truth(), "ground-truth dataset")?;
    let truth = Dataset::load(&layout.truth()).at(&layout.truth())?;
    let lab = Lab::from_parts(city, truth, &cfg.synth.ratio)?;
    let srcs = sources(cfg, layout);
    let mut runs = Vec::new();
    for (i, src) in srcs.iter().enumerate() {
        let (observed, profile) = load_source(src)?;
        let estimates = load_estimates(&layout.estimate_dir(i))?;
        let buckets = popest::eval::quantile_buckets(&lab.truth, &observed, lab.grid());
        let resample = Resample { seed: src.seed, observed, profile };
        runs.push(RunOutputs { resample, buckets, estimates, models: BTreeMap::new() });
    }
    let report = evaluate(&lab, &runs)?;
    let dir = layout.report_dir();
    report.save(&dir).at(&dir)?;
    let written: Vec<PathBuf> =
        ["report.json", "overall.csv", "buckets.csv", "variance.csv", "correlations.csv"].iter().map(|f| dir.join(f)).collect();
    record_stage(layout, "evaluate", cfg, srcs.iter().map(|s| s.seed).collect(), started, &written)
}

/// Runs every stage, then the acceptance checks. Returns whether all
/// selected checks passed.
pub fn repro(cfg: &PipelineConfig, layout: &Layout, criteria: &[u8]) -> CmdResult<bool> {
    if let Some(bad) = criteria.iter().find(|id| !CRITERIA.iter().any(|(c, _)| c == *id)) {
        return Err(Failure::config(format!("unknown criterion {bad} (expected 1 to {})", CRITERIA.len())));
    }
    synth(cfg, layout).map_err(|f| f.context("stage synth"))?;
    estimate(cfg, layout, None).map_err(|f| f.context("stage estimate"))?;
    train(cfg, layout, None, None).map_err(|f| f.context("stage train"))?;
    evaluate_cmd(cfg, layout).map_err(|f| f.context("stage evaluate"))?;

    let mut suite = Suite::new(cfg.seed);
    let mut failed = 0;
    let mut total = 0;
    for &(id, _) in CRITERIA.iter().filter(|(id, _)| criteria.is_empty() || criteria.contains(id)) {
        let outcome = suite.check(id).map_err(|e| Failure::from(e).context(format!("criterion {id}")))?;
        println!("{outcome}");
        total += 1;
        failed += usize::from(!outcome.passed);
    }
    println!("{} of {total} checks passed", total - failed);
    Ok(failed == 0)
}
