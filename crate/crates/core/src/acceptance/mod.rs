//! Acceptance checks run by `popest repro` and the `acceptance` test target.
//!
//! Each check builds what it needs from a seed, measures one property and
//! compares it with a tolerance pinned in [`tol`].

pub mod oracles;

use std::fmt;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::dataset::{Attribute, Dataset};
use crate::estimators::{monte_carlo_bias_variance, BiasVarianceReport, EstimatorId, Method};
use crate::eval::relative_error;
use crate::learner::{gradient_check, predict_all, LossMode, Mlp, Sample, TrainConfig, Variant};
use crate::pipeline::{initial_estimates, run_experiment, train_learned, Lab, PipelineConfig, PipelineError};
use crate::rng;
use crate::synth::{biased_sample, CategorySpec};

/// Pinned tolerances.
pub mod tol {
    use std::time::Duration;

    pub const MC_DRAWS: usize = 200;
    pub const SE_MULTIPLE: f64 = 3.0;
    pub const UNBIASED_CELL_FRACTION: f64 = 0.95;
    pub const OBLIVIOUS_MIN_REL_BIAS: f64 = 0.10;
    pub const MC_RUNTIME: Duration = Duration::from_secs(120);
    pub const DECOMPOSITION_REL: f64 = 0.05;
    pub const GAIN_RATIO: f64 = 0.6;
    pub const GAIN_MIN_SEEDS: usize = 4;
    pub const GAIN_RUNTIME_PER_SEED: Duration = Duration::from_secs(300);
    pub const SPREAD_RATIO: f64 = 0.5;
    pub const OVERFIT_EPOCHS: usize = 2500;
    pub const OVERFIT_RISE: f64 = 0.10;
    pub const GRADIENT_INSTANCES: usize = 10;
    pub const GRADIENT_PARAMS: usize = 300;
    pub const GRADIENT_REL_DEV: f64 = 1e-4;
}

pub const CRITERIA: [(u8, &str); 12] = [
    (1, "debiased COUNT unbiased"),
    (2, "debiased AVG unbiased"),
    (3, "MSE decomposition"),
    (4, "collapse under uniform sampling"),
    (5, "bias/variance trade-off pattern"),
    (6, "learned estimator gain"),
    (7, "flat error profile"),
    (8, "variance ordering"),
    (9, "overfitting curve"),
    (10, "gradient oracle"),
    (11, "determinism"),
    (12, "unit oracles"),
];

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{verdict}] {:>2} {}: {} ({:.1}s)", self.id, self.name, self.detail, self.elapsed.as_secs_f64())
    }
}

/// Lab for the unbiasedness, trade-off and determinism checks: the default
/// 25-cell city.
pub fn default_config(seed: u64) -> PipelineConfig {
    PipelineConfig { seed, ..PipelineConfig::default() }
}

/// Lab with a planted POI-category to duration relationship: two categories
/// with very different dwell times, a shared travel-distance profile so a
/// cell's visitors follow its POI mix, wide per-visit spread and low
/// sampling. 100 cells with about 5,000 residents.
pub fn planted_config(seed: u64) -> PipelineConfig {
    let mut cfg = default_config(seed);
    let s = &mut cfg.synth;
    s.rows = 10;
    s.cols = 10;
    s.population_mean = 50.0;
    s.population_spread = 15.0;
    let cat = |name: &str, duration: f64| CategorySpec {
        name: name.into(),
        popularity: 1.0,
        duration_mean_s: duration,
        duration_spread_s: duration,
        distance_mean_m: 4000.0,
        distance_spread_m: 2400.0,
    };
    s.categories = vec![cat("grocery", 1800.0), cat("school", 9000.0)];
    s.ratio.base = 0.02;
    cfg.methods = vec![Method::Oblivious];
    cfg.variants = vec![ow()];
    for a in Attribute::ALL {
        *cfg.train.get_mut(a) = TrainConfig { epochs: 10, batch_size: 4, learning_rate: 3e-4, ..TrainConfig::default() };
    }
    cfg
}

fn ow() -> Variant {
    Variant { labels: Method::Oblivious, mode: LossMode::Weighted }
}

/// Runs the checks in `ids` (all when empty) in order.
pub fn run(seed: u64, ids: &[u8]) -> Result<Vec<CheckOutcome>, PipelineError> {
    let mut suite = Suite::new(seed);
    CRITERIA
        .iter()
        .filter(|(id, _)| ids.is_empty() || ids.contains(id))
        .map(|&(id, _)| suite.check(id))
        .collect()
}

/// Check runner that shares expensive intermediate results between checks.
pub struct Suite {
    seed: u64,
    default_lab: Option<Lab>,
    planted: Option<Planted>,
}

struct Planted {
    lab: Lab,
    report: crate::eval::EvalReport,
    per_seed_time: Vec<Duration>,
}

impl Suite {
    pub fn new(seed: u64) -> Self {
        Self { seed, default_lab: None, planted: None }
    }

    pub fn check(&mut self, id: u8) -> Result<CheckOutcome, PipelineError> {
        let name = CRITERIA
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, n)| *n)
            .ok_or_else(|| PipelineError::Config(format!("unknown criterion {id}")))?;
        let t = Instant::now();
        let (passed, detail) = match id {
            1 => self.count_unbiased()?,
            2 => self.avg_unbiased()?,
            3 => self.decomposition()?,
            4 => self.collapse()?,
            5 => self.tradeoff()?,
            6 => self.gain()?,
            7 => self.flat_profile()?,
            8 => self.variance_ordering()?,
            9 => self.overfitting()?,
            10 => gradient_oracle(self.seed)?,
            11 => self.determinism()?,
            _ => oracles::summary(&oracles::run_all()),
        };
        Ok(CheckOutcome { id, name, passed, detail, elapsed: t.elapsed() })
    }

    fn default_lab(&mut self) -> Result<&Lab, PipelineError> {
        if self.default_lab.is_none() {
            self.default_lab = Some(Lab::generate(&default_config(self.seed).gen_config())?);
        }
        Ok(self.default_lab.as_ref().expect("set above"))
    }

    fn planted(&mut self) -> Result<&Planted, PipelineError> {
        if self.planted.is_none() {
            let cfg = planted_config(self.seed);
            cfg.validate()?;
            let lab = Lab::generate(&cfg.gen_config())?;
            let mut runs = Vec::new();
            let mut per_seed_time = Vec::new();
            for (i, s) in cfg.resample_seeds().into_iter().enumerate() {
                let t = Instant::now();
                runs.push(crate::pipeline::run_resample(&lab, &cfg, i, s)?);
                per_seed_time.push(t.elapsed());
            }
            let report = crate::pipeline::evaluate(&lab, &runs)?;
            self.planted = Some(Planted { lab, report, per_seed_time });
        }
        Ok(self.planted.as_ref().expect("set above"))
    }

    fn mc(&mut self, estimator: EstimatorId) -> Result<(BiasVarianceReport<f64>, Duration), PipelineError> {
        let seeds = mc_seeds(self.seed);
        let lab = self.default_lab()?;
        let t = Instant::now();
        let r = monte_carlo_bias_variance(&lab.truth, lab.grid(), &lab.ratios, estimator, &seeds)?;
        Ok((r, t.elapsed()))
    }

    fn count_unbiased(&mut self) -> Result<(bool, String), PipelineError> {
        let (deb, t) = self.mc(EstimatorId::DebiasedCount)?;
        let (frac, n) = within_se_fraction(&deb);
        let (obl, _) = self.mc(EstimatorId::ObliviousCount)?;
        let lab = self.default_lab()?;
        let (top, bottom) = extreme_cells(&lab.ratios, &lab.truth_statistic(Attribute::Visits));
        let rel = |c: usize| match (obl.cells[c].bias, obl.cells[c].truth) {
            (Some(b), Some(t)) if t > 0.0 => (b / t).abs(),
            _ => 0.0,
        };
        let (rt, rb) = (rel(top), rel(bottom));
        let passed = frac >= tol::UNBIASED_CELL_FRACTION
            && rt > tol::OBLIVIOUS_MIN_REL_BIAS
            && rb > tol::OBLIVIOUS_MIN_REL_BIAS
            && t < tol::MC_RUNTIME;
        let detail = format!(
            "{:.1}% of {n} cells within {}SE (need {:.0}%); oblivious |bias|/c top cell {rt:.3}, bottom cell {rb:.3} (need > {}); {:.1}s",
            100.0 * frac,
            tol::SE_MULTIPLE,
            100.0 * tol::UNBIASED_CELL_FRACTION,
            tol::OBLIVIOUS_MIN_REL_BIAS,
            t.as_secs_f64()
        );
        Ok((passed, detail))
    }

    fn avg_unbiased(&mut self) -> Result<(bool, String), PipelineError> {
        let (deb, t) = self.mc(EstimatorId::DebiasedAvg(Attribute::Duration))?;
        let (frac, n) = within_se_fraction(&deb);
        let passed = frac >= tol::UNBIASED_CELL_FRACTION && t < tol::MC_RUNTIME;
        let detail = format!(
            "{:.1}% of {n} cells within {}SE (need {:.0}%); {:.1}s",
            100.0 * frac,
            tol::SE_MULTIPLE,
            100.0 * tol::UNBIASED_CELL_FRACTION,
            t.as_secs_f64()
        );
        Ok((passed, detail))
    }

    fn decomposition(&mut self) -> Result<(bool, String), PipelineError> {
        let ids = [
            EstimatorId::ObliviousCount,
            EstimatorId::DebiasedCount,
            EstimatorId::ObliviousAvg(Attribute::Duration),
            EstimatorId::DebiasedAvg(Attribute::Duration),
        ];
        let mut worst = 0.0f64;
        let mut cells = 0;
        for id in ids {
            let (r, _) = self.mc(id)?;
            for c in &r.cells {
                if let (Some(b), Some(v), Some(mse)) = (c.bias, c.variance, c.mse) {
                    cells += 1;
                    let gap = (mse - (b * b + v)).abs();
                    let rel = if mse > 0.0 { gap / mse } else if gap == 0.0 { 0.0 } else { f64::INFINITY };
                    worst = worst.max(rel);
                }
            }
        }
        let passed = worst <= tol::DECOMPOSITION_REL;
        Ok((passed, format!("max |MSE - (bias^2 + var)| / MSE = {worst:.4} over {cells} cell-estimator pairs (need <= {})", tol::DECOMPOSITION_REL)))
    }

    fn collapse(&mut self) -> Result<(bool, String), PipelineError> {
        let seed = self.seed;
        let lab = self.default_lab()?;
        let cells = lab.grid().cell_count();
        let mut compared = 0;
        let mut mismatches = 0;
        for (i, (ratio, multiple)) in [(1.0, 1u64), (0.5, 2), (0.2, 5), (0.1, 10)].into_iter().enumerate() {
            let truth = trim_homes(&lab.truth, cells, multiple);
            let (obs, profile) = biased_sample(&truth, &vec![ratio; cells], rng::derive_seed(seed, "collapse", i as u64));
            let deb = crate::estimators::debiased_count::<f64>(&obs, &profile, lab.grid())?;
            let obl = crate::estimators::oblivious_count::<f64>(&obs, profile.total_true(), lab.grid())?;
            for (d, o) in deb.values().iter().zip(obl.values()) {
                compared += 1;
                if d.map(f64::to_bits) != o.map(f64::to_bits) {
                    mismatches += 1;
                }
            }
        }
        Ok((mismatches == 0, format!("{mismatches} bitwise mismatches over {compared} cells at s in {{1, 0.5, 0.2, 0.1}}")))
    }

    fn tradeoff(&mut self) -> Result<(bool, String), PipelineError> {
        let cfg = default_config(self.seed);
        let seeds = cfg.resample_seeds();
        let lab = self.default_lab()?;
        let mut err = [[0.0f64; 3]; 2];
        for &s in &seeds {
            let r = lab.resample(s);
            for (m, method) in [Method::Oblivious, Method::Debiased].into_iter().enumerate() {
                let est = initial_estimates(&r.observed, &r.profile, lab.grid(), method, Some(&lab.truth_table))?;
                for (a, attr) in Attribute::ALL.into_iter().enumerate() {
                    let e = relative_error(&lab.truth_statistic(attr), &est[&attr].values())?;
                    err[m][a] += e.overall.unwrap_or(f64::NAN) / seeds.len() as f64;
                }
            }
        }
        let [obl, deb] = err;
        let idx = |a: Attribute| Attribute::ALL.iter().position(|x| *x == a).expect("listed");
        let (v, d, x) = (idx(Attribute::Visits), idx(Attribute::Duration), idx(Attribute::Distance));
        let passed = deb[d] >= obl[d] && deb[x] >= obl[x] && deb[v] < obl[v];
        let detail = format!(
            "mean rel. error oblivious/debiased: visits {:.4}/{:.4}, duration {:.4}/{:.4}, distance {:.4}/{:.4}",
            obl[v], deb[v], obl[d], deb[d], obl[x], deb[x]
        );
        Ok((passed, detail))
    }

    fn gain(&mut self) -> Result<(bool, String), PipelineError> {
        let p = self.planted()?;
        let (obl, ow) = duration_results(&p.report)?;
        let ratios: Vec<f64> = obl
            .runs
            .iter()
            .zip(&ow.runs)
            .map(|(o, l)| match (o.overall, l.overall) {
                (Some(o), Some(l)) if o > 0.0 => l / o,
                _ => f64::INFINITY,
            })
            .collect();
        let good = ratios.iter().filter(|r| **r <= tol::GAIN_RATIO).count();
        let slowest = p.per_seed_time.iter().max().copied().unwrap_or_default();
        let mean = |r: &crate::eval::MethodResult| r.overall.map_or(f64::NAN, |s| s.mean);
        let passed = good >= tol::GAIN_MIN_SEEDS && slowest < tol::GAIN_RUNTIME_PER_SEED;
        let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
        let detail = format!(
            "OW/oblivious duration error per seed [{}], {good}/{} <= {} (need {}); means {:.4}/{:.4}; slowest seed {:.1}s",
            shown.join(", "),
            ratios.len(),
            tol::GAIN_RATIO,
            tol::GAIN_MIN_SEEDS,
            mean(ow),
            mean(obl),
            slowest.as_secs_f64()
        );
        Ok((passed, detail))
    }

    fn flat_profile(&mut self) -> Result<(bool, String), PipelineError> {
        let p = self.planted()?;
        let (obl, ow) = duration_results(&p.report)?;
        let (so, sl) = (obl.bucket_spread(), ow.bucket_spread());
        let passed = matches!((so, sl), (Some(o), Some(l)) if l <= tol::SPREAD_RATIO * o);
        let f = |v: Option<f64>| v.map_or("absent".to_string(), |v| format!("{v:.4}"));
        Ok((passed, format!("bucket spread OW {} vs oblivious {} (need ratio <= {})", f(sl), f(so), tol::SPREAD_RATIO)))
    }

    fn variance_ordering(&mut self) -> Result<(bool, String), PipelineError> {
        let p = self.planted()?;
        let v = &p.report.variance;
        let (vis, dur, dist) = (v.get(Attribute::Visits), v.get(Attribute::Duration), v.get(Attribute::Distance));
        let passed = matches!((vis, dur, dist), (Some(a), Some(b), Some(c)) if a < b && a < c);
        let f = |v: Option<f64>| v.map_or("absent".to_string(), |v| format!("{v:.4}"));
        Ok((passed, format!("variance visits {}, duration {}, distance {}", f(vis), f(dur), f(dist))))
    }

    fn overfitting(&mut self) -> Result<(bool, String), PipelineError> {
        let seed = self.seed;
        let cfg = planted_config(seed);
        let lab = &self.planted()?.lab;
        let r = lab.resample(cfg.resample_seeds()[0]);
        let labels = initial_estimates(&r.observed, &r.profile, lab.grid(), Method::Oblivious, None)?;
        let truth = lab.truth_statistic(Attribute::Duration);
        let inputs = lab.features.inputs();
        let tc = TrainConfig {
            epochs: tol::OVERFIT_EPOCHS,
            seed: rng::derive_seed(seed, "overfit", 0),
            ..TrainConfig::default()
        };
        let mut curve = Vec::with_capacity(tol::OVERFIT_EPOCHS);
        let mut failure = None;
        train_learned(&lab.features, &labels[&Attribute::Duration], &r.observed, ow(), &tc, |_, m, t| {
            let err = predict_all(m, &inputs, t, Attribute::Duration)
                .map_err(PipelineError::from)
                .and_then(|p| Ok(relative_error(&truth, &p.values())?));
            match err {
                Ok(e) => curve.push(e.overall.unwrap_or(f64::NAN)),
                Err(e) => failure = Some(e),
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        let (best_idx, best) = curve
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
        let last = *curve.last().unwrap_or(&f64::NAN);
        let passed = best_idx + 1 < curve.len() && last >= (1.0 + tol::OVERFIT_RISE) * best;
        let detail = format!(
            "test error min {best:.4} at epoch {} of {}, final {last:.4} ({:+.1}%, need >= +{:.0}%)",
            best_idx + 1,
            curve.len(),
            100.0 * (last / best - 1.0),
            100.0 * tol::OVERFIT_RISE
        );
        Ok((passed, detail))
    }

    fn determinism(&mut self) -> Result<(bool, String), PipelineError> {
        let cfg = default_config(self.seed);
        let a = serde_json::to_vec(&run_experiment(&cfg)?.2)?;
        let b = serde_json::to_vec(&run_experiment(&cfg)?.2)?;
        Ok((a == b, format!("two report serializations of {} and {} bytes, identical: {}", a.len(), b.len(), a == b)))
    }
}

/// Seeds of the Monte Carlo draws.
pub fn mc_seeds(seed: u64) -> Vec<u64> {
    (0..tol::MC_DRAWS as u64).map(|i| rng::derive_seed(seed, "mc", i)).collect()
}

/// Fraction of cells whose mean estimate lies within the pinned number of
/// standard errors of the truth, over cells with a defined bias. A cell with
/// zero variance counts only when its bias is exactly zero.
pub fn within_se_fraction(r: &BiasVarianceReport<f64>) -> (f64, usize) {
    let mut n = 0;
    let mut ok = 0;
    for c in &r.cells {
        if let (Some(b), Some(se)) = (c.bias, c.std_error()) {
            n += 1;
            if b.abs() <= tol::SE_MULTIPLE * se {
                ok += 1;
            }
        }
    }
    (if n == 0 { 0.0 } else { ok as f64 / n as f64 }, n)
}

/// Cells with the highest and lowest sampling ratio among cells with
/// positive truth.
fn extreme_cells(ratios: &[f64], truth: &[Option<f64>]) -> (usize, usize) {
    let eligible: Vec<usize> = (0..ratios.len()).filter(|&c| truth[c].is_some_and(|t| t > 0.0)).collect();
    let by = |a: &usize, b: &usize| ratios[*a].total_cmp(&ratios[*b]).then(a.cmp(b));
    let top = eligible.iter().copied().max_by(by).unwrap_or(0);
    let bottom = eligible.iter().copied().min_by(by).unwrap_or(0);
    (top, bottom)
}

/// Drops users so every home cell holds a multiple of `m` residents.
fn trim_homes(truth: &Dataset, cells: usize, m: u64) -> Dataset {
    let counts = truth.home_counts(cells);
    let mut kept = vec![0u64; cells];
    let users = truth
        .users
        .iter()
        .filter(|u| {
            let keep = counts.get(u.home).is_some_and(|n| kept[u.home] < n - n % m);
            if keep {
                kept[u.home] += 1;
            }
            keep
        })
        .cloned()
        .collect();
    Dataset::new(users)
}

fn duration_results(
    report: &crate::eval::EvalReport,
) -> Result<(&crate::eval::MethodResult, &crate::eval::MethodResult), PipelineError> {
    let obl = report.find(Method::Oblivious.as_str(), Attribute::Duration);
    let ow = report.find(&crate::pipeline::learned_label(ow()), Attribute::Duration);
    match (obl, ow) {
        (Some(o), Some(l)) => Ok((o, l)),
        _ => Err(PipelineError::Config("planted report lacks oblivious or learned-OW duration results".into())),
    }
}

/// Backprop against central differences on seeded reference-size models.
pub fn gradient_oracle(seed: u64) -> Result<(bool, String), PipelineError> {
    use rand::Rng;
    let dim = 8;
    let mut worst = 0.0f64;
    for i in 0..tol::GRADIENT_INSTANCES as u64 {
        let s = rng::derive_seed(seed, "gradient-oracle", i);
        let model = Mlp::<f64>::new(s, dim)?;
        let mut r = rng::stream(s, "batch", 0);
        let batch: Vec<Sample<f64>> = (0..16)
            .map(|cell| Sample {
                cell,
                features: (0..dim).map(|_| r.random_range(-1.5..1.5)).collect(),
                label: r.random_range(-2.0..2.0),
                weight: r.random_range(0.1..1.0),
            })
            .collect();
        let mode = if i % 2 == 0 { LossMode::Weighted } else { LossMode::Unweighted };
        let g = gradient_check(&model, &batch, mode, tol::GRADIENT_PARAMS, s)?;
        worst = worst.max(g.max_rel_dev);
    }
    let passed = worst < tol::GRADIENT_REL_DEV;
    Ok((passed, format!("max relative deviation {worst:.2e} over {} instances (need < {:.0e})", tol::GRADIENT_INSTANCES, tol::GRADIENT_REL_DEV)))
}
