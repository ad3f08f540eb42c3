//! Evaluation: relative error, breakdown by stay-point sampling ratio,
//! per-user variance analysis, demographic correlations and run aggregation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Attribute, Dataset};
use crate::geo::CityGrid;
use crate::num::Real;
use crate::synth::{CityModel, SamplingProfile};

pub const BUCKETS: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cell sets are not aligned: {0} truth cells vs {1} estimates")]
    Alignment(usize, usize),
    #[error("correlation is undefined: {0}")]
    UndefinedCorrelation(&'static str),
    #[error("no runs to aggregate")]
    NoRuns,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeError<T = f64> {
    /// Mean over included cells; absent when every cell was excluded.
    pub overall: Option<T>,
    pub per_cell: Vec<Option<T>>,
    /// Cells with zero or absent truth, or an absent estimate.
    pub excluded: usize,
}

pub fn relative_error<T: Real>(truth: &[Option<T>], estimates: &[Option<T>]) -> Result<RelativeError<T>, EvalError> {
    if truth.len() != estimates.len() {
        return Err(EvalError::Alignment(truth.len(), estimates.len()));
    }
    let per_cell: Vec<Option<T>> = truth
        .iter()
        .zip(estimates)
        .map(|(x, e)| match (x, e) {
            (Some(x), Some(e)) if *x != T::zero() => Some((*x - *e).abs() / x.abs()),
            _ => None,
        })
        .collect();
    let included: Vec<T> = per_cell.iter().flatten().copied().collect();
    let overall = (!included.is_empty()).then(|| included.iter().copied().sum::<T>() / T::from_count(included.len()));
    Ok(RelativeError { overall, excluded: per_cell.len() - included.len(), per_cell })
}

/// Stay-point sampling ratio per cell and its bucket (0..5). Cells without
/// true stay-points have neither.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileBuckets {
    pub ratios: Vec<Option<f64>>,
    pub buckets: Vec<Option<usize>>,
    /// The four cut points separating the buckets.
    pub cuts: Vec<f64>,
}

impl QuantileBuckets {
    /// Nearest-rank cut points at `j/5` (j = 1..4) of the sorted ratios; a
    /// cell's bucket is the number of cut points strictly below its ratio,
    /// so ties fall into the lower bucket.
    pub fn from_ratios(ratios: Vec<Option<f64>>) -> Self {
        let mut sorted: Vec<f64> = ratios.iter().flatten().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let cuts: Vec<f64> = if n == 0 {
            Vec::new()
        } else {
            (1..BUCKETS).map(|j| sorted[(j * n).div_ceil(BUCKETS).max(1) - 1]).collect()
        };
        let buckets = ratios.iter().map(|r| r.map(|r| cuts.iter().filter(|c| **c < r).count())).collect();
        Self { ratios, buckets, cuts }
    }

    pub fn sizes(&self) -> [usize; BUCKETS] {
        let mut s = [0; BUCKETS];
        self.buckets.iter().flatten().for_each(|b| s[*b] += 1);
        s
    }
}

pub fn quantile_buckets(truth: &Dataset, observed: &Dataset, grid: &CityGrid) -> QuantileBuckets {
    let cells = grid.cell_count();
    let big = truth.visit_counts(cells);
    let small = observed.visit_counts(cells);
    let ratios = big.iter().zip(&small).map(|(l_true, l_obs)| (*l_true > 0).then(|| *l_obs as f64 / *l_true as f64)).collect();
    QuantileBuckets::from_ratios(ratios)
}

/// Mean per-cell error within each bucket; absent for empty buckets.
pub fn per_bucket_error<T: Real>(per_cell: &[Option<T>], buckets: &QuantileBuckets) -> Result<[Option<T>; BUCKETS], EvalError> {
    if per_cell.len() != buckets.buckets.len() {
        return Err(EvalError::Alignment(buckets.buckets.len(), per_cell.len()));
    }
    let mut sums = [T::zero(); BUCKETS];
    let mut counts = [0usize; BUCKETS];
    for (e, b) in per_cell.iter().zip(&buckets.buckets) {
        if let (Some(e), Some(b)) = (e, b) {
            sums[*b] += *e;
            counts[*b] += 1;
        }
    }
    Ok(std::array::from_fn(|i| (counts[i] > 0).then(|| sums[i] / T::from_count(counts[i]))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub attribute: Attribute,
    /// Mean over eligible cells; absent when no cell has two contributing users.
    pub variance: Option<f64>,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceTable {
    pub rows: Vec<VarianceRow>,
}

impl VarianceTable {
    pub fn get(&self, attribute: Attribute) -> Option<f64> {
        self.rows.iter().find(|r| r.attribute == attribute).and_then(|r| r.variance)
    }
}

/// Population variance of values min-max normalized to [0, 1]; 0 when all
/// values are equal.
pub fn normalized_variance<T: Real>(values: &[T]) -> T {
    let min = values.iter().copied().fold(T::infinity(), T::min);
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    let range = max - min;
    if values.is_empty() || range <= T::zero() {
        return T::zero();
    }
    let norm: Vec<T> = values.iter().map(|v| (*v - min) / range).collect();
    let n = T::from_count(norm.len());
    let mean = norm.iter().copied().sum::<T>() / n;
    norm.iter().map(|v| (*v - mean).powi(2)).sum::<T>() / n
}

/// For every cell, each visiting user's visit count, mean duration and mean
/// distance there; values are normalized within the cell, their variance
/// taken, and the cell variances averaged. Cells with fewer than two
/// contributing users are skipped.
pub fn variance_analysis(data: &Dataset, grid: &CityGrid) -> VarianceTable {
    let cells = grid.cell_count();
    let mut per_cell: Vec<BTreeMap<Attribute, Vec<f64>>> = vec![BTreeMap::new(); cells];
    for user in &data.users {
        let mut acc: BTreeMap<usize, (f64, f64, f64, f64)> = BTreeMap::new();
        for p in &user.staypoints {
            let Some(c) = p.cell.filter(|c| *c < cells) else { continue };
            let e = acc.entry(c).or_default();
            e.0 += 1.0;
            e.1 += p.duration_s as f64;
            if let Some(d) = p.dist_from_prev_m {
                e.2 += d;
                e.3 += 1.0;
            }
        }
        for (c, (visits, dur, dist, dist_n)) in acc {
            let m = &mut per_cell[c];
            m.entry(Attribute::Visits).or_default().push(visits);
            m.entry(Attribute::Duration).or_default().push(dur / visits);
            if dist_n > 0.0 {
                m.entry(Attribute::Distance).or_default().push(dist / dist_n);
            }
        }
    }
    let rows = Attribute::ALL
        .into_iter()
        .map(|attribute| {
            let vars: Vec<f64> = per_cell
                .iter()
                .filter_map(|m| m.get(&attribute).filter(|v| v.len() >= 2).map(|v| normalized_variance(v)))
                .collect();
            let variance = (!vars.is_empty()).then(|| vars.iter().sum::<f64>() / vars.len() as f64);
            VarianceRow { attribute, variance, cells: vars.len() }
        })
        .collect();
    VarianceTable { rows }
}

pub fn pearson<T: Real>(x: &[T], y: &[T]) -> Result<T, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Alignment(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(EvalError::UndefinedCorrelation("fewer than two points"));
    }
    let n = T::from_count(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (*a - mx, *b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(EvalError::UndefinedCorrelation("constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).max(-T::one()).min(T::one()))
}

pub const DEMOGRAPHICS: [&str; 4] = ["adult_fraction", "senior_fraction", "child_fraction", "median_income"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub feature: String,
    /// Absent when the correlation is undefined.
    pub r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub rows: Vec<CorrelationRow>,
}

/// Pearson r of each demographic against the user sampling ratio, over
/// cells with residents.
pub fn correlation_table(city: &CityModel, profile: &SamplingProfile) -> CorrelationTable {
    let keep: Vec<usize> = (0..city.cells.len().min(profile.cells.len()))
        .filter(|&i| profile.cells[i].true_users > 0)
        .collect();
    let s: Vec<f64> = keep.iter().map(|&i| profile.cells[i].ratio()).collect();
    let rows = DEMOGRAPHICS
        .iter()
        .map(|name| {
            let x: Vec<f64> = keep
                .iter()
                .map(|&i| {
                    let c = &city.cells[i];
                    match *name {
                        "adult_fraction" => c.age_fractions.adult,
                        "senior_fraction" => c.age_fractions.senior,
                        "child_fraction" => c.age_fractions.child,
                        _ => c.median_income,
                    }
                })
                .collect();
            CorrelationRow { feature: name.to_string(), r: pearson(&x, &s).ok() }
        })
        .collect();
    CorrelationTable { rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub sd: f64,
    pub runs: usize,
}

pub fn aggregate_runs<T: Real>(values: &[T]) -> Result<RunStats, EvalError> {
    if values.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let k = values.len() as f64;
    let v: Vec<f64> = values.iter().map(|x| x.as_f64()).collect();
    let mean = v.iter().sum::<f64>() / k;
    let sd = if v.len() == 1 { 0.0 } else { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() };
    Ok(RunStats { mean, sd, runs: v.len() })
}

/// Errors of one estimator on one resample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub overall: Option<f64>,
    pub buckets: [Option<f64>; BUCKETS],
    pub excluded: usize,
}

impl RunResult {
    pub fn evaluate(
        seed: u64,
        truth: &[Option<f64>],
        estimates: &[Option<f64>],
        buckets: &QuantileBuckets,
    ) -> Result<Self, EvalError> {
        let err = relative_error(truth, estimates)?;
        Ok(Self { seed, overall: err.overall, buckets: per_bucket_error(&err.per_cell, buckets)?, excluded: err.excluded })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    /// `oblivious`, `debiased` or `learned-<variant>`.
    pub method: String,
    pub attribute: Attribute,
    pub overall: Option<RunStats>,
    pub buckets: [Option<RunStats>; BUCKETS],
    pub excluded: RunStats,
    pub runs: Vec<RunResult>,
}

impl MethodResult {
    pub fn aggregate(method: String, attribute: Attribute, runs: Vec<RunResult>) -> Result<Self, EvalError> {
        let overall: Vec<f64> = runs.iter().filter_map(|r| r.overall).collect();
        let excluded: Vec<f64> = runs.iter().map(|r| r.excluded as f64).collect();
        let buckets = std::array::from_fn(|b| {
            let v: Vec<f64> = runs.iter().filter_map(|r| r.buckets[b]).collect();
            aggregate_runs(&v).ok()
        });
        Ok(Self {
            method,
            attribute,
            overall: aggregate_runs(&overall).ok(),
            buckets,
            excluded: aggregate_runs(&excluded)?,
            runs,
        })
    }

    /// Max minus min of the mean bucket errors.
    pub fn bucket_spread(&self) -> Option<f64> {
        let means: Vec<f64> = self.buckets.iter().flatten().map(|s| s.mean).collect();
        let max = means.iter().copied().reduce(f64::max)?;
        let min = means.iter().copied().reduce(f64::min)?;
        Some(max - min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seeds: Vec<u64>,
    pub zero_truth: String,
    pub quantiles: String,
    pub variance: String,
    pub normalization: String,
}

impl ReportMetadata {
    pub fn new(seeds: Vec<u64>) -> Self {
        Self {
            seeds,
            zero_truth: "cells with zero or absent truth are excluded and counted".into(),
            quantiles: "nearest-rank cut points at 1/5..4/5 of cells with true stay-points; ties to the lower bucket".into(),
            variance: "population variance within each cell".into(),
            normalization: "per-cell min-max over users".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStats {
    pub feature: String,
    pub r: Option<RunStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub results: Vec<MethodResult>,
    pub variance: VarianceTable,
    pub correlations: Vec<CorrelationStats>,
}

impl EvalReport {
    pub fn new(
        metadata: ReportMetadata,
        results: Vec<MethodResult>,
        variance: VarianceTable,
        correlations: &[CorrelationTable],
    ) -> Self {
        let correlations = DEMOGRAPHICS
            .iter()
            .map(|f| {
                let v: Vec<f64> = correlations
                    .iter()
                    .filter_map(|t| t.rows.iter().find(|r| r.feature == *f).and_then(|r| r.r))
                    .collect();
                CorrelationStats { feature: f.to_string(), r: aggregate_runs(&v).ok() }
            })
            .collect();
        Self { metadata, results, variance, correlations }
    }

    pub fn find(&self, method: &str, attribute: Attribute) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method && r.attribute == attribute)
    }

    pub fn write_overall_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "attribute", "mean", "sd", "runs", "excluded_mean"])?;
        for r in &self.results {
            let (mean, sd, runs) = stats_fields(r.overall);
            out.write_record([&r.method, r.attribute.as_str(), &mean, &sd, &runs, &r.excluded.mean.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_buckets_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "attribute", "bucket", "mean", "sd", "runs"])?;
        for r in &self.results {
            for (b, s) in r.buckets.iter().enumerate() {
                let (mean, sd, runs) = stats_fields(*s);
                out.write_record([&r.method, r.attribute.as_str(), &b.to_string(), &mean, &sd, &runs])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_variance_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["attribute", "variance", "cells"])?;
        for r in &self.variance.rows {
            let v = r.variance.map(|v| v.to_string()).unwrap_or_default();
            out.write_record([r.attribute.as_str(), &v, &r.cells.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_correlations_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["feature", "r_mean", "r_sd", "runs"])?;
        for c in &self.correlations {
            let (mean, sd, runs) = stats_fields(c.r);
            out.write_record([&c.feature, &mean, &sd, &runs])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `report.json` and the four flat tables into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("report.json"))?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.flush()?;
        let open = |name: &str| -> Result<_, EvalError> { Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?)) };
        self.write_overall_csv(open("overall.csv")?)?;
        self.write_buckets_csv(open("buckets.csv")?)?;
        self.write_variance_csv(open("variance.csv")?)?;
        self.write_correlations_csv(open("correlations.csv")?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }
}

fn stats_fields(s: Option<RunStats>) -> (String, String, String) {
    match s {
        Some(s) => (s.mean.to_string(), s.sd.to_string(), s.runs.to_string()),
        None => (String::new(), String::new(), "0".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{StayPoint, UserSequence};
    use crate::geo::GeoPoint;
    use proptest::prelude::*;

    #[test]
    fn relative_error_examples() {
        let t = [Some(2.0), Some(4.0)];
        assert_eq!(relative_error(&t, &t).unwrap().overall, Some(0.0));
        let e = relative_error(&t, &[Some(3.0), Some(2.0)]).unwrap();
        assert_eq!(e.overall, Some(0.5));
        assert_eq!(e.per_cell, vec![Some(0.5), Some(0.5)]);
        let z = relative_error(&[Some(0.0), Some(4.0)], &[Some(1.0), Some(4.0)]).unwrap();
        assert_eq!((z.overall, z.excluded), (Some(0.0), 1));
        let a = relative_error(&[None, Some(4.0), Some(1.0)], &[Some(1.0), None, Some(2.0)]).unwrap();
        assert_eq!((a.overall, a.excluded), (Some(1.0), 2));
        assert_eq!(relative_error::<f64>(&[Some(0.0)], &[Some(1.0)]).unwrap().overall, None);
        assert!(matches!(relative_error(&t, &[Some(1.0)]), Err(EvalError::Alignment(2, 1))));
    }

    /// Bucket of the value at 0-based sorted position `rank` among `n`
    /// distinct values.
    fn oracle_bucket(rank: usize, n: usize) -> usize {
        5 * rank / n
    }

    #[test]
    fn buckets_match_sort_oracle() {
        let ratios = [0.31, 0.02, 0.9, 0.45, 0.11, 0.66, 0.05, 0.27, 0.83, 0.5];
        let q = QuantileBuckets::from_ratios(ratios.iter().map(|r| Some(*r)).collect());
        let mut sorted = ratios.to_vec();
        sorted.sort_by(f64::total_cmp);
        for (i, r) in ratios.iter().enumerate() {
            let rank = sorted.iter().position(|s| s == r).unwrap();
            assert_eq!(q.buckets[i], Some(oracle_bucket(rank, 10)));
        }
        assert_eq!(q.sizes(), [2, 2, 2, 2, 2]);
        assert_eq!(q.cuts, vec![0.05, 0.27, 0.45, 0.66]);
    }

    #[test]
    fn bucket_edge_cases() {
        let q = QuantileBuckets::from_ratios(vec![Some(0.2); 7]);
        assert_eq!(q.sizes(), [7, 0, 0, 0, 0]);
        let q = QuantileBuckets::from_ratios(vec![None, Some(0.5)]);
        assert_eq!(q.buckets, vec![None, Some(0)]);
        let q = QuantileBuckets::from_ratios(vec![None, None]);
        assert!(q.cuts.is_empty() && q.sizes() == [0; 5]);
    }

    fn sp(duration: i64, dist: Option<f64>, cell: usize) -> StayPoint {
        let mut p = StayPoint::new(GeoPoint { lat: 0.0, lon: 0.0 }, 0, duration);
        p.dist_from_prev_m = dist;
        p.cell = Some(cell);
        p
    }

    fn user(id: &str, staypoints: Vec<StayPoint>) -> UserSequence {
        UserSequence { user_id: id.into(), staypoints, home: 0 }
    }

    fn grid(cells: usize) -> CityGrid {
        CityGrid::new(GeoPoint { lat: 0.0, lon: 0.0 }, 100.0, 1, cells).unwrap()
    }

    #[test]
    fn identity_sample_has_unit_ratios() {
        let d = Dataset::new(vec![
            user("a", vec![sp(60, None, 0), sp(60, Some(1.0), 1)]),
            user("b", vec![sp(60, None, 1)]),
        ]);
        let q = quantile_buckets(&d, &d, &grid(3));
        assert_eq!(q.ratios, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(q.buckets, vec![Some(0), Some(0), None]);
    }

    #[test]
    fn bucket_error_examples() {
        let q = QuantileBuckets::from_ratios((0..10).map(|i| Some(i as f64)).collect());
        let flat = vec![Some(0.3); 10];
        assert_eq!(per_bucket_error(&flat, &q).unwrap(), [Some(0.3); 5]);
        let rising: Vec<Option<f64>> = (0..10).map(|i| Some(i as f64 / 10.0)).collect();
        let b = per_bucket_error(&rising, &q).unwrap();
        let expected = [0.05, 0.25, 0.45, 0.65, 0.85];
        for (got, want) in b.iter().zip(expected) {
            assert!((got.unwrap() - want).abs() < 1e-12);
        }
        let q = QuantileBuckets::from_ratios(vec![Some(1.0); 3]);
        assert_eq!(per_bucket_error(&[Some(0.1), Some(0.2), Some(0.3)], &q).unwrap()[1], None);
        assert!(per_bucket_error(&[Some(0.1)], &q).is_err());
    }

    #[test]
    fn bucket_means_recombine_to_overall() {
        let truth: Vec<Option<f64>> = (1..=20).map(|i| Some(i as f64)).collect();
        let est: Vec<Option<f64>> = (1..=20).map(|i| Some(i as f64 * (1.0 + 0.01 * (i % 7) as f64))).collect();
        let q = QuantileBuckets::from_ratios((0..20).map(|i| Some(((i * 7) % 20) as f64)).collect());
        let err = relative_error(&truth, &est).unwrap();
        let b = per_bucket_error(&err.per_cell, &q).unwrap();
        let sizes = q.sizes();
        let recombined: f64 = (0..5).map(|i| b[i].unwrap() * sizes[i] as f64).sum::<f64>() / 20.0;
        assert!((recombined - err.overall.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn variance_examples() {
        assert_eq!(normalized_variance(&[0.0, 10.0]), 0.25);
        assert_eq!(normalized_variance(&[3.0, 3.0, 3.0]), 0.0);
        // cell 0: durations {0, 10} -> 0.25; visits {1, 1} -> 0; cell 1 single user excluded
        let d = Dataset::new(vec![
            user("a", vec![sp(0, None, 0), sp(5, Some(4.0), 1)]),
            user("b", vec![sp(10, Some(2.0), 0)]),
        ]);
        let t = variance_analysis(&d, &grid(2));
        assert_eq!(t.get(Attribute::Duration), Some(0.25));
        assert_eq!(t.get(Attribute::Visits), Some(0.0));
        assert_eq!(t.rows[0].cells, 1);
        // only user b has a defined distance in cell 0
        assert_eq!(t.get(Attribute::Distance), None);
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0f64, 2.0, 3.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        // closed form: sxy = 3, sxx = 2, syy = 14/3, r = 3 / sqrt(28/3)
        let r = pearson(&x, &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 3.0 / (28.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r - 0.9819).abs() < 1e-4);
        assert!(matches!(pearson(&x, &[2.0, 2.0, 2.0]), Err(EvalError::UndefinedCorrelation(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&x, &[1.0]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate_runs(&[0.7]).unwrap();
        assert_eq!((one.mean, one.sd), (0.7, 0.0));
        let two = aggregate_runs(&[0.2, 0.4]).unwrap();
        assert!((two.mean - 0.3).abs() < 1e-15);
        assert!((two.sd - 0.02f64.sqrt()).abs() < 1e-15);
        assert!((two.sd - 0.1414).abs() < 1e-4);
        assert_eq!(aggregate_runs(&[0.5, 0.5, 0.5]).unwrap().sd, 0.0);
        assert!(matches!(aggregate_runs::<f64>(&[]), Err(EvalError::NoRuns)));
    }

    #[test]
    fn report_csv_layout() {
        let q = QuantileBuckets::from_ratios(vec![Some(0.1), Some(0.2)]);
        let run = RunResult::evaluate(1, &[Some(2.0), Some(4.0)], &[Some(3.0), Some(2.0)], &q).unwrap();
        let m = MethodResult::aggregate("oblivious".into(), Attribute::Visits, vec![run]).unwrap();
        let report = EvalReport::new(
            ReportMetadata::new(vec![1]),
            vec![m],
            VarianceTable { rows: vec![VarianceRow { attribute: Attribute::Visits, variance: Some(0.25), cells: 3 }] },
            &[],
        );
        let mut buf = Vec::new();
        report.write_overall_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "method,attribute,mean,sd,runs,excluded_mean\noblivious,visits,0.5,0,1,0\n");
        let mut buf = Vec::new();
        report.write_variance_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "attribute,variance,cells\nvisits,0.25,3\n");
        let mut buf = Vec::new();
        report.write_buckets_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("oblivious,visits,0,0.5,0,1\n"));
        assert!(text.contains("oblivious,visits,4,,,0\n"));
        assert_eq!(report.results[0].bucket_spread(), Some(0.0));
    }

    proptest! {
        #[test]
        fn relative_error_is_scale_invariant(
            pairs in prop::collection::vec((0.1f64..100.0, 0.0f64..200.0), 1..30),
            c in 0.01f64..100.0,
        ) {
            let t: Vec<Option<f64>> = pairs.iter().map(|p| Some(p.0)).collect();
            let e: Vec<Option<f64>> = pairs.iter().map(|p| Some(p.1)).collect();
            let ts: Vec<Option<f64>> = t.iter().map(|v| v.map(|v| v * c)).collect();
            let es: Vec<Option<f64>> = e.iter().map(|v| v.map(|v| v * c)).collect();
            let a = relative_error(&t, &e).unwrap().overall.unwrap();
            let b = relative_error(&ts, &es).unwrap().overall.unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn buckets_partition_cells(ratios in prop::collection::vec(prop::option::of(0.0f64..1.0), 0..60)) {
            let q = QuantileBuckets::from_ratios(ratios.clone());
            let included = ratios.iter().flatten().count();
            prop_assert_eq!(q.sizes().iter().sum::<usize>(), included);
            for (r, b) in ratios.iter().zip(&q.buckets) {
                prop_assert_eq!(r.is_some(), b.is_some());
            }
            let mut distinct: Vec<f64> = ratios.iter().flatten().copied().collect();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            if distinct.len() == included && included > 0 {
                let mut sorted = distinct.clone();
                sorted.sort_by(f64::total_cmp);
                for (r, b) in ratios.iter().zip(&q.buckets) {
                    if let (Some(r), Some(b)) = (r, b) {
                        let rank = sorted.iter().position(|s| s == r).unwrap();
                        prop_assert_eq!(*b, oracle_bucket(rank, included));
                    }
                }
            }
        }

        #[test]
        fn pearson_of_affine_maps(x in prop::collection::vec(-100.0f64..100.0, 3..20), a in 0.1f64..10.0, b in -50.0f64..50.0, neg in any::<bool>()) {
            let spread = x.iter().copied().fold(f64::NEG_INFINITY, f64::max) - x.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let a = if neg { -a } else { a };
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let r = pearson(&x, &y).unwrap();
            prop_assert!((r - a.signum()).abs() < 1e-9);
        }

        #[test]
        fn normalized_variance_is_bounded(v in prop::collection::vec(-1e3f64..1e3, 1..50)) {
            let s = normalized_variance(&v);
            prop_assert!((0.0..=0.25 + 1e-12).contains(&s));
        }
    }
}
