//! Ground-truth statistics, oblivious and debiased estimators, and Monte
//! Carlo bias/variance diagnostics.
//!
//! Debiased estimators weight each observed user by `N_η / n_η` for their
//! home cell `η`. Contributions are accumulated per (cell, home) pair and
//! summed in ascending home order, so results are reproducible bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Attribute, Dataset};
use crate::geo::{CellId, CityGrid};
use crate::num::Real;
use crate::synth::{biased_sample, SamplingProfile};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("estimator undefined: {0}")]
    Undefined(String),
    #[error("sampling profile has no row for home cell {0}")]
    MissingHome(CellId),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("at least two resamples are required, got {0}")]
    TooFewDraws(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Row { line: u64, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Agg {
    Count,
    Avg,
}

/// `(AGG, attribute, cell)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub agg: Agg,
    pub attribute: Attribute,
    pub cell: CellId,
}

impl Query {
    pub fn new(agg: Agg, attribute: Attribute, cell: CellId) -> Result<Self, EstimatorError> {
        match (agg, attribute) {
            (Agg::Count, Attribute::Visits) | (Agg::Avg, Attribute::Duration | Attribute::Distance) => {
                Ok(Self { agg, attribute, cell })
            }
            _ => Err(EstimatorError::InvalidQuery(format!("{agg:?} cannot aggregate {attribute}"))),
        }
    }

    /// True answer from a truth table.
    pub fn answer<T: Real>(&self, truth: &TruthTable<T>) -> Option<T> {
        truth.cells.get(self.cell).and_then(|c| c.statistic(self.attribute))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Oblivious,
    Debiased,
    Learned,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Oblivious => "oblivious",
            Method::Debiased => "debiased",
            Method::Learned => "learned",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "oblivious" | "o" => Ok(Method::Oblivious),
            "debiased" | "d" => Ok(Method::Debiased),
            "learned" => Ok(Method::Learned),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// No observed stay-points support a non-absent estimate.
    LowSupport,
    /// Output was clamped at zero.
    Clamped,
}

impl Flag {
    fn as_str(self) -> &'static str {
        match self {
            Flag::LowSupport => "low_support",
            Flag::Clamped => "clamped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEstimate<T = f64> {
    pub value: Option<T>,
    /// Observed stay-points that contributed.
    pub support: u64,
    pub flags: Vec<Flag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateTable<T = f64> {
    pub method: Method,
    pub attribute: Attribute,
    pub cells: Vec<CellEstimate<T>>,
    /// Home cells whose users were ignored because `n_η = 0`.
    pub skipped_home_cells: Vec<CellId>,
    /// Per-home weight `N_η / n_η` used by debiased estimators.
    pub weights: Vec<Option<T>>,
}

impl<T: Real> EstimateTable<T> {
    pub fn values(&self) -> Vec<Option<T>> {
        self.cells.iter().map(|c| c.value).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EstimatorError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["cell_id", "method", "attribute", "estimate", "support_count", "flags"])?;
        for (id, c) in self.cells.iter().enumerate() {
            let flags: Vec<&str> = c.flags.iter().map(|f| f.as_str()).collect();
            out.write_record([
                id.to_string(),
                self.method.to_string(),
                self.attribute.to_string(),
                c.value.map(|v| v.to_string()).unwrap_or_default(),
                c.support.to_string(),
                flags.join(";"),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, EstimatorError> {
        let mut reader = csv::Reader::from_reader(r);
        let mut cells = Vec::new();
        let mut meta: Option<(Method, Attribute)> = None;
        for (idx, rec) in reader.records().enumerate() {
            let line = idx as u64 + 2;
            let rec = rec?;
            let bad = |m: String| EstimatorError::Row { line, msg: m };
            let field = |i: usize| rec.get(i).unwrap_or("");
            let id: usize = field(0).parse().map_err(|_| bad("invalid cell_id".into()))?;
            if id != cells.len() {
                return Err(bad("cell ids must be consecutive from 0".into()));
            }
            let method: Method = field(1).parse().map_err(bad)?;
            let attribute: Attribute = field(2).parse().map_err(bad)?;
            if *meta.get_or_insert((method, attribute)) != (method, attribute) {
                return Err(bad("mixed method/attribute in one table".into()));
            }
            let value = match field(3) {
                "" => None,
                s => Some(T::lit(s.parse::<f64>().map_err(|_| bad(format!("invalid estimate `{s}`")))?)),
            };
            let support = field(4).parse().map_err(|_| bad("invalid support_count".into()))?;
            let flags = field(5)
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| match s {
                    "low_support" => Ok(Flag::LowSupport),
                    "clamped" => Ok(Flag::Clamped),
                    other => Err(bad(format!("unknown flag `{other}`"))),
                })
                .collect::<Result<_, _>>()?;
            cells.push(CellEstimate { value, support, flags });
        }
        let (method, attribute) = meta.ok_or_else(|| EstimatorError::Row { line: 1, msg: "empty table".into() })?;
        Ok(Self { method, attribute, cells, skipped_home_cells: vec![], weights: vec![] })
    }

    pub fn save(&self, path: &Path) -> Result<(), EstimatorError> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, EstimatorError> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Per-cell true counts and attribute sums.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TruthCell<T = f64> {
    /// `c_μ`: stay-points located in the cell.
    pub count: u64,
    pub duration_sum: T,
    pub distance_sum: T,
    /// Stay-points with a defined distance (first stay-points excluded).
    pub distance_count: u64,
}

impl<T: Real> TruthCell<T> {
    /// Number of stay-points carrying a value for `attr`.
    pub fn support(&self, attr: Attribute) -> u64 {
        match attr {
            Attribute::Visits | Attribute::Duration => self.count,
            Attribute::Distance => self.distance_count,
        }
    }

    pub fn sum(&self, attr: Attribute) -> T {
        match attr {
            Attribute::Visits => T::from_u64(self.count).unwrap(),
            Attribute::Duration => self.duration_sum,
            Attribute::Distance => self.distance_sum,
        }
    }

    /// `c_μ` for visits, `t_μ / support` for averages; `None` when undefined.
    pub fn statistic(&self, attr: Attribute) -> Option<T> {
        match attr {
            Attribute::Visits => Some(self.sum(attr)),
            _ => {
                let n = self.support(attr);
                (n > 0).then(|| self.sum(attr) / T::from_u64(n).unwrap())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTable<T = f64> {
    pub cells: Vec<TruthCell<T>>,
}

impl<T: Real> TruthTable<T> {
    pub fn statistic(&self, attr: Attribute) -> Vec<Option<T>> {
        self.cells.iter().map(|c| c.statistic(attr)).collect()
    }
}

pub fn truth_stats<T: Real>(data: &Dataset, grid: &CityGrid) -> TruthTable<T> {
    let mut cells = vec![TruthCell::<T>::default(); grid.cell_count()];
    for p in data.users.iter().flat_map(|u| &u.staypoints) {
        let Some(c) = p.cell.and_then(|c| cells.get_mut(c)) else { continue };
        c.count += 1;
        c.duration_sum += T::lit(p.duration_s as f64);
        if let Some(d) = p.dist_from_prev_m {
            c.distance_sum += T::lit(d);
            c.distance_count += 1;
        }
    }
    TruthTable { cells }
}

/// Per-cell sums and supports of `attr` over observed stay-points.
fn observed_sums<T: Real>(obs: &Dataset, cells: usize, attr: Attribute) -> (Vec<T>, Vec<u64>) {
    let mut sums = vec![T::zero(); cells];
    let mut support = vec![0u64; cells];
    for p in obs.users.iter().flat_map(|u| &u.staypoints) {
        if let (Some(c), Some(v)) = (p.cell.filter(|c| *c < cells), attr.value(p)) {
            sums[c] += T::lit(v);
            support[c] += 1;
        }
    }
    (sums, support)
}

fn table<T: Real>(method: Method, attribute: Attribute, cells: Vec<CellEstimate<T>>) -> EstimateTable<T> {
    EstimateTable { method, attribute, cells, skipped_home_cells: vec![], weights: vec![] }
}

/// Plain observed mean per cell.
pub fn oblivious_avg<T: Real>(obs: &Dataset, grid: &CityGrid, attr: Attribute) -> EstimateTable<T> {
    let (sums, support) = observed_sums::<T>(obs, grid.cell_count(), attr);
    let cells = sums
        .into_iter()
        .zip(support)
        .map(|(s, n)| CellEstimate {
            value: (n > 0).then(|| s / T::from_u64(n).unwrap()),
            support: n,
            flags: vec![],
        })
        .collect();
    table(Method::Oblivious, attr, cells)
}

/// Observed visits scaled by `N / n`.
pub fn oblivious_count<T: Real>(
    obs: &Dataset,
    total_population: u64,
    grid: &CityGrid,
) -> Result<EstimateTable<T>, EstimatorError> {
    if obs.is_empty() {
        return Err(EstimatorError::Undefined("no observed users (n = 0)".into()));
    }
    let scale = T::from_u64(total_population).unwrap() / T::from_count(obs.len());
    let (_, support) = observed_sums::<T>(obs, grid.cell_count(), Attribute::Visits);
    let cells = support
        .into_iter()
        .map(|n| CellEstimate { value: Some(scale * T::from_u64(n).unwrap()), support: n, flags: vec![] })
        .collect();
    Ok(table(Method::Oblivious, Attribute::Visits, cells))
}

struct Weighted<T> {
    /// `(cell, home) -> (sum, support)`.
    by_pair: BTreeMap<(CellId, CellId), (T, u64)>,
    weights: Vec<Option<T>>,
    skipped: Vec<CellId>,
}

fn weighted_sums<T: Real>(
    obs: &Dataset,
    profile: &SamplingProfile,
    cells: usize,
    attr: Attribute,
) -> Result<Weighted<T>, EstimatorError> {
    let weights: Vec<Option<T>> = profile
        .cells
        .iter()
        .map(|r| {
            (r.observed_users > 0)
                .then(|| T::from_u64(r.true_users).unwrap() / T::from_u64(r.observed_users).unwrap())
        })
        .collect();
    let mut by_pair: BTreeMap<(CellId, CellId), (T, u64)> = BTreeMap::new();
    let mut skipped = Vec::new();
    for u in &obs.users {
        match weights.get(u.home) {
            None => return Err(EstimatorError::MissingHome(u.home)),
            Some(None) => {
                skipped.push(u.home);
                continue;
            }
            Some(Some(_)) => {}
        }
        for p in &u.staypoints {
            if let (Some(c), Some(v)) = (p.cell.filter(|c| *c < cells), attr.value(p)) {
                let e = by_pair.entry((c, u.home)).or_insert((T::zero(), 0));
                e.0 += T::lit(v);
                e.1 += 1;
            }
        }
    }
    skipped.sort_unstable();
    skipped.dedup();
    Ok(Weighted { by_pair, weights, skipped })
}

impl<T: Real> Weighted<T> {
    /// `(Σ_η w_η·sum_η, Σ_η w_η·support_η, raw support)` per cell.
    fn totals(&self, cells: usize) -> Vec<(T, T, u64)> {
        let mut out = vec![(T::zero(), T::zero(), 0u64); cells];
        for (&(cell, home), &(sum, n)) in &self.by_pair {
            let w = self.weights[home].expect("only weighted homes are recorded");
            let o = &mut out[cell];
            o.0 += w * sum;
            o.1 += w * T::from_u64(n).unwrap();
            o.2 += n;
        }
        out
    }
}

/// `ĉ_μ = Σ_η (N_η / n_η) Σ_{u: h(u)=η} |u_μ|`.
pub fn debiased_count<T: Real>(
    obs: &Dataset,
    profile: &SamplingProfile,
    grid: &CityGrid,
) -> Result<EstimateTable<T>, EstimatorError> {
    let w = weighted_sums::<T>(obs, profile, grid.cell_count(), Attribute::Visits)?;
    let cells = w
        .totals(grid.cell_count())
        .into_iter()
        .map(|(_, count, n)| CellEstimate { value: Some(count), support: n, flags: vec![] })
        .collect();
    Ok(EstimateTable {
        method: Method::Debiased,
        attribute: Attribute::Visits,
        cells,
        skipped_home_cells: w.skipped,
        weights: w.weights,
    })
}

/// Denominator for the debiased average.
#[derive(Debug, Clone, Copy)]
pub enum Denominator<'a, T> {
    /// Known true support (`c_μ` for duration, defined-distance count for distance).
    Known(&'a TruthTable<T>),
    /// Debiased estimate of the support. Not an unbiased estimator of the average.
    Estimated,
}

/// `t̂_μ / c_μ` with `t̂_μ = Σ_η (N_η / n_η) Σ_{u: h(u)=η} Σ_{p ∈ u_μ} p[α]`.
pub fn debiased_avg<T: Real>(
    obs: &Dataset,
    profile: &SamplingProfile,
    grid: &CityGrid,
    attr: Attribute,
    denominator: Denominator<'_, T>,
) -> Result<EstimateTable<T>, EstimatorError> {
    if attr == Attribute::Visits {
        return Err(EstimatorError::InvalidQuery("AVG requires duration or distance".into()));
    }
    let w = weighted_sums::<T>(obs, profile, grid.cell_count(), attr)?;
    let cells = w
        .totals(grid.cell_count())
        .into_iter()
        .enumerate()
        .map(|(cell, (total, est_support, n))| {
            let denom = match denominator {
                Denominator::Known(truth) => {
                    truth.cells.get(cell).map(|c| T::from_u64(c.support(attr)).unwrap()).unwrap_or_else(T::zero)
                }
                Denominator::Estimated => est_support,
            };
            if denom <= T::zero() {
                return CellEstimate { value: None, support: n, flags: vec![] };
            }
            let flags = if n == 0 { vec![Flag::LowSupport] } else { vec![] };
            CellEstimate { value: Some(total / denom), support: n, flags }
        })
        .collect();
    Ok(EstimateTable {
        method: Method::Debiased,
        attribute: attr,
        cells,
        skipped_home_cells: w.skipped,
        weights: w.weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorId {
    ObliviousCount,
    DebiasedCount,
    ObliviousAvg(Attribute),
    DebiasedAvg(Attribute),
    DebiasedAvgRatio(Attribute),
}

impl EstimatorId {
    pub fn attribute(self) -> Attribute {
        match self {
            EstimatorId::ObliviousCount | EstimatorId::DebiasedCount => Attribute::Visits,
            EstimatorId::ObliviousAvg(a) | EstimatorId::DebiasedAvg(a) | EstimatorId::DebiasedAvgRatio(a) => a,
        }
    }

    pub fn label(self) -> String {
        match self {
            EstimatorId::ObliviousCount => "oblivious_count".into(),
            EstimatorId::DebiasedCount => "debiased_count".into(),
            EstimatorId::ObliviousAvg(a) => format!("oblivious_avg_{a}"),
            EstimatorId::DebiasedAvg(a) => format!("debiased_avg_{a}"),
            EstimatorId::DebiasedAvgRatio(a) => format!("debiased_ratio_avg_{a}"),
        }
    }

    pub fn run<T: Real>(
        self,
        obs: &Dataset,
        profile: &SamplingProfile,
        grid: &CityGrid,
        truth: &TruthTable<T>,
    ) -> Result<EstimateTable<T>, EstimatorError> {
        match self {
            EstimatorId::ObliviousCount => oblivious_count(obs, profile.total_true(), grid),
            EstimatorId::DebiasedCount => debiased_count(obs, profile, grid),
            EstimatorId::ObliviousAvg(a) => Ok(oblivious_avg(obs, grid, a)),
            EstimatorId::DebiasedAvg(a) => debiased_avg(obs, profile, grid, a, Denominator::Known(truth)),
            EstimatorId::DebiasedAvgRatio(a) => debiased_avg(obs, profile, grid, a, Denominator::Estimated),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellBiasVariance<T = f64> {
    pub truth: Option<T>,
    pub mean: Option<T>,
    pub bias: Option<T>,
    /// Sample variance over the draws (`R - 1` denominator).
    pub variance: Option<T>,
    pub mse: Option<T>,
    pub draws: usize,
    pub excluded_draws: usize,
}

impl<T: Real> CellBiasVariance<T> {
    /// Standard error of the mean estimate.
    pub fn std_error(&self) -> Option<T> {
        self.variance.map(|v| (v / T::from_count(self.draws)).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceReport<T = f64> {
    pub estimator: String,
    pub cells: Vec<CellBiasVariance<T>>,
}

impl<T: Real> BiasVarianceReport<T> {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EstimatorError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["cell_id", "estimator", "bias", "variance", "mse", "excluded_draws"])?;
        let s = |v: Option<T>| v.map(|v| v.to_string()).unwrap_or_default();
        for (id, c) in self.cells.iter().enumerate() {
            out.write_record([
                id.to_string(),
                self.estimator.clone(),
                s(c.bias),
                s(c.variance),
                s(c.mse),
                c.excluded_draws.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Bias, variance and MSE of per-cell estimates against `target`. Draws run
/// in parallel; reduction is in draw order.
pub fn monte_carlo<T, F>(
    label: &str,
    target: &[Option<T>],
    seeds: &[u64],
    draw: F,
) -> Result<BiasVarianceReport<T>, EstimatorError>
where
    T: Real,
    F: Fn(u64) -> Result<Vec<Option<T>>, EstimatorError> + Sync,
{
    if seeds.len() < 2 {
        return Err(EstimatorError::TooFewDraws(seeds.len()));
    }
    let estimates: Vec<Option<Vec<Option<T>>>> = seeds
        .par_iter()
        .map(|&s| match draw(s) {
            Ok(v) => Ok(Some(v)),
            Err(EstimatorError::Undefined(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_, _>>()?;

    let cells = target
        .iter()
        .enumerate()
        .map(|(cell, &truth)| {
            let values: Vec<T> = estimates.iter().filter_map(|e| e.as_ref().and_then(|v| v[cell])).collect();
            let draws = values.len();
            let excluded_draws = seeds.len() - draws;
            if draws == 0 {
                return CellBiasVariance { truth, mean: None, bias: None, variance: None, mse: None, draws, excluded_draws };
            }
            let n = T::from_count(draws);
            let mean = values.iter().copied().sum::<T>() / n;
            let variance = (draws > 1).then(|| {
                values.iter().map(|v| (*v - mean).powi(2)).sum::<T>() / T::from_count(draws - 1)
            });
            let bias = truth.map(|t| mean - t);
            let mse = truth.map(|t| values.iter().map(|v| (*v - t).powi(2)).sum::<T>() / n);
            CellBiasVariance { truth, mean: Some(mean), bias, variance, mse, draws, excluded_draws }
        })
        .collect();
    Ok(BiasVarianceReport { estimator: label.to_owned(), cells })
}

/// Monte Carlo diagnostics for one of the built-in estimators over biased
/// resamples of `truth` at the target `ratios`.
pub fn monte_carlo_bias_variance<T: Real>(
    truth: &Dataset,
    grid: &CityGrid,
    ratios: &[f64],
    estimator: EstimatorId,
    seeds: &[u64],
) -> Result<BiasVarianceReport<T>, EstimatorError> {
    let table = truth_stats::<T>(truth, grid);
    let target = table.statistic(estimator.attribute());
    monte_carlo(&estimator.label(), &target, seeds, |seed| {
        let (obs, profile) = biased_sample(truth, ratios, seed);
        Ok(estimator.run(&obs, &profile, grid, &table)?.values())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{StayPoint, UserSequence};
    use crate::geo::GeoPoint;
    use crate::synth::ProfileRow;

    // 1 x 3 grid of 100 m cells near the equator; cell c spans x in [100c, 100c + 100).
    fn grid() -> CityGrid {
        CityGrid::new(GeoPoint { lat: 0.0, lon: 0.0 }, 100.0, 1, 3).unwrap()
    }

    fn sp(cell: CellId, duration: i64, dist: Option<f64>) -> StayPoint {
        let mut p = StayPoint::new(GeoPoint { lat: 0.0, lon: 0.0 }, 0, duration);
        p.cell = Some(cell);
        p.dist_from_prev_m = dist;
        p
    }

    fn user(id: &str, home: CellId, points: Vec<StayPoint>) -> UserSequence {
        UserSequence { user_id: id.into(), staypoints: points, home }
    }

    fn profile(rows: &[(u64, u64)]) -> SamplingProfile {
        SamplingProfile {
            cells: rows.iter().map(|&(n_true, n_obs)| ProfileRow { true_users: n_true, observed_users: n_obs }).collect(),
        }
    }

    #[test]
    fn query_pairs() {
        assert!(Query::new(Agg::Count, Attribute::Visits, 0).is_ok());
        assert!(Query::new(Agg::Avg, Attribute::Distance, 0).is_ok());
        assert!(Query::new(Agg::Count, Attribute::Duration, 0).is_err());
        assert!(Query::new(Agg::Avg, Attribute::Visits, 0).is_err());
    }

    #[test]
    fn truth_examples() {
        let ds = Dataset::new(vec![
            user("a", 1, vec![sp(1, 100, None), sp(1, 300, Some(40.0))]),
            user("b", 1, vec![sp(0, 50, None)]),
        ]);
        let t = truth_stats::<f64>(&ds, &grid());
        assert_eq!(t.cells[2].count, 0);
        assert_eq!(t.cells[2].statistic(Attribute::Duration), None);
        assert_eq!(t.cells[1].count, 2);
        assert_eq!(t.cells[1].statistic(Attribute::Duration), Some(200.0));
        // first stay-point distances are excluded from both sum and support
        assert_eq!(t.cells[1].statistic(Attribute::Distance), Some(40.0));
        assert_eq!(t.cells[0].statistic(Attribute::Distance), None);
        let q = Query::new(Agg::Count, Attribute::Visits, 1).unwrap();
        assert_eq!(q.answer(&t), Some(2.0));
    }

    #[test]
    fn oblivious_avg_examples() {
        let ds = Dataset::new(vec![
            user("a", 0, vec![sp(0, 200, None), sp(1, 100, None), sp(1, 200, Some(1.0))]),
            user("b", 0, vec![sp(1, 600, None)]),
        ]);
        let t = oblivious_avg::<f64>(&ds, &grid(), Attribute::Duration);
        assert_eq!(t.cells[0].value, Some(200.0));
        assert_eq!(t.cells[1].value, Some(300.0));
        assert_eq!(t.cells[2].value, None);
        assert_eq!(t.cells[1].support, 3);
    }

    #[test]
    fn oblivious_count_examples() {
        let visits: Vec<StayPoint> = (0..7).map(|_| sp(0, 10, None)).collect();
        let mut users = vec![user("u00", 0, visits)];
        users.extend((1..10).map(|i| user(&format!("u{i:02}"), 0, vec![])));
        let ds = Dataset::new(users);
        let t = oblivious_count::<f64>(&ds, 100, &grid()).unwrap();
        assert_eq!(t.cells[0].value, Some(70.0));
        assert_eq!(t.cells[1].value, Some(0.0));
        let same = oblivious_count::<f64>(&ds, 10, &grid()).unwrap();
        assert_eq!(same.cells[0].value, Some(7.0));
        assert!(matches!(oblivious_count::<f64>(&Dataset::default(), 10, &grid()), Err(EstimatorError::Undefined(_))));
    }

    #[test]
    fn debiased_count_hand_example() {
        // η1 = cell 0 (N=100, n=10) users make 3 visits to cell 2;
        // η2 = cell 1 (N=50, n=25) users make 4 visits to cell 2.
        let mut users = vec![
            user("a", 0, vec![sp(2, 10, None), sp(2, 10, None)]),
            user("b", 0, vec![sp(2, 10, None)]),
            user("c", 1, vec![sp(2, 10, None), sp(2, 10, None), sp(2, 10, None), sp(2, 10, None)]),
        ];
        users.extend((0..8).map(|i| user(&format!("x{i}"), 0, vec![])));
        users.extend((0..24).map(|i| user(&format!("y{i:02}"), 1, vec![])));
        let ds = Dataset::new(users);
        let p = profile(&[(100, 10), (50, 25), (0, 0)]);
        let t = debiased_count::<f64>(&ds, &p, &grid()).unwrap();
        assert_eq!(t.cells[2].value, Some(10.0 * 3.0 + 2.0 * 4.0));
        assert_eq!(t.cells[2].value, Some(38.0));
        assert_eq!(t.weights, vec![Some(10.0), Some(2.0), None]);
    }

    #[test]
    fn debiased_count_collapses_to_oblivious() {
        let ds = Dataset::new(vec![
            user("a", 0, vec![sp(2, 10, None), sp(1, 10, None)]),
            user("b", 1, vec![sp(1, 10, None)]),
            user("c", 2, vec![sp(0, 10, None), sp(2, 10, None)]),
        ]);
        let p = profile(&[(4, 1), (4, 1), (4, 1)]);
        let deb = debiased_count::<f64>(&ds, &p, &grid()).unwrap();
        let obl = oblivious_count::<f64>(&ds, 12, &grid()).unwrap();
        assert_eq!(deb.values(), obl.values());
    }

    #[test]
    fn debiased_count_empty_and_missing() {
        let p = profile(&[(10, 1), (10, 0), (10, 2)]);
        let empty = debiased_count::<f64>(&Dataset::default(), &p, &grid()).unwrap();
        assert!(empty.values().iter().all(|v| *v == Some(0.0)));

        let ds = Dataset::new(vec![user("a", 1, vec![sp(0, 1, None)]), user("b", 0, vec![sp(0, 1, None)])]);
        let t = debiased_count::<f64>(&ds, &p, &grid()).unwrap();
        assert_eq!(t.skipped_home_cells, vec![1]);
        assert_eq!(t.cells[0].value, Some(10.0));

        let stray = Dataset::new(vec![user("a", 7, vec![sp(0, 1, None)])]);
        assert!(matches!(debiased_count::<f64>(&stray, &p, &grid()), Err(EstimatorError::MissingHome(7))));
    }

    #[test]
    fn debiased_avg_hand_example() {
        // η = cell 0 (N=10, n=2) contributes durations {100, 200} to cell 1; c_1 = 15.
        let ds = Dataset::new(vec![
            user("a", 0, vec![sp(1, 100, None)]),
            user("b", 0, vec![sp(1, 200, None)]),
        ]);
        let p = profile(&[(10, 2), (0, 0), (0, 0)]);
        let mut truth = TruthTable::<f64> { cells: vec![TruthCell::default(); 3] };
        truth.cells[1].count = 15;
        truth.cells[2].count = 4;
        let t = debiased_avg(&ds, &p, &grid(), Attribute::Duration, Denominator::Known(&truth)).unwrap();
        assert_eq!(t.cells[1].value, Some(1500.0 / 15.0));
        assert_eq!(t.cells[1].value, Some(100.0));
        // c_μ = 0 → absent; no support but c_μ > 0 → 0 with a warning flag
        assert_eq!(t.cells[0].value, None);
        assert_eq!(t.cells[2].value, Some(0.0));
        assert_eq!(t.cells[2].flags, vec![Flag::LowSupport]);

        let ratio = debiased_avg(&ds, &p, &grid(), Attribute::Duration, Denominator::<f64>::Estimated).unwrap();
        assert_eq!(ratio.cells[1].value, Some(150.0));
        assert_eq!(ratio.cells[2].value, None);
    }

    #[test]
    fn debiased_avg_full_sample_is_truth() {
        let ds = Dataset::new(vec![
            user("a", 0, vec![sp(1, 100, None), sp(2, 50, Some(10.0))]),
            user("b", 1, vec![sp(1, 200, None), sp(1, 20, Some(30.0))]),
        ]);
        let p = profile(&[(1, 1), (1, 1), (0, 0)]);
        let truth = truth_stats::<f64>(&ds, &grid());
        for attr in [Attribute::Duration, Attribute::Distance] {
            let t = debiased_avg(&ds, &p, &grid(), attr, Denominator::Known(&truth)).unwrap();
            assert_eq!(t.values(), truth.statistic(attr));
        }
    }

    #[test]
    fn estimate_csv_roundtrip() {
        let t = EstimateTable::<f64> {
            method: Method::Debiased,
            attribute: Attribute::Duration,
            cells: vec![
                CellEstimate { value: Some(12.5), support: 3, flags: vec![] },
                CellEstimate { value: None, support: 0, flags: vec![] },
                CellEstimate { value: Some(0.0), support: 0, flags: vec![Flag::LowSupport] },
            ],
            skipped_home_cells: vec![],
            weights: vec![],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "cell_id,method,attribute,estimate,support_count,flags\n\
             0,debiased,duration,12.5,3,\n1,debiased,duration,,0,\n2,debiased,duration,0,0,low_support\n"
        );
        assert_eq!(EstimateTable::<f64>::read_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn monte_carlo_degenerate_cases() {
        let target = vec![Some(3.0), Some(5.0), None];
        // oracle estimator
        let r = monte_carlo("oracle", &target, &[1, 2, 3], |_| Ok(target.clone())).unwrap();
        for c in &r.cells[..2] {
            assert_eq!((c.bias, c.variance, c.mse), (Some(0.0), Some(0.0), Some(0.0)));
        }
        assert_eq!(r.cells[2].bias, None);
        // identical seeds → zero variance
        let r = monte_carlo("seeded", &target, &[9, 9], |s| Ok(vec![Some(s as f64); 3])).unwrap();
        assert!(r.cells.iter().all(|c| c.variance == Some(0.0)));
        // undefined draws are excluded and counted
        let r = monte_carlo("flaky", &target, &[1, 2, 3, 4], |s| {
            if s % 2 == 0 { Err(EstimatorError::Undefined("n = 0".into())) } else { Ok(vec![Some(1.0), None, None]) }
        })
        .unwrap();
        assert_eq!((r.cells[0].draws, r.cells[0].excluded_draws), (2, 2));
        assert_eq!(r.cells[1].excluded_draws, 4);
        assert!(matches!(monte_carlo("x", &target, &[1], |_| Ok(target.clone())), Err(EstimatorError::TooFewDraws(1))));
    }

    #[test]
    fn decomposition_identity_with_sample_variance() {
        let target = vec![Some(10.0)];
        let r = monte_carlo("lin", &target, &(0..200).collect::<Vec<u64>>(), |s| Ok(vec![Some(8.0 + (s % 7) as f64)]))
            .unwrap();
        let c = &r.cells[0];
        let (mse, bias, var) = (c.mse.unwrap(), c.bias.unwrap(), c.variance.unwrap());
        assert!(((mse - (bias * bias + var)) / mse).abs() <= 0.05);
    }
}
