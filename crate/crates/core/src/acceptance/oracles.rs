//! Hand-computed fixtures, runnable outside the test harness.

use crate::dataset::{Attribute, Dataset, StayPoint, UserSequence};
use crate::estimators::{
    debiased_avg, debiased_count, monte_carlo_bias_variance, oblivious_avg, oblivious_count, truth_stats, Denominator,
    EstimatorId, TruthCell, TruthTable,
};
use crate::eval::{
    aggregate_runs, normalized_variance, pearson, per_bucket_error, relative_error, EvalReport, MethodResult,
    QuantileBuckets, ReportMetadata, RunResult, VarianceRow, VarianceTable,
};
use crate::features::{poi_distribution, FeatureScaler};
use crate::geo::{self, euclid, project, CellId, CityGrid, GeoPoint, LocalPoint};
use crate::ingest::{assign_home, build_dataset, derive_attributes, detect_staypoints, read_pings, SpdParams};
use crate::learner::{gradient_check, loss, train, Dense, LossMode, Mlp, Sample, TrainConfig, TrainingSet};
use crate::synth::{generate_city, generate_population, AgeFractions, CellRecord, GenConfig, Poi, ProfileRow, SamplingProfile};

type Oracle = fn() -> Result<(), String>;

pub const ORACLES: &[(&str, Oracle)] = &[
    ("project north offset", project_north),
    ("project east offset at 60N", project_east),
    ("euclid 3-4-5", euclid_345),
    ("locate interior and boundary", locate_cells),
    ("ping groups sorted", pings_sorted),
    ("two pings one stay-point", two_pings),
    ("home by summed duration", home_argmax),
    ("truth mean duration", truth_mean),
    ("oblivious mean", oblivious_mean),
    ("oblivious count scale-up", oblivious_scale),
    ("debiased count", debiased_count_38),
    ("debiased average", debiased_avg_100),
    ("debiased count Monte Carlo", debiased_count_mc),
    ("POI distribution", poi_histogram),
    ("income z-scores", income_z),
    ("toy network trace", toy_network),
    ("forward continuity", forward_continuity),
    ("weighted loss", weighted_loss),
    ("single-row memorization", memorization),
    ("finite-difference gradient", finite_difference),
    ("relative error", relative_error_half),
    ("quantile buckets", quantile_partition),
    ("rising bucket errors", rising_buckets),
    ("normalized variance", variance_quarter),
    ("Pearson closed form", pearson_closed_form),
    ("run aggregation", aggregation),
    ("stationary cluster ingest", stationary_cluster),
    ("report CSV layout", report_layout),
];

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub name: &'static str,
    pub outcome: Result<(), String>,
}

pub fn run_all() -> Vec<OracleResult> {
    ORACLES.iter().map(|(name, f)| OracleResult { name, outcome: f() }).collect()
}

pub(crate) fn summary(results: &[OracleResult]) -> (bool, String) {
    let failed: Vec<String> = results
        .iter()
        .filter_map(|r| r.outcome.as_ref().err().map(|e| format!("{}: {e}", r.name)))
        .collect();
    let passed = results.len() - failed.len();
    let mut detail = format!("{passed}/{} fixtures exact", results.len());
    if !failed.is_empty() {
        detail.push_str(&format!("; failed: {}", failed.join("; ")));
    }
    (failed.is_empty(), detail)
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn project_north() -> Result<(), String> {
    let o = GeoPoint { lat: 34.0, lon: -118.0 };
    let p: LocalPoint = project(GeoPoint { lat: 34.01, lon: -118.0 }, o).map_err(e)?;
    check(p.x == 0.0 && (p.y - 1111.95).abs() < 0.005, || format!("got ({}, {})", p.x, p.y))
}

fn project_east() -> Result<(), String> {
    let o = GeoPoint { lat: 60.0, lon: 10.0 };
    let p: LocalPoint = project(GeoPoint { lat: 60.0, lon: 10.01 }, o).map_err(e)?;
    check((p.x - 555.97).abs() < 0.005 && p.y == 0.0, || format!("got ({}, {})", p.x, p.y))
}

fn euclid_345() -> Result<(), String> {
    let d = euclid(LocalPoint::new(1.0, 1.0), LocalPoint::new(4.0, 5.0));
    check(d == 5.0, || format!("got {d}"))
}

fn locate_cells() -> Result<(), String> {
    let g = CityGrid::new(GeoPoint { lat: 0.0, lon: 0.0 }, 100.0, 2, 2).map_err(e)?;
    let a = g.locate(LocalPoint::new(150.0, 50.0)).map_err(e)?;
    let b = g.locate(LocalPoint::new(100.0, 100.0)).map_err(e)?;
    check((a, b) == (1, 3), || format!("got {a}, {b}"))
}

fn pings_sorted() -> Result<(), String> {
    let text = "user_id,lat,lon,timestamp\na,40,-75,30\na,40,-75,10\na,40,-75,20\n";
    let groups = read_pings(text.as_bytes()).map_err(e)?;
    let ts: Vec<i64> = groups.get("a").map(|g| g.iter().map(|p| p.timestamp).collect()).unwrap_or_default();
    check(groups.len() == 1 && ts == [10, 20, 30], || format!("got {} groups, {ts:?}", groups.len()))
}

const INGEST_ORIGIN: GeoPoint = GeoPoint { lat: 40.0, lon: -75.0 };

fn at(x: f64, y: f64) -> GeoPoint {
    geo::unproject(LocalPoint::new(x, y), INGEST_ORIGIN)
}

fn ping(x: f64, y: f64, t: i64) -> crate::ingest::RawPing {
    crate::ingest::RawPing { user_id: "u".into(), point: at(x, y), timestamp: t }
}

fn two_pings() -> Result<(), String> {
    let sp = detect_staypoints(&[ping(100.0, 100.0, 0), ping(110.0, 100.0, 2000)], SpdParams::default()).map_err(e)?;
    check(sp.len() == 1 && sp[0].duration_s == 2000, || format!("got {sp:?}"))
}

fn home_argmax() -> Result<(), String> {
    let g = CityGrid::new(INGEST_ORIGIN, 1000.0, 4, 4).map_err(e)?;
    // cell 2 (row 0, col 2): 3000 s + 2000 s; cell 9 (row 2, col 1): 4000 s
    let seq = derive_attributes(
        vec![
            StayPoint::new(at(2500.0, 500.0), 0, 3000),
            StayPoint::new(at(1500.0, 2500.0), 4000, 8000),
            StayPoint::new(at(2600.0, 600.0), 9000, 11000),
        ],
        &g,
    );
    let home = assign_home(&seq, &g).map_err(e)?;
    check(home == 2, || format!("got {home}"))
}

fn line_grid() -> Result<CityGrid, String> {
    CityGrid::new(GeoPoint { lat: 0.0, lon: 0.0 }, 100.0, 1, 3).map_err(e)
}

fn visit(cell: CellId, duration: i64) -> StayPoint {
    let mut p = StayPoint::new(GeoPoint { lat: 0.0, lon: 0.0 }, 0, duration);
    p.cell = Some(cell);
    p
}

fn resident(id: &str, home: CellId, staypoints: Vec<StayPoint>) -> UserSequence {
    UserSequence { user_id: id.into(), staypoints, home }
}

fn idle(prefix: &str, home: CellId, n: usize) -> impl Iterator<Item = UserSequence> + '_ {
    (0..n).map(move |i| resident(&format!("{prefix}{i:03}"), home, vec![]))
}

fn truth_mean() -> Result<(), String> {
    let ds = Dataset::new(vec![resident("a", 1, vec![visit(1, 100), visit(1, 300)])]);
    let t = truth_stats::<f64>(&ds, &line_grid()?);
    let c = &t.cells[1];
    check(c.count == 2 && c.statistic(Attribute::Duration) == Some(200.0), || format!("got {c:?}"))
}

fn oblivious_mean() -> Result<(), String> {
    let ds = Dataset::new(vec![
        resident("a", 0, vec![visit(1, 100), visit(1, 200)]),
        resident("b", 0, vec![visit(1, 600)]),
    ]);
    let v = oblivious_avg::<f64>(&ds, &line_grid()?, Attribute::Duration).cells[1].value;
    check(v == Some(300.0), || format!("got {v:?}"))
}

fn oblivious_scale() -> Result<(), String> {
    let mut users = vec![resident("a", 0, (0..7).map(|_| visit(0, 10)).collect())];
    users.extend(idle("x", 0, 9));
    let v = oblivious_count::<f64>(&Dataset::new(users), 100, &line_grid()?).map_err(e)?.cells[0].value;
    check(v == Some(70.0), || format!("got {v:?}"))
}

fn profile(rows: &[(u64, u64)]) -> SamplingProfile {
    SamplingProfile {
        cells: rows.iter().map(|&(true_users, observed_users)| ProfileRow { true_users, observed_users }).collect(),
    }
}

fn debiased_count_38() -> Result<(), String> {
    // η1 = cell 0 (N=100, n=10): 3 visits to cell 2; η2 = cell 1 (N=50, n=25): 4 visits
    let mut users = vec![
        resident("a", 0, vec![visit(2, 10), visit(2, 10), visit(2, 10)]),
        resident("b", 1, (0..4).map(|_| visit(2, 10)).collect()),
    ];
    users.extend(idle("x", 0, 9));
    users.extend(idle("y", 1, 24));
    let p = profile(&[(100, 10), (50, 25), (0, 0)]);
    let v = debiased_count::<f64>(&Dataset::new(users), &p, &line_grid()?).map_err(e)?.cells[2].value;
    check(v == Some(38.0), || format!("got {v:?}"))
}

fn debiased_avg_100() -> Result<(), String> {
    let ds = Dataset::new(vec![resident("a", 0, vec![visit(1, 100)]), resident("b", 0, vec![visit(1, 200)])]);
    let p = profile(&[(10, 2), (0, 0), (0, 0)]);
    let mut truth = TruthTable::<f64> { cells: vec![TruthCell::default(); 3] };
    truth.cells[1].count = 15;
    let v = debiased_avg(&ds, &p, &line_grid()?, Attribute::Duration, Denominator::Known(&truth)).map_err(e)?.cells[1].value;
    // t̂ = (10 / 2) · 300 = 1500, ŷ = 1500 / 15
    check(v == Some(1500.0 / 15.0) && v == Some(100.0), || format!("got {v:?}"))
}

fn debiased_count_mc() -> Result<(), String> {
    // dense enough that every home cell keeps at least one sampled resident
    let cfg = GenConfig { seed: 20, rows: 4, cols: 5, population_mean: 200.0, population_spread: 50.0, ..GenConfig::default() };
    let city = generate_city(&cfg).map_err(e)?;
    let truth = generate_population(&city, &cfg).map_err(e)?;
    let ratios = city.sampling_ratios(&cfg.ratio);
    let seeds: Vec<u64> = (0..200).map(|i| crate::rng::derive_seed(cfg.seed, "mc", i)).collect();
    let r = monte_carlo_bias_variance::<f64>(&truth, &city.grid, &ratios, EstimatorId::DebiasedCount, &seeds).map_err(e)?;
    let outside: Vec<usize> = r
        .cells
        .iter()
        .enumerate()
        .filter(|(_, c)| match (c.bias, c.std_error()) {
            (Some(b), Some(se)) => b.abs() > 3.0 * se,
            _ => true,
        })
        .map(|(i, _)| i)
        .collect();
    check(r.cells.len() == 20 && outside.is_empty(), || format!("cells outside 3 SE: {outside:?}"))
}

fn pois(categories: &[usize]) -> Vec<Poi> {
    categories.iter().map(|&category| Poi { location: LocalPoint::new(0.0, 0.0), category }).collect()
}

fn poi_histogram() -> Result<(), String> {
    let d = poi_distribution::<f64>(&pois(&[0, 0, 1, 2]), 3).map_err(e)?;
    check(d == [0.5, 0.25, 0.25], || format!("got {d:?}"))
}

fn income_z() -> Result<(), String> {
    let cell = |income: f64| CellRecord {
        id: 0,
        true_population: 100,
        median_income: income,
        age_fractions: AgeFractions { child: 0.2, adult: 0.6, senior: 0.2 },
        pois: vec![],
    };
    let cells = [cell(10.0), cell(30.0)];
    let s = FeatureScaler::<f64>::fit(&cells).map_err(e)?;
    let a = s.apply(&cells[0], 1).map_err(e)?.income_z;
    let b = s.apply(&cells[1], 1).map_err(e)?.income_z;
    check((a, b) == (-1.0, 1.0), || format!("got ({a}, {b})"))
}

fn toy_network() -> Result<(), String> {
    // h1 = relu(2x - 1), h2 = relu(-3 h1 + 4), y = 0.5 h2 + 0.25
    let layer = |w: f64, b: f64| Dense { inputs: 1, outputs: 1, weights: vec![w], biases: vec![b] };
    let m = Mlp { layers: vec![layer(2.0, -1.0), layer(-3.0, 4.0), layer(0.5, 0.25)] };
    let ys: Vec<f64> = [1.0, 2.0, 0.0].iter().map(|x| m.forward(&[*x])).collect::<Result<_, _>>().map_err(e)?;
    check(ys == [0.75, 0.25, 2.25], || format!("got {ys:?}"))
}

fn forward_continuity() -> Result<(), String> {
    let m = Mlp::<f64>::new(3, 8).map_err(e)?;
    let x: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
    let base = m.forward(&x).map_err(e)?;
    for i in 0..8 {
        let mut y = x.clone();
        y[i] += 1e-9;
        let d = (m.forward(&y).map_err(e)? - base).abs();
        check(d <= 1e-6, || format!("input {i} moved output by {d}"))?;
    }
    Ok(())
}

fn sample(label: f64, weight: f64) -> Sample<f64> {
    Sample { cell: 0, features: vec![0.0], label, weight }
}

fn weighted_loss() -> Result<(), String> {
    let zero = Mlp::<f64> { layers: vec![Dense::zeros(1, 1)] };
    let l = loss(&zero, &[sample(1.0, 1.0), sample(3.0, 0.0)], LossMode::Weighted).map_err(e)?;
    check(l == 0.5, || format!("got {l}"))
}

fn memorization() -> Result<(), String> {
    let set = TrainingSet { rows: vec![Sample { cell: 0, features: vec![0.3, -0.7, 1.1], label: 5.0, weight: 1.0 }] };
    let out = train(Mlp::<f64>::new(9, 3).map_err(e)?, &set, &TrainConfig { epochs: 2000, ..TrainConfig::default() })
        .map_err(e)?;
    let last = out.trace.last().map_or(f64::INFINITY, |s| s.train_loss);
    check(last < 1e-6, || format!("final loss {last}"))
}

fn finite_difference() -> Result<(), String> {
    use rand::Rng;
    let mut r = crate::rng::stream(4, "oracle-batch", 0);
    let batch: Vec<Sample<f64>> = (0..16)
        .map(|cell| Sample {
            cell,
            features: (0..8).map(|_| r.random_range(-1.5..1.5)).collect(),
            label: r.random_range(-2.0..2.0),
            weight: r.random_range(0.1..1.0),
        })
        .collect();
    let g = gradient_check(&Mlp::<f64>::new(3, 8).map_err(e)?, &batch, LossMode::Weighted, 400, 1).map_err(e)?;
    check(g.max_rel_dev < 1e-4, || format!("deviation {}", g.max_rel_dev))
}

fn relative_error_half() -> Result<(), String> {
    let r = relative_error(&[Some(2.0), Some(4.0)], &[Some(3.0), Some(2.0)]).map_err(e)?.overall;
    check(r == Some(0.5), || format!("got {r:?}"))
}

fn quantile_partition() -> Result<(), String> {
    let ratios = [0.31, 0.02, 0.9, 0.45, 0.11, 0.66, 0.05, 0.27, 0.83, 0.5];
    let q = QuantileBuckets::from_ratios(ratios.iter().map(|r| Some(*r)).collect());
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    for (i, r) in ratios.iter().enumerate() {
        let rank = sorted.iter().position(|s| s == r).unwrap_or(usize::MAX);
        let want = 5 * rank / ratios.len();
        check(q.buckets[i] == Some(want), || format!("cell {i}: bucket {:?}, sort oracle {want}", q.buckets[i]))?;
    }
    Ok(())
}

fn rising_buckets() -> Result<(), String> {
    let q = QuantileBuckets::from_ratios((0..10).map(|i| Some(i as f64)).collect());
    let rising: Vec<Option<f64>> = (0..10).map(|i| Some(i as f64 / 10.0)).collect();
    let b = per_bucket_error(&rising, &q).map_err(e)?;
    let means: Vec<f64> = b.iter().flatten().copied().collect();
    let monotone = means.len() == 5 && means.windows(2).all(|w| w[0] < w[1]);
    check(monotone, || format!("got {b:?}"))
}

fn variance_quarter() -> Result<(), String> {
    let v = normalized_variance(&[0.0, 10.0]);
    check(v == 0.25, || format!("got {v}"))
}

fn pearson_closed_form() -> Result<(), String> {
    let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).map_err(e)?;
    check((r - 0.9819f64).abs() < 1e-4, || format!("got {r}"))
}

fn aggregation() -> Result<(), String> {
    let s = aggregate_runs(&[0.2, 0.4]).map_err(e)?;
    check((s.mean - 0.3).abs() < 1e-12 && (s.sd - 0.1414).abs() < 1e-4, || format!("got {s:?}"))
}

fn stationary_cluster() -> Result<(), String> {
    let g = CityGrid::new(INGEST_ORIGIN, 1000.0, 4, 4).map_err(e)?;
    let mut pings = crate::ingest::PingsByUser::new();
    pings.insert("u".into(), vec![ping(500.0, 500.0, 0), ping(510.0, 505.0, 900), ping(505.0, 495.0, 2400)]);
    let (ds, _) = build_dataset(&pings, &g, SpdParams::default()).map_err(e)?;
    let mut buf = Vec::new();
    ds.write_csv(&mut buf).map_err(e)?;
    let rows = String::from_utf8_lossy(&buf).lines().count() - 1;
    check(rows == 1, || format!("got {rows} rows"))
}

/// Byte layout of the flat report tables.
pub const GOLDEN_OVERALL: &str = "method,attribute,mean,sd,runs,excluded_mean\noblivious,visits,0.5,0,1,0\n";
pub const GOLDEN_BUCKETS: &str = "method,attribute,bucket,mean,sd,runs\n\
oblivious,visits,0,0.5,0,1\noblivious,visits,1,,,0\noblivious,visits,2,0.5,0,1\noblivious,visits,3,,,0\noblivious,visits,4,,,0\n";
pub const GOLDEN_VARIANCE: &str = "attribute,variance,cells\nvisits,0.25,3\n";
pub const GOLDEN_CORRELATIONS: &str =
    "feature,r_mean,r_sd,runs\nadult_fraction,,,0\nsenior_fraction,,,0\nchild_fraction,,,0\nmedian_income,,,0\n";

fn report_layout() -> Result<(), String> {
    // two cells: ranks 0 and 1 of 2 fall in buckets 0 and 2
    let q = QuantileBuckets::from_ratios(vec![Some(0.1), Some(0.2)]);
    let run = RunResult::evaluate(1, &[Some(2.0), Some(4.0)], &[Some(3.0), Some(2.0)], &q).map_err(e)?;
    let m = MethodResult::aggregate("oblivious".into(), Attribute::Visits, vec![run]).map_err(e)?;
    let report = EvalReport::new(
        ReportMetadata::new(vec![1]),
        vec![m],
        VarianceTable { rows: vec![VarianceRow { attribute: Attribute::Visits, variance: Some(0.25), cells: 3 }] },
        &[],
    );
    type Writer = fn(&EvalReport, &mut Vec<u8>) -> Result<(), crate::eval::EvalError>;
    let tables: [(&str, Writer, &str); 4] = [
        ("overall", |r, w| r.write_overall_csv(w), GOLDEN_OVERALL),
        ("buckets", |r, w| r.write_buckets_csv(w), GOLDEN_BUCKETS),
        ("variance", |r, w| r.write_variance_csv(w), GOLDEN_VARIANCE),
        ("correlations", |r, w| r.write_correlations_csv(w), GOLDEN_CORRELATIONS),
    ];
    for (name, write, golden) in tables {
        let mut buf = Vec::new();
        write(&report, &mut buf).map_err(e)?;
        let got = String::from_utf8_lossy(&buf);
        check(got == golden, || format!("{name}.csv differs: {got:?}"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_oracle_passes() {
        for r in run_all() {
            assert!(r.outcome.is_ok(), "{}: {:?}", r.name, r.outcome);
        }
    }
}
