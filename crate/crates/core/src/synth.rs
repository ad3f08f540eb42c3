//! Synthetic city, ground-truth population and biased sampling.
//!
//! Visit durations and travel distances are drawn per POI category, so a
//! cell's average statistics follow from its POI mix. Sampling ratios are a
//! deterministic function of cell demographics.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, StayPoint, UserSequence};
use crate::geo::{self, CellId, CityGrid, GeoError, GeoPoint, LocalPoint};
use crate::ingest;
use crate::rng::{self, StreamRng};

pub const MIN_RATIO: f64 = 0.005;
pub const MAX_RATIO: f64 = 1.0;
const POI_MARGIN_M: f64 = 1.0;
const TRAVEL_SPEED_MPS: f64 = 8.0;
const TRAVEL_OVERHEAD_S: f64 = 300.0;
const DAY_START: i64 = 1_575_158_400;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("profile line {line}: {msg}")]
    Profile { line: u64, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    /// Relative share of POIs and visits.
    pub popularity: f64,
    pub duration_mean_s: f64,
    pub duration_spread_s: f64,
    pub distance_mean_m: f64,
    pub distance_spread_m: f64,
}

/// Linear model mapping standardized demographics to a user sampling ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioModel {
    pub base: f64,
    pub income_slope: f64,
    pub adult_slope: f64,
    pub senior_slope: f64,
    pub child_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub origin: GeoPoint,
    pub rows: usize,
    pub cols: usize,
    pub cell_size_m: f64,
    pub categories: Vec<CategorySpec>,
    pub population_mean: f64,
    pub population_spread: f64,
    pub income_mean: f64,
    pub income_spread: f64,
    pub pois_per_cell_min: usize,
    pub pois_per_cell_max: usize,
    /// Gamma shape for each cell's category mix; larger is closer to the
    /// global popularity.
    pub poi_mix_concentration: f64,
    pub visits_mean: f64,
    pub visits_spread: f64,
    /// Probability that a visit may return to an already visited cell.
    pub repeat_cell_prob: f64,
    pub min_duration_s: f64,
    pub ratio: RatioModel,
}

impl Default for GenConfig {
    fn default() -> Self {
        let cat = |name: &str, popularity, dur: f64, dist: f64| CategorySpec {
            name: name.into(),
            popularity,
            duration_mean_s: dur,
            duration_spread_s: 0.6 * dur,
            distance_mean_m: dist,
            distance_spread_m: 0.6 * dist,
        };
        Self {
            seed: 42,
            origin: GeoPoint { lat: 29.65, lon: -95.45 },
            rows: 5,
            cols: 5,
            cell_size_m: 4000.0,
            categories: vec![
                cat("gas_station", 1.0, 600.0, 1500.0),
                cat("grocery", 1.0, 1800.0, 2500.0),
                cat("restaurant", 1.0, 3600.0, 4000.0),
                cat("school", 1.0, 9000.0, 3000.0),
                cat("office", 1.0, 18000.0, 8000.0),
                cat("entertainment", 1.0, 7200.0, 10000.0),
            ],
            population_mean: 200.0,
            population_spread: 60.0,
            income_mean: 60_000.0,
            income_spread: 20_000.0,
            pois_per_cell_min: 8,
            pois_per_cell_max: 24,
            poi_mix_concentration: 0.8,
            visits_mean: 5.0,
            visits_spread: 1.5,
            repeat_cell_prob: 0.02,
            min_duration_s: 60.0,
            ratio: RatioModel {
                base: 0.04,
                income_slope: -0.012,
                adult_slope: 0.008,
                senior_slope: -0.004,
                child_slope: -0.004,
            },
        }
    }
}

impl GenConfig {
    pub fn k(&self) -> usize {
        self.categories.len()
    }

    pub fn grid(&self) -> Result<CityGrid, SynthError> {
        Ok(CityGrid::new(self.origin, self.cell_size_m, self.rows, self.cols)?)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: &str| Err(SynthError::Config(m.into()));
        if self.categories.is_empty() {
            return err("at least one POI category is required");
        }
        if self.rows == 0 || self.cols == 0 {
            return err("grid must have at least one cell");
        }
        self.grid()?;
        for c in &self.categories {
            let spreads = [c.duration_spread_s, c.distance_spread_m];
            if spreads.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return err("category spreads must be non-negative");
            }
            if !(c.popularity > 0.0) || !(c.duration_mean_s > 0.0) || !(c.distance_mean_m >= 0.0) {
                return err("category popularity and duration mean must be positive");
            }
        }
        let spreads = [self.population_spread, self.income_spread, self.visits_spread];
        if spreads.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return err("spreads must be non-negative");
        }
        if self.pois_per_cell_min == 0 || self.pois_per_cell_max < self.pois_per_cell_min {
            return err("POIs per cell must satisfy 1 <= min <= max");
        }
        if !(self.poi_mix_concentration > 0.0) {
            return err("poi_mix_concentration must be positive");
        }
        if !(0.0..=1.0).contains(&self.repeat_cell_prob) {
            return err("repeat_cell_prob must lie in [0, 1]");
        }
        if !(self.visits_mean >= 1.0) {
            return err("visits_mean must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeFractions {
    pub child: f64,
    pub adult: f64,
    pub senior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub location: LocalPoint,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub id: CellId,
    pub true_population: u64,
    pub median_income: f64,
    pub age_fractions: AgeFractions,
    pub pois: Vec<Poi>,
}

/// Grid, census-style demographics and POI inventory. Serialized as the city file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityModel {
    pub grid: CityGrid,
    pub categories: Vec<String>,
    pub cells: Vec<CellRecord>,
}

impl CityModel {
    pub fn k(&self) -> usize {
        self.categories.len()
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), SynthError> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_json(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let city: CityModel = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        city.grid.validate()?;
        if city.cells.len() != city.grid.cell_count() {
            return Err(SynthError::Config(format!(
                "city file has {} cells, grid has {}",
                city.cells.len(),
                city.grid.cell_count()
            )));
        }
        Ok(city)
    }

    /// Target user sampling ratio per cell, clamped to `[MIN_RATIO, MAX_RATIO]`.
    pub fn sampling_ratios(&self, model: &RatioModel) -> Vec<f64> {
        let z = |f: &dyn Fn(&CellRecord) -> f64| zscores(&self.cells.iter().map(f).collect::<Vec<_>>());
        let income = z(&|c| c.median_income);
        let adult = z(&|c| c.age_fractions.adult);
        let senior = z(&|c| c.age_fractions.senior);
        let child = z(&|c| c.age_fractions.child);
        (0..self.cells.len())
            .map(|i| {
                let s = model.base
                    + model.income_slope * income[i]
                    + model.adult_slope * adult[i]
                    + model.senior_slope * senior[i]
                    + model.child_slope * child[i];
                s.clamp(MIN_RATIO, MAX_RATIO)
            })
            .collect()
    }
}

fn zscores(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    xs.iter().map(|x| if sd > 0.0 { (x - mean) / sd } else { 0.0 }).collect()
}

fn normal_draw(rng: &mut StreamRng, mean: f64, spread: f64) -> f64 {
    if spread == 0.0 {
        return mean;
    }
    Normal::new(mean, spread).expect("validated spread").sample(rng)
}

fn weighted_index(rng: &mut StreamRng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return i;
        }
        r -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

pub fn generate_city(cfg: &GenConfig) -> Result<CityModel, SynthError> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let popularity: Vec<f64> = cfg.categories.iter().map(|c| c.popularity).collect();
    let mix = Gamma::new(cfg.poi_mix_concentration, 1.0).map_err(|e| SynthError::Config(e.to_string()))?;
    let mut rng = rng::stream(cfg.seed, "city", 0);
    let mut cells = Vec::with_capacity(grid.cell_count());
    for id in 0..grid.cell_count() {
        let population = normal_draw(&mut rng, cfg.population_mean, cfg.population_spread).round().max(0.0) as u64;
        let median_income = normal_draw(&mut rng, cfg.income_mean, cfg.income_spread).max(1000.0);
        let raw = [
            rng.random_range(0.10..0.30),
            rng.random_range(0.45..0.75),
            rng.random_range(0.05..0.30),
        ];
        let total: f64 = raw.iter().sum();
        let age_fractions = AgeFractions { child: raw[0] / total, adult: raw[1] / total, senior: raw[2] / total };

        let weights: Vec<f64> = popularity.iter().map(|p| p * mix.sample(&mut rng).max(1e-12)).collect();
        let n_pois = rng.random_range(cfg.pois_per_cell_min..=cfg.pois_per_cell_max);
        let o = grid.cell_origin(id);
        let span = grid.cell_size_m - 2.0 * POI_MARGIN_M;
        let pois = (0..n_pois)
            .map(|_| Poi {
                category: weighted_index(&mut rng, &weights),
                location: LocalPoint::new(
                    o.x + POI_MARGIN_M + rng.random::<f64>() * span,
                    o.y + POI_MARGIN_M + rng.random::<f64>() * span,
                ),
            })
            .collect();
        cells.push(CellRecord { id, true_population: population, median_income, age_fractions, pois });
    }
    Ok(CityModel { grid, categories: cfg.categories.iter().map(|c| c.name.clone()).collect(), cells })
}

struct PoiIndex<'a> {
    by_category: Vec<Vec<(CellId, &'a Poi)>>,
}

impl<'a> PoiIndex<'a> {
    fn new(city: &'a CityModel) -> Self {
        let mut by_category = vec![Vec::new(); city.k()];
        for cell in &city.cells {
            for poi in &cell.pois {
                by_category[poi.category].push((cell.id, poi));
            }
        }
        Self { by_category }
    }
}

fn generate_user(
    rng: &mut StreamRng,
    city: &CityModel,
    cfg: &GenConfig,
    index: &PoiIndex<'_>,
    residence: CellId,
    user_id: String,
) -> UserSequence {
    let grid = &city.grid;
    let o = grid.cell_origin(residence);
    let mut here = LocalPoint::new(
        o.x + rng.random::<f64>() * grid.cell_size_m,
        o.y + rng.random::<f64>() * grid.cell_size_m,
    );
    let max_visits = grid.cell_count() as f64;
    let visits = normal_draw(rng, cfg.visits_mean, cfg.visits_spread).round().clamp(1.0, max_visits) as usize;
    let popularity: Vec<f64> = cfg.categories.iter().map(|c| c.popularity).collect();
    let available: Vec<f64> = popularity
        .iter()
        .zip(&index.by_category)
        .map(|(p, pois)| if pois.is_empty() { 0.0 } else { *p })
        .collect();

    let mut visited: BTreeSet<CellId> = BTreeSet::new();
    let mut t = DAY_START + rng.random_range(0..6 * 3600);
    let mut staypoints = Vec::with_capacity(visits);
    for v in 0..visits {
        let local_pois = &city.cells[residence].pois;
        let poi = if v == 0 && !local_pois.is_empty() {
            let w: Vec<f64> = local_pois.iter().map(|p| popularity[p.category]).collect();
            &local_pois[weighted_index(rng, &w)]
        } else {
            let c = weighted_index(rng, &available);
            let allow_repeat = rng.random::<f64>() < cfg.repeat_cell_prob;
            let candidates = &index.by_category[c];
            let fresh = candidates.iter().any(|(cell, _)| !visited.contains(cell));
            let pool: Vec<&Poi> = candidates
                .iter()
                .filter(|(cell, _)| allow_repeat || !fresh || !visited.contains(cell))
                .map(|(_, p)| *p)
                .collect();
            choose_destination(rng, &cfg.categories[c], here, &pool)
        };
        let spec = &cfg.categories[poi.category];
        let duration = normal_draw(rng, spec.duration_mean_s, spec.duration_spread_s)
            .round()
            .max(cfg.min_duration_s) as i64;
        let travel = geo::euclid(here, poi.location) / TRAVEL_SPEED_MPS + TRAVEL_OVERHEAD_S;
        if v > 0 {
            t += travel.round() as i64;
        }
        let centroid = geo::unproject(poi.location, grid.origin);
        staypoints.push(StayPoint::new(centroid, t, t + duration));
        t += duration;
        here = poi.location;
        visited.insert(grid.locate(poi.location).expect("POIs lie inside their cell"));
    }
    let staypoints = ingest::derive_attributes(staypoints, grid);
    let home = ingest::assign_home(&staypoints, grid).expect("synthetic stay-points lie in the grid");
    UserSequence { user_id, staypoints, home }
}

/// Picks a POI with probability proportional to the category's travel
/// distance density at the POI's distance from `here`. With zero spread the
/// POI nearest the mean distance is taken.
fn choose_destination<'a>(rng: &mut StreamRng, spec: &CategorySpec, here: LocalPoint, pool: &[&'a Poi]) -> &'a Poi {
    let dist: Vec<f64> = pool.iter().map(|p| geo::euclid(here, p.location)).collect();
    let nearest = || {
        let i = (0..pool.len())
            .min_by(|&a, &b| (dist[a] - spec.distance_mean_m).abs().total_cmp(&(dist[b] - spec.distance_mean_m).abs()))
            .expect("category has POIs");
        pool[i]
    };
    if spec.distance_spread_m == 0.0 {
        return nearest();
    }
    let weights: Vec<f64> = dist
        .iter()
        .map(|d| (-0.5 * ((d - spec.distance_mean_m) / spec.distance_spread_m).powi(2)).exp())
        .collect();
    if weights.iter().sum::<f64>() > 0.0 {
        pool[weighted_index(rng, &weights)]
    } else {
        nearest()
    }
}

/// Ground-truth stay-point sequences for every resident of every cell.
pub fn generate_population(city: &CityModel, cfg: &GenConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    if city.k() != cfg.k() {
        return Err(SynthError::Config(format!("city has {} categories, config has {}", city.k(), cfg.k())));
    }
    let index = PoiIndex::new(city);
    let users: Vec<UserSequence> = city
        .cells
        .par_iter()
        .flat_map_iter(|cell| {
            let mut rng = rng::stream(cfg.seed, "population", cell.id as u64);
            (0..cell.true_population)
                .map(|i| generate_user(&mut rng, city, cfg, &index, cell.id, format!("u{:04}_{:05}", cell.id, i)))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(Dataset::new(users))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    /// True users with this home cell.
    pub true_users: u64,
    /// Observed users with this home cell.
    pub observed_users: u64,
}

impl ProfileRow {
    pub fn ratio(&self) -> f64 {
        if self.true_users == 0 {
            0.0
        } else {
            self.observed_users as f64 / self.true_users as f64
        }
    }
}

/// Per-cell `N`, `n` and `s = n / N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingProfile {
    pub cells: Vec<ProfileRow>,
}

impl SamplingProfile {
    pub fn from_datasets(truth: &Dataset, observed: &Dataset, cells: usize) -> Self {
        let n_true = truth.home_counts(cells);
        let n_obs = observed.home_counts(cells);
        Self {
            cells: n_true
                .into_iter()
                .zip(n_obs)
                .map(|(true_users, observed_users)| ProfileRow { true_users, observed_users })
                .collect(),
        }
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.cells.iter().map(ProfileRow::ratio).collect()
    }

    pub fn total_true(&self) -> u64 {
        self.cells.iter().map(|c| c.true_users).sum()
    }

    pub fn total_observed(&self) -> u64 {
        self.cells.iter().map(|c| c.observed_users).sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SynthError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["cell_id", "N", "n", "s"])?;
        for (id, row) in self.cells.iter().enumerate() {
            out.write_record([
                id.to_string(),
                row.true_users.to_string(),
                row.observed_users.to_string(),
                row.ratio().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, SynthError> {
        let mut reader = csv::Reader::from_reader(r);
        let mut cells = Vec::new();
        for (idx, rec) in reader.records().enumerate() {
            let line = idx as u64 + 2;
            let rec = rec?;
            let bad = |m: &str| SynthError::Profile { line, msg: m.into() };
            let id: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("invalid cell_id"))?;
            if id != cells.len() {
                return Err(bad("cell ids must be consecutive from 0"));
            }
            let true_users = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("invalid N"))?;
            let observed_users = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("invalid n"))?;
            if observed_users > true_users {
                return Err(bad("n exceeds N"));
            }
            cells.push(ProfileRow { true_users, observed_users });
        }
        Ok(Self { cells })
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Users to draw from a home population of `n` at ratio `s` (ties to even).
pub fn sample_size(s: f64, n: u64) -> u64 {
    ((s * n as f64).round_ties_even().max(0.0) as u64).min(n)
}

/// Draw `round(s_μ N_μ)` users uniformly without replacement from each home
/// cell, keeping every stay-point of each selected user.
pub fn biased_sample(truth: &Dataset, ratios: &[f64], seed: u64) -> (Dataset, SamplingProfile) {
    let cells = ratios.len();
    let mut by_home: Vec<Vec<usize>> = vec![Vec::new(); cells];
    for (i, u) in truth.users.iter().enumerate() {
        if let Some(v) = by_home.get_mut(u.home) {
            v.push(i);
        }
    }
    let mut selected: Vec<usize> = by_home
        .par_iter()
        .enumerate()
        .flat_map_iter(|(cell, members)| {
            let take = sample_size(ratios[cell], members.len() as u64) as usize;
            let mut rng = rng::stream(seed, "sample", cell as u64);
            index::sample(&mut rng, members.len(), take).into_iter().map(|j| members[j]).collect::<Vec<_>>()
        })
        .collect();
    selected.sort_unstable();
    let observed = Dataset { users: selected.into_iter().map(|i| truth.users[i].clone()).collect() };
    let profile = SamplingProfile::from_datasets(truth, &observed, cells);
    (observed, profile)
}

/// Independent biased samples, one per seed.
pub fn resample_k(truth: &Dataset, ratios: &[f64], seeds: &[u64]) -> Vec<(Dataset, SamplingProfile)> {
    seeds.iter().map(|&s| biased_sample(truth, ratios, s)).collect()
}

/// `k` sample seeds derived from a run seed.
pub fn sample_seeds(seed: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|i| rng::derive_seed(seed, "resample", i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GenConfig {
        GenConfig { rows: 3, cols: 3, population_mean: 40.0, population_spread: 10.0, ..GenConfig::default() }
    }

    #[test]
    fn city_is_deterministic() {
        let cfg = small_cfg();
        let a = serde_json::to_vec(&generate_city(&cfg).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_city(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn city_shape_and_normalization() {
        let city = generate_city(&GenConfig::default()).unwrap();
        assert_eq!(city.cells.len(), 25);
        for cell in &city.cells {
            let a = cell.age_fractions;
            assert!((a.child + a.adult + a.senior - 1.0).abs() <= 1e-9);
            assert!(!cell.pois.is_empty());
            for p in &cell.pois {
                assert_eq!(city.grid.locate(p.location).unwrap(), cell.id);
                assert!(p.category < city.k());
            }
        }
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let no_cats = GenConfig { categories: vec![], ..GenConfig::default() };
        assert!(matches!(generate_city(&no_cats), Err(SynthError::Config(_))));
        let no_cells = GenConfig { rows: 0, ..GenConfig::default() };
        assert!(matches!(generate_city(&no_cells), Err(SynthError::Config(_))));
    }

    #[test]
    fn population_cardinality_and_empty_cells() {
        let cfg = small_cfg();
        let mut city = generate_city(&cfg).unwrap();
        city.cells[4].true_population = 0;
        let truth = generate_population(&city, &cfg).unwrap();
        let total: u64 = city.cells.iter().map(|c| c.true_population).sum();
        assert_eq!(truth.len() as u64, total);
        assert!(truth.users.iter().all(|u| !u.user_id.starts_with("u0004_")));
        for u in &truth.users {
            assert_eq!(u.staypoints[0].dist_from_prev_m, None);
            assert!(u.staypoints[1..].iter().all(|p| p.dist_from_prev_m.is_some()));
            assert_eq!(ingest::assign_home(&u.staypoints, &city.grid).unwrap(), u.home);
        }
        let again = generate_population(&city, &cfg).unwrap();
        assert_eq!(truth, again);
    }

    #[test]
    fn zero_spread_gives_exact_durations() {
        let mut cfg = small_cfg();
        for c in &mut cfg.categories {
            c.duration_spread_s = 0.0;
        }
        let city = generate_city(&cfg).unwrap();
        let truth = generate_population(&city, &cfg).unwrap();
        let category_of = |p: &StayPoint| {
            let local: LocalPoint = geo::project(p.centroid, city.grid.origin).unwrap();
            city.cells[p.cell.unwrap()]
                .pois
                .iter()
                .min_by(|a, b| geo::euclid(a.location, local).total_cmp(&geo::euclid(b.location, local)))
                .unwrap()
                .category
        };
        for p in truth.users.iter().flat_map(|u| &u.staypoints) {
            assert_eq!(p.duration_s as f64, cfg.categories[category_of(p)].duration_mean_s);
        }
    }

    fn lab() -> (CityModel, Dataset) {
        let cfg = small_cfg();
        let city = generate_city(&cfg).unwrap();
        let truth = generate_population(&city, &cfg).unwrap();
        (city, truth)
    }

    #[test]
    fn identity_and_empty_samples() {
        let (city, truth) = lab();
        let n = city.cells.len();
        let (all, profile) = biased_sample(&truth, &vec![1.0; n], 3);
        assert_eq!(all, truth);
        assert!(profile.ratios().iter().zip(&profile.cells).all(|(s, c)| c.true_users == 0 || *s == 1.0));
        let (none, _) = biased_sample(&truth, &vec![0.0; n], 3);
        assert!(none.is_empty());
    }

    #[test]
    fn sample_sizes_round_half_even() {
        assert_eq!(sample_size(0.04, 100), 4);
        assert_eq!(sample_size(0.025, 100), 2);
        assert_eq!(sample_size(0.035, 100), 4);
        assert_eq!(sample_size(0.5, 3), 2);
        assert_eq!(sample_size(0.0, 50), 0);
    }

    #[test]
    fn realized_ratios_match_targets() {
        let (city, truth) = lab();
        let ratios = city.sampling_ratios(&GenConfig::default().ratio);
        let (observed, profile) = biased_sample(&truth, &ratios, 11);
        for (row, s) in profile.cells.iter().zip(&ratios) {
            if row.true_users > 0 {
                assert!((row.ratio() - s).abs() <= 1.0 / row.true_users as f64);
            }
        }
        // whole-sequence inclusion
        for u in &observed.users {
            let original = truth.users.iter().find(|t| t.user_id == u.user_id).unwrap();
            assert_eq!(u, original);
        }
    }

    #[test]
    fn resampling() {
        let (city, truth) = lab();
        let ratios = city.sampling_ratios(&GenConfig::default().ratio);
        let seeds = sample_seeds(9, 5);
        let draws = resample_k(&truth, &ratios, &seeds);
        assert_eq!(draws.len(), 5);
        assert_ne!(draws[0].0, draws[1].0);
        let one = resample_k(&truth, &ratios, &seeds[..1]);
        assert_eq!(one[0], biased_sample(&truth, &ratios, seeds[0]));
        let twice = resample_k(&truth, &ratios, &[seeds[2], seeds[2]]);
        assert_eq!(twice[0], twice[1]);
    }

    #[test]
    fn profile_csv_roundtrip() {
        let p = SamplingProfile {
            cells: vec![
                ProfileRow { true_users: 100, observed_users: 4 },
                ProfileRow { true_users: 0, observed_users: 0 },
            ],
        };
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "cell_id,N,n,s\n0,100,4,0.04\n1,0,0,0\n");
        assert_eq!(SamplingProfile::read_csv(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn uniform_sampling_converges_to_cell_mean() {
        // mean stay duration per sampled home-cell user over 200 resamples
        let (_, truth) = lab();
        let home = 4;
        let members: Vec<&UserSequence> = truth.users.iter().filter(|u| u.home == home).collect();
        let stat = |u: &UserSequence| u.staypoints.iter().map(|p| p.duration_s as f64).sum::<f64>();
        let n = members.len() as f64;
        let true_mean = members.iter().map(|u| stat(u)).sum::<f64>() / n;
        let true_var = members.iter().map(|u| (stat(u) - true_mean).powi(2)).sum::<f64>() / n;
        let mut ratios = vec![0.0; 9];
        ratios[home] = 0.25;
        let k = sample_size(0.25, members.len() as u64) as f64;
        let r = 200;
        let means: Vec<f64> = (0..r)
            .map(|i| {
                let (obs, _) = biased_sample(&truth, &ratios, 1000 + i);
                obs.users.iter().map(stat).sum::<f64>() / k
            })
            .collect();
        let grand = means.iter().sum::<f64>() / r as f64;
        // standard error of the grand mean under sampling without replacement
        let fpc = (n - k) / (n - 1.0);
        let se = (true_var / k * fpc / r as f64).sqrt();
        assert!((grand - true_mean).abs() <= 3.0 * se, "grand {grand} true {true_mean} se {se}");
    }
}
