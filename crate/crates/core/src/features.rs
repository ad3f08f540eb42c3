//! Per-cell feature vectors: POI category distribution plus standardized
//! population and median income.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;
use crate::synth::{CellRecord, CityModel, Poi};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("POI category {category} is outside 0..{k}")]
    CategoryOutOfRange { category: usize, k: usize },
    #[error("a scaler needs at least two cells, got {0}")]
    DegenerateScaler(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector<T = f64> {
    pub poi_dist: Vec<T>,
    pub population_z: T,
    pub income_z: T,
}

impl<T: Real> FeatureVector<T> {
    pub fn len(&self) -> usize {
        self.poi_dist.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<T> {
        let mut v = self.poi_dist.clone();
        v.push(self.population_z);
        v.push(self.income_z);
        v
    }
}

/// Normalized category histogram; all zeros when there are no POIs.
pub fn poi_distribution<T: Real>(pois: &[Poi], k: usize) -> Result<Vec<T>, FeatureError> {
    let mut counts = vec![0usize; k];
    for p in pois {
        *counts.get_mut(p.category).ok_or(FeatureError::CategoryOutOfRange { category: p.category, k })? += 1;
    }
    if pois.is_empty() {
        return Ok(vec![T::zero(); k]);
    }
    let total = T::from_count(pois.len());
    Ok(counts.into_iter().map(|c| T::from_count(c) / total).collect())
}

/// Mean and population standard deviation of one raw feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer<T = f64> {
    pub mean: T,
    pub spread: T,
}

impl<T: Real> Standardizer<T> {
    pub fn fit(xs: &[T]) -> Self {
        let n = T::from_count(xs.len());
        let mean = xs.iter().copied().sum::<T>() / n;
        let spread = (xs.iter().map(|x| (*x - mean).powi(2)).sum::<T>() / n).sqrt();
        Self { mean, spread }
    }

    /// `(x - mean) / spread`, or 0 for a constant feature.
    pub fn apply(&self, x: T) -> T {
        if self.spread > T::zero() {
            (x - self.mean) / self.spread
        } else {
            T::zero()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler<T = f64> {
    pub population: Standardizer<T>,
    pub income: Standardizer<T>,
}

impl<T: Real> FeatureScaler<T> {
    pub fn fit(cells: &[CellRecord]) -> Result<Self, FeatureError> {
        if cells.len() < 2 {
            return Err(FeatureError::DegenerateScaler(cells.len()));
        }
        let pop: Vec<T> = cells.iter().map(|c| T::lit(c.true_population as f64)).collect();
        let inc: Vec<T> = cells.iter().map(|c| T::lit(c.median_income)).collect();
        Ok(Self { population: Standardizer::fit(&pop), income: Standardizer::fit(&inc) })
    }

    pub fn apply(&self, cell: &CellRecord, k: usize) -> Result<FeatureVector<T>, FeatureError> {
        Ok(FeatureVector {
            poi_dist: poi_distribution(&cell.pois, k)?,
            population_z: self.population.apply(T::lit(cell.true_population as f64)),
            income_z: self.income.apply(T::lit(cell.median_income)),
        })
    }
}

/// Feature vectors for every cell of a city, with the fitted scaler and the
/// category vocabulary needed to rebuild them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix<T = f64> {
    pub categories: Vec<String>,
    pub scaler: FeatureScaler<T>,
    pub rows: Vec<FeatureVector<T>>,
}

#[derive(Serialize)]
struct Sidecar<'a, T> {
    categories: &'a [String],
    scaler: &'a FeatureScaler<T>,
}

impl<T: Real> FeatureMatrix<T> {
    pub fn build(city: &CityModel) -> Result<Self, FeatureError> {
        let scaler = FeatureScaler::fit(&city.cells)?;
        let rows = city.cells.iter().map(|c| scaler.apply(c, city.k())).collect::<Result<_, _>>()?;
        Ok(Self { categories: city.categories.clone(), scaler, rows })
    }

    pub fn dim(&self) -> usize {
        self.categories.len() + 2
    }

    pub fn inputs(&self) -> Vec<Vec<T>> {
        self.rows.iter().map(FeatureVector::to_vec).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), FeatureError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["cell_id".to_string()];
        header.extend((0..self.dim()).map(|i| format!("f_{i}")));
        out.write_record(&header)?;
        for (id, row) in self.rows.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(row.to_vec().iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `<stem>.csv` and the `<stem>.json` sidecar.
    pub fn save(&self, csv_path: &Path) -> Result<(), FeatureError> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(csv_path)?))?;
        let sidecar = Sidecar { categories: &self.categories, scaler: &self.scaler };
        let mut f = std::io::BufWriter::new(std::fs::File::create(csv_path.with_extension("json"))?);
        serde_json::to_writer_pretty(&mut f, &sidecar)?;
        f.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocalPoint;
    use crate::synth::{generate_city, AgeFractions, GenConfig};
    use proptest::prelude::*;

    fn pois(cats: &[usize]) -> Vec<Poi> {
        cats.iter().map(|&c| Poi { location: LocalPoint::new(0.0, 0.0), category: c }).collect()
    }

    fn cell(pop: u64, income: f64) -> CellRecord {
        CellRecord {
            id: 0,
            true_population: pop,
            median_income: income,
            age_fractions: AgeFractions { child: 0.2, adult: 0.6, senior: 0.2 },
            pois: pois(&[0]),
        }
    }

    #[test]
    fn distribution_examples() {
        assert_eq!(poi_distribution::<f64>(&pois(&[0, 0, 1, 2]), 3).unwrap(), vec![0.5, 0.25, 0.25]);
        assert_eq!(poi_distribution::<f64>(&[], 3).unwrap(), vec![0.0; 3]);
        assert_eq!(poi_distribution::<f32>(&pois(&[1, 1, 1]), 3).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(matches!(
            poi_distribution::<f64>(&pois(&[3]), 3),
            Err(FeatureError::CategoryOutOfRange { category: 3, k: 3 })
        ));
    }

    #[test]
    fn scaler_examples() {
        let cells = [cell(100, 10.0), cell(300, 30.0)];
        let s = FeatureScaler::<f64>::fit(&cells).unwrap();
        let a = s.apply(&cells[0], 1).unwrap();
        let b = s.apply(&cells[1], 1).unwrap();
        assert_eq!((a.income_z, b.income_z), (-1.0, 1.0));
        assert_eq!(s.income.apply(20.0), 0.0);
        assert_eq!(s.apply(&cells[0], 1).unwrap(), a);
        assert_eq!(a.len(), 3);
        assert!(matches!(FeatureScaler::<f64>::fit(&cells[..1]), Err(FeatureError::DegenerateScaler(1))));
        let flat = FeatureScaler::<f64>::fit(&[cell(5, 1.0), cell(5, 1.0)]).unwrap();
        assert_eq!(flat.apply(&cells[1], 1).unwrap().population_z, 0.0);
    }

    #[test]
    fn standardized_city_features() {
        let city = generate_city(&GenConfig::default()).unwrap();
        let m = FeatureMatrix::<f64>::build(&city).unwrap();
        let n = m.rows.len() as f64;
        for col in [|r: &FeatureVector| r.population_z, |r: &FeatureVector| r.income_z] {
            let xs: Vec<f64> = m.rows.iter().map(col).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
        for r in &m.rows {
            let s: f64 = r.poi_dist.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn distribution_is_a_permutation_invariant_simplex(cats in prop::collection::vec(0usize..5, 0..40), rot in 0usize..40) {
            let d = poi_distribution::<f64>(&pois(&cats), 5).unwrap();
            prop_assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
            let s: f64 = d.iter().sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
            let mut shuffled = cats.clone();
            if !shuffled.is_empty() {
                let len = shuffled.len();
                shuffled.rotate_left(rot % len);
                shuffled.reverse();
            }
            prop_assert_eq!(poi_distribution::<f64>(&pois(&shuffled), 5).unwrap(), d);
        }
    }
}
