//! Local planar projection, Euclidean distance and grid cell lookup.
//!
//! Coordinates are projected equirectangularly around a city origin; at city
//! scale (tens of kilometres) the planar distance error stays well below 0.1%.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;

/// Mean Earth radius in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Largest latitude/longitude offset from the origin accepted by [`project`].
pub const MAX_OFFSET_DEG: f64 = 0.5;

/// Cell identifier, `row * cols + col`.
pub type CellId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinate out of range: lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("point ({x}, {y}) lies outside the grid extent")]
    OutsideExtent { x: f64, y: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::InvalidCoordinate { lat, lon });
        }
        Ok(Self { lat, lon })
    }
}

/// Metres east (`x`) and north (`y`) of a city origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalPoint<T = f64> {
    pub x: T,
    pub y: T,
}

impl<T> LocalPoint<T> {
    pub const fn new(x: T, y: T) -> Self {
        Self { x, y }
    }
}

impl<T: Real> LocalPoint<T> {
    pub fn cast<U: Real>(self) -> LocalPoint<U> {
        LocalPoint::new(U::lit(self.x.as_f64()), U::lit(self.y.as_f64()))
    }
}

/// Equirectangular projection of `p` around `origin`.
pub fn project<T: Real>(p: GeoPoint, origin: GeoPoint) -> Result<LocalPoint<T>, GeoError> {
    let dlat = p.lat - origin.lat;
    let dlon = p.lon - origin.lon;
    if !dlat.is_finite()
        || !dlon.is_finite()
        || dlat.abs() > MAX_OFFSET_DEG
        || dlon.abs() > MAX_OFFSET_DEG
    {
        return Err(GeoError::OutsideExtent { x: dlon, y: dlat });
    }
    let x = EARTH_RADIUS_M * origin.lat.to_radians().cos() * dlon.to_radians();
    let y = EARTH_RADIUS_M * dlat.to_radians();
    Ok(LocalPoint::new(T::lit(x), T::lit(y)))
}

/// Inverse of [`project`].
pub fn unproject<T: Real>(p: LocalPoint<T>, origin: GeoPoint) -> GeoPoint {
    let lat = origin.lat + (p.y.as_f64() / EARTH_RADIUS_M).to_degrees();
    let lon =
        origin.lon + (p.x.as_f64() / (EARTH_RADIUS_M * origin.lat.to_radians().cos())).to_degrees();
    GeoPoint { lat, lon }
}

pub fn euclid<T: Real>(a: LocalPoint<T>, b: LocalPoint<T>) -> T {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Regular square-cell grid anchored at its south-west corner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityGrid {
    pub origin: GeoPoint,
    pub cell_size_m: f64,
    pub rows: usize,
    pub cols: usize,
}

impl CityGrid {
    pub fn new(origin: GeoPoint, cell_size_m: f64, rows: usize, cols: usize) -> Result<Self, GeoError> {
        let grid = Self { origin, cell_size_m, rows, cols };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(GeoError::InvalidGrid("rows and cols must be positive".into()));
        }
        if !(self.cell_size_m.is_finite() && self.cell_size_m > 0.0) {
            return Err(GeoError::InvalidGrid(format!("cell size {}", self.cell_size_m)));
        }
        GeoPoint::new(self.origin.lat, self.origin.lon)
            .map_err(|e| GeoError::InvalidGrid(e.to_string()))?;
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn width_m(&self) -> f64 {
        self.cols as f64 * self.cell_size_m
    }

    pub fn height_m(&self) -> f64 {
        self.rows as f64 * self.cell_size_m
    }

    /// Cell containing `p`. Points on an interior edge go to the higher-index
    /// cell; points on the outer north/east edges go to the last row/column.
    pub fn locate<T: Real>(&self, p: LocalPoint<T>) -> Result<CellId, GeoError> {
        let (x, y) = (p.x.as_f64(), p.y.as_f64());
        let outside = !x.is_finite()
            || !y.is_finite()
            || x < 0.0
            || y < 0.0
            || x > self.width_m()
            || y > self.height_m();
        if outside {
            return Err(GeoError::OutsideExtent { x, y });
        }
        let col = ((x / self.cell_size_m).floor() as usize).min(self.cols - 1);
        let row = ((y / self.cell_size_m).floor() as usize).min(self.rows - 1);
        Ok(row * self.cols + col)
    }

    pub fn locate_geo(&self, p: GeoPoint) -> Result<CellId, GeoError> {
        self.locate(project::<f64>(p, self.origin)?)
    }

    /// South-west corner of a cell in local coordinates.
    pub fn cell_origin(&self, cell: CellId) -> LocalPoint {
        let row = cell / self.cols;
        let col = cell % self.cols;
        LocalPoint::new(col as f64 * self.cell_size_m, row as f64 * self.cell_size_m)
    }

    pub fn cell_center(&self, cell: CellId) -> LocalPoint {
        let o = self.cell_origin(cell);
        let h = self.cell_size_m / 2.0;
        LocalPoint::new(o.x + h, o.y + h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid2() -> CityGrid {
        CityGrid::new(GeoPoint { lat: 0.0, lon: 0.0 }, 100.0, 2, 2).unwrap()
    }

    #[test]
    fn project_identity() {
        let o = GeoPoint::new(34.05, -118.25).unwrap();
        let p: LocalPoint = project(o, o).unwrap();
        assert_eq!(p, LocalPoint::new(0.0, 0.0));
    }

    #[test]
    fn project_north_offset() {
        // 6_371_000 * 0.01 * pi / 180
        let expected = 6_371_000.0 * 0.01 * std::f64::consts::PI / 180.0;
        assert_abs_diff_eq!(expected, 1111.949266, epsilon = 1e-6);
        let o = GeoPoint::new(34.0, -118.0).unwrap();
        let p: LocalPoint = project(GeoPoint { lat: 34.01, lon: -118.0 }, o).unwrap();
        assert_abs_diff_eq!(p.x, 0.0);
        assert_abs_diff_eq!(p.y, 1111.95, epsilon = 0.01);
    }

    #[test]
    fn project_east_offset_at_sixty() {
        let o = GeoPoint::new(60.0, 10.0).unwrap();
        let p: LocalPoint = project(GeoPoint { lat: 60.0, lon: 10.01 }, o).unwrap();
        assert_abs_diff_eq!(p.x, 555.97, epsilon = 0.01);
        assert_abs_diff_eq!(p.y, 0.0);
    }

    #[test]
    fn project_rejects_far_points() {
        let o = GeoPoint::new(40.0, -74.0).unwrap();
        assert!(project::<f64>(GeoPoint { lat: 41.0, lon: -74.0 }, o).is_err());
    }

    #[test]
    fn euclid_examples() {
        let p = LocalPoint::new(2.5, -1.0);
        assert_eq!(euclid(p, p), 0.0);
        assert_eq!(euclid(LocalPoint::new(0.0, 0.0), LocalPoint::new(3.0, 4.0)), 5.0);
        assert_eq!(euclid(LocalPoint::new(1.0f32, 1.0), LocalPoint::new(4.0, 5.0)), 5.0);
    }

    #[test]
    fn locate_examples() {
        let g = grid2();
        assert_eq!(g.locate(LocalPoint::new(0.0, 0.0)).unwrap(), 0);
        assert_eq!(g.locate(LocalPoint::new(150.0, 50.0)).unwrap(), 1);
        assert_eq!(g.locate(LocalPoint::new(100.0, 100.0)).unwrap(), 3);
        assert_eq!(g.locate(LocalPoint::new(200.0, 200.0)).unwrap(), 3);
        assert_eq!(g.locate(LocalPoint::new(200.0, 0.0)).unwrap(), 1);
        assert!(g.locate(LocalPoint::new(-0.1, 5.0)).is_err());
        assert!(g.locate(LocalPoint::new(5.0, 200.1)).is_err());
    }

    #[test]
    fn locate_partitions_extent() {
        let g = CityGrid::new(GeoPoint { lat: 0.0, lon: 0.0 }, 10.0, 3, 4).unwrap();
        let mut counts = vec![0usize; g.cell_count()];
        // 0.5 m lattice over the closed extent
        for i in 0..=80 {
            for j in 0..=60 {
                let p = LocalPoint::new(i as f64 * 0.5, j as f64 * 0.5);
                counts[g.locate(p).unwrap()] += 1;
            }
        }
        assert_eq!(counts.iter().sum::<usize>(), 81 * 61);
        assert!(counts.iter().all(|&c| c > 0));
        // interior cell owns exactly its half-open 20x20 block of lattice points
        assert_eq!(counts[5], 20 * 20);
    }

    proptest! {
        #[test]
        fn triangle_inequality(ax in -4e4..4e4f64, ay in -4e4..4e4f64,
                               bx in -4e4..4e4f64, by in -4e4..4e4f64,
                               cx in -4e4..4e4f64, cy in -4e4..4e4f64) {
            let (a, b, c) = (LocalPoint::new(ax, ay), LocalPoint::new(bx, by), LocalPoint::new(cx, cy));
            prop_assert!(euclid(a, c) <= euclid(a, b) + euclid(b, c) + 1e-9);
            prop_assert_eq!(euclid(a, b), euclid(b, a));
        }

        #[test]
        fn projection_inverts(lat0 in -60.0..60.0f64, lon0 in -170.0..170.0f64,
                              dlat in -0.18..0.18f64, dlon in -0.18..0.18f64) {
            let o = GeoPoint { lat: lat0, lon: lon0 };
            let p = GeoPoint { lat: lat0 + dlat, lon: lon0 + dlon };
            let local: LocalPoint = project(p, o).unwrap();
            let back = unproject(local, o);
            prop_assert!((back.lat - p.lat).abs() < 1e-6);
            prop_assert!((back.lon - p.lon).abs() < 1e-6);
        }
    }
}
