//! Stay-point datasets and their CSV representation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{CellId, CityGrid, GeoPoint};

pub const STAYPOINT_HEADER: [&str; 10] = [
    "user_id",
    "seq_idx",
    "lat",
    "lon",
    "arrive_t",
    "leave_t",
    "duration_s",
    "dist_from_prev_m",
    "cell_id",
    "home_cell_id",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Row { line: u64, msg: String },
    #[error("unexpected header {0:?}")]
    Header(Vec<String>),
}

/// A stationary visit. `duration_s`, `dist_from_prev_m` and `cell` are derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayPoint {
    pub centroid: GeoPoint,
    pub arrive_t: i64,
    pub leave_t: i64,
    pub duration_s: i64,
    /// Absent for the first stay-point of a user.
    pub dist_from_prev_m: Option<f64>,
    /// Absent when the centroid falls outside the grid.
    pub cell: Option<CellId>,
}

impl StayPoint {
    pub fn new(centroid: GeoPoint, arrive_t: i64, leave_t: i64) -> Self {
        Self {
            centroid,
            arrive_t,
            leave_t,
            duration_s: leave_t - arrive_t,
            dist_from_prev_m: None,
            cell: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub staypoints: Vec<StayPoint>,
    pub home: CellId,
}

impl UserSequence {
    /// Stay-points located in `cell`.
    pub fn in_cell(&self, cell: CellId) -> impl Iterator<Item = &StayPoint> {
        self.staypoints.iter().filter(move |p| p.cell == Some(cell))
    }
}

/// Per-stay-point quantity a query aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Visits,
    Duration,
    Distance,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Visits, Attribute::Duration, Attribute::Distance];

    /// Value contributed by `p`; `None` means the stay-point is ignored for
    /// this attribute (first-stay-point distance).
    pub fn value(self, p: &StayPoint) -> Option<f64> {
        match self {
            Attribute::Visits => Some(1.0),
            Attribute::Duration => Some(p.duration_s as f64),
            Attribute::Distance => p.dist_from_prev_m,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Visits => "visits",
            Attribute::Duration => "duration",
            Attribute::Distance => "distance",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "visits" | "count" => Ok(Attribute::Visits),
            "duration" => Ok(Attribute::Duration),
            "distance" => Ok(Attribute::Distance),
            other => Err(format!("unknown attribute `{other}`")),
        }
    }
}

/// A set of user stay-point sequences, kept sorted by `user_id`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub users: Vec<UserSequence>,
}

impl Dataset {
    pub fn new(mut users: Vec<UserSequence>) -> Self {
        users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        Self { users }
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn staypoint_count(&self) -> usize {
        self.users.iter().map(|u| u.staypoints.len()).sum()
    }

    /// Users per home cell.
    pub fn home_counts(&self, cells: usize) -> Vec<u64> {
        let mut counts = vec![0u64; cells];
        for u in &self.users {
            if let Some(c) = counts.get_mut(u.home) {
                *c += 1;
            }
        }
        counts
    }

    /// Stay-points located in each cell.
    pub fn visit_counts(&self, cells: usize) -> Vec<u64> {
        let mut counts = vec![0u64; cells];
        for p in self.users.iter().flat_map(|u| &u.staypoints) {
            if let Some(c) = p.cell.and_then(|c| counts.get_mut(c)) {
                *c += 1;
            }
        }
        counts
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DatasetError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(STAYPOINT_HEADER)?;
        for u in &self.users {
            for (i, p) in u.staypoints.iter().enumerate() {
                out.write_record([
                    u.user_id.clone(),
                    i.to_string(),
                    p.centroid.lat.to_string(),
                    p.centroid.lon.to_string(),
                    p.arrive_t.to_string(),
                    p.leave_t.to_string(),
                    p.duration_s.to_string(),
                    p.dist_from_prev_m.map(|d| d.to_string()).unwrap_or_default(),
                    p.cell.map(|c| c.to_string()).unwrap_or_default(),
                    u.home.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, DatasetError> {
        let mut reader = csv::Reader::from_reader(r);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        if header != STAYPOINT_HEADER {
            return Err(DatasetError::Header(header));
        }
        let mut users: BTreeMap<String, UserSequence> = BTreeMap::new();
        for (idx, record) in reader.records().enumerate() {
            let line = idx as u64 + 2;
            let rec = record?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let bad = |what: &str| DatasetError::Row { line, msg: format!("invalid {what}") };
            let num = |i: usize, what: &str| field(i).parse::<f64>().map_err(|_| bad(what));
            let int = |i: usize, what: &str| field(i).parse::<i64>().map_err(|_| bad(what));
            let opt_num = |i: usize, what: &str| match field(i) {
                "" => Ok(None),
                s => s.parse::<f64>().map(Some).map_err(|_| bad(what)),
            };
            let seq_idx = field(1).parse::<usize>().map_err(|_| bad("seq_idx"))?;
            let centroid = GeoPoint::new(num(2, "lat")?, num(3, "lon")?)
                .map_err(|e| DatasetError::Row { line, msg: e.to_string() })?;
            let cell = opt_num(8, "cell_id")?.map(|c| c as CellId);
            let home = field(9).parse::<CellId>().map_err(|_| bad("home_cell_id"))?;
            let point = StayPoint {
                centroid,
                arrive_t: int(4, "arrive_t")?,
                leave_t: int(5, "leave_t")?,
                duration_s: int(6, "duration_s")?,
                dist_from_prev_m: opt_num(7, "dist_from_prev_m")?,
                cell,
            };
            let user = users.entry(field(0).to_owned()).or_insert_with(|| UserSequence {
                user_id: field(0).to_owned(),
                staypoints: Vec::new(),
                home,
            });
            if seq_idx != user.staypoints.len() {
                return Err(DatasetError::Row { line, msg: format!("seq_idx {seq_idx} out of order") });
            }
            user.staypoints.push(point);
        }
        Ok(Self { users: users.into_values().collect() })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    /// Recompute every stay-point's cell from its centroid.
    pub fn relocate(&mut self, grid: &CityGrid) {
        for p in self.users.iter_mut().flat_map(|u| u.staypoints.iter_mut()) {
            p.cell = grid.locate_geo(p.centroid).ok();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let mut a = StayPoint::new(GeoPoint { lat: 1.0, lon: 2.0 }, 100, 400);
        a.cell = Some(3);
        let mut b = StayPoint::new(GeoPoint { lat: 1.001, lon: 2.0005 }, 500, 2300);
        b.dist_from_prev_m = Some(123.456789);
        Dataset::new(vec![
            UserSequence { user_id: "u2".into(), staypoints: vec![a.clone()], home: 3 },
            UserSequence { user_id: "u1".into(), staypoints: vec![a, b], home: 3 },
        ])
    }

    #[test]
    fn csv_roundtrip_preserves_absent_fields() {
        let ds = sample();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("user_id,seq_idx,lat,lon,arrive_t,leave_t,duration_s,dist_from_prev_m,cell_id,home_cell_id\n"));
        assert!(text.contains("u1,0,1,2,100,400,300,,3,3\n"));
        assert!(text.contains("u1,1,1.001,2.0005,500,2300,1800,123.456789,,3\n"));
        assert_eq!(Dataset::read_csv(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn malformed_row_names_line() {
        let text = format!("{}\nu1,0,abc,2,100,400,300,,3,3\n", STAYPOINT_HEADER.join(","));
        match Dataset::read_csv(text.as_bytes()) {
            Err(DatasetError::Row { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn counts() {
        let ds = sample();
        assert_eq!(ds.home_counts(4), vec![0, 0, 0, 2]);
        assert_eq!(ds.visit_counts(4), vec![0, 0, 0, 2]);
        assert_eq!(ds.staypoint_count(), 3);
    }
}
