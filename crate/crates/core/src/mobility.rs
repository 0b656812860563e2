//! Trajectories to OD datasets: trip extraction, time grouping, aggregation,
//! splitting, and a synthetic trajectory generator with a planted gravity law.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDate, Timelike};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::FlowMatrix;
use crate::dynmap::DynamicMap;

#[derive(Debug, Error)]
pub enum MobilityError {
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("split of {entries} entries at fraction {fraction} leaves one side empty")]
    EmptySplit { entries: usize, fraction: f64 },
    #[error("matrix has {got} cells, dataset expects {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("dataset is for map {found:?}, expected {expected:?}")]
    MapMismatch { expected: String, found: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MobilityError>;

/// One GPS fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub user_id: String,
    pub timestamp: i64,
    pub x: f64,
    pub y: f64,
}

/// One of the six daily time groups, ids 1 to 6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct TimeGroup(u8);

const GROUP_LABELS: [&str; 6] = [
    "Morning Travel",
    "Work Morning",
    "Lunch Travel",
    "Work Afternoon",
    "Dinner Travel",
    "Night",
];
const GROUP_START: [u32; 6] = [5, 8, 11, 14, 17, 20];

impl TimeGroup {
    pub const ALL: [TimeGroup; 6] = [
        TimeGroup(1),
        TimeGroup(2),
        TimeGroup(3),
        TimeGroup(4),
        TimeGroup(5),
        TimeGroup(6),
    ];
    pub const NIGHT: TimeGroup = TimeGroup(6);

    pub fn new(id: u8) -> Option<Self> {
        (1..=6).contains(&id).then_some(TimeGroup(id))
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn label(self) -> &'static str {
        GROUP_LABELS[self.0 as usize - 1]
    }

    pub fn start_hour(self) -> u32 {
        GROUP_START[self.0 as usize - 1]
    }

    /// Exclusive; the night group ends at 05:00 the following morning.
    pub fn end_hour(self) -> u32 {
        GROUP_START[self.0 as usize % 6]
    }

    pub fn from_hour(hour: u32) -> Self {
        assert!(hour < 24, "hour {hour}");
        match hour {
            5..=7 => TimeGroup(1),
            8..=10 => TimeGroup(2),
            11..=13 => TimeGroup(3),
            14..=16 => TimeGroup(4),
            17..=19 => TimeGroup(5),
            _ => TimeGroup(6),
        }
    }

    /// Local `[start, end)` second-of-day intervals covered on one calendar date.
    fn intervals(self) -> Vec<(i64, i64)> {
        let h = |x: u32| x as i64 * 3600;
        if self == TimeGroup::NIGHT {
            vec![(0, h(5)), (h(20), h(24))]
        } else {
            vec![(h(self.start_hour()), h(self.end_hour()))]
        }
    }
}

impl TryFrom<u8> for TimeGroup {
    type Error = String;
    fn try_from(id: u8) -> std::result::Result<Self, String> {
        TimeGroup::new(id).ok_or_else(|| format!("time group {id} not in 1..=6"))
    }
}

impl From<TimeGroup> for u8 {
    fn from(g: TimeGroup) -> u8 {
        g.0
    }
}

/// Local calendar date and time group of a UTC timestamp. Night hours after
/// midnight stay on their own date.
pub fn local_slot(timestamp: i64, tz_offset_secs: i32) -> (NaiveDate, TimeGroup) {
    let local = DateTime::from_timestamp(timestamp + tz_offset_secs as i64, 0)
        .expect("timestamp within chrono range")
        .naive_utc();
    (local.date(), TimeGroup::from_hour(local.hour()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trip {
    pub user_id: String,
    pub origin: usize,
    pub dest: usize,
    pub depart_ts: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub trips: Vec<Trip>,
    /// Records that fell outside the map extent.
    pub outside: usize,
}

/// Cell-transition trips. Records are grouped per user (users in order of
/// first appearance) and stably sorted by time; consecutive records in the
/// same cell form a stay and every change of cell is one trip departing at
/// the last record of the origin stay.
pub fn extract_trips<I>(records: I, map: &DynamicMap) -> Extraction
where
    I: IntoIterator<Item = TrajectoryRecord>,
{
    let mut order: Vec<String> = Vec::new();
    let mut per_user: HashMap<String, Vec<(i64, usize)>> = HashMap::new();
    let mut outside = 0;
    for r in records {
        let Ok(cell) = map.locate(r.x, r.y) else {
            outside += 1;
            continue;
        };
        let seq = per_user.entry(r.user_id.clone()).or_insert_with(|| {
            order.push(r.user_id.clone());
            Vec::new()
        });
        seq.push((r.timestamp, cell));
    }

    let mut trips = Vec::new();
    for user in order {
        let mut seq = per_user.remove(&user).expect("user recorded");
        seq.sort_by_key(|&(t, _)| t);
        let mut iter = seq.into_iter();
        let Some((mut last_ts, mut cell)) = iter.next() else {
            continue;
        };
        for (t, c) in iter {
            if c != cell {
                trips.push(Trip {
                    user_id: user.clone(),
                    origin: cell,
                    dest: c,
                    depart_ts: last_ts,
                });
                cell = c;
            }
            last_ts = t;
        }
    }
    Extraction { trips, outside }
}

/// OD matrices of one map keyed by (local date, time group).
#[derive(Debug, Clone, PartialEq)]
pub struct ODDataset {
    map_name: String,
    n: usize,
    entries: BTreeMap<(NaiveDate, TimeGroup), FlowMatrix>,
}

impl ODDataset {
    pub fn new(map_name: impl Into<String>, n: usize) -> Self {
        ODDataset {
            map_name: map_name.into(),
            n,
            entries: BTreeMap::new(),
        }
    }

    pub fn map_name(&self) -> &str {
        &self.map_name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, day: NaiveDate, group: TimeGroup) -> Option<&FlowMatrix> {
        self.entries.get(&(day, group))
    }

    /// Entries in (date, group) order.
    pub fn entries(&self) -> impl Iterator<Item = (NaiveDate, TimeGroup, &FlowMatrix)> {
        self.entries.iter().map(|(&(d, g), m)| (d, g, m))
    }

    /// Adds `m` into the (day, group) entry, creating it if needed.
    pub fn accumulate(&mut self, day: NaiveDate, group: TimeGroup, m: &FlowMatrix) -> Result<()> {
        if m.n() != self.n {
            return Err(MobilityError::SizeMismatch {
                expected: self.n,
                got: m.n(),
            });
        }
        self.entries
            .entry((day, group))
            .or_insert_with(|| FlowMatrix::zeros(self.n))
            .merge(m);
        Ok(())
    }

    /// Elementwise sum of two partial datasets of the same map.
    pub fn merge(&mut self, other: &ODDataset) -> Result<()> {
        if other.map_name != self.map_name {
            return Err(MobilityError::MapMismatch {
                expected: self.map_name.clone(),
                found: other.map_name.clone(),
            });
        }
        for (d, g, m) in other.entries() {
            self.accumulate(d, g, m)?;
        }
        Ok(())
    }

    /// Inserts all-zero matrices for every missing slot from `first` to `last`.
    pub fn fill_range(&mut self, first: NaiveDate, last: NaiveDate) {
        for day in first.iter_days().take_while(|d| *d <= last) {
            for g in TimeGroup::ALL {
                self.entries
                    .entry((day, g))
                    .or_insert_with(|| FlowMatrix::zeros(self.n));
            }
        }
    }

    pub fn total_trips(&self) -> u64 {
        self.entries.values().map(FlowMatrix::total).sum()
    }

    /// Sum over all entries.
    pub fn pooled(&self) -> FlowMatrix {
        let mut m = FlowMatrix::zeros(self.n);
        for e in self.entries.values() {
            m.merge(e);
        }
        m
    }

    pub fn date_range(&self) -> Option<(NaiveDate, NaiveDate)> {
        let first = self.entries.keys().next()?.0;
        let last = self.entries.keys().next_back()?.0;
        Some((first, last))
    }

    fn subset(&self, keys: &[(NaiveDate, TimeGroup)]) -> ODDataset {
        ODDataset {
            map_name: self.map_name.clone(),
            n: self.n,
            entries: keys.iter().map(|k| (*k, self.entries[k].clone())).collect(),
        }
    }

    /// Sparse `day,group,origin,dest,count` rows (nonzero counts only).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["day", "group", "origin", "dest", "count"])?;
        for (day, g, m) in self.entries() {
            for i in 0..self.n {
                for j in 0..self.n {
                    let c = m.get(i, j);
                    if c > 0 {
                        w.write_record([
                            day.to_string(),
                            g.id().to_string(),
                            i.to_string(),
                            j.to_string(),
                            c.to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads rows written by [`ODDataset::write_csv`]. `slots` lists every
    /// (day, group) entry so that all-zero matrices survive the round trip.
    pub fn read_csv<R: Read>(
        input: R,
        map: &DynamicMap,
        slots: &[(NaiveDate, TimeGroup)],
    ) -> Result<ODDataset> {
        let mut ds = ODDataset::new(map.name(), map.len());
        for &(d, g) in slots {
            ds.entries.insert((d, g), FlowMatrix::zeros(ds.n));
        }
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["day", "group", "origin", "dest", "count"] {
            return Err(MobilityError::Parse {
                line: 1,
                message: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
            });
        }
        for (k, row) in rdr.deserialize::<(NaiveDate, u8, usize, usize, u64)>().enumerate() {
            let line = k + 2;
            let err = |message: String| MobilityError::Parse { line, message };
            let (day, g, i, j, c) = row.map_err(|e| err(e.to_string()))?;
            let group = TimeGroup::new(g).ok_or_else(|| err(format!("time group {g}")))?;
            if i >= ds.n || j >= ds.n || i == j {
                return Err(err(format!("cell pair ({i}, {j}) invalid for {} cells", ds.n)));
            }
            let m = ds
                .entries
                .entry((day, group))
                .or_insert_with(|| FlowMatrix::zeros(map.len()));
            m.add(i, j, c);
        }
        Ok(ds)
    }
}

/// Counts every trip into the matrix of its local departure slot.
pub fn aggregate(trips: &[Trip], map: &DynamicMap, tz_offset_secs: i32) -> ODDataset {
    let mut ds = ODDataset::new(map.name(), map.len());
    for t in trips {
        let slot = local_slot(t.depart_ts, tz_offset_secs);
        ds.entries
            .entry(slot)
            .or_insert_with(|| FlowMatrix::zeros(map.len()))
            .add(t.origin, t.dest, 1);
    }
    ds
}

/// Deterministic shuffle-and-cut of the (day, group) entries.
pub fn split_dataset(dataset: &ODDataset, train_fraction: f64, seed: u64) -> Result<(ODDataset, ODDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(MobilityError::InvalidFraction(train_fraction));
    }
    let mut keys: Vec<_> = dataset.entries.keys().copied().collect();
    let cut = (train_fraction * keys.len() as f64).round() as usize;
    if cut == 0 || cut == keys.len() {
        return Err(MobilityError::EmptySplit {
            entries: keys.len(),
            fraction: train_fraction,
        });
    }
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((dataset.subset(&keys[..cut]), dataset.subset(&keys[cut..])))
}

/// Parses `user_id,timestamp,x,y`; returns the records and the number of
/// malformed lines skipped.
pub fn read_records<R: Read>(input: R) -> Result<(Vec<TrajectoryRecord>, usize)> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["user_id", "timestamp", "x", "y"] {
        return Err(MobilityError::Parse {
            line: 1,
            message: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut out = Vec::new();
    let mut malformed = 0;
    for rec in rdr.deserialize::<TrajectoryRecord>() {
        match rec {
            Ok(r) if r.x.is_finite() && r.y.is_finite() => out.push(r),
            _ => malformed += 1,
        }
    }
    Ok((out, malformed))
}

pub fn write_records<W: Write>(records: &[TrajectoryRecord], out: W) -> Result<()> {
    // Header written by hand so an empty corpus still gets one.
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["user_id", "timestamp", "x", "y"])?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Parameters of the synthetic city.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub days: usize,
    pub start_date: NaiveDate,
    #[serde(default)]
    pub tz_offset_secs: i32,
    /// Planted distance-decay exponent.
    pub gamma: f64,
    /// Mean trips per user in each time group (Morning Travel first).
    pub intensities: [f64; 6],
    /// One attraction weight per zone-map cell.
    pub masses: Vec<f64>,
}

impl SynthConfig {
    fn validate(&self, zones: &DynamicMap) -> Result<()> {
        let bad = |m: String| Err(MobilityError::InvalidConfig(m));
        if self.masses.len() != zones.len() {
            return bad(format!("{} masses for {} zones", self.masses.len(), zones.len()));
        }
        if let Some(m) = self.masses.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
            return bad(format!("mass {m} is not positive"));
        }
        if let Some(i) = self.intensities.iter().find(|i| !(i.is_finite() && **i >= 0.0)) {
            return bad(format!("intensity {i} is negative"));
        }
        if !self.gamma.is_finite() {
            return bad(format!("gamma {}", self.gamma));
        }
        Ok(())
    }
}

/// Masses from a few Gaussian activity hotspots over a unit floor.
pub fn hotspot_masses(zones: &DynamicMap, hotspots: &[(f64, f64, f64, f64)]) -> Vec<f64> {
    zones
        .cells()
        .iter()
        .map(|c| {
            let (x, y) = c.centroid();
            1.0 + hotspots
                .iter()
                .map(|&(hx, hy, weight, radius)| {
                    let d2 = (x - hx).powi(2) + (y - hy).powi(2);
                    weight * (-d2 / (2.0 * radius * radius)).exp()
                })
                .sum::<f64>()
        })
        .collect()
}

/// Synthetic trajectories over the cells of `zones`.
///
/// Each user starts in a home cell drawn by mass and walks from cell to cell:
/// every trip picks its destination `j` (never the current cell) with weight
/// `mass_j / d^gamma`. Trip counts per user, day and time group are Poisson.
/// Because the walk is reversible, its long-run OD flows follow
/// `T_ij ∝ mass_i · mass_j / d_ij^gamma`. Every trip emits a record at the
/// origin at departure and one at the destination shortly after.
pub fn synth_city(config: &SynthConfig, zones: &DynamicMap, seed: u64) -> Result<Vec<TrajectoryRecord>> {
    config.validate(zones)?;
    let n = zones.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if n < 2 || config.users == 0 {
        return Ok(Vec::new());
    }
    let home = WeightedIndex::new(&config.masses).expect("validated masses");
    let dest: Vec<WeightedIndex<f64>> = (0..n)
        .map(|i| {
            let w = (0..n).map(|j| {
                if i == j {
                    0.0
                } else {
                    config.masses[j] / zones.centroid_distance(i, j).powf(config.gamma)
                }
            });
            WeightedIndex::new(w).expect("at least one other zone")
        })
        .collect();
    let counts: Vec<Option<Poisson<f64>>> = config
        .intensities
        .iter()
        .map(|&l| (l > 0.0).then(|| Poisson::new(l).expect("validated intensity")))
        .collect();
    let width = (config.users.max(1) - 1).to_string().len();

    let mut records = Vec::new();
    for u in 0..config.users {
        let user_id = format!("u{u:0width$}");
        let mut cell = home.sample(&mut rng);
        for day in config.start_date.iter_days().take(config.days) {
            let midnight = day.and_hms_opt(0, 0, 0).expect("valid time").and_utc().timestamp()
                - config.tz_offset_secs as i64;
            let mut departs = Vec::new();
            for (g, dist) in TimeGroup::ALL.iter().zip(&counts) {
                let Some(dist) = dist else { continue };
                let k = dist.sample(&mut rng) as usize;
                let spans = g.intervals();
                let total: i64 = spans.iter().map(|(a, b)| b - a).sum();
                for _ in 0..k {
                    let mut s = rng.random_range(0..total);
                    for &(a, b) in &spans {
                        if s < b - a {
                            departs.push(midnight + a + s);
                            break;
                        }
                        s -= b - a;
                    }
                }
            }
            departs.sort_unstable();
            for (k, &t) in departs.iter().enumerate() {
                let next = dest[cell].sample(&mut rng);
                // Arrive within ten minutes, before the next departure.
                let arrive = match departs.get(k + 1) {
                    Some(&t2) => (t + 600).min(t + (t2 - t) / 2),
                    None => t + 600,
                };
                let (ox, oy) = point_in(zones, cell, &mut rng);
                let (dx, dy) = point_in(zones, next, &mut rng);
                records.push(TrajectoryRecord {
                    user_id: user_id.clone(),
                    timestamp: t,
                    x: ox,
                    y: oy,
                });
                records.push(TrajectoryRecord {
                    user_id: user_id.clone(),
                    timestamp: arrive,
                    x: dx,
                    y: dy,
                });
                cell = next;
            }
        }
    }
    Ok(records)
}

/// Uniform point strictly inside a cell, rounded to centimetres.
fn point_in<R: Rng>(zones: &DynamicMap, cell: usize, rng: &mut R) -> (f64, f64) {
    let c = &zones.cells()[cell];
    let side = c.side as f64;
    let pick = |rng: &mut R, min: i64| {
        let v = min as f64 + rng.random_range(0.01..side - 0.01);
        (v * 100.0).round() / 100.0
    };
    (pick(rng, c.min_x), pick(rng, c.min_y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynmap::{build_map, build_map_with_levels, GridLevels, Rect, RefinementSpec};
    use proptest::prelude::*;

    fn grid_map() -> DynamicMap {
        // 4×3 uniform 12 km grid.
        build_map(
            Rect::new(0, 0, 48_000, 36_000),
            &RefinementSpec {
                name: "G".into(),
                mid_rects: vec![],
                fine_rects: vec![],
            },
        )
        .unwrap()
    }

    fn rec(user: &str, t: i64, cell: usize, map: &DynamicMap) -> TrajectoryRecord {
        let (x, y) = map.cells()[cell].centroid();
        TrajectoryRecord {
            user_id: user.into(),
            timestamp: t,
            x,
            y,
        }
    }

    fn day0() -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 3, 1).unwrap()
    }

    fn ts(day: NaiveDate, h: u32, m: u32) -> i64 {
        day.and_hms_opt(h, m, 0).unwrap().and_utc().timestamp()
    }

    #[test]
    fn time_groups_partition_the_day() {
        for h in 0..24 {
            let g = TimeGroup::from_hour(h);
            let covered = g
                .intervals()
                .iter()
                .filter(|(a, b)| (*a..*b).contains(&(h as i64 * 3600)))
                .count();
            assert_eq!(covered, 1, "hour {h}");
        }
        assert_eq!(TimeGroup::from_hour(4), TimeGroup::NIGHT);
        assert_eq!(TimeGroup::from_hour(5).id(), 1);
        assert_eq!(TimeGroup::from_hour(20).id(), 6);
        assert_eq!(TimeGroup::new(2).unwrap().label(), "Work Morning");
        assert_eq!(TimeGroup::NIGHT.end_hour(), 5);
        let total: i64 = TimeGroup::ALL
            .iter()
            .flat_map(|g| g.intervals())
            .map(|(a, b)| b - a)
            .sum();
        assert_eq!(total, 86_400);
    }

    #[test]
    fn slot_boundaries() {
        let d = day0();
        assert_eq!(local_slot(ts(d, 4, 59), 0), (d, TimeGroup::NIGHT));
        assert_eq!(local_slot(ts(d, 5, 0), 0).1.id(), 1);
        assert_eq!(local_slot(ts(d, 23, 30), 0), (d, TimeGroup::NIGHT));
        // 22:00 UTC is 06:00 next day at UTC+8.
        let (day, g) = local_slot(ts(d, 22, 0), 8 * 3600);
        assert_eq!(day, d.succ_opt().unwrap());
        assert_eq!(g.id(), 1);
    }

    #[test]
    fn trip_extraction_rules() {
        let map = grid_map();
        let recs = |cells: &[usize]| -> Vec<TrajectoryRecord> {
            cells.iter().enumerate().map(|(k, &c)| rec("a", k as i64 * 10, c, &map)).collect()
        };
        let t = extract_trips(recs(&[0, 0, 1]), &map).trips;
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].origin, t[0].dest, t[0].depart_ts), (0, 1, 10));
        let t = extract_trips(recs(&[0, 1, 0]), &map).trips;
        assert_eq!(
            t.iter().map(|t| (t.origin, t.dest)).collect::<Vec<_>>(),
            vec![(0, 1), (1, 0)]
        );
        assert!(extract_trips(recs(&[3, 3, 3]), &map).trips.is_empty());
    }

    #[test]
    fn extraction_sorts_per_user_and_skips_outside() {
        let map = grid_map();
        let mut input = vec![
            rec("b", 50, 2, &map),
            rec("a", 20, 1, &map),
            rec("b", 10, 0, &map),
            rec("a", 10, 0, &map),
        ];
        input.push(TrajectoryRecord {
            user_id: "a".into(),
            timestamp: 15,
            x: -5.0,
            y: 0.0,
        });
        let ex = extract_trips(input, &map);
        assert_eq!(ex.outside, 1);
        let got: Vec<_> = ex.trips.iter().map(|t| (t.user_id.as_str(), t.origin, t.dest, t.depart_ts)).collect();
        assert_eq!(got, vec![("b", 0, 2, 10), ("a", 0, 1, 10)]);
    }

    #[test]
    fn aggregation_counts_slots() {
        let map = grid_map();
        let d = day0();
        let trip = |o, dst, t| Trip {
            user_id: "u".into(),
            origin: o,
            dest: dst,
            depart_ts: t,
        };
        let trips = vec![
            trip(0, 1, ts(d, 9, 30)),
            trip(0, 1, ts(d, 9, 45)),
            trip(2, 3, ts(d, 4, 59)),
            trip(2, 3, ts(d, 5, 0)),
        ];
        let ds = aggregate(&trips, &map, 0);
        assert_eq!(ds.get(d, TimeGroup::new(2).unwrap()).unwrap().get(0, 1), 2);
        assert_eq!(ds.get(d, TimeGroup::NIGHT).unwrap().get(2, 3), 1);
        assert_eq!(ds.get(d, TimeGroup::new(1).unwrap()).unwrap().get(2, 3), 1);
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.total_trips(), 4);
    }

    #[test]
    fn split_is_deterministic_disjoint_and_exhaustive() {
        let map = grid_map();
        let mut ds = ODDataset::new("G", map.len());
        ds.fill_range(day0(), day0() + chrono::Days::new(4));
        assert_eq!(ds.len(), 30);
        let (a, b) = split_dataset(&ds, 0.5, 7).unwrap();
        assert_eq!((a.len(), b.len()), (15, 15));
        let (a2, _) = split_dataset(&ds, 0.5, 7).unwrap();
        assert_eq!(a, a2);
        let mut keys: Vec<_> = a.entries().chain(b.entries()).map(|(d, g, _)| (d, g)).collect();
        keys.sort();
        let all: Vec<_> = ds.entries().map(|(d, g, _)| (d, g)).collect();
        assert_eq!(keys, all);
        assert!(matches!(split_dataset(&ds, 0.0, 1), Err(MobilityError::InvalidFraction(_))));
        assert!(matches!(split_dataset(&ds, 0.99, 1), Err(MobilityError::EmptySplit { .. })));
    }

    #[test]
    fn dataset_csv_round_trip_keeps_empty_slots() {
        let map = grid_map();
        let d = day0();
        let trips = vec![Trip {
            user_id: "u".into(),
            origin: 1,
            dest: 4,
            depart_ts: ts(d, 12, 0),
        }];
        let mut ds = aggregate(&trips, &map, 0);
        ds.fill_range(d, d);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "day,group,origin,dest,count\n2024-03-01,3,1,4,1\n");
        let slots: Vec<_> = ds.entries().map(|(d, g, _)| (d, g)).collect();
        let back = ODDataset::read_csv(&buf[..], &map, &slots).unwrap();
        assert_eq!(back, ds);
        let bad = b"day,group,origin,dest,count\n2024-03-01,7,1,4,1\n";
        assert!(matches!(
            ODDataset::read_csv(&bad[..], &map, &slots),
            Err(MobilityError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn record_csv_counts_malformed_lines() {
        let text = "user_id,timestamp,x,y\na,1,2.5,3\nb,notanumber,1,1\nc,5,1\nd,6,7,8\n";
        let (recs, bad) = read_records(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(bad, 2);
        let mut out = Vec::new();
        write_records(&recs, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "user_id,timestamp,x,y\na,1,2.5,3.0\nd,6,7.0,8.0\n");
    }

    fn synth(users: usize, days: usize, intensity: f64, map: &DynamicMap) -> SynthConfig {
        SynthConfig {
            users,
            days,
            start_date: day0(),
            tz_offset_secs: 8 * 3600,
            gamma: 2.0,
            intensities: [intensity; 6],
            masses: (0..map.len()).map(|i| 1.0 + i as f64).collect(),
        }
    }

    #[test]
    fn synth_edge_cases() {
        let map = grid_map();
        assert!(synth_city(&synth(10, 2, 0.0, &map), &map, 1).unwrap().is_empty());
        let single = build_map_with_levels(
            Rect::new(0, 0, 12_000, 12_000),
            GridLevels::default(),
            &RefinementSpec {
                name: "one".into(),
                mid_rects: vec![],
                fine_rects: vec![],
            },
        )
        .unwrap();
        let cfg = SynthConfig {
            masses: vec![1.0],
            ..synth(10, 2, 1.0, &map)
        };
        assert!(synth_city(&cfg, &single, 1).unwrap().is_empty());
        let mut bad = synth(1, 1, 1.0, &map);
        bad.masses[3] = 0.0;
        assert!(matches!(synth_city(&bad, &map, 1), Err(MobilityError::InvalidConfig(_))));
        bad = synth(1, 1, -1.0, &map);
        assert!(matches!(synth_city(&bad, &map, 1), Err(MobilityError::InvalidConfig(_))));
    }

    #[test]
    fn synthetic_trips_survive_extraction_and_stay_in_range() {
        let map = grid_map();
        let cfg = synth(40, 3, 0.7, &map);
        let recs = synth_city(&cfg, &map, 3).unwrap();
        assert_eq!(recs, synth_city(&cfg, &map, 3).unwrap());
        let ex = extract_trips(recs.clone(), &map);
        assert_eq!(ex.outside, 0);
        assert_eq!(ex.trips.len(), recs.len() / 2);
        let ds = aggregate(&ex.trips, &map, cfg.tz_offset_secs);
        assert_eq!(ds.total_trips(), ex.trips.len() as u64);
        let (first, last) = ds.date_range().unwrap();
        assert!(first >= day0() && last < day0() + chrono::Days::new(3));
    }

    proptest! {
        #[test]
        fn extracted_trips_never_self_loop(cells in proptest::collection::vec(0usize..12, 0..40)) {
            let map = grid_map();
            let recs: Vec<_> = cells.iter().enumerate().map(|(k, &c)| rec("p", k as i64, c, &map)).collect();
            let trips = extract_trips(recs, &map).trips;
            let changes = cells.windows(2).filter(|w| w[0] != w[1]).count();
            prop_assert_eq!(trips.len(), changes);
            prop_assert!(trips.iter().all(|t| t.origin != t.dest));
        }

        #[test]
        fn aggregate_total_equals_trip_count(hours in proptest::collection::vec(0i64..24 * 30, 0..50)) {
            let map = grid_map();
            let trips: Vec<Trip> = hours.iter().map(|&h| Trip {
                user_id: "x".into(), origin: 0, dest: 1, depart_ts: ts(day0(), 0, 0) + h * 3600,
            }).collect();
            let ds = aggregate(&trips, &map, 0);
            prop_assert_eq!(ds.total_trips(), trips.len() as u64);
        }
    }
}
