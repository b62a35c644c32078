//! Candidate parking detection, the six-feature parking filter and
//! trajectory segmentation around accepted parks.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{BBox, LatLon};
use crate::poi::PoiIndex;
use crate::road::RoadNetwork;
use crate::trajectory::{GpsPoint, Label, Trajectory};
use crate::tree::{train_tree, FeatureSpec, Table, TreeModel, TreeParams};

pub const DEFAULT_DELTA_M: f64 = 50.0;
pub const DEFAULT_TAU_S: f64 = 180.0;
pub const MBR_PAD_M: f64 = 5.0;
pub const HISTORY_RADIUS_M: f64 = 50.0;
pub const HISTORY_WINDOW_S: i64 = 7 * 86_400;
pub const POI_RADIUS_M: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub taxi_id: String,
    pub start_index: usize,
    /// Inclusive.
    pub end_index: usize,
    pub points: Vec<GpsPoint>,
    /// Seed pivot followed by every pivot that extended the candidate.
    pub pivots: Vec<usize>,
}

impl CandidateSet {
    pub fn t_start(&self) -> i64 {
        self.points[0].t
    }

    pub fn t_end(&self) -> i64 {
        self.points[self.points.len() - 1].t
    }

    pub fn duration(&self) -> f64 {
        (self.t_end() - self.t_start()) as f64
    }

    pub fn bbox(&self) -> BBox {
        let pts: Vec<LatLon> = self.points.iter().map(GpsPoint::latlon).collect();
        BBox::around(&pts).expect("candidate has points")
    }

    pub fn center(&self) -> LatLon {
        self.bbox().center()
    }

    /// Majority ground-truth label is P (strictly more than half the points).
    pub fn is_true_park(&self) -> bool {
        let p = self.points.iter().filter(|x| x.label == Some(Label::P)).count();
        2 * p > self.points.len()
    }
}

/// Last index reachable from pivot `p`: the maximal consecutive run after `p`
/// staying strictly within `delta` of `x_p`.
fn reach(pts: &[GpsPoint], p: usize, delta: f64) -> usize {
    let mut e = p;
    while e + 1 < pts.len() && pts[p].distance(&pts[e + 1]) < delta {
        e += 1;
    }
    e
}

/// Single left-to-right scan. A pivot seeds a candidate when its reach spans
/// more than `tau`; subsequent pivots inside the candidate extend it by their
/// own reach until no pivot can. Scanning resumes after the candidate.
pub fn detect_candidates(traj: &Trajectory, delta: f64, tau: f64) -> Vec<CandidateSet> {
    let pts = &traj.points;
    let mut out = Vec::new();
    if pts.len() < 2 {
        return out;
    }
    let mut i = 0;
    while i < pts.len() {
        let r = reach(pts, i, delta);
        if r == i || ((pts[r].t - pts[i].t) as f64) <= tau {
            i += 1;
            continue;
        }
        let mut end = r;
        let mut pivots = vec![i];
        let mut p = i + 1;
        while p <= end {
            let rp = reach(pts, p, delta);
            if rp > end {
                end = rp;
                pivots.push(p);
            }
            p += 1;
        }
        out.push(CandidateSet {
            taxi_id: traj.taxi_id.clone(),
            start_index: i,
            end_index: end,
            points: pts[i..=end].to_vec(),
            pivots,
        });
        i = end + 1;
    }
    out
}

pub const PARKING_FEATURE_NAMES: [&str; 9] = [
    "mbr_ratio",
    "avg_distance",
    "center_distance",
    "duration",
    "history",
    "poi_hotel45",
    "poi_parking",
    "poi_shopping",
    "poi_entertainment",
];

pub fn parking_specs() -> Vec<FeatureSpec> {
    PARKING_FEATURE_NAMES.iter().map(|n| FeatureSpec::numeric(n)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParkingFeatureVector {
    pub mbr_ratio: f64,
    pub avg_distance: f64,
    pub center_distance: f64,
    pub duration: f64,
    pub history: u32,
    pub poi_vector: [u32; 4],
}

impl ParkingFeatureVector {
    pub fn to_row(&self) -> Vec<Option<f64>> {
        let mut r = vec![
            Some(self.mbr_ratio),
            Some(self.avg_distance),
            Some(self.center_distance),
            Some(self.duration),
            Some(self.history as f64),
        ];
        r.extend(self.poi_vector.iter().map(|c| Some(*c as f64)));
        r
    }
}

/// Accepted-candidate centres, bucketed for the 50 m window query.
#[derive(Debug, Clone, Default)]
pub struct HistoryStore {
    entries: Vec<HistoryEntry>,
    buckets: HashMap<(i64, i64), Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub taxi: String,
    pub lat: f64,
    pub lon: f64,
    pub t: i64,
}

// 0.001 deg is at least 85 m on both axes below 40 degrees latitude
const HISTORY_CELL_DEG: f64 = 0.001;

fn history_cell(lat: f64, lon: f64) -> (i64, i64) {
    (
        (lat / HISTORY_CELL_DEG).floor() as i64,
        (lon / HISTORY_CELL_DEG).floor() as i64,
    )
}

impl HistoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn append(&mut self, e: HistoryEntry) {
        self.buckets
            .entry(history_cell(e.lat, e.lon))
            .or_default()
            .push(self.entries.len() as u32);
        self.entries.push(e);
    }

    /// Stored centres within `radius` of `q` with `t - window <= t_e <= t`.
    pub fn count_near(&self, q: LatLon, t: i64, radius: f64, window: i64) -> u32 {
        let span = (radius / (crate::geo::METERS_PER_DEG * q.lat.to_radians().cos().max(0.01))
            / HISTORY_CELL_DEG)
            .ceil() as i64;
        let (ci, cj) = history_cell(q.lat, q.lon);
        let mut n = 0;
        for di in -span..=span {
            for dj in -span..=span {
                let Some(ids) = self.buckets.get(&(ci + di, cj + dj)) else {
                    continue;
                };
                for &id in ids {
                    let e = &self.entries[id as usize];
                    if e.t <= t
                        && e.t >= t - window
                        && q.distance(&LatLon::new(e.lat, e.lon)) <= radius
                    {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s = Self::new();
        if !path.exists() {
            return Ok(s);
        }
        let f = std::fs::File::open(path)?;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: HistoryEntry = serde_json::from_str(&line).map_err(|err| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: err.to_string(),
            })?;
            s.append(e);
        }
        Ok(s)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Features that do not depend on the history store; `history` is left at 0.
pub fn base_features(
    c: &CandidateSet,
    net: &RoadNetwork,
    pois: &PoiIndex,
) -> Result<ParkingFeatureVector> {
    let bbox = c.bbox();
    let center = bbox.center();
    let cm = net.match_point(center)?;
    let road_box = net
        .get(cm.road_id)
        .expect("matched road exists")
        .bbox();
    let mbr_ratio = road_box.padded_area_m2(MBR_PAD_M) / bbox.padded_area_m2(MBR_PAD_M);
    let mut sum = 0.0;
    for p in &c.points {
        sum += net.match_point(p.latlon())?.distance_to_road;
    }
    Ok(ParkingFeatureVector {
        mbr_ratio,
        avg_distance: sum / c.points.len() as f64,
        center_distance: cm.distance_to_road,
        duration: c.duration(),
        history: 0,
        poi_vector: pois.radius_counts(center, POI_RADIUS_M),
    })
}

pub fn history_count(c: &CandidateSet, store: &HistoryStore) -> u32 {
    store.count_near(c.center(), c.t_start(), HISTORY_RADIUS_M, HISTORY_WINDOW_S)
}

pub fn candidate_features(
    c: &CandidateSet,
    net: &RoadNetwork,
    pois: &PoiIndex,
    store: &HistoryStore,
) -> Result<ParkingFeatureVector> {
    let mut f = base_features(c, net, pois)?;
    f.history = history_count(c, store);
    Ok(f)
}

#[derive(Debug, Clone)]
pub struct ScoredCandidate {
    pub candidate: CandidateSet,
    pub features: ParkingFeatureVector,
    pub prob: f64,
    pub accepted: bool,
}

/// Visits candidates in (t_start, taxi, start_index) order, filling `history`
/// from the store, deciding, and appending accepted centres before the next
/// candidate is seen. Output is in input order.
pub fn history_pass<F>(
    items: Vec<(CandidateSet, ParkingFeatureVector)>,
    store: &mut HistoryStore,
    mut decide: F,
) -> Result<Vec<ScoredCandidate>>
where
    F: FnMut(&CandidateSet, &ParkingFeatureVector) -> Result<(f64, bool)>,
{
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&items[a].0, &items[b].0);
        (x.t_start(), &x.taxi_id, x.start_index, a).cmp(&(y.t_start(), &y.taxi_id, y.start_index, b))
    });
    let mut slots: Vec<Option<ScoredCandidate>> = vec![None; items.len()];
    let mut items: Vec<Option<(CandidateSet, ParkingFeatureVector)>> = items.into_iter().map(Some).collect();
    for i in order {
        let (c, mut f) = items[i].take().expect("visited once");
        f.history = history_count(&c, store);
        let (prob, accepted) = decide(&c, &f)?;
        if accepted {
            let center = c.center();
            store.append(HistoryEntry {
                taxi: c.taxi_id.clone(),
                lat: center.lat,
                lon: center.lon,
                t: c.t_start(),
            });
        }
        slots[i] = Some(ScoredCandidate {
            candidate: c,
            features: f,
            prob,
            accepted,
        });
    }
    Ok(slots.into_iter().map(|s| s.expect("filled")).collect())
}

pub fn parking_table(features: &[ParkingFeatureVector]) -> Table {
    let mut t = Table::new(parking_specs());
    for f in features {
        t.push(&f.to_row()).expect("fixed schema");
    }
    t
}

pub fn train_parking_filter(
    examples: &[(ParkingFeatureVector, bool)],
    params: TreeParams,
) -> Result<TreeModel> {
    let feats: Vec<ParkingFeatureVector> = examples.iter().map(|e| e.0).collect();
    let labels: Vec<bool> = examples.iter().map(|e| e.1).collect();
    train_tree(&parking_table(&feats), &labels, params)
}

/// Maximal runs of points not covered by any park, in order.
pub fn segment_trajectory(traj: &Trajectory, parks: &[CandidateSet]) -> Result<Vec<Trajectory>> {
    let mut iv: Vec<(usize, usize)> = parks.iter().map(|c| (c.start_index, c.end_index)).collect();
    iv.sort_unstable();
    for w in iv.windows(2) {
        if w[1].0 <= w[0].1 {
            return Err(Error::Overlap(w[0].0, w[0].1, w[1].0, w[1].1));
        }
    }
    for &(s, e) in &iv {
        if s > e || e >= traj.len() {
            return Err(Error::Invalid(format!(
                "park [{s}, {e}] outside trajectory of {}",
                traj.len()
            )));
        }
    }
    let mut out = Vec::new();
    let mut next = 0;
    for &(s, e) in &iv {
        if s > next {
            out.push(traj.slice(next..s));
        }
        next = e + 1;
    }
    if next < traj.len() {
        out.push(traj.slice(next..traj.len()));
    }
    Ok(out)
}

/// Ground-truth P runs expressed as candidate intervals.
pub fn true_park_intervals(traj: &Trajectory) -> Vec<CandidateSet> {
    let mut out = Vec::new();
    let mut i = 0;
    let pts = &traj.points;
    while i < pts.len() {
        if pts[i].label != Some(Label::P) {
            i += 1;
            continue;
        }
        let mut e = i;
        while e + 1 < pts.len() && pts[e + 1].label == Some(Label::P) {
            e += 1;
        }
        out.push(CandidateSet {
            taxi_id: traj.taxi_id.clone(),
            start_index: i,
            end_index: e,
            points: pts[i..=e].to_vec(),
            pivots: vec![i],
        });
        i = e + 1;
    }
    out
}
