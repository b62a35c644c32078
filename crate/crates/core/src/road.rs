//! Road network, its grid index, and nearest-segment matching.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{project_onto_segment, BBox, LatLon, METERS_PER_DEG};

/// Distances closer than this are treated as ties and resolved by road id.
pub const TIE_EPS_M: f64 = 1e-9;

const CELL_M: f64 = 250.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub road_id: u32,
    pub polyline: Vec<LatLon>,
    /// 1 = highway ... 4 = local street.
    pub level: u8,
}

impl RoadSegment {
    pub fn validate(&self) -> Result<()> {
        if self.polyline.len() < 2 {
            return Err(Error::Invalid(format!(
                "road {} has fewer than two vertices",
                self.road_id
            )));
        }
        if self.polyline.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid(format!(
                "road {} repeats a vertex",
                self.road_id
            )));
        }
        if !(1..=4).contains(&self.level) {
            return Err(Error::Invalid(format!(
                "road {} has level {} outside 1..=4",
                self.road_id, self.level
            )));
        }
        Ok(())
    }

    pub fn bbox(&self) -> BBox {
        BBox::around(&self.polyline).expect("validated polyline")
    }

    /// Closest point on the polyline and its distance in metres.
    pub fn project(&self, q: LatLon) -> (LatLon, f64) {
        self.polyline
            .windows(2)
            .map(|w| project_onto_segment(q, w[0], w[1]))
            .fold((q, f64::INFINITY), |best, cur| {
                if cur.1 < best.1 {
                    cur
                } else {
                    best
                }
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub road_id: u32,
    pub level: u8,
    pub distance_to_road: f64,
    pub projected: LatLon,
}

#[derive(Debug, Clone)]
struct GridIndex {
    origin: LatLon,
    dlat: f64,
    dlon: f64,
    rows: i64,
    cols: i64,
    /// Smallest metric extent of a cell, used as the ring lower bound.
    cell_min_m: f64,
    cells: Vec<Vec<u32>>,
}

impl GridIndex {
    fn build(segments: &[RoadSegment]) -> Option<GridIndex> {
        let all: Vec<BBox> = segments.iter().map(RoadSegment::bbox).collect();
        let first = *all.first()?;
        let ext = all.iter().fold(first, |a, b| BBox {
            min_lat: a.min_lat.min(b.min_lat),
            min_lon: a.min_lon.min(b.min_lon),
            max_lat: a.max_lat.max(b.max_lat),
            max_lon: a.max_lon.max(b.max_lon),
        });
        let max_abs_lat = ext.min_lat.abs().max(ext.max_lat.abs()).min(89.0);
        let dlat = CELL_M / METERS_PER_DEG;
        let dlon = CELL_M / (METERS_PER_DEG * ext.center().lat.to_radians().cos().max(0.01));
        let rows = (((ext.max_lat - ext.min_lat) / dlat).floor() as i64 + 1).max(1);
        let cols = (((ext.max_lon - ext.min_lon) / dlon).floor() as i64 + 1).max(1);
        let lon_cell_m = dlon * METERS_PER_DEG * max_abs_lat.to_radians().cos();
        let mut idx = GridIndex {
            origin: LatLon::new(ext.min_lat, ext.min_lon),
            dlat,
            dlon,
            rows,
            cols,
            cell_min_m: CELL_M.min(lon_cell_m),
            cells: vec![Vec::new(); (rows * cols) as usize],
        };
        for (i, b) in all.iter().enumerate() {
            let (r0, c0) = idx.cell_of(b.min_lat, b.min_lon);
            let (r1, c1) = idx.cell_of(b.max_lat, b.max_lon);
            for r in r0.max(0)..=r1.min(rows - 1) {
                for c in c0.max(0)..=c1.min(cols - 1) {
                    idx.cells[(r * cols + c) as usize].push(i as u32);
                }
            }
        }
        Some(idx)
    }

    fn cell_of(&self, lat: f64, lon: f64) -> (i64, i64) {
        (
            ((lat - self.origin.lat) / self.dlat).floor() as i64,
            ((lon - self.origin.lon) / self.dlon).floor() as i64,
        )
    }

    /// Calls `visit` with the segment indices in every in-grid cell at
    /// Chebyshev distance `ring` from `(r, c)`.
    fn ring(&self, r: i64, c: i64, ring: i64, mut visit: impl FnMut(&[u32])) {
        let mut cell = |rr: i64, cc: i64| {
            if (0..self.rows).contains(&rr) && (0..self.cols).contains(&cc) {
                visit(&self.cells[(rr * self.cols + cc) as usize]);
            }
        };
        if ring == 0 {
            cell(r, c);
            return;
        }
        let c_lo = (c - ring).max(0);
        let c_hi = (c + ring).min(self.cols - 1);
        for cc in c_lo..=c_hi {
            cell(r - ring, cc);
            cell(r + ring, cc);
        }
        let r_lo = (r - ring + 1).max(0);
        let r_hi = (r + ring - 1).min(self.rows - 1);
        for rr in r_lo..=r_hi {
            cell(rr, c - ring);
            cell(rr, c + ring);
        }
    }

    fn distance_to_grid(&self, r: i64, c: i64) -> i64 {
        let dr = if r < 0 { -r } else { (r - self.rows + 1).max(0) };
        let dc = if c < 0 { -c } else { (c - self.cols + 1).max(0) };
        dr.max(dc)
    }

    fn max_ring(&self, r: i64, c: i64) -> i64 {
        let far_r = r.abs().max((self.rows - 1 - r).abs());
        let far_c = c.abs().max((self.cols - 1 - c).abs());
        far_r.max(far_c)
    }
}

/// Road segments with a uniform grid over their bounding boxes.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    segments: Vec<RoadSegment>,
    by_id: HashMap<u32, usize>,
    index: Option<GridIndex>,
}

impl RoadNetwork {
    pub fn new(mut segments: Vec<RoadSegment>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &segments {
            s.validate()?;
            if !seen.insert(s.road_id) {
                return Err(Error::Invalid(format!("duplicate road id {}", s.road_id)));
            }
        }
        segments.sort_by_key(|s| s.road_id);
        let by_id = segments
            .iter()
            .enumerate()
            .map(|(i, s)| (s.road_id, i))
            .collect();
        let index = GridIndex::build(&segments);
        Ok(Self {
            segments,
            by_id,
            index,
        })
    }

    pub fn empty() -> Self {
        Self {
            segments: Vec::new(),
            by_id: HashMap::new(),
            index: None,
        }
    }

    /// Segments in ascending road id order.
    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn get(&self, road_id: u32) -> Option<&RoadSegment> {
        self.by_id.get(&road_id).map(|&i| &self.segments[i])
    }

    /// Nearest segment by point-to-polyline distance; ties go to the smaller id.
    pub fn match_point(&self, q: LatLon) -> Result<MatchResult> {
        let index = self.index.as_ref().ok_or(Error::EmptyNetwork)?;
        let (r, c) = index.cell_of(q.lat, q.lon);
        let mut seen = vec![false; self.segments.len()];
        let mut best_d = f64::INFINITY;
        // (segment index, projected point, distance) within the tie window of best_d
        let mut close: Vec<(usize, LatLon, f64)> = Vec::new();
        let start = index.distance_to_grid(r, c);
        let last = index.max_ring(r, c);
        for ring in start..=last {
            if ring >= 1 && best_d + TIE_EPS_M < (ring - 1) as f64 * index.cell_min_m * 0.99 {
                break;
            }
            index.ring(r, c, ring, |ids| {
                for &i in ids {
                    let i = i as usize;
                    if std::mem::replace(&mut seen[i], true) {
                        continue;
                    }
                    let (p, d) = self.segments[i].project(q);
                    if d <= best_d + TIE_EPS_M {
                        if d < best_d {
                            best_d = d;
                            close.retain(|e| e.2 <= best_d + TIE_EPS_M);
                        }
                        close.push((i, p, d));
                    }
                }
            });
        }
        // segments are sorted by id, so the smallest index is the smallest id
        let &(i, projected, distance_to_road) = close
            .iter()
            .filter(|e| e.2 <= best_d + TIE_EPS_M)
            .min_by_key(|e| e.0)
            .expect("non-empty network yields a match");
        let seg = &self.segments[i];
        Ok(MatchResult {
            road_id: seg.road_id,
            level: seg.level,
            distance_to_road,
            projected,
        })
    }
}

/// Convenience wrapper matching a GPS fix.
pub fn match_to_road(p: &crate::trajectory::GpsPoint, net: &RoadNetwork) -> Result<MatchResult> {
    net.match_point(p.latlon())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::GpsPoint;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(id: u32, pts: &[(f64, f64)], level: u8) -> RoadSegment {
        RoadSegment {
            road_id: id,
            polyline: pts.iter().map(|&(a, b)| LatLon::new(a, b)).collect(),
            level,
        }
    }

    fn brute_force(net: &RoadNetwork, q: LatLon) -> (u32, f64) {
        let dists: Vec<(u32, f64)> = net
            .segments()
            .iter()
            .map(|s| {
                let d = s
                    .polyline
                    .windows(2)
                    .map(|w| project_onto_segment(q, w[0], w[1]).1)
                    .fold(f64::INFINITY, f64::min);
                (s.road_id, d)
            })
            .collect();
        let best = dists.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
        *dists
            .iter()
            .filter(|e| e.1 <= best + TIE_EPS_M)
            .min_by_key(|e| e.0)
            .unwrap()
    }

    fn random_network(rng: &mut ChaCha8Rng, n: usize) -> RoadNetwork {
        let base = LatLon::new(39.9, 116.4);
        let segs = (0..n)
            .map(|i| {
                let k = rng.random_range(2..5);
                let mut pts = Vec::new();
                let mut p = base.offset_m(rng.random_range(-3000.0..3000.0), rng.random_range(-3000.0..3000.0));
                for _ in 0..k {
                    pts.push(p);
                    p = p.offset_m(rng.random_range(-400.0..400.0), rng.random_range(-400.0..400.0));
                }
                RoadSegment {
                    road_id: (i as u32) * 3 + 1,
                    polyline: pts,
                    level: rng.random_range(1..=4),
                }
            })
            .collect();
        RoadNetwork::new(segs).unwrap()
    }

    #[test]
    fn empty_network_errors() {
        let net = RoadNetwork::empty();
        assert!(matches!(
            match_to_road(&GpsPoint::new(0.0, 0.0, 0), &net),
            Err(Error::EmptyNetwork)
        ));
    }

    #[test]
    fn vertex_matches_with_zero_distance() {
        let net = RoadNetwork::new(vec![
            seg(5, &[(39.9, 116.4), (39.9, 116.41), (39.91, 116.41)], 2),
            seg(9, &[(39.95, 116.4), (39.95, 116.41)], 4),
        ])
        .unwrap();
        let m = match_to_road(&GpsPoint::new(39.9, 116.41, 0), &net).unwrap();
        assert_eq!(m.road_id, 5);
        assert_eq!(m.level, 2);
        assert_eq!(m.distance_to_road, 0.0);
    }

    #[test]
    fn equidistant_tie_goes_to_smaller_id() {
        let net = RoadNetwork::new(vec![
            seg(7, &[(39.899, 116.39), (39.899, 116.41)], 4),
            seg(3, &[(39.901, 116.39), (39.901, 116.41)], 4),
        ])
        .unwrap();
        let m = match_to_road(&GpsPoint::new(39.9, 116.4, 0), &net).unwrap();
        assert_eq!(m.road_id, 3);
    }

    #[test]
    fn rejects_bad_segments() {
        assert!(RoadNetwork::new(vec![seg(1, &[(39.9, 116.4)], 1)]).is_err());
        assert!(RoadNetwork::new(vec![seg(1, &[(39.9, 116.4), (39.9, 116.4)], 1)]).is_err());
        assert!(RoadNetwork::new(vec![seg(1, &[(39.9, 116.4), (39.9, 116.5)], 5)]).is_err());
        assert!(RoadNetwork::new(vec![
            seg(1, &[(39.9, 116.4), (39.9, 116.5)], 1),
            seg(1, &[(39.8, 116.4), (39.8, 116.5)], 1)
        ])
        .is_err());
    }

    #[test]
    fn fifty_segment_network_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = random_network(&mut rng, 50);
        let base = LatLon::new(39.9, 116.4);
        for _ in 0..2000 {
            let q = base.offset_m(rng.random_range(-5000.0..5000.0), rng.random_range(-5000.0..5000.0));
            let m = net.match_point(q).unwrap();
            let (id, d) = brute_force(&net, q);
            assert_eq!(m.road_id, id);
            assert!((m.distance_to_road - d).abs() <= 1e-9);
            let recomputed = q.distance(&m.projected);
            assert!((recomputed - m.distance_to_road).abs() <= 1e-6 * m.distance_to_road.max(1e-9));
        }
    }

    #[test]
    fn far_away_query_still_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = random_network(&mut rng, 20);
        let q = LatLon::new(45.0, 100.0);
        assert_eq!(net.match_point(q).unwrap().road_id, brute_force(&net, q).0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn match_is_no_farther_than_any_segment(seed in 0u64..10_000, n in 1usize..100, dx in -6000.0f64..6000.0, dy in -6000.0f64..6000.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = random_network(&mut rng, n);
            let q = LatLon::new(39.9, 116.4).offset_m(dx, dy);
            let m = net.match_point(q).unwrap();
            for s in net.segments() {
                prop_assert!(m.distance_to_road <= s.project(q).1 + TIE_EPS_M);
            }
            prop_assert_eq!(m.road_id, brute_force(&net, q).0);
        }
    }
}
