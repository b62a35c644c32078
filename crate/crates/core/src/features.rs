//! Per-point features and the historical road statistics behind them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::bearing_deg;
use crate::poi::PoiIndex;
use crate::road::{MatchResult, RoadNetwork};
use crate::trajectory::{haversine, Label, Trajectory};
use crate::tree::{FeatureSpec, Table};

pub const N_FEATURES: usize = 26;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "speed_1",
    "speed_2",
    "speed_3",
    "speed_4",
    "dist_1",
    "dist_2",
    "dist_3",
    "dist_4",
    "ratio_1",
    "ratio_2",
    "ratio_3",
    "ratio_4",
    "hour_of_day",
    "day_of_week",
    "road_id",
    "prev_road_id",
    "road_level",
    "dist_to_road",
    "poi_hotel45",
    "poi_parking",
    "poi_shopping",
    "poi_entertainment",
    "road_vote_overall",
    "road_vote_hour",
    "trans_vote",
    "heading_change_1",
];

pub const SPEED: usize = 0;
pub const DIST: usize = 4;
pub const RATIO: usize = 8;
pub const HOUR: usize = 12;
pub const DAY: usize = 13;
pub const ROAD_ID: usize = 14;
pub const PREV_ROAD_ID: usize = 15;
pub const ROAD_LEVEL: usize = 16;
pub const DIST_TO_ROAD: usize = 17;
pub const POI: usize = 18;
pub const VOTE_OVERALL: usize = 22;
pub const VOTE_HOUR: usize = 23;
pub const TRANS_VOTE: usize = 24;
pub const HEADING: usize = 25;

pub fn feature_specs() -> Vec<FeatureSpec> {
    FEATURE_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| match i {
            ROAD_ID | PREV_ROAD_ID | ROAD_LEVEL => FeatureSpec::categorical(name),
            _ => FeatureSpec::numeric(name),
        })
        .collect()
}

/// The 26 features of one GPS point; `None` marks a missing value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointFeatureVector(pub [Option<f64>; N_FEATURES]);

impl PointFeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        let i = FEATURE_NAMES.iter().position(|n| *n == name)?;
        self.0[i]
    }
}

pub fn hour_of_day(t: i64) -> u8 {
    t.div_euclid(3600).rem_euclid(24) as u8
}

/// 0 = Monday.
pub fn day_of_week(t: i64) -> u8 {
    // 1970-01-01 was a Thursday
    (t.div_euclid(86_400) + 3).rem_euclid(7) as u8
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteCount {
    pub occupied: u64,
    pub total: u64,
}

impl VoteCount {
    fn add(&mut self, occupied: bool) {
        self.total += 1;
        self.occupied += occupied as u64;
    }

    fn merge(&mut self, other: &VoteCount) {
        self.total += other.total;
        self.occupied += other.occupied;
    }

    pub fn fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.occupied as f64 / self.total as f64)
    }
}

/// Occupied-share counts per road, per (road, hour) and per road transition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoadStats {
    pub overall: BTreeMap<u32, VoteCount>,
    pub hourly: BTreeMap<(u32, u8), VoteCount>,
    pub transitions: BTreeMap<(u32, u32), VoteCount>,
}

#[derive(Serialize, Deserialize)]
struct StatsFile {
    overall: Vec<(u32, VoteCount)>,
    hourly: Vec<(u32, u8, VoteCount)>,
    transitions: Vec<(u32, u32, VoteCount)>,
}

impl Serialize for RoadStats {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        StatsFile {
            overall: self.overall.iter().map(|(k, v)| (*k, *v)).collect(),
            hourly: self.hourly.iter().map(|(k, v)| (k.0, k.1, *v)).collect(),
            transitions: self.transitions.iter().map(|(k, v)| (k.0, k.1, *v)).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RoadStats {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = StatsFile::deserialize(d)?;
        Ok(RoadStats {
            overall: f.overall.into_iter().collect(),
            hourly: f.hourly.into_iter().map(|(r, h, v)| ((r, h), v)).collect(),
            transitions: f.transitions.into_iter().map(|(a, b, v)| ((a, b), v)).collect(),
        })
    }
}

impl RoadStats {
    pub fn road_vote(&self, road: u32) -> Option<f64> {
        self.overall.get(&road).and_then(VoteCount::fraction)
    }

    pub fn road_vote_hour(&self, road: u32, hour: u8) -> Option<f64> {
        self.hourly.get(&(road, hour)).and_then(VoteCount::fraction)
    }

    pub fn transition_vote(&self, prev: u32, road: u32) -> Option<f64> {
        self.transitions.get(&(prev, road)).and_then(VoteCount::fraction)
    }

    /// Adds another shard's counts; associative and commutative.
    pub fn merge(&mut self, other: &RoadStats) {
        for (k, v) in &other.overall {
            self.overall.entry(*k).or_default().merge(v);
        }
        for (k, v) in &other.hourly {
            self.hourly.entry(*k).or_default().merge(v);
        }
        for (k, v) in &other.transitions {
            self.transitions.entry(*k).or_default().merge(v);
        }
    }

    /// Counts one labelled trajectory whose points are already map-matched.
    pub fn add_trajectory(&mut self, traj: &Trajectory, matches: &[MatchResult]) -> Result<()> {
        let mut prev_road: Option<u32> = None;
        for (i, (p, m)) in traj.points.iter().zip(matches).enumerate() {
            let label = p.label.ok_or_else(|| Error::UnlabeledPoint {
                taxi: traj.taxi_id.clone(),
                index: i,
            })?;
            if label == Label::P {
                prev_road = None;
                continue;
            }
            let occupied = label == Label::O;
            self.overall.entry(m.road_id).or_default().add(occupied);
            self.hourly
                .entry((m.road_id, hour_of_day(p.t)))
                .or_default()
                .add(occupied);
            if let Some(prev) = prev_road {
                self.transitions
                    .entry((prev, m.road_id))
                    .or_default()
                    .add(occupied);
            }
            prev_road = Some(m.road_id);
        }
        Ok(())
    }
}

pub fn match_trajectory(traj: &Trajectory, net: &RoadNetwork) -> Result<Vec<MatchResult>> {
    traj.points.iter().map(|p| net.match_point(p.latlon())).collect()
}

/// Builds road statistics from labelled trajectories (parking points excluded).
pub fn build_road_stats(trajs: &[Trajectory], net: &RoadNetwork) -> Result<RoadStats> {
    let mut stats = RoadStats::default();
    for tr in trajs {
        let matches = match_trajectory(tr, net)?;
        stats.add_trajectory(tr, &matches)?;
    }
    Ok(stats)
}

/// Feature computation for one trajectory with its matches precomputed.
pub struct TrajectoryFeatures<'a> {
    traj: &'a Trajectory,
    matches: &'a [MatchResult],
    pois: &'a PoiIndex,
    stats: &'a RoadStats,
}

impl<'a> TrajectoryFeatures<'a> {
    pub fn new(
        traj: &'a Trajectory,
        matches: &'a [MatchResult],
        pois: &'a PoiIndex,
        stats: &'a RoadStats,
    ) -> Self {
        Self {
            traj,
            matches,
            pois,
            stats,
        }
    }

    pub fn at(&self, k: usize) -> PointFeatureVector {
        let pts = &self.traj.points;
        let x = &pts[k];
        let mut f = [None; N_FEATURES];
        let mut path = 0.0;
        for w in 1..=4 {
            if k < w {
                break;
            }
            path += haversine(&pts[k - w + 1], &pts[k - w]);
            let dist = haversine(x, &pts[k - w]);
            let dt = (x.t - pts[k - w].t) as f64;
            f[SPEED + w - 1] = Some(dist / dt);
            f[DIST + w - 1] = Some(dist);
            f[RATIO + w - 1] = Some(if path > 0.0 { (dist / path).min(1.0) } else { 1.0 });
        }
        let hour = hour_of_day(x.t);
        f[HOUR] = Some(hour as f64);
        f[DAY] = Some(day_of_week(x.t) as f64);
        let m = &self.matches[k];
        f[ROAD_ID] = Some(m.road_id as f64);
        f[ROAD_LEVEL] = Some(m.level as f64);
        f[DIST_TO_ROAD] = Some(m.distance_to_road);
        for (slot, c) in self.pois.box_counts(x.latlon()).iter().enumerate() {
            f[POI + slot] = Some(*c as f64);
        }
        f[VOTE_OVERALL] = self.stats.road_vote(m.road_id);
        f[VOTE_HOUR] = self.stats.road_vote_hour(m.road_id, hour);
        if k >= 1 {
            let prev = self.matches[k - 1].road_id;
            f[PREV_ROAD_ID] = Some(prev as f64);
            f[TRANS_VOTE] = self.stats.transition_vote(prev, m.road_id);
        }
        if k >= 2 {
            let (a, b, c) = (pts[k - 2].latlon(), pts[k - 1].latlon(), x.latlon());
            if a.distance(&b) > 0.0 && b.distance(&c) > 0.0 {
                let turn = (bearing_deg(b, c) - bearing_deg(a, b)).rem_euclid(360.0);
                f[HEADING] = Some(if turn > 180.0 { 360.0 - turn } else { turn });
            }
        }
        PointFeatureVector(f)
    }

    pub fn all(&self) -> Vec<PointFeatureVector> {
        (0..self.traj.len()).map(|k| self.at(k)).collect()
    }
}

/// Features of point `k` of `traj`.
pub fn point_features(
    traj: &Trajectory,
    k: usize,
    net: &RoadNetwork,
    pois: &PoiIndex,
    stats: &RoadStats,
) -> Result<PointFeatureVector> {
    if k >= traj.len() {
        return Err(Error::Invalid(format!("index {k} outside trajectory of {}", traj.len())));
    }
    let matches = match_trajectory(traj, net)?;
    Ok(TrajectoryFeatures::new(traj, &matches, pois, stats).at(k))
}

pub fn trajectory_features(
    traj: &Trajectory,
    net: &RoadNetwork,
    pois: &PoiIndex,
    stats: &RoadStats,
) -> Result<Vec<PointFeatureVector>> {
    let matches = match_trajectory(traj, net)?;
    Ok(TrajectoryFeatures::new(traj, &matches, pois, stats).all())
}

pub fn to_table(rows: &[PointFeatureVector]) -> Table {
    let mut t = Table::new(feature_specs());
    for r in rows {
        for (col, v) in t.columns.iter_mut().zip(r.0.iter()) {
            col.push(v.unwrap_or(f64::NAN));
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LatLon;
    use crate::poi::{Poi, PoiCategory};
    use crate::road::RoadSegment;
    use crate::trajectory::GpsPoint;
    use proptest::prelude::*;

    fn network() -> RoadNetwork {
        RoadNetwork::new(vec![
            RoadSegment {
                road_id: 1,
                polyline: vec![LatLon::new(39.9, 116.39), LatLon::new(39.9, 116.43)],
                level: 2,
            },
            RoadSegment {
                road_id: 2,
                polyline: vec![LatLon::new(39.89, 116.40), LatLon::new(39.92, 116.40)],
                level: 4,
            },
        ])
        .unwrap()
    }

    fn straight(n: usize) -> Trajectory {
        let o = LatLon::new(39.9, 116.4);
        let pts = (0..n)
            .map(|i| {
                let p = o.offset_m(300.0 * i as f64, 0.0);
                GpsPoint::labeled(p.lat, p.lon, 1_300_000_000 + 60 * i as i64, Label::O)
            })
            .collect();
        Trajectory::new("t", pts).unwrap()
    }

    #[test]
    fn feature_count_is_26() {
        assert_eq!(FEATURE_NAMES.len(), 26);
        assert_eq!(feature_specs().len(), 26);
    }

    #[test]
    fn straight_motion_has_unit_ratios() {
        let tr = straight(8);
        let f = trajectory_features(&tr, &network(), &PoiIndex::default(), &RoadStats::default()).unwrap();
        for w in 0..4 {
            let r = f[6].0[RATIO + w].unwrap();
            assert!((r - 1.0).abs() < 1e-9, "ratio_{} = {r}", w + 1);
            assert!((f[6].0[SPEED + w].unwrap() - 5.0).abs() < 0.01);
        }
    }

    #[test]
    fn out_and_back_has_zero_ratio() {
        let o = LatLon::new(39.9, 116.4);
        let a = o.offset_m(200.0, 0.0);
        let pts = vec![
            GpsPoint::new(o.lat, o.lon, 0),
            GpsPoint::new(a.lat, a.lon, 60),
            GpsPoint::new(o.lat, o.lon, 120),
        ];
        let tr = Trajectory::new("t", pts).unwrap();
        let f = point_features(&tr, 2, &network(), &PoiIndex::default(), &RoadStats::default()).unwrap();
        assert_eq!(f.get("ratio_2"), Some(0.0));
        assert_eq!(f.get("dist_2"), Some(0.0));
    }

    #[test]
    fn first_point_lacks_window_features() {
        let tr = straight(3);
        let pois = PoiIndex::new(vec![Poi {
            poi_id: 1,
            category: PoiCategory::Hotel45,
            lat: tr.points[0].lat,
            lon: tr.points[0].lon,
        }]);
        let f = point_features(&tr, 0, &network(), &pois, &RoadStats::default()).unwrap();
        for i in SPEED..HOUR {
            assert_eq!(f.0[i], None, "{}", FEATURE_NAMES[i]);
        }
        assert_eq!(f.0[PREV_ROAD_ID], None);
        assert_eq!(f.get("poi_hotel45"), Some(1.0));
        assert_eq!(f.get("road_id"), Some(1.0));
        assert_eq!(f.get("road_level"), Some(2.0));
        assert_eq!(f.get("road_vote_overall"), None);
    }

    #[test]
    fn distance3_is_direct_haversine() {
        let o = LatLon::new(39.9, 116.4);
        let pts: Vec<GpsPoint> = [(0.0, 0.0), (120.0, 40.0), (250.0, -30.0), (310.0, 90.0), (500.0, 10.0)]
            .iter()
            .enumerate()
            .map(|(i, &(e, n))| {
                let p = o.offset_m(e, n);
                GpsPoint::new(p.lat, p.lon, 60 * i as i64)
            })
            .collect();
        let tr = Trajectory::new("t", pts.clone()).unwrap();
        let f = point_features(&tr, 4, &network(), &PoiIndex::default(), &RoadStats::default()).unwrap();
        let expected = crate::geo::haversine_deg(pts[4].lat, pts[4].lon, pts[1].lat, pts[1].lon);
        assert_eq!(f.get("dist_3"), Some(expected));
    }

    #[test]
    fn road_stats_direct_count() {
        let o = LatLon::new(39.9, 116.4);
        let labels = [Label::O, Label::O, Label::N, Label::O];
        let pts = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let p = o.offset_m(100.0 * i as f64 + 50.0, 0.0);
                GpsPoint::labeled(p.lat, p.lon, 9 * 3600 + 60 * i as i64, l)
            })
            .collect();
        let tr = Trajectory::new("t", pts).unwrap();
        let stats = build_road_stats(&[tr], &network()).unwrap();
        assert_eq!(stats.road_vote(1), Some(0.75));
        assert_eq!(stats.road_vote_hour(1, 9), Some(0.75));
        assert_eq!(stats.road_vote(2), None);
        assert_eq!(stats.road_vote_hour(1, 10), None);
        assert_eq!(stats.transition_vote(1, 1), Some(2.0 / 3.0));
    }

    #[test]
    fn unlabeled_point_is_rejected() {
        let mut tr = straight(3);
        tr.points[1].label = None;
        assert!(matches!(
            build_road_stats(&[tr], &network()),
            Err(Error::UnlabeledPoint { index: 1, .. })
        ));
    }

    #[test]
    fn weekday_and_hour() {
        // 2011-03-01 00:00 UTC was a Tuesday
        assert_eq!(day_of_week(1_298_937_600), 1);
        assert_eq!(hour_of_day(1_298_937_600 + 5 * 3600 + 59), 5);
    }

    proptest! {
        #[test]
        fn ratios_never_exceed_one(steps in prop::collection::vec((-400.0f64..400.0, -400.0f64..400.0), 5..20)) {
            let mut p = LatLon::new(39.9, 116.4);
            let mut pts = Vec::new();
            for (i, (e, n)) in steps.iter().enumerate() {
                pts.push(GpsPoint::new(p.lat, p.lon, 60 * i as i64));
                p = p.offset_m(*e, *n);
            }
            let tr = Trajectory::new("t", pts).unwrap();
            let f = trajectory_features(&tr, &network(), &PoiIndex::default(), &RoadStats::default()).unwrap();
            for v in &f {
                for w in 0..4 {
                    if let Some(r) = v.0[RATIO + w] {
                        prop_assert!((0.0..=1.0).contains(&r));
                    }
                }
                for w in 0..4 {
                    if let Some(s) = v.0[SPEED + w] {
                        prop_assert!(s >= 0.0);
                    }
                }
            }
        }

        #[test]
        fn sharded_stats_equal_whole(
            trips in prop::collection::vec(prop::collection::vec((0u8..3, 0.0f64..1.0), 1..12), 1..8),
            cut in 0usize..8,
        ) {
            let o = LatLon::new(39.9, 116.4);
            let trajs: Vec<Trajectory> = trips
                .iter()
                .enumerate()
                .map(|(k, pts)| {
                    let pts = pts
                        .iter()
                        .enumerate()
                        .map(|(i, (l, f))| {
                            // alternate between the two roads
                            let p = if i % 2 == 0 { o.offset_m(300.0 * f, 0.0) } else { o.offset_m(0.0, 300.0 * f) };
                            let label = [Label::O, Label::N, Label::P][*l as usize];
                            GpsPoint::labeled(p.lat, p.lon, 3600 * k as i64 + 1700 * i as i64, label)
                        })
                        .collect();
                    Trajectory::new(format!("t{k}"), pts).unwrap()
                })
                .collect();
            let net = network();
            let whole = build_road_stats(&trajs, &net).unwrap();
            let cut = cut.min(trajs.len());
            let mut merged = build_road_stats(&trajs[cut..], &net).unwrap();
            merged.merge(&build_road_stats(&trajs[..cut], &net).unwrap());
            prop_assert_eq!(merged, whole);
        }
    }
}
