use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_deg, LatLon};

/// Default silence, in seconds, beyond which a stream is cut into separate trajectories.
pub const DEFAULT_MAX_GAP_S: i64 = 600;

/// Taxi status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    /// Occupied: carrying passengers.
    O,
    /// Non-occupied: cruising without passengers.
    N,
    /// Parked.
    P,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::O => "O",
            Label::N => "N",
            Label::P => "P",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub lat: f64,
    pub lon: f64,
    /// Seconds since the Unix epoch.
    pub t: i64,
    pub label: Option<Label>,
}

impl GpsPoint {
    pub fn new(lat: f64, lon: f64, t: i64) -> Self {
        Self {
            lat,
            lon,
            t,
            label: None,
        }
    }

    pub fn labeled(lat: f64, lon: f64, t: i64, label: Label) -> Self {
        Self {
            lat,
            lon,
            t,
            label: Some(label),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !self.lat.is_finite() {
            return Err(Error::Invalid(format!("latitude {} out of range", self.lat)));
        }
        if !(-180.0..=180.0).contains(&self.lon) || !self.lon.is_finite() {
            return Err(Error::Invalid(format!("longitude {} out of range", self.lon)));
        }
        if self.t < 0 {
            return Err(Error::Invalid(format!("negative timestamp {}", self.t)));
        }
        Ok(())
    }

    pub fn latlon(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }

    pub fn distance(&self, other: &GpsPoint) -> f64 {
        haversine(self, other)
    }
}

/// Great-circle distance in metres on a sphere of radius 6,371 km.
pub fn haversine(p: &GpsPoint, q: &GpsPoint) -> f64 {
    haversine_deg(p.lat, p.lon, q.lat, q.lon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub taxi_id: String,
    pub points: Vec<GpsPoint>,
}

impl Trajectory {
    /// Builds a trajectory, checking coordinates and strictly increasing time.
    pub fn new(taxi_id: impl Into<String>, points: Vec<GpsPoint>) -> Result<Self> {
        let taxi_id = taxi_id.into();
        if points.is_empty() {
            return Err(Error::Invalid(format!("trajectory for {taxi_id} is empty")));
        }
        for p in &points {
            p.validate()?;
        }
        if let Some(w) = points.windows(2).find(|w| w[1].t <= w[0].t) {
            return Err(Error::Invalid(format!(
                "timestamps not increasing for {taxi_id}: {} then {}",
                w[0].t, w[1].t
            )));
        }
        Ok(Self { taxi_id, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn labels(&self) -> Vec<Option<Label>> {
        self.points.iter().map(|p| p.label).collect()
    }

    /// A sub-trajectory over `range`, keeping the taxi id.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Trajectory {
        Trajectory {
            taxi_id: self.taxi_id.clone(),
            points: self.points[range].to_vec(),
        }
    }
}

/// Cuts a trajectory wherever consecutive fixes are more than `max_gap` seconds apart.
pub fn split_on_gaps(traj: &Trajectory, max_gap: i64) -> Vec<Trajectory> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..traj.points.len() {
        if traj.points[i].t - traj.points[i - 1].t > max_gap {
            out.push(traj.slice(start..i));
            start = i;
        }
    }
    if start < traj.points.len() {
        out.push(traj.slice(start..traj.points.len()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj_with_deltas(deltas: &[i64]) -> Trajectory {
        let mut t = 1_000;
        let mut pts = vec![GpsPoint::new(39.9, 116.4, t)];
        for (i, d) in deltas.iter().enumerate() {
            t += d;
            pts.push(GpsPoint::new(39.9, 116.4 + 0.001 * (i + 1) as f64, t));
        }
        Trajectory::new("a", pts).unwrap()
    }

    #[test]
    fn regular_sampling_stays_whole() {
        let tr = traj_with_deltas(&[60; 20]);
        assert_eq!(split_on_gaps(&tr, 600), vec![tr]);
    }

    #[test]
    fn one_long_gap_splits() {
        let tr = traj_with_deltas(&[60, 60, 900, 60]);
        let parts = split_on_gaps(&tr, 600);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].len(), 3);
        assert_eq!(parts[1].len(), 2);
    }

    #[test]
    fn rejects_regressing_time_and_bad_coordinates() {
        let p = GpsPoint::new(39.9, 116.4, 10);
        assert!(Trajectory::new("x", vec![p, p]).is_err());
        assert!(Trajectory::new("x", vec![GpsPoint::new(95.0, 0.0, 1)]).is_err());
        assert!(Trajectory::new("x", vec![]).is_err());
    }

    proptest! {
        #[test]
        fn split_piece_count_and_concatenation(deltas in prop::collection::vec(1i64..1500, 0..60)) {
            let tr = traj_with_deltas(&deltas);
            let parts = split_on_gaps(&tr, 600);
            let expected = 1 + deltas.iter().filter(|&&d| d > 600).count();
            prop_assert_eq!(parts.len(), expected);
            let joined: Vec<GpsPoint> = parts.iter().flat_map(|p| p.points.clone()).collect();
            prop_assert_eq!(&joined, &tr.points);
            for part in &parts {
                for w in part.points.windows(2) {
                    prop_assert!(w[1].t - w[0].t <= 600);
                }
            }
        }

        #[test]
        fn haversine_symmetric(a in -89.0f64..89.0, b in -179.0f64..179.0, c in -89.0f64..89.0, d in -179.0f64..179.0) {
            let p = GpsPoint::new(a, b, 0);
            let q = GpsPoint::new(c, d, 0);
            prop_assert_eq!(haversine(&p, &q), haversine(&q, &p));
            prop_assert!(haversine(&p, &q) >= 0.0);
            prop_assert_eq!(haversine(&p, &p), 0.0);
        }
    }
}
