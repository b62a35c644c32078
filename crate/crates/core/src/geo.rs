//! Spherical-earth geometry helpers.
//!
//! Everything here works on a sphere of radius [`EARTH_RADIUS_M`]. Planar
//! work (projection onto a segment, bounding-box areas) happens in a local
//! equirectangular frame, which maps lat/lon linearly and is accurate at the
//! few-hundred-metre scale the pipeline operates on.

use serde::{Deserialize, Serialize};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Metres per degree of latitude on the model sphere.
pub const METERS_PER_DEG: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

/// Great-circle distance in metres between two lat/lon pairs (degrees).
pub fn haversine_deg(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = p2 - p1;
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// A bare coordinate pair, used for polylines and projected points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn distance(&self, other: &LatLon) -> f64 {
        haversine_deg(self.lat, self.lon, other.lat, other.lon)
    }

    /// Offset by metres east/north in the local frame at this point.
    pub fn offset_m(&self, east: f64, north: f64) -> LatLon {
        let lat = self.lat + north / METERS_PER_DEG;
        let lon = self.lon + east / (METERS_PER_DEG * self.lat.to_radians().cos());
        LatLon { lat, lon }
    }
}

/// Local equirectangular frame anchored at `origin`.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    origin: LatLon,
    kx: f64,
}

impl LocalFrame {
    pub fn new(origin: LatLon) -> Self {
        Self {
            origin,
            kx: METERS_PER_DEG * origin.lat.to_radians().cos(),
        }
    }

    pub fn to_xy(&self, p: LatLon) -> (f64, f64) {
        (
            (p.lon - self.origin.lon) * self.kx,
            (p.lat - self.origin.lat) * METERS_PER_DEG,
        )
    }
}

/// Closest point on segment `a`-`b` to `q`, and its great-circle distance.
///
/// The projection parameter is computed in a frame anchored at `q`; the
/// returned point is the matching linear interpolation in lat/lon, so the
/// reported distance is exactly the haversine distance to that point.
pub fn project_onto_segment(q: LatLon, a: LatLon, b: LatLon) -> (LatLon, f64) {
    let frame = LocalFrame::new(q);
    let (ax, ay) = frame.to_xy(a);
    let (bx, by) = frame.to_xy(b);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 {
        ((-ax * dx - ay * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let p = if s <= 0.0 {
        a
    } else if s >= 1.0 {
        b
    } else {
        LatLon::new(a.lat + s * (b.lat - a.lat), a.lon + s * (b.lon - a.lon))
    };
    (p, q.distance(&p))
}

/// Axis-aligned box in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BBox {
    pub fn around<'a>(points: impl IntoIterator<Item = &'a LatLon>) -> Option<BBox> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = BBox {
            min_lat: first.lat,
            min_lon: first.lon,
            max_lat: first.lat,
            max_lon: first.lon,
        };
        for p in it {
            b.min_lat = b.min_lat.min(p.lat);
            b.min_lon = b.min_lon.min(p.lon);
            b.max_lat = b.max_lat.max(p.lat);
            b.max_lon = b.max_lon.max(p.lon);
        }
        Some(b)
    }

    pub fn center(&self) -> LatLon {
        LatLon::new(
            (self.min_lat + self.max_lat) / 2.0,
            (self.min_lon + self.max_lon) / 2.0,
        )
    }

    /// Box area in square metres after growing every side by `pad_m`.
    pub fn padded_area_m2(&self, pad_m: f64) -> f64 {
        let c = self.center();
        let h = (self.max_lat - self.min_lat) * METERS_PER_DEG + 2.0 * pad_m;
        let w = (self.max_lon - self.min_lon) * METERS_PER_DEG * c.lat.to_radians().cos()
            + 2.0 * pad_m;
        h * w
    }
}

/// Initial bearing from `a` to `b` in degrees, [0, 360).
pub fn bearing_deg(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dl = (b.lon - a.lon).to_radians();
    let y = dl.sin() * p2.cos();
    let x = p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos();
    y.atan2(x).to_degrees().rem_euclid(360.0)
}
