use serde::{Deserialize, Serialize};

use crate::geo::{haversine_deg, LatLon, METERS_PER_DEG};

/// Metres per degree used by the square POI window (±25 m per axis).
pub const BOX_M_PER_DEG: f64 = 111_320.0;
pub const POI_BOX_HALF_M: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoiCategory {
    Hotel45,
    Parking,
    Shopping,
    Entertainment,
}

impl PoiCategory {
    pub const ALL: [PoiCategory; 4] = [
        PoiCategory::Hotel45,
        PoiCategory::Parking,
        PoiCategory::Shopping,
        PoiCategory::Entertainment,
    ];

    pub fn index(&self) -> usize {
        *self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub poi_id: u64,
    pub category: PoiCategory,
    pub lat: f64,
    pub lon: f64,
}

/// Bucketed POIs for box and radius counting.
#[derive(Debug, Clone, Default)]
pub struct PoiIndex {
    pois: Vec<Poi>,
    buckets: std::collections::HashMap<(i64, i64), Vec<u32>>,
}

const CELL_DEG: f64 = 0.002;

fn bucket(lat: f64, lon: f64) -> (i64, i64) {
    ((lat / CELL_DEG).floor() as i64, (lon / CELL_DEG).floor() as i64)
}

impl PoiIndex {
    pub fn new(pois: Vec<Poi>) -> Self {
        let mut buckets: std::collections::HashMap<(i64, i64), Vec<u32>> = Default::default();
        for (i, p) in pois.iter().enumerate() {
            buckets.entry(bucket(p.lat, p.lon)).or_default().push(i as u32);
        }
        Self { pois, buckets }
    }

    pub fn pois(&self) -> &[Poi] {
        &self.pois
    }

    /// POIs in buckets overlapping a window of `half_m` around `q`.
    fn nearby(&self, q: LatLon, half_m: f64) -> impl Iterator<Item = &Poi> {
        let dlat = half_m / METERS_PER_DEG * 1.01;
        let dlon = half_m / (METERS_PER_DEG * q.lat.to_radians().cos().max(1e-6)) * 1.01;
        let (r0, c0) = bucket(q.lat - dlat, q.lon - dlon);
        let (r1, c1) = bucket(q.lat + dlat, q.lon + dlon);
        (r0..=r1)
            .flat_map(move |r| (c0..=c1).map(move |c| (r, c)))
            .filter_map(|k| self.buckets.get(&k))
            .flatten()
            .map(|&i| &self.pois[i as usize])
    }

    /// Counts per category inside the 50 m square centred at `q`.
    pub fn box_counts(&self, q: LatLon) -> [u32; 4] {
        let mut out = [0; 4];
        let coslat = q.lat.to_radians().cos();
        for p in self.nearby(q, POI_BOX_HALF_M * 1.5) {
            if in_box(q, p, coslat) {
                out[p.category.index()] += 1;
            }
        }
        out
    }

    /// Counts per category within `radius_m` great-circle metres of `q`.
    pub fn radius_counts(&self, q: LatLon, radius_m: f64) -> [u32; 4] {
        let mut out = [0; 4];
        for p in self.nearby(q, radius_m) {
            if haversine_deg(q.lat, q.lon, p.lat, p.lon) <= radius_m {
                out[p.category.index()] += 1;
            }
        }
        out
    }
}

fn in_box(q: LatLon, p: &Poi, coslat: f64) -> bool {
    (p.lat - q.lat).abs() * BOX_M_PER_DEG <= POI_BOX_HALF_M
        && (p.lon - q.lon).abs() * BOX_M_PER_DEG * coslat <= POI_BOX_HALF_M
}

/// POI counts in the 50 m square window around a GPS fix.
pub fn poi_counts(p: &crate::trajectory::GpsPoint, pois: &PoiIndex) -> [u32; 4] {
    pois.box_counts(p.latlon())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::GpsPoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_index_counts_nothing() {
        let idx = PoiIndex::new(vec![]);
        assert_eq!(poi_counts(&GpsPoint::new(39.9, 116.4, 0), &idx), [0; 4]);
    }

    #[test]
    fn coincident_poi_is_counted() {
        let idx = PoiIndex::new(vec![Poi {
            poi_id: 1,
            category: PoiCategory::Shopping,
            lat: 39.9,
            lon: 116.4,
        }]);
        assert_eq!(poi_counts(&GpsPoint::new(39.9, 116.4, 0), &idx), [0, 0, 1, 0]);
    }

    #[test]
    fn box_counts_match_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = LatLon::new(39.9, 116.4);
        let pois: Vec<Poi> = (0..200)
            .map(|i| {
                let p = base.offset_m(rng.random_range(-120.0..120.0), rng.random_range(-120.0..120.0));
                Poi {
                    poi_id: i,
                    category: PoiCategory::ALL[rng.random_range(0..4)],
                    lat: p.lat,
                    lon: p.lon,
                }
            })
            .collect();
        let idx = PoiIndex::new(pois.clone());
        for _ in 0..500 {
            let q = base.offset_m(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let mut expected = [0u32; 4];
            for p in &pois {
                let dy = (p.lat - q.lat).abs() * 111_320.0;
                let dx = (p.lon - q.lon).abs() * 111_320.0 * q.lat.to_radians().cos();
                if dx <= 25.0 && dy <= 25.0 {
                    expected[p.category.index()] += 1;
                }
            }
            assert_eq!(idx.box_counts(q), expected);
            let mut within = [0u32; 4];
            for p in &pois {
                if haversine_deg(q.lat, q.lon, p.lat, p.lon) <= 50.0 {
                    within[p.category.index()] += 1;
                }
            }
            assert_eq!(idx.radius_counts(q, 50.0), within);
        }
    }
}
