//! Seeded synthetic city: a grid road network with POIs and parking lots, and
//! a fleet simulator producing labelled O/N/P trajectories.
//!
//! Spell lengths are counted in samples. A vacant spell is followed by an
//! occupied one; an occupied spell may end at a park (at a lot, or at the
//! roadside) which is followed by a vacant spell. Driving taxis also stop at
//! traffic lights and in jams; those stops keep the current O/N label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{LatLon, METERS_PER_DEG};
use crate::poi::{Poi, PoiCategory};
use crate::road::{RoadNetwork, RoadSegment};
use crate::trajectory::{GpsPoint, Label, Trajectory};

/// 2011-03-01 00:00:00 UTC.
pub const EPOCH_START: i64 = 1_298_937_600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    /// Blocks per side; the grid has `(blocks + 1)^2` intersections.
    pub blocks: usize,
    pub block_m: f64,
    /// Every `arterial_every`-th street is an arterial; the outer ring is a highway.
    pub arterial_every: usize,
    pub origin: LatLon,
    pub n_lots: usize,
    /// Background POIs per km² for hotel45, parking, shopping, entertainment.
    pub poi_density: [f64; 4],
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            blocks: 20,
            block_m: 200.0,
            arterial_every: 5,
            origin: LatLon::new(39.85, 116.30),
            n_lots: 40,
            poi_density: [2.0, 1.0, 6.0, 4.0],
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.block_m > 0.0) || self.arterial_every == 0 {
            return Err(Error::Invalid("block length and arterial spacing must be positive".into()));
        }
        if self.poi_density.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Invalid("POI densities must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lot {
    pub road_id: u32,
    /// Intersections at either end of the lot's segment.
    pub a: (usize, usize),
    pub b: (usize, usize),
    /// Position along a → b in (0, 1).
    pub frac: f64,
    pub pos: LatLon,
}

#[derive(Debug, Clone)]
pub struct World {
    pub params: WorldParams,
    pub network: RoadNetwork,
    pub pois: Vec<Poi>,
    pub lots: Vec<Lot>,
}

impl World {
    pub fn node_pos(&self, (i, j): (usize, usize)) -> LatLon {
        node_pos(&self.params, i, j)
    }

    fn neighbors(&self, (i, j): (usize, usize)) -> Vec<(usize, usize)> {
        let n = self.params.blocks;
        let mut v = Vec::with_capacity(4);
        if i > 0 {
            v.push((i - 1, j));
        }
        if i < n {
            v.push((i + 1, j));
        }
        if j > 0 {
            v.push((i, j - 1));
        }
        if j < n {
            v.push((i, j + 1));
        }
        v
    }
}

fn node_pos(p: &WorldParams, i: usize, j: usize) -> LatLon {
    let lat = p.origin.lat + j as f64 * p.block_m / METERS_PER_DEG;
    let lon = p.origin.lon
        + i as f64 * p.block_m / (METERS_PER_DEG * p.origin.lat.to_radians().cos());
    LatLon::new(lat, lon)
}

fn street_level(k: usize, n: usize, every: usize) -> u8 {
    if k == 0 || k == n {
        1
    } else if k % every == 0 {
        2
    } else {
        4
    }
}

/// Segment id of the east-going edge from (i, j).
pub fn horizontal_id(n: usize, i: usize, j: usize) -> u32 {
    (1 + j * n + i) as u32
}

/// Segment id of the north-going edge from (i, j).
pub fn vertical_id(n: usize, i: usize, j: usize) -> u32 {
    (1 + n * (n + 1) + i * n + j) as u32
}

fn grid_segments(p: &WorldParams) -> Vec<RoadSegment> {
    let n = p.blocks;
    let mut segs = Vec::with_capacity(2 * n * (n + 1));
    for j in 0..=n {
        for i in 0..n {
            segs.push(RoadSegment {
                road_id: horizontal_id(n, i, j),
                polyline: vec![node_pos(p, i, j), node_pos(p, i + 1, j)],
                level: street_level(j, n, p.arterial_every),
            });
        }
    }
    for i in 0..=n {
        for j in 0..n {
            segs.push(RoadSegment {
                road_id: vertical_id(n, i, j),
                polyline: vec![node_pos(p, i, j), node_pos(p, i, j + 1)],
                level: street_level(i, n, p.arterial_every),
            });
        }
    }
    segs
}

fn clipped_normal(rng: &mut ChaCha8Rng, sd: f64, clip: f64) -> f64 {
    if sd <= 0.0 {
        return 0.0;
    }
    let z: f64 = Normal::new(0.0, sd).expect("finite sd").sample(rng);
    z.clamp(-clip, clip)
}

fn scatter(rng: &mut ChaCha8Rng, at: LatLon, radius: f64) -> LatLon {
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    at.offset_m(r * a.cos(), r * a.sin())
}

/// Builds the grid network, parking lots and POIs. Deterministic in
/// `(params, seed)`.
pub fn generate_world(params: &WorldParams, seed: u64) -> Result<World> {
    params.validate()?;
    let n = params.blocks;
    if n == 0 {
        return Ok(World {
            params: params.clone(),
            network: RoadNetwork::empty(),
            pois: Vec::new(),
            lots: Vec::new(),
        });
    }
    let network = RoadNetwork::new(grid_segments(params))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut lots = Vec::with_capacity(params.n_lots);
    for _ in 0..params.n_lots {
        let horizontal = rng.random_bool(0.5);
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..=n));
        let (a, b, road_id) = if horizontal {
            ((i, j), (i + 1, j), horizontal_id(n, i, j))
        } else {
            ((j, i), (j, i + 1), vertical_id(n, j, i))
        };
        let frac = rng.random_range(0.2..0.8);
        let (pa, pb) = (node_pos(params, a.0, a.1), node_pos(params, b.0, b.1));
        let pos = LatLon::new(
            pa.lat + frac * (pb.lat - pa.lat),
            pa.lon + frac * (pb.lon - pa.lon),
        );
        lots.push(Lot {
            road_id,
            a,
            b,
            frac,
            pos,
        });
    }

    let mut pois = Vec::new();
    let push = |pois: &mut Vec<Poi>, category, at: LatLon| {
        pois.push(Poi {
            poi_id: pois.len() as u64 + 1,
            category,
            lat: at.lat,
            lon: at.lon,
        })
    };
    for lot in &lots {
        for _ in 0..rng.random_range(1..=3) {
            let at = scatter(&mut rng, lot.pos, 20.0);
            push(&mut pois, PoiCategory::Parking, at);
        }
        if rng.random_bool(0.5) {
            let at = scatter(&mut rng, lot.pos, 40.0);
            push(&mut pois, PoiCategory::Shopping, at);
        }
        if rng.random_bool(0.3) {
            let at = scatter(&mut rng, lot.pos, 40.0);
            push(&mut pois, PoiCategory::Hotel45, at);
        }
    }
    let area_km2 = (n as f64 * params.block_m / 1000.0).powi(2);
    for cat in PoiCategory::ALL {
        let count = (params.poi_density[cat.index()] * area_km2).round() as usize;
        for _ in 0..count {
            let (i, j) = (rng.random_range(0..=n), rng.random_range(0..=n));
            let at = scatter(&mut rng, node_pos(params, i, j), 30.0);
            push(&mut pois, cat, at);
        }
    }
    Ok(World {
        params: params.clone(),
        network,
        pois,
        lots,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorParams {
    /// P(spell = L samples) at index L - 1.
    pub occupied_pmf: Vec<f64>,
    pub vacant_pmf: Vec<f64>,
    /// Mean and standard deviation of the per-spell speed, m/s.
    pub occupied_speed: (f64, f64),
    pub cruising_speed: (f64, f64),
    /// Chance an occupied spell ends in a park.
    pub park_prob: f64,
    pub roadside_share: f64,
    pub dwell_min_s: f64,
    pub dwell_extra_mean_s: f64,
    pub dwell_max_s: f64,
    pub gps_sigma_m: f64,
    pub sample_mean_s: f64,
    pub sample_jitter_s: f64,
    pub sample_min_s: i64,
    pub sample_max_s: i64,
    pub light_prob: f64,
    pub light_max_s: f64,
    /// Chance of one jam per driving spell.
    pub jam_prob: f64,
    pub jam_s: (f64, f64),
    pub shift_start_hour: f64,
    pub shift_start_spread_h: f64,
    pub shift_hours: f64,
}

/// Vacant lengths: `p_one` at one sample, the rest geometric with ratio `r`,
/// truncated at `max` and renormalised within the tail.
pub fn vacant_pmf(p_one: f64, r: f64, max: usize) -> Vec<f64> {
    let mut pmf = vec![0.0; max];
    pmf[0] = p_one;
    let tail: Vec<f64> = (2..=max).map(|l| r.powi(l as i32 - 2)).collect();
    let z: f64 = tail.iter().sum();
    for (l, w) in tail.iter().enumerate() {
        pmf[l + 1] = (1.0 - p_one) * w / z;
    }
    pmf
}

/// Gamma density evaluated at 1..=max and normalised; mode at `(k - 1) θ`.
pub fn discretized_gamma(k: f64, theta: f64, max: usize) -> Vec<f64> {
    let w: Vec<f64> = (1..=max)
        .map(|l| (l as f64).powf(k - 1.0) * (-(l as f64) / theta).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

pub fn pmf_mean(pmf: &[f64]) -> f64 {
    pmf.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum()
}

pub const DEFAULT_MAX_SPELL: usize = 20;

impl Default for BehaviorParams {
    fn default() -> Self {
        Self {
            occupied_pmf: discretized_gamma(6.0, 2.0, DEFAULT_MAX_SPELL),
            vacant_pmf: vacant_pmf(0.2, 0.955, DEFAULT_MAX_SPELL),
            occupied_speed: (10.0, 2.5),
            cruising_speed: (5.0, 2.0),
            park_prob: 0.3,
            roadside_share: 0.3,
            dwell_min_s: 240.0,
            dwell_extra_mean_s: 1200.0,
            dwell_max_s: 3600.0,
            gps_sigma_m: 10.0,
            sample_mean_s: 60.0,
            sample_jitter_s: 6.0,
            sample_min_s: 45,
            sample_max_s: 90,
            light_prob: 0.3,
            light_max_s: 120.0,
            jam_prob: 0.12,
            jam_s: (200.0, 400.0),
            shift_start_hour: 6.0,
            shift_start_spread_h: 4.0,
            shift_hours: 10.0,
        }
    }
}

impl BehaviorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, pmf) in [("occupied", &self.occupied_pmf), ("vacant", &self.vacant_pmf)] {
            let s: f64 = pmf.iter().sum();
            if pmf.is_empty() || (s - 1.0).abs() > 1e-9 || pmf.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::Invalid(format!("{name} duration pmf is not normalised")));
            }
        }
        if !(self.occupied_speed.0 > 0.0 && self.cruising_speed.0 > 0.0) {
            return Err(Error::Invalid("speeds must be positive".into()));
        }
        if self.sample_min_s <= 0 || self.sample_min_s > self.sample_max_s {
            return Err(Error::Invalid("sampling interval bounds are inverted".into()));
        }
        if !(self.dwell_min_s > 0.0 && self.dwell_max_s >= self.dwell_min_s) {
            return Err(Error::Invalid("dwell bounds are inverted".into()));
        }
        for p in [self.park_prob, self.roadside_share, self.light_prob, self.jam_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("probability {p} outside [0, 1]")));
            }
        }
        if !(self.gps_sigma_m >= 0.0) || !(self.shift_hours > 0.0) {
            return Err(Error::Invalid("noise and shift length must be non-negative".into()));
        }
        Ok(())
    }

    /// Expected share of O among O/N samples, ignoring shift truncation.
    pub fn occupied_share(&self) -> f64 {
        let (o, n) = (pmf_mean(&self.occupied_pmf), pmf_mean(&self.vacant_pmf));
        o / (o + n)
    }
}

fn sample_pmf(rng: &mut ChaCha8Rng, pmf: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return i + 1;
        }
    }
    pmf.len()
}

type Node = (usize, usize);

struct Day<'a> {
    world: &'a World,
    beh: &'a BehaviorParams,
    rng: ChaCha8Rng,
    times: Vec<i64>,
    labels: Vec<Label>,
    points: Vec<GpsPoint>,
    now: f64,
    pos: LatLon,
    target: Node,
    prev: Node,
}

/// Stationary-noise state: one offset shared by the whole stop.
#[derive(Clone, Copy)]
struct Stop {
    east: f64,
    north: f64,
}

impl<'a> Day<'a> {
    fn driving_noise(&mut self, p: LatLon) -> LatLon {
        let s = self.beh.gps_sigma_m;
        let e = clipped_normal(&mut self.rng, s, 3.0 * s);
        let n = clipped_normal(&mut self.rng, s, 3.0 * s);
        p.offset_m(e, n)
    }

    fn new_stop(&mut self) -> Stop {
        let s = self.beh.gps_sigma_m;
        Stop {
            east: clipped_normal(&mut self.rng, s, 3.0 * s),
            north: clipped_normal(&mut self.rng, s, 3.0 * s),
        }
    }

    fn stop_noise(&mut self, p: LatLon, stop: Stop) -> LatLon {
        let s = self.beh.gps_sigma_m / 4.0;
        let (mut e, mut n) = (
            clipped_normal(&mut self.rng, s, 3.0 * s),
            clipped_normal(&mut self.rng, s, 3.0 * s),
        );
        // radial clip keeps any two jittered fixes within 1.5 sigma
        let r = (e * e + n * n).sqrt();
        if r > 3.0 * s {
            e *= 3.0 * s / r;
            n *= 3.0 * s / r;
        }
        p.offset_m(stop.east + e, stop.north + n)
    }

    fn emit(&mut self, p: LatLon, stop: Option<Stop>) {
        let k = self.points.len();
        let q = match stop {
            Some(s) => self.stop_noise(p, s),
            None => self.driving_noise(p),
        };
        self.points
            .push(GpsPoint::labeled(q.lat, q.lon, self.times[k], self.labels[k]));
    }

    /// Moves in a straight line from `self.pos` to `to` over [now, until).
    fn move_to(&mut self, to: LatLon, until: f64) {
        let (from, t0) = (self.pos, self.now);
        while self.points.len() < self.times.len() && (self.times[self.points.len()] as f64) < until {
            let t = self.times[self.points.len()] as f64;
            let f = if until > t0 { ((t - t0) / (until - t0)).clamp(0.0, 1.0) } else { 1.0 };
            let p = LatLon::new(from.lat + f * (to.lat - from.lat), from.lon + f * (to.lon - from.lon));
            self.emit(p, None);
        }
        self.pos = to;
        self.now = until;
    }

    fn stay(&mut self, until: f64) {
        let stop = self.new_stop();
        while self.points.len() < self.times.len() && (self.times[self.points.len()] as f64) < until {
            self.emit(self.pos, Some(stop));
        }
        self.now = until;
    }

    fn at_node(&self) -> bool {
        self.pos == self.world.node_pos(self.target)
    }

    fn manhattan(&self, a: Node, b: Node) -> usize {
        a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
    }

    /// Route length (m) from intersection `from` into `lot`, and the lot end used.
    fn lot_route(&self, from: Node, lot: &Lot) -> (f64, Node) {
        let bm = self.world.params.block_m;
        let via_a = self.manhattan(from, lot.a) as f64 * bm + lot.frac * bm;
        let via_b = self.manhattan(from, lot.b) as f64 * bm + (1.0 - lot.frac) * bm;
        if via_a <= via_b {
            (via_a, lot.a)
        } else {
            (via_b, lot.b)
        }
    }

    fn path(&self, from: Node, to: Node) -> Vec<Node> {
        let mut v = Vec::new();
        let (mut i, mut j) = from;
        while i != to.0 {
            i = if i < to.0 { i + 1 } else { i - 1 };
            v.push((i, j));
        }
        while j != to.1 {
            j = if j < to.1 { j + 1 } else { j - 1 };
            v.push((i, j));
        }
        v
    }

    /// Drives over [now, until); with a lot, arrives there exactly at `until`
    /// when reachable. Returns the lot reached, if any.
    fn drive(&mut self, until: f64, speed: f64, lot: Option<Lot>) -> Option<Lot> {
        let mut jam = self.rng.random_bool(self.beh.jam_prob).then(|| {
            let at = self.now + self.rng.random::<f64>() * (until - self.now);
            let dur = self.rng.random_range(self.beh.jam_s.0..=self.beh.jam_s.1);
            (at, dur)
        });
        while self.now < until {
            if self.at_node() {
                let node = self.target;
                if let Some(lot) = lot {
                    let remaining = until - self.now;
                    let (d, end) = self.lot_route(node, &lot);
                    if d >= 0.8 * remaining * speed {
                        if d > 2.0 * remaining * speed {
                            // overshot: give up on the lot
                            self.wander(until, speed);
                            return None;
                        }
                        self.follow_to_lot(node, end, &lot, until, d);
                        return Some(lot);
                    }
                }
                if let Some((at, dur)) = jam {
                    if self.now >= at {
                        jam = None;
                        let end = (self.now + dur).min(until);
                        self.stay(end);
                        continue;
                    }
                }
                if self.rng.random_bool(self.beh.light_prob) {
                    let wait = self.rng.random_range(10.0..=self.beh.light_max_s);
                    self.stay((self.now + wait).min(until));
                    continue_after_light(self, node);
                    continue;
                }
                continue_after_light(self, node);
            } else {
                self.step(until, speed);
            }
        }
        None
    }

    fn wander(&mut self, until: f64, speed: f64) {
        while self.now < until {
            if self.at_node() {
                let node = self.target;
                continue_after_light(self, node);
            } else {
                self.step(until, speed);
            }
        }
    }

    /// One move toward `target`, truncated at `until`.
    fn step(&mut self, until: f64, speed: f64) {
        let goal = self.world.node_pos(self.target);
        let v = speed * self.rng.random_range(0.8..1.2);
        let dt = self.pos.distance(&goal) / v;
        if self.now + dt <= until {
            self.move_to(goal, self.now + dt);
        } else {
            let f = (until - self.now) / dt;
            let p = LatLon::new(
                self.pos.lat + f * (goal.lat - self.pos.lat),
                self.pos.lon + f * (goal.lon - self.pos.lon),
            );
            self.move_to(p, until);
        }
    }

    fn follow_to_lot(&mut self, from: Node, end: Node, lot: &Lot, until: f64, dist: f64) {
        let v = dist / (until - self.now);
        for n in self.path(from, end) {
            let p = self.world.node_pos(n);
            let t = self.now + self.pos.distance(&p) / v;
            self.move_to(p, t.min(until));
        }
        self.move_to(lot.pos, until);
        let other = if end == lot.a { lot.b } else { lot.a };
        // leave the lot toward either end of its segment
        if self.rng.random_bool(0.5) {
            self.target = other;
            self.prev = end;
        } else {
            self.target = end;
            self.prev = other;
        }
    }

    fn park(&mut self, until: f64) {
        self.stay(until);
    }
}

fn continue_after_light(day: &mut Day, node: Node) {
    let mut options = day.world.neighbors(node);
    if options.len() > 1 {
        options.retain(|n| *n != day.prev);
    }
    let next = options[day.rng.random_range(0..options.len())];
    day.prev = node;
    day.target = next;
}

fn sample_times(rng: &mut ChaCha8Rng, beh: &BehaviorParams, start: i64, end: i64) -> Vec<i64> {
    let mut times = Vec::new();
    let mut t = start;
    while t <= end {
        times.push(t);
        t = next_sample(rng, beh, t);
    }
    times
}

fn next_sample(rng: &mut ChaCha8Rng, beh: &BehaviorParams, t: i64) -> i64 {
    let dt = beh.sample_mean_s + clipped_normal(rng, beh.sample_jitter_s, f64::INFINITY);
    t + (dt.round() as i64).clamp(beh.sample_min_s, beh.sample_max_s)
}

fn simulate_day(world: &World, beh: &BehaviorParams, rng: ChaCha8Rng, day: usize) -> Vec<GpsPoint> {
    let n = world.params.blocks;
    let mut d = Day {
        world,
        beh,
        rng,
        times: Vec::new(),
        labels: Vec::new(),
        points: Vec::new(),
        now: 0.0,
        pos: LatLon::new(0.0, 0.0),
        target: (0, 0),
        prev: (0, 0),
    };
    let spread = (beh.shift_start_spread_h * 3600.0) as i64;
    let start = EPOCH_START
        + day as i64 * 86_400
        + (beh.shift_start_hour * 3600.0) as i64
        + if spread > 0 { d.rng.random_range(0..spread) } else { 0 };
    let end = start + (beh.shift_hours * 3600.0) as i64;
    d.times = sample_times(&mut d.rng, beh, start, end);
    let mut len = d.times.len();
    d.labels = vec![Label::N; len];
    let node = (d.rng.random_range(0..=n), d.rng.random_range(0..=n));
    d.target = node;
    d.prev = node;
    d.pos = world.node_pos(node);
    d.now = d.times[0] as f64 - 1.0;

    let boundary = |times: &[i64], last: usize| -> f64 {
        if last + 1 < times.len() {
            (times[last] + times[last + 1]) as f64 / 2.0
        } else {
            times[last] as f64 + 1.0
        }
    };

    let mut k = 0;
    let mut state = Label::N;
    while k < len {
        match state {
            Label::N | Label::O => {
                let pmf = if state == Label::O { &beh.occupied_pmf } else { &beh.vacant_pmf };
                let l = sample_pmf(&mut d.rng, pmf);
                let last = (k + l).min(len) - 1;
                d.labels[k..=last].fill(state);
                let until = boundary(&d.times, last);
                let (mean, sd) = if state == Label::O { beh.occupied_speed } else { beh.cruising_speed };
                let speed = (mean + clipped_normal(&mut d.rng, sd, 2.0 * sd)).max(0.3 * mean);
                let parks = state == Label::O && d.rng.random_bool(beh.park_prob);
                let lot = if parks && !world.lots.is_empty() && !d.rng.random_bool(beh.roadside_share) {
                    choose_lot(&mut d, until, speed)
                } else {
                    None
                };
                d.drive(until, speed, lot);
                k = last + 1;
                state = match (state, parks) {
                    (Label::O, true) => Label::P,
                    (Label::O, false) => Label::N,
                    _ => Label::O,
                };
            }
            Label::P => {
                let extra = -beh.dwell_extra_mean_s * (1.0 - d.rng.random::<f64>()).ln();
                let dwell = (beh.dwell_min_s + extra).min(beh.dwell_max_s);
                // a park begun near the shift end runs past it to its full dwell
                let mut last = k;
                while ((d.times[last] - d.times[k]) as f64) < dwell {
                    if last + 1 == d.times.len() {
                        let t = next_sample(&mut d.rng, beh, d.times[last]);
                        d.times.push(t);
                        d.labels.push(Label::P);
                    }
                    last += 1;
                }
                len = d.times.len();
                d.labels[k..=last].fill(Label::P);
                let until = boundary(&d.times, last);
                d.park(until);
                k = last + 1;
                state = Label::N;
            }
        }
    }
    debug_assert_eq!(d.points.len(), len);
    d.points
}

/// Picks a lot reachable within the spell from the taxi's next intersection.
fn choose_lot(d: &mut Day, until: f64, speed: f64) -> Option<Lot> {
    let first_leg = d.pos.distance(&d.world.node_pos(d.target));
    let budget = (until - d.now) * speed - first_leg;
    if budget <= 0.0 {
        return None;
    }
    let reachable: Vec<Lot> = d
        .world
        .lots
        .iter()
        .filter(|l| d.lot_route(d.target, l).0 <= budget)
        .copied()
        .collect();
    if reachable.is_empty() {
        return None;
    }
    let i = d.rng.random_range(0..reachable.len());
    Some(reachable[i])
}

pub fn taxi_id(i: usize) -> String {
    format!("taxi_{i:04}")
}

/// Per-taxi stream of the master seed; independent of simulation order.
fn taxi_rng(seed: u64, taxi: usize, day: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((taxi as u64) << 16) | day as u64);
    rng
}

pub fn simulate_taxi(world: &World, beh: &BehaviorParams, days: usize, seed: u64, taxi: usize) -> Result<Trajectory> {
    let mut pts = Vec::new();
    for day in 0..days {
        pts.extend(simulate_day(world, beh, taxi_rng(seed, taxi, day), day));
    }
    Trajectory::new(taxi_id(taxi), pts)
}

/// Simulates `n_taxis` taxis for `days` days each. Taxis run in parallel on the
/// current rayon pool; output order and content do not depend on the pool.
pub fn simulate_fleet(
    world: &World,
    beh: &BehaviorParams,
    n_taxis: usize,
    days: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    beh.validate()?;
    if n_taxis == 0 || days == 0 {
        return Ok(Vec::new());
    }
    if world.network.is_empty() {
        return Err(Error::EmptyNetwork);
    }
    (0..n_taxis)
        .into_par_iter()
        .map(|i| simulate_taxi(world, beh, days, seed, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{network_to_json, write_pois};

    fn small() -> WorldParams {
        WorldParams {
            blocks: 10,
            block_m: 100.0,
            ..WorldParams::default()
        }
    }

    #[test]
    fn empty_grid_has_empty_network() {
        let w = generate_world(&WorldParams { blocks: 0, ..small() }, 1).unwrap();
        assert!(w.network.is_empty());
        assert!(w.pois.is_empty());
    }

    #[test]
    fn grid_segment_count_is_closed_form() {
        let w = generate_world(&small(), 1).unwrap();
        // n rows of n+1 east edges, and the same north
        assert_eq!(w.network.len(), 2 * 10 * 11);
        let ring = w.network.segments().iter().filter(|s| s.level == 1).count();
        assert_eq!(ring, 4 * 10);
        let arterial = w.network.segments().iter().filter(|s| s.level == 2).count();
        // interior lines 5 in each direction
        assert_eq!(arterial, 2 * 10);
    }

    #[test]
    fn world_is_deterministic() {
        let dump = |w: &World| {
            let mut buf = Vec::new();
            write_pois(&mut buf, &w.pois).unwrap();
            (network_to_json(&w.network).unwrap(), buf)
        };
        let a = generate_world(&small(), 7).unwrap();
        let b = generate_world(&small(), 7).unwrap();
        let c = generate_world(&small(), 8).unwrap();
        assert_eq!(dump(&a), dump(&b));
        assert_ne!(dump(&a).1, dump(&c).1);
        for lot in &a.lots {
            let m = a.network.match_point(lot.pos).unwrap();
            assert!(m.distance_to_road < 1e-6);
        }
    }

    #[test]
    fn pmfs_match_configured_shapes() {
        let v = vacant_pmf(0.2, 0.955, DEFAULT_MAX_SPELL);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(v[0], 0.2);
        let o = discretized_gamma(6.0, 2.0, DEFAULT_MAX_SPELL);
        let mode = o.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 + 1;
        assert_eq!(mode, 10);
        let share = BehaviorParams::default().occupied_share();
        assert!((0.55..=0.60).contains(&share), "{share}");
    }

    #[test]
    fn no_taxis_no_output() {
        let w = generate_world(&small(), 1).unwrap();
        assert!(simulate_fleet(&w, &BehaviorParams::default(), 0, 7, 1).unwrap().is_empty());
    }

    #[test]
    fn noiseless_points_lie_on_roads() {
        let w = generate_world(&small(), 3).unwrap();
        let beh = BehaviorParams {
            gps_sigma_m: 0.0,
            ..BehaviorParams::default()
        };
        let fleet = simulate_fleet(&w, &beh, 3, 2, 5).unwrap();
        for tr in &fleet {
            for p in &tr.points {
                assert!(p.label.is_some());
                let m = w.network.match_point(p.latlon()).unwrap();
                assert!(m.distance_to_road < 1e-6, "{}", m.distance_to_road);
            }
        }
    }

    #[test]
    fn parked_runs_stay_compact() {
        let w = generate_world(&small(), 3).unwrap();
        let beh = BehaviorParams::default();
        let fleet = simulate_fleet(&w, &beh, 5, 3, 9).unwrap();
        let mut runs = 0;
        for tr in &fleet {
            for c in crate::parking::true_park_intervals(tr) {
                runs += 1;
                let chord = c.points[0].distance(&c.points[c.points.len() - 1]);
                assert!(chord < 2.0 * beh.gps_sigma_m + 5.0, "chord {chord}");
            }
        }
        assert!(runs > 10);
    }

    #[test]
    fn pool_size_does_not_change_output() {
        let w = generate_world(&small(), 3).unwrap();
        let beh = BehaviorParams::default();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_fleet(&w, &beh, 6, 2, 11).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
