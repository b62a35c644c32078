//! Line-oriented readers and writers for trajectories, road networks and POIs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::LatLon;
use crate::poi::{Poi, PoiCategory};
use crate::road::{RoadNetwork, RoadSegment};
use crate::trajectory::{GpsPoint, Label, Trajectory};

#[derive(Serialize, Deserialize)]
struct PointRecord {
    taxi: String,
    lat: f64,
    lon: f64,
    t: i64,
    label: Option<Label>,
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    segments: Vec<SegmentRecord>,
}

#[derive(Serialize, Deserialize)]
struct SegmentRecord {
    id: u32,
    level: u8,
    polyline: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct PoiRecord {
    id: u64,
    cat: PoiCategory,
    lat: f64,
    lon: f64,
}

fn parse_err(path: &Path, line: usize, message: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

/// Non-blank lines with 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Reads a point-per-line JSON file into one trajectory per taxi.
pub fn load_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let mut out: Vec<Trajectory> = Vec::new();
    let mut finished = std::collections::HashSet::new();
    for (line, text) in read_lines(path)? {
        let rec: PointRecord =
            serde_json::from_str(&text).map_err(|e| parse_err(path, line, e))?;
        let p = GpsPoint {
            lat: rec.lat,
            lon: rec.lon,
            t: rec.t,
            label: rec.label,
        };
        p.validate().map_err(|e| parse_err(path, line, e))?;
        match out.last_mut() {
            Some(cur) if cur.taxi_id == rec.taxi => {
                let prev = cur.points.last().expect("trajectories are non-empty").t;
                if p.t <= prev {
                    return Err(Error::Monotonicity {
                        path: path.to_path_buf(),
                        line,
                        taxi: rec.taxi,
                        t: p.t,
                    });
                }
                cur.points.push(p);
            }
            _ => {
                if let Some(cur) = out.last() {
                    finished.insert(cur.taxi_id.clone());
                }
                if finished.contains(&rec.taxi) {
                    return Err(parse_err(
                        path,
                        line,
                        format!("points for taxi {} are not contiguous", rec.taxi),
                    ));
                }
                out.push(Trajectory {
                    taxi_id: rec.taxi,
                    points: vec![p],
                });
            }
        }
    }
    Ok(out)
}

pub fn write_trajectories<W: Write>(mut w: W, trajs: &[Trajectory]) -> Result<()> {
    for tr in trajs {
        for p in &tr.points {
            let rec = PointRecord {
                taxi: tr.taxi_id.clone(),
                lat: p.lat,
                lon: p.lon,
                t: p.t,
                label: p.label,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn save_trajectories(path: impl AsRef<Path>, trajs: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trajectories(&mut w, trajs)?;
    w.flush()?;
    Ok(())
}

pub fn load_network(path: impl AsRef<Path>) -> Result<RoadNetwork> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok(RoadNetwork::empty());
    }
    let file: NetworkFile = serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e))?;
    let segments = file
        .segments
        .into_iter()
        .map(|s| RoadSegment {
            road_id: s.id,
            level: s.level,
            polyline: s.polyline.iter().map(|v| LatLon::new(v[0], v[1])).collect(),
        })
        .collect::<Vec<_>>();
    for s in &segments {
        for v in &s.polyline {
            GpsPoint::new(v.lat, v.lon, 0)
                .validate()
                .map_err(|e| parse_err(path, 0, e))?;
        }
    }
    RoadNetwork::new(segments).map_err(|e| parse_err(path, 0, e))
}

pub fn network_to_json(net: &RoadNetwork) -> Result<String> {
    let file = NetworkFile {
        segments: net
            .segments()
            .iter()
            .map(|s| SegmentRecord {
                id: s.road_id,
                level: s.level,
                polyline: s.polyline.iter().map(|v| [v.lat, v.lon]).collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn save_network(path: impl AsRef<Path>, net: &RoadNetwork) -> Result<()> {
    let mut text = network_to_json(net)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_pois(path: impl AsRef<Path>) -> Result<Vec<Poi>> {
    let path = path.as_ref();
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            let rec: PoiRecord =
                serde_json::from_str(&text).map_err(|e| parse_err(path, line, e))?;
            GpsPoint::new(rec.lat, rec.lon, 0)
                .validate()
                .map_err(|e| parse_err(path, line, e))?;
            Ok(Poi {
                poi_id: rec.id,
                category: rec.cat,
                lat: rec.lat,
                lon: rec.lon,
            })
        })
        .collect()
}

pub fn write_pois<W: Write>(mut w: W, pois: &[Poi]) -> Result<()> {
    for p in pois {
        let rec = PoiRecord {
            id: p.poi_id,
            cat: p.category,
            lat: p.lat,
            lon: p.lon,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_pois(path: impl AsRef<Path>, pois: &[Poi]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pois(&mut w, pois)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_files_load_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_trajectories(&p).unwrap().is_empty());
        assert!(load_pois(&p).unwrap().is_empty());
        assert!(load_network(&p).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_latitude_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        std::fs::write(
            &p,
            "{\"taxi\":\"a\",\"lat\":39.9,\"lon\":116.4,\"t\":0,\"label\":null}\n\
             {\"taxi\":\"a\",\"lat\":95,\"lon\":116.4,\"t\":60,\"label\":\"O\"}\n",
        )
        .unwrap();
        match load_trajectories(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn regressing_time_is_monotonicity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        std::fs::write(
            &p,
            "{\"taxi\":\"a\",\"lat\":39.9,\"lon\":116.4,\"t\":60,\"label\":null}\n\
             {\"taxi\":\"a\",\"lat\":39.9,\"lon\":116.4,\"t\":30,\"label\":null}\n",
        )
        .unwrap();
        assert!(matches!(
            load_trajectories(&p),
            Err(Error::Monotonicity { line: 2, .. })
        ));
    }

    #[test]
    fn garbage_line_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        std::fs::write(&p, "{\"id\":1,\"cat\":\"zoo\",\"lat\":1,\"lon\":1}\n").unwrap();
        assert!(matches!(load_pois(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn trajectory_bytes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let tr = Trajectory::new(
            "cab-1",
            vec![
                GpsPoint::labeled(39.912345678901234, 116.40000000000001, 100, Label::O),
                GpsPoint::new(39.9, 116.4, 161),
            ],
        )
        .unwrap();
        save_trajectories(&p, std::slice::from_ref(&tr)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = load_trajectories(&p).unwrap();
        assert_eq!(back, vec![tr]);
        save_trajectories(&p, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }
}
