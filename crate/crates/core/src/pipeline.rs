//! Stage functions chaining parking detection, segmentation, local scoring and
//! HSMM smoothing, plus the configuration and manifest records shared by
//! every artifact-producing step.
//!
//! Every parallel map here collects in input order, so results do not depend
//! on the size of the rayon pool.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{fit_platt, Calibration, LocalClassifier};
use crate::error::{Error, Result};
use crate::features::{self, PointFeatureVector, RoadStats, TrajectoryFeatures};
use crate::hsmm::{self, discretize, HsmmModel, LabeledSequence, State};
use crate::parking::{
    self, detect_candidates, history_pass, CandidateSet, HistoryStore, ScoredCandidate,
};
use crate::poi::PoiIndex;
use crate::road::RoadNetwork;
use crate::trajectory::{split_on_gaps, Label, Trajectory};
use crate::tree::{train_tree, Table, TreeModel, TreeParams};

/// Tunable parameters; everything that can change an artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub delta_m: f64,
    pub tau_s: f64,
    pub max_gap_s: i64,
    pub tree: TreeParams,
    pub bins: usize,
    pub max_duration: usize,
    pub calibration_folds: usize,
    pub cv_folds: usize,
    /// Rows used to grow status trees; 0 keeps every row.
    pub max_tree_rows: usize,
    pub accept_threshold: f64,
    pub seed: u64,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            delta_m: parking::DEFAULT_DELTA_M,
            tau_s: parking::DEFAULT_TAU_S,
            max_gap_s: crate::trajectory::DEFAULT_MAX_GAP_S,
            tree: TreeParams::default(),
            bins: hsmm::DEFAULT_BINS,
            max_duration: hsmm::DEFAULT_MAX_DURATION,
            calibration_folds: 5,
            cv_folds: 10,
            max_tree_rows: 200_000,
            accept_threshold: 0.5,
            seed: 42,
        }
    }
}

impl Params {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if !(self.delta_m > 0.0) {
            return bad("delta must be positive");
        }
        if !(self.tau_s > 0.0) {
            return bad("tau must be positive");
        }
        if self.max_gap_s <= 0 {
            return bad("max gap must be positive");
        }
        if self.bins == 0 || self.max_duration == 0 {
            return bad("B and D must be positive");
        }
        if self.calibration_folds < 2 || self.cv_folds < 2 {
            return bad("fold counts must be at least 2");
        }
        if self.tree.min_leaf == 0 || self.tree.max_depth == 0 {
            return bad("tree depth and leaf size must be positive");
        }
        if !(0.0..=1.0).contains(&self.accept_threshold) {
            return bad("acceptance threshold outside [0, 1]");
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("params serialize");
        sha256_hex(json.as_bytes())[..16].to_string()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub network: Option<PathBuf>,
    pub pois: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub params: Params,
    pub paths: Paths,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.params.validate()?;
        Ok(cfg)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    /// File name only, so manifests do not depend on the working directory.
    pub name: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            name: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: file_sha256(path)?,
        })
    }
}

/// Provenance record written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: String,
    pub version: String,
    pub config_hash: String,
    pub params: Params,
    /// Step-specific settings not covered by `params` (e.g. generator knobs).
    pub extra: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn new(step: &str, params: &Params) -> Self {
        Self {
            step: step.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: params.hash(),
            params: params.clone(),
            extra: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Splits every trajectory at sampling gaps longer than `max_gap`.
pub fn split_pieces(trajs: &[Trajectory], max_gap: i64) -> Vec<Trajectory> {
    trajs.iter().flat_map(|t| split_on_gaps(t, max_gap)).collect()
}

/// Candidates of every piece, tagged with the piece index.
pub fn detect_all(pieces: &[Trajectory], delta: f64, tau: f64) -> Vec<(usize, CandidateSet)> {
    pieces
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            detect_candidates(p, delta, tau)
                .into_iter()
                .map(|c| (i, c))
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Detects, featurises and decides every candidate with one time-ordered
/// history pass. Output follows piece order.
pub fn parking_stage<F>(
    pieces: &[Trajectory],
    net: &RoadNetwork,
    pois: &PoiIndex,
    params: &Params,
    store: &mut HistoryStore,
    decide: F,
) -> Result<Vec<(usize, ScoredCandidate)>>
where
    F: FnMut(&CandidateSet, &parking::ParkingFeatureVector) -> Result<(f64, bool)>,
{
    let tagged = detect_all(pieces, params.delta_m, params.tau_s);
    let feats: Vec<parking::ParkingFeatureVector> = tagged
        .par_iter()
        .map(|(_, c)| parking::base_features(c, net, pois))
        .collect::<Result<_>>()?;
    let (idx, cands): (Vec<usize>, Vec<CandidateSet>) = tagged.into_iter().unzip();
    let scored = history_pass(cands.into_iter().zip(feats).collect(), store, decide)?;
    Ok(idx.into_iter().zip(scored).collect())
}

/// Parking stage with ground truth as the decision: a candidate is accepted
/// when most of its points are labelled P.
pub fn parking_truth_pass(
    pieces: &[Trajectory],
    net: &RoadNetwork,
    pois: &PoiIndex,
    params: &Params,
) -> Result<(Vec<(usize, ScoredCandidate)>, HistoryStore)> {
    let mut store = HistoryStore::new();
    let out = parking_stage(pieces, net, pois, params, &mut store, |c, _| {
        let t = c.is_true_park();
        Ok((t as u8 as f64, t))
    })?;
    Ok((out, store))
}

pub fn train_parking_model(
    scored: &[(usize, ScoredCandidate)],
    params: &Params,
) -> Result<TreeModel> {
    let examples: Vec<(parking::ParkingFeatureVector, bool)> = scored
        .iter()
        .map(|(_, s)| (s.features, s.candidate.is_true_park()))
        .collect();
    parking::train_parking_filter(&examples, params.tree)
}

pub fn apply_parking_model(
    pieces: &[Trajectory],
    net: &RoadNetwork,
    pois: &PoiIndex,
    params: &Params,
    filter: &TreeModel,
    store: &mut HistoryStore,
) -> Result<Vec<(usize, ScoredCandidate)>> {
    let threshold = params.accept_threshold;
    parking_stage(pieces, net, pois, params, store, |_, f| {
        let p = filter.predict_raw(&f.to_row())?;
        Ok((p, p > threshold))
    })
}

/// Running segments left after removing accepted parks, tagged with the
/// piece index and the segment's offset inside that piece.
pub fn running_segments(
    pieces: &[Trajectory],
    parks: &[(usize, ScoredCandidate)],
) -> Result<Vec<(usize, usize, Trajectory)>> {
    let mut by_piece: Vec<Vec<CandidateSet>> = vec![Vec::new(); pieces.len()];
    for (i, s) in parks {
        if s.accepted {
            by_piece[*i].push(s.candidate.clone());
        }
    }
    let mut out = Vec::new();
    for (i, (piece, parks)) in pieces.iter().zip(&by_piece).enumerate() {
        let mut covered = vec![false; piece.len()];
        for c in parks {
            covered[c.start_index..=c.end_index].iter_mut().for_each(|x| *x = true);
        }
        let segs = parking::segment_trajectory(piece, parks)?;
        let mut offset = 0;
        for s in segs {
            while covered[offset] {
                offset += 1;
            }
            let len = s.len();
            out.push((i, offset, s));
            offset += len;
        }
    }
    Ok(out)
}

/// Pieces cut at their ground-truth P runs.
pub fn truth_segments(pieces: &[Trajectory]) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for p in pieces {
        out.extend(parking::segment_trajectory(p, &parking::true_park_intervals(p))?);
    }
    Ok(out)
}

/// Road statistics by shard-local counting and an ordered merge.
pub fn build_stats(segments: &[Trajectory], net: &RoadNetwork) -> Result<RoadStats> {
    let shards: Vec<RoadStats> = segments
        .par_chunks(64)
        .map(|chunk| features::build_road_stats(chunk, net))
        .collect::<Result<_>>()?;
    let mut stats = RoadStats::default();
    for s in &shards {
        stats.merge(s);
    }
    Ok(stats)
}

pub fn segment_features(
    segments: &[Trajectory],
    net: &RoadNetwork,
    pois: &PoiIndex,
    stats: &RoadStats,
) -> Result<Vec<Vec<PointFeatureVector>>> {
    segments
        .par_iter()
        .map(|s| {
            let m = features::match_trajectory(s, net)?;
            Ok(TrajectoryFeatures::new(s, &m, pois, stats).all())
        })
        .collect()
}

/// Feature table of running segments with O/N targets and taxi groups.
#[derive(Debug, Clone)]
pub struct StatusData {
    pub table: Table,
    pub labels: Vec<bool>,
    pub groups: Vec<u32>,
    pub seg_lens: Vec<usize>,
}

pub fn status_data(
    segments: &[Trajectory],
    net: &RoadNetwork,
    pois: &PoiIndex,
    stats: &RoadStats,
) -> Result<StatusData> {
    let mut taxis: Vec<&str> = segments.iter().map(|s| s.taxi_id.as_str()).collect();
    taxis.sort_unstable();
    taxis.dedup();
    let rows = segment_features(segments, net, pois, stats)?;
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut seg_lens = Vec::new();
    for s in segments {
        let g = taxis.binary_search(&s.taxi_id.as_str()).expect("present") as u32;
        for (i, p) in s.points.iter().enumerate() {
            match p.label {
                Some(Label::O) => labels.push(true),
                Some(Label::N) => labels.push(false),
                Some(Label::P) => {
                    return Err(Error::Invalid(format!(
                        "parked point {i} of {} inside a running segment",
                        s.taxi_id
                    )))
                }
                None => {
                    return Err(Error::UnlabeledPoint {
                        taxi: s.taxi_id.clone(),
                        index: i,
                    })
                }
            }
            groups.push(g);
        }
        seg_lens.push(s.len());
    }
    let flat: Vec<PointFeatureVector> = rows.into_iter().flatten().collect();
    Ok(StatusData {
        table: features::to_table(&flat),
        labels,
        groups,
        seg_lens,
    })
}

/// Evenly strided subset of `rows` of at most `cap` entries (all when 0).
fn strided(rows: &[usize], cap: usize) -> Vec<usize> {
    if cap == 0 || rows.len() <= cap {
        return rows.to_vec();
    }
    (0..cap).map(|k| rows[k * rows.len() / cap]).collect()
}

fn train_on(data: &StatusData, rows: &[usize], params: &Params) -> Result<TreeModel> {
    let rows = strided(rows, params.max_tree_rows);
    let labels: Vec<bool> = rows.iter().map(|&i| data.labels[i]).collect();
    train_tree(&data.table.select_rows(&rows), &labels, params.tree)
}

pub fn train_status_tree(data: &StatusData, params: &Params) -> Result<TreeModel> {
    let all: Vec<usize> = (0..data.labels.len()).collect();
    train_on(data, &all, params)
}

/// Raw tree scores for every row from trees that never saw the row's taxi.
pub fn out_of_fold_raw(data: &StatusData, params: &Params) -> Result<Vec<f64>> {
    let k = params.calibration_folds;
    let folds = crate::calibration::fold_assignment(data.labels.len(), Some(&data.groups), k);
    let per_fold: Vec<(Vec<usize>, Vec<f64>)> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] != fold).collect();
            let test: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] == fold).collect();
            if test.is_empty() {
                return Ok((test, Vec::new()));
            }
            let preds = match train_on(data, &train, params) {
                Ok(m) => m.predict_table(&data.table.select_rows(&test))?,
                Err(Error::SingleClass) | Err(Error::EmptyTraining) => {
                    let pos = train.iter().filter(|&&i| data.labels[i]).count() as u64;
                    vec![crate::tree::laplace(pos, train.len() as u64 - pos); test.len()]
                }
                Err(e) => return Err(e),
            };
            Ok((test, preds))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; data.labels.len()];
    for (rows, preds) in per_fold {
        for (i, p) in rows.into_iter().zip(preds) {
            out[i] = p;
        }
    }
    Ok(out)
}

pub fn fit_calibration(oof_raw: &[f64], labels: &[bool]) -> Result<Calibration> {
    fit_platt(oof_raw, labels)
}

/// Binned calibrated observations with true states, one per segment.
pub fn hsmm_sequences(
    data: &StatusData,
    oof_raw: &[f64],
    cal: &Calibration,
    bins: usize,
) -> Vec<LabeledSequence> {
    let mut out = Vec::with_capacity(data.seg_lens.len());
    let mut at = 0;
    for &len in &data.seg_lens {
        let obs = (at..at + len)
            .map(|i| discretize(cal.apply(oof_raw[i]), bins))
            .collect();
        let states = (at..at + len)
            .map(|i| if data.labels[i] { State::O } else { State::N })
            .collect();
        out.push(LabeledSequence { obs, states });
        at += len;
    }
    out
}

/// Everything the status stage needs at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusModels {
    pub stats: RoadStats,
    pub classifier: LocalClassifier,
    pub hsmm: HsmmModel,
}

/// Trained status models plus the binned training sequences, which allow
/// refitting the HSMM at other `D` without retraining the tree.
pub struct StatusTraining {
    pub models: StatusModels,
    pub sequences: Vec<LabeledSequence>,
}

pub fn train_status_models(
    segments: &[Trajectory],
    net: &RoadNetwork,
    pois: &PoiIndex,
    params: &Params,
) -> Result<StatusTraining> {
    let stats = build_stats(segments, net)?;
    let data = status_data(segments, net, pois, &stats)?;
    let (tree, oof) = rayon::join(
        || train_status_tree(&data, params),
        || out_of_fold_raw(&data, params),
    );
    let (tree, oof) = (tree?, oof?);
    let cal = fit_calibration(&oof, &data.labels)?;
    let sequences = hsmm_sequences(&data, &oof, &cal, params.bins);
    let hsmm = hsmm::fit_supervised(&sequences, params.bins, params.max_duration)?;
    Ok(StatusTraining {
        models: StatusModels {
            stats,
            classifier: LocalClassifier {
                tree,
                calibration: Some(cal),
            },
            hsmm,
        },
        sequences,
    })
}

/// Calibrated occupied probabilities per segment point.
pub fn local_probabilities(
    segments: &[Trajectory],
    net: &RoadNetwork,
    pois: &PoiIndex,
    stats: &RoadStats,
    classifier: &LocalClassifier,
) -> Result<Vec<Vec<f64>>> {
    let rows = segment_features(segments, net, pois, stats)?;
    rows.par_iter()
        .map(|r| classifier.predict_table(&features::to_table(r)))
        .collect()
}

/// Local decision alone: occupied when p > 0.5 (ties go to N).
pub fn threshold_states(probs: &[Vec<f64>]) -> Vec<Vec<State>> {
    probs
        .iter()
        .map(|s| s.iter().map(|&p| if p > 0.5 { State::O } else { State::N }).collect())
        .collect()
}

pub fn bin_sequences(probs: &[Vec<f64>], bins: usize) -> Vec<Vec<usize>> {
    probs
        .iter()
        .map(|s| s.iter().map(|&p| discretize(p, bins)).collect())
        .collect()
}

pub fn decode_all(model: &HsmmModel, obs: &[Vec<usize>]) -> Result<Vec<Vec<State>>> {
    obs.par_iter()
        .map(|o| Ok(hsmm::posterior_decode(model, o)?.states))
        .collect()
}

/// Per-point output of full inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointStatus {
    pub taxi: String,
    pub t: i64,
    pub p_local: Option<f64>,
    pub bin: Option<usize>,
    pub status: Label,
}

pub struct Inference {
    pub statuses: Vec<PointStatus>,
    pub candidates: Vec<(usize, ScoredCandidate)>,
    pub pieces: Vec<Trajectory>,
}

/// Parking filter, segmentation, local scoring and HSMM decoding. Points of
/// accepted parks are P; the rest take the decoded O/N state.
pub fn infer(
    trajs: &[Trajectory],
    net: &RoadNetwork,
    pois: &PoiIndex,
    params: &Params,
    filter: &TreeModel,
    store: &mut HistoryStore,
    models: &StatusModels,
) -> Result<Inference> {
    let pieces = split_pieces(trajs, params.max_gap_s);
    let candidates = apply_parking_model(&pieces, net, pois, params, filter, store)?;
    let segs = running_segments(&pieces, &candidates)?;
    let seg_trajs: Vec<Trajectory> = segs.iter().map(|(_, _, s)| s.clone()).collect();
    let probs = local_probabilities(&seg_trajs, net, pois, &models.stats, &models.classifier)?;
    let bins = models.hsmm.bins;
    let obs = bin_sequences(&probs, bins);
    let states = decode_all(&models.hsmm, &obs)?;

    let mut per_piece: Vec<Vec<PointStatus>> = pieces
        .iter()
        .map(|p| {
            p.points
                .iter()
                .map(|x| PointStatus {
                    taxi: p.taxi_id.clone(),
                    t: x.t,
                    p_local: None,
                    bin: None,
                    status: Label::P,
                })
                .collect()
        })
        .collect();
    for (k, (piece, offset, seg)) in segs.iter().enumerate() {
        for j in 0..seg.len() {
            let slot = &mut per_piece[*piece][offset + j];
            slot.p_local = Some(probs[k][j]);
            slot.bin = Some(obs[k][j]);
            slot.status = states[k][j].label();
        }
    }
    Ok(Inference {
        statuses: per_piece.into_iter().flatten().collect(),
        candidates,
        pieces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_world, simulate_fleet, BehaviorParams, WorldParams};

    #[test]
    fn params_round_trip_and_hash() {
        let p = Params::default();
        let json = serde_json::to_string(&p).unwrap();
        let back: Params = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.hash(), p.hash());
        let q = Params {
            max_duration: 1,
            ..Params::default()
        };
        assert_ne!(q.hash(), p.hash());
        let partial: PipelineConfig = serde_json::from_str(r#"{"params": {"tau_s": 240}}"#).unwrap();
        assert_eq!(partial.params.tau_s, 240.0);
        assert_eq!(partial.params.delta_m, 50.0);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"params": {"tau": 1}}"#).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let p = Params {
            delta_m: 0.0,
            ..Params::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn strided_subset_is_even() {
        let rows: Vec<usize> = (0..10).collect();
        assert_eq!(strided(&rows, 0), rows);
        assert_eq!(strided(&rows, 5), vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn running_segments_track_offsets() {
        let world = generate_world(&WorldParams { blocks: 8, ..WorldParams::default() }, 1).unwrap();
        let fleet = simulate_fleet(&world, &BehaviorParams::default(), 2, 1, 3).unwrap();
        let pieces = split_pieces(&fleet, 600);
        let pois = PoiIndex::new(world.pois.clone());
        let (scored, _) = parking_truth_pass(&pieces, &world.network, &pois, &Params::default()).unwrap();
        let segs = running_segments(&pieces, &scored).unwrap();
        let mut covered = 0;
        for (piece, offset, seg) in &segs {
            assert_eq!(&pieces[*piece].points[*offset..*offset + seg.len()], &seg.points[..]);
            covered += seg.len();
        }
        let parked: usize = scored
            .iter()
            .filter(|(_, s)| s.accepted)
            .map(|(_, s)| s.candidate.points.len())
            .sum();
        let total: usize = pieces.iter().map(|p| p.len()).sum();
        assert_eq!(covered + parked, total);
    }
}
