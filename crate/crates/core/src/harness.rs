//! Experiment harness: method comparison over training sizes and `D`,
//! taxi-grouped parking cross-validation with leave-one-feature-out
//! ablations, mutual-information ranking and three-class scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{binary_scores, confusion, make_folds, mutual_information, ConfusionMatrix};
use crate::hsmm::{self, State};
use crate::parking::{parking_table, true_park_intervals, train_parking_filter, ScoredCandidate};
use crate::pipeline::{
    bin_sequences, decode_all, local_probabilities, split_pieces, threshold_states,
    train_status_models, truth_segments, Params, PointStatus,
};
use crate::poi::PoiIndex;
use crate::road::RoadNetwork;
use crate::trajectory::{Label, Trajectory};
use crate::tree::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Thresholded local probability.
    Dt,
    /// HSMM decoding with `D = 1`.
    DtHmm,
    /// HSMM decoding with the configured `D`.
    DtHsmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonOptions {
    /// Training-set sizes in taxis; each is a prefix of the id-sorted taxi list.
    pub train_sizes: Vec<usize>,
    /// `D` values swept with the largest training set.
    pub sweep: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub train_taxis: usize,
    pub dt: f64,
    pub dt_hmm: f64,
    pub dt_hsmm: f64,
}

impl SizeRow {
    pub fn accuracy(&self, m: Method) -> f64 {
        match m {
            Method::Dt => self.dt,
            Method::DtHmm => self.dt_hmm,
            Method::DtHsmm => self.dt_hsmm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub test_taxis: usize,
    pub test_points: usize,
    pub occupied_share: f64,
    pub max_duration: usize,
    pub by_size: Vec<SizeRow>,
    pub sweep: Vec<SweepRow>,
}

fn distinct_taxis(trajs: &[Trajectory]) -> Vec<String> {
    let mut ids: Vec<String> = trajs.iter().map(|t| t.taxi_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}

fn accuracy(pred: &[Vec<State>], segs: &[Trajectory]) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, s) in pred.iter().zip(segs) {
        for (a, b) in p.iter().zip(&s.points) {
            n += 1;
            hit += (Some(a.label()) == b.label) as usize;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// O/N accuracy of the three methods on `test` after training on growing
/// prefixes of `train`. Both sides are cut at their labelled P runs, so the
/// comparison measures the status stage alone.
pub fn run_comparison(
    train: &[Trajectory],
    test: &[Trajectory],
    net: &RoadNetwork,
    pois: &PoiIndex,
    params: &Params,
    opts: &ComparisonOptions,
) -> Result<ComparisonReport> {
    let ids = distinct_taxis(train);
    let mut sizes = opts.train_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.is_empty() || sizes[0] == 0 || *sizes.last().unwrap() > ids.len() {
        return Err(Error::Invalid(format!(
            "training sizes {:?} not within 1..={}",
            opts.train_sizes,
            ids.len()
        )));
    }
    let test_segs = truth_segments(&split_pieces(test, params.max_gap_s))?;
    let test_points: usize = test_segs.iter().map(Trajectory::len).sum();
    let occupied = test_segs
        .iter()
        .flat_map(|s| &s.points)
        .filter(|p| p.label == Some(Label::O))
        .count();

    let mut by_size = Vec::new();
    let mut sweep = Vec::new();
    for (k, &n) in sizes.iter().enumerate() {
        let keep = &ids[..n];
        let subset: Vec<Trajectory> = train
            .iter()
            .filter(|t| keep.binary_search(&t.taxi_id).is_ok())
            .cloned()
            .collect();
        let segs = truth_segments(&split_pieces(&subset, params.max_gap_s))?;
        let trained = train_status_models(&segs, net, pois, params)?;
        let m = &trained.models;
        let probs = local_probabilities(&test_segs, net, pois, &m.stats, &m.classifier)?;
        let obs = bin_sequences(&probs, params.bins);
        let hmm = hsmm::fit_supervised(&trained.sequences, params.bins, 1)?;
        by_size.push(SizeRow {
            train_taxis: n,
            dt: accuracy(&threshold_states(&probs), &test_segs),
            dt_hmm: accuracy(&decode_all(&hmm, &obs)?, &test_segs),
            dt_hsmm: accuracy(&decode_all(&m.hsmm, &obs)?, &test_segs),
        });
        if k + 1 == sizes.len() {
            for &d in &opts.sweep {
                let model = hsmm::fit_supervised(&trained.sequences, params.bins, d)?;
                sweep.push(SweepRow {
                    d,
                    accuracy: accuracy(&decode_all(&model, &obs)?, &test_segs),
                });
            }
        }
    }
    Ok(ComparisonReport {
        test_taxis: distinct_taxis(test).len(),
        test_points,
        occupied_share: if test_points == 0 {
            0.0
        } else {
            occupied as f64 / test_points as f64
        },
        max_duration: params.max_duration,
        by_size,
        sweep,
    })
}

/// Leave-one-feature-out columns. The POI vector is also ablated as a whole.
pub const ABLATIONS: [(&str, &[&str]); 8] = [
    ("All", &[]),
    ("No MBR", &["mbr_ratio"]),
    ("No AvgDistance", &["avg_distance"]),
    ("No CenterDistance", &["center_distance"]),
    ("No Duration", &["duration"]),
    ("No History", &["history"]),
    ("No POI", &["poi_hotel45", "poi_parking", "poi_shopping", "poi_entertainment"]),
    ("No #Hotels", &["poi_hotel45"]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParkingReport {
    pub planted: usize,
    pub recalled: usize,
    pub candidate_recall: f64,
    pub candidates: usize,
    pub true_candidates: usize,
    pub folds: usize,
    pub ablations: Vec<AblationRow>,
}

impl ParkingReport {
    pub fn f1(&self, name: &str) -> Option<f64> {
        self.ablations.iter().find(|r| r.name == name).map(|r| r.f1)
    }
}

/// Planted parks overlapped by a true-park candidate, out of all planted.
pub fn candidate_recall(
    pieces: &[Trajectory],
    scored: &[(usize, ScoredCandidate)],
) -> (usize, usize) {
    let mut by_piece: Vec<Vec<&ScoredCandidate>> = vec![Vec::new(); pieces.len()];
    for (i, s) in scored {
        by_piece[*i].push(s);
    }
    let (mut planted, mut hit) = (0, 0);
    for (piece, cands) in pieces.iter().zip(&by_piece) {
        for park in true_park_intervals(piece) {
            planted += 1;
            hit += cands.iter().any(|s| {
                let c = &s.candidate;
                c.start_index <= park.end_index && c.end_index >= park.start_index && c.is_true_park()
            }) as usize;
        }
    }
    (planted, hit)
}

/// Out-of-fold predictions pooled over taxi-grouped folds.
fn cross_validate(
    table: &Table,
    labels: &[bool],
    fold_of: &[usize],
    folds: usize,
    params: &Params,
) -> Result<Vec<bool>> {
    let per_fold: Vec<Vec<(usize, bool)>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
            if test.is_empty() {
                return Ok(Vec::new());
            }
            let y: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
            let model = crate::tree::train_tree(&table.select_rows(&train), &y, params.tree)?;
            let p = model.predict_table(&table.select_rows(&test))?;
            Ok(test
                .into_iter()
                .zip(p)
                .map(|(i, p)| (i, p > params.accept_threshold))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut pred = vec![false; labels.len()];
    for (i, p) in per_fold.into_iter().flatten() {
        pred[i] = p;
    }
    Ok(pred)
}

/// Candidate recall plus taxi-grouped `params.cv_folds`-fold F1 of the
/// parking filter for every ablation. `scored` carries the features; the
/// positive label is "most points are P".
pub fn parking_cv(
    pieces: &[Trajectory],
    scored: &[(usize, ScoredCandidate)],
    params: &Params,
) -> Result<ParkingReport> {
    let (planted, recalled) = candidate_recall(pieces, scored);
    let labels: Vec<bool> = scored.iter().map(|(_, s)| s.candidate.is_true_park()).collect();
    let taxis: Vec<String> = scored.iter().map(|(_, s)| s.candidate.taxi_id.clone()).collect();
    let plan = make_folds(&taxis, params.cv_folds, params.seed)?;
    let fold_of: Vec<usize> = taxis
        .iter()
        .map(|t| plan.fold_of(t).expect("every taxi is dealt"))
        .collect();
    let feats: Vec<_> = scored.iter().map(|(_, s)| s.features).collect();
    let table = parking_table(&feats);
    let ablations = ABLATIONS
        .iter()
        .map(|(name, drop)| {
            let pred = cross_validate(&table.without(drop), &labels, &fold_of, plan.folds.len(), params)?;
            let s = binary_scores(&pred, &labels, &true)?;
            Ok(AblationRow {
                name: name.to_string(),
                f1: s.f1,
                accuracy: s.accuracy,
                precision: s.precision,
                recall: s.recall,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ParkingReport {
        planted,
        recalled,
        candidate_recall: if planted == 0 {
            1.0
        } else {
            recalled as f64 / planted as f64
        },
        candidates: labels.len(),
        true_candidates: labels.iter().filter(|&&l| l).count(),
        folds: plan.folds.len(),
        ablations,
    })
}

/// The parking filter trained on every candidate, for deployment.
pub fn fit_parking_filter(
    scored: &[(usize, ScoredCandidate)],
    params: &Params,
) -> Result<crate::tree::TreeModel> {
    let examples: Vec<_> = scored
        .iter()
        .map(|(_, s)| (s.features, s.candidate.is_true_park()))
        .collect();
    train_parking_filter(&examples, params.tree)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature: String,
    pub mi_bits: f64,
}

/// Mutual information of every column against binary labels, highest first
/// (ties by column order).
pub fn rank_features(table: &Table, labels: &[bool], bins: usize) -> Result<Vec<FeatureScore>> {
    let y: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let mut out: Vec<FeatureScore> = table
        .specs
        .iter()
        .zip(&table.columns)
        .map(|(spec, col)| {
            Ok(FeatureScore {
                feature: spec.name.clone(),
                mi_bits: mutual_information(col, &y, bins)?,
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| b.mi_bits.total_cmp(&a.mi_bits));
    Ok(out)
}

/// Three-class confusion of inferred statuses against the labels of the
/// pieces they were produced from (same order, unlabelled points skipped).
pub fn status_confusion(statuses: &[PointStatus], pieces: &[Trajectory]) -> Result<ConfusionMatrix> {
    let truth: Vec<Option<Label>> = pieces.iter().flat_map(|p| p.labels()).collect();
    if truth.len() != statuses.len() {
        return Err(Error::LengthMismatch(statuses.len(), truth.len()));
    }
    let (pred, truth): (Vec<Label>, Vec<Label>) = statuses
        .iter()
        .zip(truth)
        .filter_map(|(s, t)| t.map(|t| (s.status, t)))
        .unzip();
    confusion(&pred, &truth)
}
