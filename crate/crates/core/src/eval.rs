//! Metrics, taxi-disjoint fold plans and mutual-information ranking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Label;

/// Row/column order of the confusion matrix.
pub const CLASSES: [Label; 3] = [Label::N, Label::O, Label::P];

fn class_index(l: Label) -> usize {
    match l {
        Label::N => 0,
        Label::O => 1,
        Label::P => 2,
    }
}

/// Counts indexed `[truth][prediction]` in N, O, P order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; 3]; 3]) -> Self {
        Self { counts }
    }

    pub fn add(&mut self, truth: Label, pred: Label) {
        self.counts[class_index(truth)][class_index(pred)] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for i in 0..3 {
            for j in 0..3 {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio((0..3).map(|i| self.counts[i][i]).sum(), self.total())
    }

    pub fn recall(&self, l: Label) -> Option<f64> {
        let i = class_index(l);
        ratio(self.counts[i][i], self.counts[i].iter().sum())
    }

    pub fn precision(&self, l: Label) -> Option<f64> {
        let j = class_index(l);
        ratio(self.counts[j][j], (0..3).map(|i| self.counts[i][j]).sum())
    }

    pub fn f1(&self, l: Label) -> Option<f64> {
        Some(f1(self.precision(l)?, self.recall(l)?))
    }

    /// Mean per-class F1 over classes where it is defined.
    pub fn macro_f1(&self) -> Option<f64> {
        let v: Vec<f64> = CLASSES.iter().filter_map(|l| self.f1(*l)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn confusion(pred: &[Label], truth: &[Label]) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    let mut m = ConfusionMatrix::default();
    for (p, t) in pred.iter().zip(truth) {
        m.add(*t, *p);
    }
    Ok(m)
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Precision, recall, F1 and accuracy treating `positive` as the positive
/// class. Undefined ratios are reported as 0.
pub fn binary_scores<T: PartialEq>(pred: &[T], truth: &[T], positive: &T) -> Result<BinaryScores> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    let (mut tp, mut fp, mut fneg, mut correct) = (0u64, 0u64, 0u64, 0u64);
    for (p, t) in pred.iter().zip(truth) {
        let (pp, tt) = (p == positive, t == positive);
        tp += (pp && tt) as u64;
        fp += (pp && !tt) as u64;
        fneg += (!pp && tt) as u64;
        correct += (p == t) as u64;
    }
    let precision = ratio(tp, tp + fp).unwrap_or(0.0);
    let recall = ratio(tp, tp + fneg).unwrap_or(0.0);
    Ok(BinaryScores {
        precision,
        recall,
        f1: f1(precision, recall),
        accuracy: ratio(correct, pred.len() as u64).unwrap_or(0.0),
    })
}

/// Equal-frequency bin per value. Equal values share a bin; NaN gets its own.
pub fn equal_frequency_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let bins = bins.max(1);
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| !values[i].is_nan()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let n = idx.len();
    let mut out = vec![bins; values.len()];
    let mut r = 0;
    while r < n {
        let bin = (r * bins / n).min(bins - 1);
        let mut e = r;
        while e + 1 < n && values[idx[e + 1]] == values[idx[r]] {
            e += 1;
        }
        for &i in &idx[r..=e] {
            out[i] = bin;
        }
        r = e + 1;
    }
    out
}

/// Plug-in mutual information in bits between a discretised feature and labels.
pub fn mutual_information(values: &[f64], labels: &[usize], bins: usize) -> Result<f64> {
    if values.len() != labels.len() {
        return Err(Error::LengthMismatch(values.len(), labels.len()));
    }
    let n = values.len();
    if n == 0 {
        return Ok(0.0);
    }
    let x = equal_frequency_bins(values, bins);
    let nx = bins + 1;
    let ny = labels.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0u64; nx * ny];
    let mut px = vec![0u64; nx];
    let mut py = vec![0u64; ny];
    for (&a, &b) in x.iter().zip(labels) {
        joint[a * ny + b] += 1;
        px[a] += 1;
        py[b] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for a in 0..nx {
        for b in 0..ny {
            let c = joint[a * ny + b];
            if c > 0 {
                let c = c as f64;
                mi += c / nf * (c * nf / (px[a] as f64 * py[b] as f64)).log2();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Taxi-disjoint folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    pub fn fold_of(&self, taxi: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|t| t == taxi))
    }
}

/// Sorts and de-duplicates the ids, shuffles them with `seed` and deals them
/// round-robin into `k` folds.
pub fn make_folds(taxi_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    let mut ids = taxi_ids.to_vec();
    ids.sort();
    ids.dedup();
    if k == 0 || k > ids.len() {
        return Err(Error::TooFewTaxis {
            taxis: ids.len(),
            folds: k,
        });
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldPlan { folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn reference_matrix() -> ConfusionMatrix {
        ConfusionMatrix::from_counts([[12648, 4387, 213], [5372, 12212, 662], [121, 261, 3672]])
    }

    #[test]
    fn published_confusion_matrix_arithmetic() {
        let m = reference_matrix();
        let close = |a: Option<f64>, b: f64| (a.unwrap() - b).abs() <= 0.001;
        assert!(close(m.accuracy(), 0.721));
        assert!(close(m.recall(Label::N), 0.733));
        assert!(close(m.recall(Label::O), 0.669));
        assert!(close(m.recall(Label::P), 0.905));
        assert!(close(m.precision(Label::N), 0.697));
        assert!(close(m.precision(Label::O), 0.724));
        assert!(close(m.precision(Label::P), 0.807));
    }

    #[test]
    fn derived_stats_recompute_from_counts() {
        let m = reference_matrix();
        // independent arithmetic: trace over sum
        let trace = 12648.0 + 12212.0 + 3672.0;
        let total = 12648.0 + 4387.0 + 213.0 + 5372.0 + 12212.0 + 662.0 + 121.0 + 261.0 + 3672.0;
        assert_eq!(m.accuracy().unwrap(), trace / total);
        assert_eq!(m.recall(Label::P).unwrap(), 3672.0 / (121.0 + 261.0 + 3672.0));
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let l = vec![Label::N, Label::O, Label::P, Label::O];
        let m = confusion(&l, &l).unwrap();
        assert_eq!(m.accuracy(), Some(1.0));
        assert_eq!(m.counts[1][1], 2);
        assert_eq!(m.counts.iter().flatten().sum::<u64>(), 4);
    }

    #[test]
    fn empty_class_ratios_are_missing() {
        let m = confusion(&[Label::N], &[Label::N]).unwrap();
        assert_eq!(m.recall(Label::P), None);
        assert_eq!(m.precision(Label::O), None);
        assert!(matches!(confusion(&[Label::N], &[]), Err(Error::LengthMismatch(1, 0))));
    }

    #[test]
    fn random_labels_have_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draw = |rng: &mut ChaCha8Rng| CLASSES[rng.random_range(0..3)];
        let pred: Vec<Label> = (0..10_000).map(|_| draw(&mut rng)).collect();
        let truth: Vec<Label> = (0..10_000).map(|_| draw(&mut rng)).collect();
        let acc = confusion(&pred, &truth).unwrap().accuracy().unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 0.02, "{acc}");
    }

    #[test]
    fn f1_edges() {
        assert_eq!(f1(1.0, 1.0), 1.0);
        assert_eq!(f1(1.0, 0.0), 0.0);
        assert_eq!(f1(0.0, 0.0), 0.0);
        let s = binary_scores(&[true, true, false, false], &[true, false, true, false], &true).unwrap();
        assert_eq!((s.precision, s.recall, s.accuracy), (0.5, 0.5, 0.5));
    }

    fn h2(p: f64) -> f64 {
        -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
    }

    #[test]
    fn mutual_information_identities() {
        let labels: Vec<usize> = (0..1000).map(|i| (i % 4 == 0) as usize).collect();
        let same: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let mi = mutual_information(&same, &labels, 10).unwrap();
        assert!((mi - h2(0.25)).abs() < 1e-12, "{mi}");
        let constant = vec![3.0; 1000];
        assert_eq!(mutual_information(&constant, &labels, 10).unwrap(), 0.0);
    }

    #[test]
    fn binary_symmetric_channel() {
        // balanced labels with exactly 10% flipped in each class
        let n = 10_000;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let feature: Vec<f64> = (0..n)
            .map(|i| {
                let flip = (i / 2) % 10 == 0;
                ((labels[i] == 1) ^ flip) as u8 as f64
            })
            .collect();
        let mi = mutual_information(&feature, &labels, 10).unwrap();
        assert!((mi - (1.0 - h2(0.1))).abs() < 1e-3, "{mi}");
    }

    #[test]
    fn equal_frequency_bins_are_balanced() {
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let b = equal_frequency_bins(&v, 10);
        for k in 0..10 {
            assert_eq!(b.iter().filter(|&&x| x == k).count(), 10);
        }
        let with_nan = equal_frequency_bins(&[1.0, f64::NAN], 10);
        assert_eq!(with_nan[1], 10);
    }

    #[test]
    fn leave_one_taxi_out() {
        let ids: Vec<String> = (0..7).map(|i| format!("t{i}")).collect();
        let plan = make_folds(&ids, 7, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 1));
        assert!(matches!(make_folds(&ids, 8, 1), Err(Error::TooFewTaxis { taxis: 7, folds: 8 })));
        assert!(matches!(make_folds(&ids, 0, 1), Err(Error::TooFewTaxis { .. })));
    }

    proptest! {
        #[test]
        fn folds_partition_taxis(n in 1usize..60, k in 1usize..12, seed in 0u64..1000) {
            prop_assume!(k <= n);
            let ids: Vec<String> = (0..n).map(|i| format!("taxi{i}")).collect();
            let plan = make_folds(&ids, k, seed).unwrap();
            let mut all: Vec<String> = plan.folds.iter().flatten().cloned().collect();
            all.sort();
            let mut expected = ids.clone();
            expected.sort();
            prop_assert_eq!(all, expected);
            prop_assert_eq!(plan.clone(), make_folds(&ids, k, seed).unwrap());
        }

        #[test]
        fn mi_is_permutation_invariant(v in prop::collection::vec((0.0f64..5.0, 0usize..3), 1..200), seed in 0u64..100) {
            let (vals, labs): (Vec<f64>, Vec<usize>) = v.iter().cloned().unzip();
            let mi = mutual_information(&vals, &labs, 10).unwrap();
            let mut order: Vec<usize> = (0..vals.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pv: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
            let pl: Vec<usize> = order.iter().map(|&i| labs[i]).collect();
            let mi2 = mutual_information(&pv, &pl, 10).unwrap();
            prop_assert!(mi >= 0.0);
            prop_assert!((mi - mi2).abs() < 1e-9);
        }
    }
}
