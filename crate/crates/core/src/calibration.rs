//! Sigmoid calibration of raw classifier scores, and the calibrated local
//! classifier that pairs it with a decision tree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{train_tree, Table, TreeModel, TreeParams};

/// Parameters of `p = 1 / (1 + exp(a * f + b))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub a: f64,
    pub b: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self { a: 0.0, b: 0.0 }
    }
}

impl Calibration {
    pub fn apply(&self, f: f64) -> f64 {
        calibrate(self, f)
    }
}

/// Evaluates the sigmoid without overflow for large |a f + b|.
pub fn calibrate(cal: &Calibration, f: f64) -> f64 {
    let z = cal.a * f + cal.b;
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

const MAX_NEWTON_ITERS: usize = 100;
const GRAD_TOL: f64 = 1e-8;

/// Fits (a, b) by Newton's method with backtracking on the smoothed-target
/// negative log-likelihood.
pub fn fit_platt(scores: &[f64], labels: &[bool]) -> Result<Calibration> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let hi = (n_pos as f64 + 1.0) / (n_pos as f64 + 2.0);
    let lo = 1.0 / (n_neg as f64 + 2.0);
    let targets: Vec<f64> = labels.iter().map(|&l| if l { hi } else { lo }).collect();

    let first = scores[0];
    if scores.iter().all(|&s| s == first) {
        return Ok(Calibration {
            a: 0.0,
            b: (n_neg as f64 / n_pos as f64).ln(),
        });
    }

    // objective: sum over i of log(1 + exp(z_i)) - (1 - t_i) z_i, with z = a f + b
    let objective = |a: f64, b: f64| -> f64 {
        scores
            .iter()
            .zip(&targets)
            .map(|(&f, &t)| {
                let z = a * f + b;
                let log1pexp = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                log1pexp - (1.0 - t) * z
            })
            .sum()
    };
    let mut a = 0.0;
    let mut b = ((n_neg as f64 + 1.0) / (n_pos as f64 + 1.0)).ln();
    let mut fval = objective(a, b);
    for _ in 0..MAX_NEWTON_ITERS {
        let (mut ga, mut gb) = (0.0, 0.0);
        let (mut haa, mut hab, mut hbb) = (1e-12, 0.0, 1e-12);
        for (&f, &t) in scores.iter().zip(&targets) {
            // q = P(negative) = 1 - p
            let q = 1.0 - calibrate(&Calibration { a, b }, f);
            let d1 = q - (1.0 - t);
            let d2 = q * (1.0 - q);
            ga += f * d1;
            gb += d1;
            haa += f * f * d2;
            hab += f * d2;
            hbb += d2;
        }
        if ga.hypot(gb) < GRAD_TOL {
            break;
        }
        let det = haa * hbb - hab * hab;
        let da = -(hbb * ga - hab * gb) / det;
        let db = -(-hab * ga + haa * gb) / det;
        let slope = ga * da + gb * db;
        let mut step = 1.0;
        loop {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * slope {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
            if step < 1e-10 {
                return Ok(Calibration { a, b });
            }
        }
    }
    Ok(Calibration { a, b })
}

/// Mean negative log-likelihood of probabilities against labels, clamped away from 0/1.
pub fn log_loss(probs: &[f64], labels: &[bool]) -> f64 {
    let eps = 1e-15;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let p = p.clamp(eps, 1.0 - eps);
            if l {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / probs.len().max(1) as f64
}

/// A decision tree and the sigmoid fitted to its out-of-fold scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalClassifier {
    pub tree: TreeModel,
    pub calibration: Option<Calibration>,
}

impl LocalClassifier {
    pub fn predict_table(&self, table: &Table) -> Result<Vec<f64>> {
        let raw = self.tree.predict_table(table)?;
        Ok(match &self.calibration {
            Some(c) => raw.into_iter().map(|f| calibrate(c, f)).collect(),
            None => raw,
        })
    }

    pub fn predict_raw_table(&self, table: &Table) -> Result<Vec<f64>> {
        self.tree.predict_table(table)
    }
}

/// Fold index per row: by group (taxi) when groups are given, else round-robin.
pub fn fold_assignment(n_rows: usize, groups: Option<&[u32]>, k: usize) -> Vec<usize> {
    match groups {
        Some(g) => {
            let mut distinct: Vec<u32> = g.to_vec();
            distinct.sort_unstable();
            distinct.dedup();
            g.iter()
                .map(|x| distinct.binary_search(x).expect("present") % k)
                .collect()
        }
        None => (0..n_rows).map(|i| i % k).collect(),
    }
}

/// Out-of-fold raw tree scores for every row.
pub fn out_of_fold_scores(
    table: &Table,
    labels: &[bool],
    groups: Option<&[u32]>,
    params: TreeParams,
    k: usize,
) -> Result<Vec<f64>> {
    let n = table.n_rows();
    let folds = fold_assignment(n, groups, k.max(2));
    let mut scores = vec![0.0; n];
    for fold in 0..k.max(2) {
        let train_idx: Vec<usize> = (0..n).filter(|&i| folds[i] != fold).collect();
        let test_idx: Vec<usize> = (0..n).filter(|&i| folds[i] == fold).collect();
        if test_idx.is_empty() {
            continue;
        }
        let train_labels: Vec<bool> = train_idx.iter().map(|&i| labels[i]).collect();
        let test = table.select_rows(&test_idx);
        let preds = match train_tree(&table.select_rows(&train_idx), &train_labels, params) {
            Ok(m) => m.predict_table(&test)?,
            Err(Error::SingleClass) | Err(Error::LengthMismatch(..)) => {
                let pos = train_labels.iter().filter(|&&l| l).count() as u64;
                let p = crate::tree::laplace(pos, train_labels.len() as u64 - pos);
                vec![p; test_idx.len()]
            }
            Err(e) => return Err(e),
        };
        for (i, p) in test_idx.into_iter().zip(preds) {
            scores[i] = p;
        }
    }
    Ok(scores)
}

/// Trains the tree on all rows and calibrates it on `folds`-fold out-of-fold scores.
pub fn fit_local_classifier(
    table: &Table,
    labels: &[bool],
    groups: Option<&[u32]>,
    params: TreeParams,
    folds: usize,
) -> Result<LocalClassifier> {
    let tree = train_tree(table, labels, params)?;
    let oof = out_of_fold_scores(table, labels, groups, params, folds)?;
    let calibration = Some(fit_platt(&oof, labels)?);
    Ok(LocalClassifier { tree, calibration })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_half() {
        let c = Calibration { a: 0.0, b: 0.0 };
        for f in [0.0, 0.3, 1.0, -5.0] {
            assert_eq!(calibrate(&c, f), 0.5);
        }
    }

    #[test]
    fn algebraic_midpoint() {
        assert_eq!(calibrate(&Calibration { a: -4.0, b: 2.0 }, 0.5), 0.5);
    }

    #[test]
    fn identical_scores_are_degenerate() {
        let labels = [true, false, false, false];
        let c = fit_platt(&[0.4; 4], &labels).unwrap();
        assert_eq!(c.a, 0.0);
        let p = calibrate(&c, 0.4);
        assert!((p - 0.25).abs() < 1e-12, "{p}");
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(fit_platt(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
    }

    #[test]
    fn calibrated_scores_stay_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let labels: Vec<bool> = scores.iter().map(|&s| rng.random_bool(s)).collect();
        let c = fit_platt(&scores, &labels).unwrap();
        assert!(c.a < 0.0);
        for i in 1..=9 {
            let f = i as f64 / 10.0;
            // logistic in f is close to but not exactly linear; 0.05 covers the bend
            assert!((calibrate(&c, f) - f).abs() < 0.05, "f={f} p={}", calibrate(&c, f));
        }
    }

    #[test]
    fn uninformative_scores_give_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..5000).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..5000).map(|_| rng.random_bool(0.3)).collect();
        let c = fit_platt(&scores, &labels).unwrap();
        assert!(c.a.abs() < 0.3, "{c:?}");
        assert!((calibrate(&c, 0.5) - 0.3).abs() < 0.03);
    }

    #[test]
    fn overconfident_scores_are_pulled_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..4000 {
            scores.push(0.99);
            labels.push(rng.random_bool(0.7));
            scores.push(0.01);
            labels.push(rng.random_bool(0.3));
        }
        let c = fit_platt(&scores, &labels).unwrap();
        let p = calibrate(&c, 0.99);
        assert!((p - 0.7).abs() < 0.03, "{p}");
        let calibrated: Vec<f64> = scores.iter().map(|&f| calibrate(&c, f)).collect();
        assert!(log_loss(&calibrated, &labels) < log_loss(&scores, &labels));
    }

    proptest! {
        #[test]
        fn monotone_for_negative_slope(a in -10.0f64..-1e-2, b in -5.0f64..5.0, f1 in 0.0f64..0.9, gap in 1e-3f64..0.1) {
            let c = Calibration { a, b };
            let f2 = f1 + gap;
            prop_assert!(calibrate(&c, f1) < calibrate(&c, f2));
            prop_assert!(calibrate(&c, f1) > 0.0 && calibrate(&c, f2) < 1.0);
        }
    }
}
