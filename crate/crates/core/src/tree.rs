//! C4.5-style decision tree with Laplace-smoothed leaf probabilities.
//!
//! Numeric features split in two at midpoints between consecutive distinct
//! values; small categorical features split multiway, one branch per value
//! seen at the node. Split choice follows C4.5: each numeric feature takes
//! its highest-gain threshold, then the feature with the best gain ratio wins
//! among those whose gain is at least the average. Missing values are handled
//! C4.5 style: gain is scaled by the known fraction and the unknown share
//! enters the split information as its own branch. At prediction time
//! a missing (or unseen categorical) value follows the branch that held the
//! most training rows.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Two candidate splits whose gain ratios differ by less than this are tied.
pub const SPLIT_TIE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn numeric(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Numeric,
        }
    }

    pub fn categorical(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Categorical,
        }
    }
}

pub fn schema_hash(specs: &[FeatureSpec]) -> String {
    let mut h = Sha256::new();
    for s in specs {
        h.update(s.name.as_bytes());
        h.update(match s.kind {
            FeatureKind::Numeric => b":n;",
            FeatureKind::Categorical => b":c;",
        });
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// Column-major feature table; `NaN` marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub specs: Vec<FeatureSpec>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(specs: Vec<FeatureSpec>) -> Self {
        let columns = vec![Vec::new(); specs.len()];
        Self { specs, columns }
    }

    pub fn from_rows(specs: Vec<FeatureSpec>, rows: &[Vec<Option<f64>>]) -> Result<Self> {
        let mut t = Table::new(specs);
        for r in rows {
            t.push(r)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, row: &[Option<f64>]) -> Result<()> {
        if row.len() != self.specs.len() {
            return Err(Error::SchemaMismatch {
                expected: self.specs.len(),
                got: row.len(),
            });
        }
        for (col, v) in self.columns.iter_mut().zip(row) {
            col.push(v.unwrap_or(f64::NAN));
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Table {
        Table {
            specs: self.specs.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| idx.iter().map(|&i| c[i]).collect())
                .collect(),
        }
    }

    /// Drops the named columns.
    pub fn without(&self, names: &[&str]) -> Table {
        let keep: Vec<usize> = (0..self.specs.len())
            .filter(|&i| !names.contains(&self.specs[i].name.as_str()))
            .collect();
        Table {
            specs: keep.iter().map(|&i| self.specs[i].clone()).collect(),
            columns: keep.iter().map(|&i| self.columns[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Categorical features with more distinct values are not split on.
    pub max_categories: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: 20,
            min_leaf: 25,
            max_categories: 32,
        }
    }
}

/// Shannon entropy in bits of a count vector.
pub fn entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Information gain over split information for a parent split into children.
/// Each entry of `children` is that child's class-count vector.
pub fn gain_ratio(parent: &[u64], children: &[Vec<u64>]) -> f64 {
    let n: u64 = parent.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let cond: f64 = children
        .iter()
        .map(|c| c.iter().sum::<u64>() as f64 / nf * entropy(c))
        .sum();
    let gain = entropy(parent) - cond;
    let sizes: Vec<u64> = children.iter().map(|c| c.iter().sum()).collect();
    let split_info = entropy(&sizes);
    if split_info <= 0.0 {
        0.0
    } else {
        (gain / split_info).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        pos: u64,
        neg: u64,
    },
    Numeric {
        feature: usize,
        threshold: f64,
        /// Where rows with a missing value go.
        missing_left: bool,
        left: Box<Node>,
        right: Box<Node>,
    },
    Categorical {
        feature: usize,
        values: Vec<f64>,
        children: Vec<Node>,
        /// Branch for missing or unseen values.
        majority: usize,
    },
}

impl Node {
    fn leaf_for(&self, x: &[f64]) -> (u64, u64) {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { pos, neg } => return (*pos, *neg),
                Node::Numeric {
                    feature,
                    threshold,
                    missing_left,
                    left,
                    right,
                } => {
                    let v = x[*feature];
                    let go_left = if v.is_nan() { *missing_left } else { v <= *threshold };
                    node = if go_left { left } else { right };
                }
                Node::Categorical {
                    feature,
                    values,
                    children,
                    majority,
                } => {
                    let v = x[*feature];
                    let k = values.iter().position(|&u| u == v).unwrap_or(*majority);
                    node = &children[k];
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Numeric { left, right, .. } => 1 + left.depth().max(right.depth()),
            Node::Categorical { children, .. } => {
                1 + children.iter().map(Node::depth).max().unwrap_or(0)
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Numeric { left, right, .. } => left.n_leaves() + right.n_leaves(),
            Node::Categorical { children, .. } => children.iter().map(Node::n_leaves).sum(),
        }
    }
}

pub fn laplace(pos: u64, neg: u64) -> f64 {
    (pos as f64 + 1.0) / ((pos + neg) as f64 + 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub schema: Vec<FeatureSpec>,
    pub schema_hash: String,
    pub params: TreeParams,
    pub root: Node,
}

impl TreeModel {
    /// Raw positive-class probability for a row with optional values.
    pub fn predict_raw(&self, x: &[Option<f64>]) -> Result<f64> {
        let row: Vec<f64> = x.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        self.predict_row(&row)
    }

    /// As [`predict_raw`](Self::predict_raw) with `NaN` for missing.
    pub fn predict_row(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.schema.len() {
            return Err(Error::SchemaMismatch {
                expected: self.schema.len(),
                got: x.len(),
            });
        }
        let (pos, neg) = self.root.leaf_for(x);
        Ok(laplace(pos, neg))
    }

    pub fn predict_table(&self, table: &Table) -> Result<Vec<f64>> {
        if table.specs != self.schema {
            return Err(Error::SchemaMismatch {
                expected: self.schema.len(),
                got: table.specs.len(),
            });
        }
        let mut row = vec![0.0; self.schema.len()];
        (0..table.n_rows())
            .map(|i| {
                for (slot, col) in row.iter_mut().zip(&table.columns) {
                    *slot = col[i];
                }
                let (pos, neg) = self.root.leaf_for(&row);
                Ok(laplace(pos, neg))
            })
            .collect()
    }
}

/// `c * log2(c)` for every count up to `n`, so node entropies are table lookups.
struct XLogX(Vec<f64>);

impl XLogX {
    fn new(n: usize) -> Self {
        Self(
            (0..=n)
                .map(|c| if c == 0 { 0.0 } else { c as f64 * (c as f64).log2() })
                .collect(),
        )
    }

    #[inline]
    fn get(&self, c: u64) -> f64 {
        self.0[c as usize]
    }

    /// total * H(counts) in bits.
    #[inline]
    fn weighted_entropy(&self, pos: u64, neg: u64) -> f64 {
        self.get(pos + neg) - self.get(pos) - self.get(neg)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum SplitChoice {
    Numeric { feature: usize, threshold: f64 },
    Categorical { feature: usize, values: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Candidate {
    gain: f64,
    ratio: f64,
    choice: SplitChoice,
}

struct Trainer<'a> {
    table: &'a Table,
    labels: &'a [bool],
    params: TreeParams,
    usable: Vec<bool>,
    xlx: XLogX,
}

/// Rows at a node: all rows plus, per numeric feature, known-value rows in
/// ascending value order.
struct NodeRows {
    rows: Vec<u32>,
    sorted: Vec<Vec<u32>>,
}

impl<'a> Trainer<'a> {
    fn counts(&self, rows: &[u32]) -> (u64, u64) {
        let pos = rows.iter().filter(|&&r| self.labels[r as usize]).count() as u64;
        (pos, rows.len() as u64 - pos)
    }

    /// (gain, gain ratio) given branch (pos, neg) counts over known rows and
    /// the number of rows with a missing value.
    fn score(&self, branches: &[(u64, u64)], missing: u64) -> (f64, f64) {
        let (kp, kn) = branches
            .iter()
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        let known = kp + kn;
        if known == 0 {
            return (0.0, 0.0);
        }
        let total = known + missing;
        let cond: f64 = branches
            .iter()
            .map(|&(p, n)| self.xlx.weighted_entropy(p, n))
            .sum();
        let gain_known = (self.xlx.weighted_entropy(kp, kn) - cond) / known as f64;
        let gain = known as f64 / total as f64 * gain_known;
        let mut split = self.xlx.get(total) - self.xlx.get(missing);
        for &(p, n) in branches {
            split -= self.xlx.get(p + n);
        }
        let split = split / total as f64;
        if split <= 1e-12 || gain <= 1e-12 {
            (0.0, 0.0)
        } else {
            (gain, gain / split)
        }
    }

    fn admissible(&self, sizes: impl Iterator<Item = u64>) -> bool {
        sizes.filter(|&s| s as usize >= self.params.min_leaf.max(1)).count() >= 2
    }

    fn best_split(&self, node: &NodeRows) -> Option<Candidate> {
        // best candidate per feature, by gain; the first (lowest) threshold wins ties
        let mut per_feature: Vec<Candidate> = Vec::new();
        let n_rows = node.rows.len() as u64;
        let mut numeric_slot = 0;
        for f in 0..self.table.specs.len() {
            let col = &self.table.columns[f];
            match self.table.specs[f].kind {
                FeatureKind::Numeric => {
                    let sorted = &node.sorted[numeric_slot];
                    numeric_slot += 1;
                    let known = sorted.len() as u64;
                    let missing = n_rows - known;
                    let (tp, tn) = self.counts(sorted);
                    let (mut lp, mut ln) = (0u64, 0u64);
                    let mut best: Option<Candidate> = None;
                    for w in 0..sorted.len().saturating_sub(1) {
                        let r = sorted[w] as usize;
                        if self.labels[r] {
                            lp += 1;
                        } else {
                            ln += 1;
                        }
                        let (v, next) = (col[r], col[sorted[w + 1] as usize]);
                        if v == next {
                            continue;
                        }
                        let nl = lp + ln;
                        if !self.admissible([nl, known - nl].into_iter()) {
                            continue;
                        }
                        let (gain, ratio) = self.score(&[(lp, ln), (tp - lp, tn - ln)], missing);
                        if gain > best.as_ref().map_or(0.0, |b| b.gain) + SPLIT_TIE_EPS {
                            best = Some(Candidate {
                                gain,
                                ratio,
                                choice: SplitChoice::Numeric {
                                    feature: f,
                                    threshold: (v + next) / 2.0,
                                },
                            });
                        }
                    }
                    per_feature.extend(best);
                }
                FeatureKind::Categorical => {
                    if !self.usable[f] {
                        continue;
                    }
                    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
                    let mut missing = 0u64;
                    for &r in &node.rows {
                        let v = col[r as usize];
                        if v.is_nan() {
                            missing += 1;
                            continue;
                        }
                        let pos = self.labels[r as usize] as u64;
                        match groups.iter_mut().find(|g| g.0 == v) {
                            Some(g) => {
                                g.1 += pos;
                                g.2 += 1 - pos;
                            }
                            None => groups.push((v, pos, 1 - pos)),
                        }
                    }
                    if groups.len() < 2 || !self.admissible(groups.iter().map(|g| g.1 + g.2)) {
                        continue;
                    }
                    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
                    let branches: Vec<(u64, u64)> = groups.iter().map(|g| (g.1, g.2)).collect();
                    let (gain, ratio) = self.score(&branches, missing);
                    if gain > 0.0 {
                        per_feature.push(Candidate {
                            gain,
                            ratio,
                            choice: SplitChoice::Categorical {
                                feature: f,
                                values: groups.iter().map(|g| g.0).collect(),
                            },
                        });
                    }
                }
            }
        }
        if per_feature.is_empty() {
            return None;
        }
        let avg = per_feature.iter().map(|c| c.gain).sum::<f64>() / per_feature.len() as f64;
        let mut best: Option<Candidate> = None;
        for c in per_feature {
            if c.gain + SPLIT_TIE_EPS < avg {
                continue;
            }
            if c.ratio > best.as_ref().map_or(0.0, |b| b.ratio) + SPLIT_TIE_EPS {
                best = Some(c);
            }
        }
        best
    }

    fn grow(&self, node: NodeRows, depth: usize) -> Node {
        let (pos, neg) = self.counts(&node.rows);
        let leaf = Node::Leaf { pos, neg };
        if pos == 0
            || neg == 0
            || depth >= self.params.max_depth
            || node.rows.len() < 2 * self.params.min_leaf.max(1)
        {
            return leaf;
        }
        let Some(best) = self.best_split(&node) else {
            return leaf;
        };
        let columns = &self.table.columns;
        let (feature, n_branches) = match &best.choice {
            SplitChoice::Numeric { feature, .. } => (*feature, 2),
            SplitChoice::Categorical { feature, values } => (*feature, values.len()),
        };
        let col = &columns[feature];
        let branch = |r: u32| -> Option<usize> {
            let v = col[r as usize];
            if v.is_nan() {
                return None;
            }
            match &best.choice {
                SplitChoice::Numeric { threshold, .. } => Some(if v <= *threshold { 0 } else { 1 }),
                SplitChoice::Categorical { values, .. } => values.iter().position(|&u| u == v),
            }
        };
        let mut sizes = vec![0usize; n_branches];
        for &r in &node.rows {
            if let Some(b) = branch(r) {
                sizes[b] += 1;
            }
        }
        // first branch with the most known rows
        let majority = sizes
            .iter()
            .enumerate()
            .fold(0, |m, (i, &s)| if s > sizes[m] { i } else { m });
        let route = |r: &u32| -> usize { branch(*r).unwrap_or(majority) };
        let mut children: Vec<NodeRows> = (0..n_branches)
            .map(|_| NodeRows {
                rows: Vec::new(),
                sorted: vec![Vec::new(); node.sorted.len()],
            })
            .collect();
        for r in &node.rows {
            children[route(r)].rows.push(*r);
        }
        for (slot, list) in node.sorted.into_iter().enumerate() {
            for r in list {
                children[route(&r)].sorted[slot].push(r);
            }
        }
        let mut grown: Vec<Node> = children
            .into_iter()
            .map(|c| self.grow(c, depth + 1))
            .collect();
        match best.choice {
            SplitChoice::Numeric { feature, threshold } => {
                let right = grown.pop().expect("two branches");
                let left = grown.pop().expect("two branches");
                Node::Numeric {
                    feature,
                    threshold,
                    missing_left: majority == 0,
                    left: Box::new(left),
                    right: Box::new(right),
                }
            }
            SplitChoice::Categorical { feature, values } => Node::Categorical {
                feature,
                values,
                children: grown,
                majority,
            },
        }
    }
}

/// Grows a tree on `table` against boolean `labels` (true = positive class).
pub fn train_tree(table: &Table, labels: &[bool], params: TreeParams) -> Result<TreeModel> {
    let n = table.n_rows();
    if labels.len() != n {
        return Err(Error::LengthMismatch(n, labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == n {
        return Err(Error::SingleClass);
    }
    let usable = table
        .specs
        .iter()
        .zip(&table.columns)
        .map(|(s, col)| match s.kind {
            FeatureKind::Numeric => true,
            FeatureKind::Categorical => {
                let mut vals: Vec<f64> = col.iter().copied().filter(|v| !v.is_nan()).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                vals.len() <= params.max_categories
            }
        })
        .collect();
    let sorted = table
        .specs
        .iter()
        .zip(&table.columns)
        .filter(|(s, _)| s.kind == FeatureKind::Numeric)
        .map(|(_, col)| {
            let mut idx: Vec<u32> = (0..n as u32).filter(|&r| !col[r as usize].is_nan()).collect();
            idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let trainer = Trainer {
        table,
        labels,
        params,
        usable,
        xlx: XLogX::new(n),
    };
    let root = trainer.grow(
        NodeRows {
            rows: (0..n as u32).collect(),
            sorted,
        },
        0,
    );
    Ok(TreeModel {
        schema: table.specs.clone(),
        schema_hash: schema_hash(&table.specs),
        params,
        root,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_col(values: &[f64]) -> Table {
        Table {
            specs: vec![FeatureSpec::numeric("x")],
            columns: vec![values.to_vec()],
        }
    }

    fn small() -> TreeParams {
        TreeParams {
            max_depth: 64,
            min_leaf: 1,
            max_categories: 32,
        }
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[2, 2]), 1.0);
        assert_eq!(entropy(&[4, 0]), 0.0);
        let closed = -(3.0f64 / 8.0) * (3.0f64 / 8.0).log2() - (5.0f64 / 8.0) * (5.0f64 / 8.0).log2();
        assert!((entropy(&[3, 5]) - closed).abs() < 1e-15);
        assert!((entropy(&[3, 5]) - 0.954434).abs() < 1e-6);
    }

    #[test]
    fn gain_ratio_edge_cases() {
        // perfect split of (2,2) into pure halves: gain 1, split info 1
        assert!((gain_ratio(&[2, 2], &[vec![2, 0], vec![0, 2]]) - 1.0).abs() < 1e-15);
        // one child only: split info 0
        assert_eq!(gain_ratio(&[2, 2], &[vec![2, 2]]), 0.0);
    }

    #[test]
    fn separable_single_split() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let labels: Vec<bool> = xs.iter().map(|&x| x > 5.0).collect();
        let m = train_tree(&one_col(&xs), &labels, small()).unwrap();
        match &m.root {
            Node::Numeric {
                threshold, left, right, ..
            } => {
                assert_eq!(*threshold, 5.5);
                assert!(matches!(**left, Node::Leaf { pos: 0, neg: 6 }));
                assert!(matches!(**right, Node::Leaf { pos: 4, neg: 0 }));
            }
            other => panic!("expected a numeric split, got {other:?}"),
        }
        for (x, l) in xs.iter().zip(&labels) {
            let p = m.predict_raw(&[Some(*x)]).unwrap();
            assert_eq!(p > 0.5, *l);
        }
    }

    #[test]
    fn constant_feature_gives_prior_leaf() {
        let labels = [true, false, true, false, true, false, true, false, true, false];
        let m = train_tree(&one_col(&[3.0; 10]), &labels, small()).unwrap();
        assert_eq!(m.root, Node::Leaf { pos: 5, neg: 5 });
        assert_eq!(m.predict_raw(&[Some(3.0)]).unwrap(), 0.5);
    }

    #[test]
    fn laplace_leaf_probability() {
        assert!((laplace(9, 1) - 10.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(
            train_tree(&one_col(&[1.0, 2.0]), &[true, true], small()),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let labels: Vec<bool> = xs.iter().map(|&x| x > 5.0).collect();
        let m = train_tree(&one_col(&xs), &labels, small()).unwrap();
        assert!(matches!(
            m.predict_raw(&[Some(1.0), None]),
            Err(Error::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn missing_values_follow_majority_branch() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let labels: Vec<bool> = xs.iter().map(|&x| x > 2.0).collect();
        let m = train_tree(&one_col(&xs), &labels, small()).unwrap();
        // 7 rows sit right of the 2.5 threshold
        assert!(m.predict_raw(&[None]).unwrap() > 0.5);
    }

    #[test]
    fn categorical_multiway_split() {
        let table = Table {
            specs: vec![FeatureSpec::categorical("level")],
            columns: vec![vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]],
        };
        let labels = [true, true, false, false, true, true, false, false];
        let m = train_tree(&table, &labels, small()).unwrap();
        match &m.root {
            Node::Categorical { values, children, .. } => {
                assert_eq!(values, &vec![1.0, 2.0, 3.0, 4.0]);
                assert_eq!(children.len(), 4);
            }
            other => panic!("{other:?}"),
        }
        // unseen category goes down the majority branch without error
        assert!(m.predict_raw(&[Some(9.0)]).is_ok());
    }

    #[test]
    fn high_cardinality_categorical_is_ignored() {
        let ids: Vec<f64> = (0..40).map(f64::from).collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let table = Table {
            specs: vec![FeatureSpec::categorical("road_id")],
            columns: vec![ids],
        };
        let m = train_tree(&table, &labels, small()).unwrap();
        assert!(matches!(m.root, Node::Leaf { .. }));
    }

    fn oracle_entropy(c: &[u64]) -> f64 {
        let n: u64 = c.iter().sum();
        c.iter()
            .filter(|&&x| x > 0)
            .map(|&x| {
                let p = x as f64 / n as f64;
                -p * p.log2()
            })
            .sum()
    }

    /// Exhaustive root-split search written independently of the trainer:
    /// every threshold of every feature is enumerated; each feature keeps its
    /// highest-gain threshold; among features with at least average gain the
    /// highest gain ratio wins.
    fn oracle_root_split(table: &Table, labels: &[bool], min_leaf: usize) -> Option<(usize, f64, f64)> {
        let parent = [
            labels.iter().filter(|&&l| l).count() as u64,
            labels.iter().filter(|&&l| !l).count() as u64,
        ];
        let n = labels.len() as f64;
        let mut per_feature = Vec::new();
        for (f, col) in table.columns.iter().enumerate() {
            let mut vals = col.clone();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            let mut best: Option<(usize, f64, f64, f64)> = None;
            for w in vals.windows(2) {
                let thr = (w[0] + w[1]) / 2.0;
                let mut left = vec![0u64, 0];
                let mut right = vec![0u64, 0];
                for (v, &l) in col.iter().zip(labels) {
                    let side = if *v <= thr { &mut left } else { &mut right };
                    side[if l { 0 } else { 1 }] += 1;
                }
                let nl: u64 = left.iter().sum();
                let nr: u64 = right.iter().sum();
                if (nl as usize) < min_leaf || (nr as usize) < min_leaf {
                    continue;
                }
                let gain = oracle_entropy(&parent)
                    - nl as f64 / n * oracle_entropy(&left)
                    - nr as f64 / n * oracle_entropy(&right);
                if gain <= 1e-12 {
                    continue;
                }
                let ratio = gain / oracle_entropy(&[nl, nr]);
                if best.is_none_or(|b| gain > b.3 + SPLIT_TIE_EPS) {
                    best = Some((f, thr, ratio, gain));
                }
            }
            per_feature.extend(best);
        }
        if per_feature.is_empty() {
            return None;
        }
        let avg = per_feature.iter().map(|c| c.3).sum::<f64>() / per_feature.len() as f64;
        let eligible: Vec<_> = per_feature.into_iter().filter(|c| c.3 + SPLIT_TIE_EPS >= avg).collect();
        let top = eligible.iter().map(|c| c.2).fold(0.0, f64::max);
        eligible
            .into_iter()
            .find(|c| c.2 >= top - SPLIT_TIE_EPS)
            .map(|c| (c.0, c.1, c.2))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn root_split_matches_exhaustive_search(seed in 0u64..1_000_000, n_feat in 1usize..=4, n_rows in 2usize..=64, min_leaf in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let columns: Vec<Vec<f64>> = (0..n_feat)
                .map(|_| (0..n_rows).map(|_| rng.random_range(0..8) as f64).collect())
                .collect();
            let labels: Vec<bool> = (0..n_rows).map(|i| {
                let bias = columns[0][i] > 3.0;
                if rng.random_bool(0.3) { !bias } else { bias }
            }).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let table = Table {
                specs: (0..n_feat).map(|i| FeatureSpec::numeric(&format!("f{i}"))).collect(),
                columns,
            };
            let params = TreeParams { max_depth: 1, min_leaf, max_categories: 32 };
            let m = train_tree(&table, &labels, params).unwrap();
            let oracle = oracle_root_split(&table, &labels, min_leaf);
            match (&m.root, oracle) {
                (Node::Leaf { .. }, None) => {}
                (Node::Numeric { feature, threshold, .. }, Some((f, thr, _))) => {
                    prop_assert_eq!(*feature, f);
                    prop_assert_eq!(*threshold, thr);
                }
                (root, oracle) => prop_assert!(false, "tree {:?} vs oracle {:?}", root, oracle),
            }
        }

        #[test]
        fn separable_data_is_fit_exactly(seed in 0u64..1_000_000, n_rows in 2usize..=80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..n_rows).map(|_| rng.random_range(0..1000) as f64).collect();
            let b: Vec<f64> = (0..n_rows).map(|_| rng.random_range(0..1000) as f64).collect();
            // consistent labelling by a conjunction/disjunction of thresholds, so
            // every impure node admits a positive-gain split
            let (ta, tb) = (rng.random_range(0..1000) as f64, rng.random_range(0..1000) as f64);
            let conj = rng.random_bool(0.5);
            let labels: Vec<bool> = a.iter().zip(&b).map(|(x, y)| if conj { *x > ta && *y > tb } else { *x > ta || *y > tb }).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let table = Table { specs: vec![FeatureSpec::numeric("a"), FeatureSpec::numeric("b")], columns: vec![a, b] };
            let m = train_tree(&table, &labels, small()).unwrap();
            for i in 0..n_rows {
                let p = m.predict_row(&table.row(i)).unwrap();
                prop_assert!(p > 0.0 && p < 1.0);
                prop_assert_eq!(p > 0.5, labels[i]);
            }
            let batch = m.predict_table(&table).unwrap();
            for i in 0..n_rows {
                prop_assert_eq!(batch[i], m.predict_row(&table.row(i)).unwrap());
            }
        }
    }
}
