//! Single binary choice tree: Gini-driven recursive splitting and prediction.
//!
//! Dimensions are 1-based in the public API (dimension `j <= N` is product
//! `j`; dimensions `N+1..=N+M` are customer features). A sample goes left when
//! `x[dim] <= threshold`.
//!
//! Growth rules:
//! * under [`LeafRule::Children`] (the default) a split is admissible only if
//!   both children keep at least `leaf_min` in-bag samples; under
//!   [`LeafRule::Node`] a node is split while it holds at least `leaf_min`
//!   in-bag samples and a non-empty split exists;
//! * candidate dimensions are visited in a fresh random order per node;
//!   dimensions that are constant within the node are skipped without counting
//!   towards `mtry` (a dimension whose only splits leave a child too small does
//!   count);
//! * ties in impurity go to the dimension visited first in the node's random
//!   order, then to the lowest threshold ([`best_split`], which has no visit
//!   order, prefers the lowest dimension);
//! * a leaf is labelled with the choice of one uniformly drawn in-bag sample.
//!
//! All randomness at a node comes from a stream keyed by the node's path, so
//! the tree depends on feature values only through their within-dimension
//! ordering.

use std::collections::HashMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::choice::{FeatureVector, Transaction};
use crate::error::{Error, Result};
use crate::rng;

/// How split thresholds are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Inputs are `{0,1}`; the threshold is always 0.5.
    Binary,
    /// Thresholds are midpoints between consecutive distinct in-node values.
    Continuous,
}

/// What `leaf_min` bounds. The two rules coincide at `leaf_min = 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeafRule {
    /// Every child of a split holds at least `leaf_min` in-bag samples.
    #[default]
    Children,
    /// Nodes with at least `leaf_min` in-bag samples are split whenever any
    /// non-empty split exists.
    Node,
}

impl LeafRule {
    /// Smallest admissible child weight and smallest splittable node weight.
    fn bounds(self, leaf_min: usize) -> (u64, u64) {
        let l = leaf_min as u64;
        match self {
            LeafRule::Children => (l, 2 * l),
            LeafRule::Node => (1, l),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub mtry: usize,
    pub leaf_min: usize,
    pub split_mode: SplitMode,
    #[serde(default)]
    pub leaf_rule: LeafRule,
}

impl TreeParams {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.mtry == 0 || self.mtry > dim {
            return Err(Error::InvalidParameter(format!(
                "mtry = {} must lie in 1..={dim}",
                self.mtry
            )));
        }
        if self.leaf_min == 0 {
            return Err(Error::InvalidParameter(
                "leaf_min must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Internal {
        dim: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        label: usize,
    },
}

impl TreeNode {
    /// Routes `x` (0-based slice) to a leaf label without bounds checks on the
    /// dimension.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { label } => return *label,
                TreeNode::Internal {
                    dim,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[dim - 1] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    /// Preorder index of the leaf reached by `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        fn size(n: &TreeNode) -> usize {
            match n {
                TreeNode::Leaf { .. } => 1,
                TreeNode::Internal { left, right, .. } => 1 + size(left) + size(right),
            }
        }
        let mut node = self;
        let mut index = 0;
        loop {
            match node {
                TreeNode::Leaf { .. } => return index,
                TreeNode::Internal {
                    dim,
                    threshold,
                    left,
                    right,
                } => {
                    if x[dim - 1] <= *threshold {
                        index += 1;
                        node = left;
                    } else {
                        index += 1 + size(left);
                        node = right;
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Internal { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Internal { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    pub fn max_dim(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Internal {
                dim, left, right, ..
            } => (*dim).max(left.max_dim()).max(right.max_dim()),
        }
    }

    /// Visits `(dim, threshold)` of every internal node in preorder.
    pub fn for_each_split(&self, f: &mut impl FnMut(usize, f64)) {
        if let TreeNode::Internal {
            dim,
            threshold,
            left,
            right,
        } = self
        {
            f(*dim, *threshold);
            left.for_each_split(f);
            right.for_each_split(f);
        }
    }

    /// Whether some root-to-leaf path splits the same dimension twice.
    pub fn repeats_dimension_on_a_path(&self) -> bool {
        fn walk(n: &TreeNode, seen: &mut Vec<usize>) -> bool {
            match n {
                TreeNode::Leaf { .. } => false,
                TreeNode::Internal {
                    dim, left, right, ..
                } => {
                    if seen.contains(dim) {
                        return true;
                    }
                    seen.push(*dim);
                    let r = walk(left, seen) || walk(right, seen);
                    seen.pop();
                    r
                }
            }
        }
        walk(self, &mut Vec::new())
    }
}

/// Routes `x` through `tree`, failing if a split refers to a dimension `x`
/// does not have.
pub fn tree_predict(tree: &TreeNode, x: &FeatureVector) -> Result<usize> {
    let mut node = tree;
    loop {
        match node {
            TreeNode::Leaf { label } => return Ok(*label),
            TreeNode::Internal {
                dim,
                threshold,
                left,
                right,
            } => {
                if *dim == 0 || *dim > x.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: *dim,
                        found: x.dim(),
                    });
                }
                node = if x.get(*dim) <= *threshold {
                    left
                } else {
                    right
                };
            }
        }
    }
}

/// Gini index of a partition given per-region class counts: the
/// size-weighted average of `Σ_k p_k (1 - p_k)`. Empty regions contribute 0.
pub fn gini_index<C: AsRef<[f64]>>(regions: &[C]) -> Result<f64> {
    let mut total = 0.0;
    let mut acc = 0.0;
    for r in regions {
        let counts = r.as_ref();
        if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(Error::InvalidValue(
                "class counts must be non-negative".into(),
            ));
        }
        let n: f64 = counts.iter().sum();
        if n > 0.0 {
            let sq: f64 = counts.iter().map(|c| c * c).sum();
            acc += n - sq / n;
        }
        total += n;
    }
    if total <= 0.0 {
        return Err(Error::Empty("gini index of an empty partition"));
    }
    Ok(acc / total)
}

/// De-duplicated weighted training rows: one per distinct
/// (feature vector, label) pair, in order of first appearance.
#[derive(Clone, Debug)]
pub(crate) struct Units {
    pub dim: usize,
    pub n_classes: usize,
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
    pub weights: Vec<u32>,
}

impl Units {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn from_transactions(samples: &[Transaction], n_classes: usize) -> Units {
        let dim = samples.first().map_or(0, |t| t.x.dim());
        let mut index: HashMap<(Vec<u64>, usize), usize> = HashMap::new();
        let mut units = Units {
            dim,
            n_classes,
            values: Vec::new(),
            labels: Vec::new(),
            weights: Vec::new(),
        };
        for t in samples {
            let key = (t.x.values().iter().map(|v| v.to_bits()).collect(), t.chosen);
            match index.get(&key) {
                Some(&u) => units.weights[u] += 1,
                None => {
                    index.insert(key, units.labels.len());
                    units.values.extend_from_slice(t.x.values());
                    units.labels.push(t.chosen);
                    units.weights.push(1);
                }
            }
        }
        units
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    /// `Σ_regions n_r (1 - Σ_k p_rk^2)`; Gini index times node size.
    impurity: f64,
    dim: usize,
    threshold: f64,
}

/// Whether `c` beats `best`. Equal impurities are settled by the lower
/// dimension when `by_dim`, otherwise the incumbent (the earlier visited
/// dimension) stays.
fn better(c: &Candidate, best: &Option<Candidate>, scale: f64, by_dim: bool) -> bool {
    match best {
        None => true,
        Some(b) => {
            let tol = 1e-10 * scale.max(1.0);
            c.impurity < b.impurity - tol
                || ((c.impurity - b.impurity).abs() <= tol && by_dim && c.dim < b.dim)
        }
    }
}

/// Outcome of scanning one dimension at a node.
enum Scan {
    /// All in-node values are equal.
    Constant,
    /// Some split exists but none keeps both children large enough.
    Blocked,
    Split(Candidate),
}

impl Scan {
    fn candidate(self) -> Option<Candidate> {
        match self {
            Scan::Split(c) => Some(c),
            _ => None,
        }
    }
}

pub(crate) struct Splitter<'a> {
    units: &'a Units,
    mode: SplitMode,
    min_child: f64,
    left: Vec<f64>,
    right: Vec<f64>,
    order: Vec<u32>,
}

impl<'a> Splitter<'a> {
    pub fn new(units: &'a Units, mode: SplitMode, min_child: u64) -> Self {
        Splitter {
            units,
            mode,
            min_child: min_child.max(1) as f64,
            left: vec![0.0; units.n_classes],
            right: vec![0.0; units.n_classes],
            order: Vec::new(),
        }
    }

    /// Best admissible split of the node `idx` on 0-based dimension `d`.
    fn evaluate(&mut self, idx: &[u32], d: usize) -> Scan {
        match self.mode {
            SplitMode::Binary => self.evaluate_fixed(idx, d, 0.5),
            SplitMode::Continuous => self.evaluate_sweep(idx, d),
        }
    }

    fn evaluate_fixed(&mut self, idx: &[u32], d: usize, threshold: f64) -> Scan {
        let units = self.units;
        self.left.iter_mut().for_each(|c| *c = 0.0);
        self.right.iter_mut().for_each(|c| *c = 0.0);
        let (mut nl, mut nr) = (0.0, 0.0);
        for &u in idx {
            let u = u as usize;
            let w = units.weights[u] as f64;
            if units.values[u * units.dim + d] <= threshold {
                self.left[units.labels[u]] += w;
                nl += w;
            } else {
                self.right[units.labels[u]] += w;
                nr += w;
            }
        }
        if nl == 0.0 || nr == 0.0 {
            return Scan::Constant;
        }
        if nl < self.min_child || nr < self.min_child {
            return Scan::Blocked;
        }
        let sql: f64 = self.left.iter().map(|c| c * c).sum();
        let sqr: f64 = self.right.iter().map(|c| c * c).sum();
        Scan::Split(Candidate {
            impurity: nl - sql / nl + nr - sqr / nr,
            dim: d,
            threshold,
        })
    }

    fn evaluate_sweep(&mut self, idx: &[u32], d: usize) -> Scan {
        let units = self.units;
        let value = |u: u32| units.values[u as usize * units.dim + d];
        self.order.clear();
        self.order.extend_from_slice(idx);
        self.order.sort_by(|&a, &b| value(a).total_cmp(&value(b)));
        let (first, last) = match (self.order.first(), self.order.last()) {
            (Some(&a), Some(&b)) => (value(a), value(b)),
            _ => return Scan::Constant,
        };
        if first == last {
            return Scan::Constant;
        }
        self.left.iter_mut().for_each(|c| *c = 0.0);
        self.right.iter_mut().for_each(|c| *c = 0.0);
        let mut nr = 0.0;
        for &u in &self.order {
            let w = units.weights[u as usize] as f64;
            self.right[units.labels[u as usize]] += w;
            nr += w;
        }
        let mut sqr: f64 = self.right.iter().map(|c| c * c).sum();
        let (mut nl, mut sql) = (0.0, 0.0);
        let mut best: Option<Candidate> = None;
        let scale = nr;
        for k in 0..self.order.len() - 1 {
            let u = self.order[k] as usize;
            let (c, w) = (units.labels[u], units.weights[u] as f64);
            sql += 2.0 * self.left[c] * w + w * w;
            sqr -= 2.0 * self.right[c] * w - w * w;
            self.left[c] += w;
            self.right[c] -= w;
            nl += w;
            nr -= w;
            let (lo, hi) = (value(self.order[k]), value(self.order[k + 1]));
            if lo == hi || nl < self.min_child {
                continue;
            }
            if nr < self.min_child {
                break;
            }
            let mut threshold = lo + (hi - lo) / 2.0;
            if threshold >= hi {
                threshold = lo;
            }
            let cand = Candidate {
                impurity: nl - sql / nl + nr - sqr / nr,
                dim: d,
                threshold,
            };
            // Thresholds ascend, so only strict improvements replace.
            if best.is_none_or(|b| cand.impurity < b.impurity - 1e-10 * scale.max(1.0)) {
                best = Some(cand);
            }
        }
        best.map_or(Scan::Blocked, Scan::Split)
    }
}

/// Grows trees over a fixed unit table.
pub(crate) struct Grower<'a> {
    units: &'a Units,
    params: &'a TreeParams,
}

impl<'a> Grower<'a> {
    pub fn new(units: &'a Units, params: &'a TreeParams) -> Self {
        Grower { units, params }
    }

    /// Grows a tree over the units listed in `idx` (ascending order), with all
    /// node randomness derived from `key`.
    pub fn grow(&self, idx: Vec<u32>, key: u64) -> TreeNode {
        let (min_child, _) = self.params.leaf_rule.bounds(self.params.leaf_min);
        let mut splitter = Splitter::new(self.units, self.params.split_mode, min_child);
        self.grow_node(&mut splitter, idx, key)
    }

    fn grow_node(&self, splitter: &mut Splitter<'_>, idx: Vec<u32>, key: u64) -> TreeNode {
        let units = self.units;
        let total: u64 = idx.iter().map(|&u| units.weights[u as usize] as u64).sum();
        let (_, min_node) = self.params.leaf_rule.bounds(self.params.leaf_min);
        if total >= min_node {
            if let Some(c) = self.choose_split(splitter, &idx, key, total as f64) {
                let (left, right): (Vec<u32>, Vec<u32>) = idx
                    .iter()
                    .partition(|&&u| units.values[u as usize * units.dim + c.dim] <= c.threshold);
                let l = self.grow_node(splitter, left, rng::child_key(key, false));
                let r = self.grow_node(splitter, right, rng::child_key(key, true));
                return TreeNode::Internal {
                    dim: c.dim + 1,
                    threshold: c.threshold,
                    left: Box::new(l),
                    right: Box::new(r),
                };
            }
        }
        TreeNode::Leaf {
            label: self.draw_label(&idx, key, total),
        }
    }

    fn choose_split(
        &self,
        splitter: &mut Splitter<'_>,
        idx: &[u32],
        key: u64,
        total: f64,
    ) -> Option<Candidate> {
        let d = self.units.dim;
        let mut rng = rng::stream(rng::derive(key, rng::TAG_SPLIT));
        let mut dims: Vec<usize> = (0..d).collect();
        let mut best = None;
        let mut evaluated = 0;
        for k in 0..d {
            let j = rng.random_range(k..d);
            dims.swap(k, j);
            let scan = splitter.evaluate(idx, dims[k]);
            if matches!(scan, Scan::Constant) {
                continue;
            }
            evaluated += 1;
            if let Some(c) = scan.candidate() {
                if better(&c, &best, total, false) {
                    best = Some(c);
                }
            }
            if evaluated == self.params.mtry {
                break;
            }
        }
        best
    }

    fn draw_label(&self, idx: &[u32], key: u64, total: u64) -> usize {
        let mut rng = rng::stream(rng::derive(key, rng::TAG_LEAF));
        let mut r = rng.random_range(0..total);
        for &u in idx {
            let w = self.units.weights[u as usize] as u64;
            if r < w {
                return self.units.labels[u as usize];
            }
            r -= w;
        }
        unreachable!("draw below total weight")
    }
}

fn check_samples(samples: &[Transaction]) -> Result<usize> {
    let first = samples
        .first()
        .ok_or(Error::Empty("tree needs at least one sample"))?;
    let dim = first.x.dim();
    for t in samples {
        if t.x.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: t.x.dim(),
            });
        }
    }
    Ok(dim)
}

fn n_classes(samples: &[Transaction]) -> usize {
    samples.iter().map(|t| t.chosen).max().unwrap_or(0) + 1
}

/// The `(dim, threshold)` among `candidate_dims` (1-based) minimising the
/// post-split Gini index, or `None` when no candidate has an admissible split
/// (one leaving a side empty never is).
pub fn best_split(
    samples: &[Transaction],
    candidate_dims: &[usize],
    params: &TreeParams,
) -> Option<(usize, f64)> {
    let dim = check_samples(samples).ok()?;
    let units = Units::from_transactions(samples, n_classes(samples));
    let idx: Vec<u32> = (0..units.len() as u32).collect();
    let (min_child, _) = params.leaf_rule.bounds(params.leaf_min);
    let mut splitter = Splitter::new(&units, params.split_mode, min_child);
    let total = samples.len() as f64;
    let mut best = None;
    for &d in candidate_dims {
        if d == 0 || d > dim {
            continue;
        }
        if let Some(c) = splitter.evaluate(&idx, d - 1).candidate() {
            if better(&c, &best, total, true) {
                best = Some(c);
            }
        }
    }
    best.map(|c| (c.dim + 1, c.threshold))
}

/// Grows one tree on all of `samples`. The stream `rng` only supplies the
/// root key; everything below is keyed by node path.
pub fn grow_tree<R: RngCore + ?Sized>(
    samples: &[Transaction],
    params: &TreeParams,
    rng: &mut R,
) -> Result<TreeNode> {
    let dim = check_samples(samples)?;
    params.validate(dim)?;
    let units = Units::from_transactions(samples, n_classes(samples));
    let idx = (0..units.len() as u32).collect();
    Ok(Grower::new(&units, params).grow(idx, rng.next_u64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::Assortment;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tx(chosen: usize, x: &[f64]) -> Transaction {
        Transaction::new(chosen, FeatureVector::new(x.to_vec()).unwrap()).unwrap()
    }

    fn binary(mtry: usize, leaf_min: usize) -> TreeParams {
        TreeParams {
            mtry,
            leaf_min,
            split_mode: SplitMode::Binary,
            leaf_rule: LeafRule::Children,
        }
    }

    /// Top offered product under the ranking 1 ≻ 2 ≻ … ≻ N ≻ 0.
    fn ranking_choice(s: &Assortment) -> usize {
        s.products().next().unwrap_or(0)
    }

    fn figure3_tree() -> TreeNode {
        // Root splits on product 1; with it the customer buys 1, otherwise
        // product 2 if offered, otherwise nothing.
        TreeNode::Internal {
            dim: 1,
            threshold: 0.5,
            left: Box::new(TreeNode::Internal {
                dim: 2,
                threshold: 0.5,
                left: Box::new(TreeNode::Leaf { label: 0 }),
                right: Box::new(TreeNode::Leaf { label: 2 }),
            }),
            right: Box::new(TreeNode::Leaf { label: 1 }),
        }
    }

    #[test]
    fn gini_examples() {
        assert!((gini_index(&[[2.0, 2.0]]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(gini_index(&[[4.0, 0.0]]).unwrap(), 0.0);
        let g = gini_index(&[vec![2.0, 2.0], vec![2.0, 0.0]]).unwrap();
        assert!((g - 1.0 / 3.0).abs() < 1e-15);
        assert!(gini_index(&[[0.0, 0.0]]).is_err());
        assert!(gini_index::<[f64; 2]>(&[]).is_err());
    }

    #[test]
    fn best_split_on_ranking_data() {
        let samples = vec![
            tx(1, &[1.0, 1.0]),
            tx(1, &[1.0, 0.0]),
            tx(2, &[0.0, 1.0]),
            tx(0, &[0.0, 0.0]),
        ];
        // dim 1 gives weighted Gini 0.25, dim 2 gives 0.5
        let parts1 = [vec![1.0, 0.0, 1.0], vec![0.0, 2.0, 0.0]];
        let parts2 = [vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0]];
        assert!((gini_index(&parts1).unwrap() - 0.25).abs() < 1e-15);
        assert!((gini_index(&parts2).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(best_split(&samples, &[1, 2], &binary(2, 1)), Some((1, 0.5)));
        assert_eq!(best_split(&samples, &[2, 1], &binary(2, 1)), Some((1, 0.5)));
    }

    #[test]
    fn best_split_ties_go_to_lowest_dimension() {
        let samples = vec![tx(0, &[1.0, 0.0, 1.0]), tx(0, &[0.0, 1.0, 0.0])];
        assert_eq!(
            best_split(&samples, &[3, 2, 1], &binary(3, 1)),
            Some((1, 0.5))
        );
        assert_eq!(best_split(&samples, &[3, 2], &binary(3, 1)), Some((2, 0.5)));
    }

    #[test]
    fn best_split_none_without_valid_split() {
        let samples = vec![tx(1, &[1.0, 0.0]), tx(0, &[1.0, 0.0]), tx(0, &[1.0, 0.0])];
        assert_eq!(best_split(&samples, &[1, 2], &binary(2, 1)), None);
    }

    #[test]
    fn continuous_threshold_is_midpoint() {
        let samples = vec![tx(0, &[0.1]), tx(0, &[0.2]), tx(1, &[0.6]), tx(1, &[0.9])];
        let params = TreeParams {
            mtry: 1,
            leaf_min: 1,
            split_mode: SplitMode::Continuous,
            leaf_rule: LeafRule::Children,
        };
        let (d, thr) = best_split(&samples, &[1], &params).unwrap();
        assert_eq!(d, 1);
        assert!((thr - 0.4).abs() < 1e-15);
    }

    #[test]
    fn single_sample_is_a_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tree = grow_tree(&[tx(1, &[1.0])], &binary(1, 1), &mut rng).unwrap();
        assert_eq!(tree, TreeNode::Leaf { label: 1 });
    }

    #[test]
    fn empty_samples_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(grow_tree(&[], &binary(1, 1), &mut rng).is_err());
    }

    #[test]
    fn recovers_single_ranking_on_full_cube() {
        for n in 1..=5 {
            let samples: Vec<Transaction> = Assortment::enumerate(n)
                .map(|s| Transaction::from_assortment(ranking_choice(&s), &s).unwrap())
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let tree = grow_tree(&samples, &binary(n, 1), &mut rng).unwrap();
            for s in Assortment::enumerate(n) {
                assert_eq!(
                    tree_predict(&tree, &s.to_feature_vector()).unwrap(),
                    ranking_choice(&s)
                );
            }
            assert!(!tree.repeats_dimension_on_a_path());
        }
    }

    #[test]
    fn figure3_predictions() {
        let t = figure3_tree();
        let fv = |v: &[f64]| FeatureVector::new(v.to_vec()).unwrap();
        assert_eq!(tree_predict(&t, &fv(&[1.0, 0.0])).unwrap(), 1);
        assert_eq!(tree_predict(&t, &fv(&[0.0, 0.0])).unwrap(), 0);
        assert_eq!(tree_predict(&t, &fv(&[0.0, 1.0])).unwrap(), 2);
        assert_eq!(
            tree_predict(&TreeNode::Leaf { label: 0 }, &fv(&[0.3])).unwrap(),
            0
        );
        assert!(tree_predict(&t, &fv(&[0.0])).is_err());
    }

    #[test]
    fn tree_json_round_trip() {
        let t = TreeNode::Internal {
            dim: 3,
            threshold: 0.123_456_789_012_345_67,
            left: Box::new(TreeNode::Leaf { label: 0 }),
            right: Box::new(figure3_tree()),
        };
        let js = serde_json::to_string(&t).unwrap();
        assert!(js.starts_with(r#"{"dim":3,"threshold":"#));
        let back: TreeNode = serde_json::from_str(&js).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn leaves_hold_single_vectors_with_unit_leaf_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 5;
        let samples: Vec<Transaction> = (0..60)
            .map(|_| {
                let s = Assortment::from_mask(n, rng.random::<u64>());
                let c = if s.is_empty() {
                    0
                } else {
                    s.products().last().unwrap()
                };
                Transaction::from_assortment(c, &s).unwrap()
            })
            .collect();
        for mtry in [1, n] {
            let tree = grow_tree(&samples, &binary(mtry, 1), &mut rng).unwrap();
            let mut leaves: HashMap<usize, Vec<&FeatureVector>> = HashMap::new();
            for t in &samples {
                leaves
                    .entry(tree.leaf_index(t.x.values()))
                    .or_default()
                    .push(&t.x);
            }
            for xs in leaves.values() {
                assert!(xs.iter().all(|x| *x == xs[0]));
            }
        }
    }

    #[test]
    fn children_rule_blocks_small_children() {
        // dim 1 isolates one sample, dim 2 splits 2/2
        let samples = vec![
            tx(1, &[1.0, 1.0]),
            tx(0, &[0.0, 1.0]),
            tx(0, &[0.0, 0.0]),
            tx(0, &[0.0, 0.0]),
        ];
        let mut p = binary(2, 2);
        assert_eq!(best_split(&samples, &[1], &p), None);
        assert_eq!(best_split(&samples, &[1, 2], &p), Some((2, 0.5)));
        p.leaf_rule = LeafRule::Node;
        assert_eq!(best_split(&samples, &[1, 2], &p), Some((1, 0.5)));
    }

    #[test]
    fn continuous_children_rule_moves_threshold() {
        let samples = vec![tx(1, &[0.1]), tx(0, &[0.2]), tx(0, &[0.3]), tx(0, &[0.4])];
        let mut p = TreeParams {
            mtry: 1,
            leaf_min: 1,
            split_mode: SplitMode::Continuous,
            leaf_rule: LeafRule::Children,
        };
        assert!((best_split(&samples, &[1], &p).unwrap().1 - 0.15).abs() < 1e-12);
        p.leaf_min = 2;
        assert!((best_split(&samples, &[1], &p).unwrap().1 - 0.25).abs() < 1e-12);
        p.leaf_min = 3;
        assert_eq!(best_split(&samples, &[1], &p), None);
    }

    fn arb_samples() -> impl Strategy<Value = Vec<(u8, u8)>> {
        prop::collection::vec((0u8..16, 0u8..5), 1..40)
    }

    fn build(raw: &[(u8, u8)]) -> Vec<Transaction> {
        raw.iter()
            .map(|&(mask, c)| {
                let s = Assortment::from_mask(4, mask as u64);
                let offered: Vec<usize> = s.products().collect();
                let chosen = if offered.is_empty() {
                    0
                } else {
                    [0, offered[c as usize % offered.len()]][(c % 2) as usize]
                };
                Transaction::from_assortment(chosen, &s).unwrap()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn gini_bounded_and_zero_iff_pure(table in prop::collection::vec(prop::collection::vec(0u32..20, 4), 1..5)) {
            let regions: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect();
            let total: f64 = regions.iter().flatten().sum();
            prop_assume!(total > 0.0);
            let g = gini_index(&regions).unwrap();
            prop_assert!((0.0..=1.0 - 1.0 / 4.0 + 1e-12).contains(&g));
            let pure = regions.iter().all(|r| r.iter().filter(|&&c| c > 0.0).count() <= 1);
            prop_assert_eq!(g.abs() < 1e-12, pure);
        }

        #[test]
        fn binary_trees_respect_path_invariant(raw in arb_samples(), mtry in 1usize..=4, leaf in 1usize..4, seed in any::<u64>()) {
            let samples = build(&raw);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tree = grow_tree(&samples, &binary(mtry, leaf), &mut rng).unwrap();
            prop_assert!(!tree.repeats_dimension_on_a_path());
            let mut ok = true;
            tree.for_each_split(&mut |_, thr| ok &= thr == 0.5);
            prop_assert!(ok);
        }

        #[test]
        fn leaf_rules_agree_at_unit_leaves_and_bound_leaf_sizes(raw in arb_samples(), mtry in 1usize..=4, leaf in 1usize..6, seed in any::<u64>()) {
            let samples = build(&raw);
            let mut node = binary(mtry, 1);
            node.leaf_rule = LeafRule::Node;
            let a = grow_tree(&samples, &binary(mtry, 1), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = grow_tree(&samples, &node, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
            let tree = grow_tree(&samples, &binary(mtry, leaf), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut sizes: HashMap<usize, usize> = HashMap::new();
            for t in &samples {
                *sizes.entry(tree.leaf_index(t.x.values())).or_default() += 1;
            }
            if tree.n_leaves() > 1 {
                prop_assert!(sizes.values().all(|&c| c >= leaf));
            }
        }

        #[test]
        fn growth_is_deterministic(raw in arb_samples(), seed in any::<u64>()) {
            let samples = build(&raw);
            let p = binary(2, 1);
            let a = grow_tree(&samples, &p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = grow_tree(&samples, &p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }

        #[test]
        fn splits_never_empty_a_side(raw in arb_samples(), seed in any::<u64>()) {
            let samples = build(&raw);
            let tree = grow_tree(&samples, &binary(4, 1), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            fn check(n: &TreeNode, xs: &[&Transaction]) -> bool {
                match n {
                    TreeNode::Leaf { .. } => !xs.is_empty(),
                    TreeNode::Internal { dim, threshold, left, right } => {
                        let (l, r): (Vec<&Transaction>, Vec<&Transaction>) =
                            xs.iter().partition(|t| t.x.get(*dim) <= *threshold);
                        l.len() < xs.len() && r.len() < xs.len() && check(left, &l) && check(right, &r)
                    }
                }
            }
            let refs: Vec<&Transaction> = samples.iter().collect();
            prop_assert!(check(&tree, &refs));
        }
    }
}
