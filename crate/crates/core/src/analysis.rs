//! Instruments for the nearest-neighbour view of the forest: potential nearest
//! neighbours (PNNs), the PNN-distance Monte Carlo, the population Gini of a
//! root split under a single ranking, and the ranking-recovery experiment.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cart::{gini_index, TreeNode};
use crate::choice::{symmetric_distance, Assortment, Dataset, Transaction};
use crate::error::{check_dim, Error, Result};
use crate::forest::{bootstrap_indices, Forest, ForestParams};
use crate::generators::dirichlet_weights;
use crate::rng;

/// True iff no member of `family` is strictly closer to `s` than `candidate`
/// in the symmetric-difference order.
pub fn is_pnn(s: &Assortment, candidate: &Assortment, family: &[Assortment]) -> Result<bool> {
    if !family.contains(candidate) {
        return Err(Error::NotInFamily);
    }
    let d = s.symmetric_difference(candidate)?;
    for other in family {
        if s.symmetric_difference(other)?.is_strict_subset(&d) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Distinct PNNs of `s` in `family`, in first-appearance order.
pub fn pnn_set(s: &Assortment, family: &[Assortment]) -> Result<Vec<Assortment>> {
    let mut out: Vec<Assortment> = Vec::new();
    for c in family {
        if !out.contains(c) && is_pnn(s, c, family)? {
            out.push(c.clone());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PnnReport {
    pub target: Assortment,
    /// Distinct training assortments.
    pub family: Vec<Assortment>,
    pub pnn: Vec<Assortment>,
    /// Distance from the target to each entry of `pnn`.
    pub pnn_distance: Vec<usize>,
    /// Per `family` entry, the fraction of trees in which it shares the
    /// target's leaf.
    pub frequency: Vec<f64>,
    pub n_trees: usize,
}

impl PnnReport {
    /// `(assortment, distance, frequency)` for family members that were ever
    /// co-leaf, most frequent first.
    pub fn co_leaf(&self) -> Vec<(Assortment, usize, f64)> {
        let mut rows: Vec<_> = self
            .family
            .iter()
            .zip(&self.frequency)
            .filter(|(_, &f)| f > 0.0)
            .map(|(a, &f)| {
                (
                    a.clone(),
                    symmetric_distance(&self.target, a).unwrap_or(0),
                    f,
                )
            })
            .collect();
        rows.sort_by(|a, b| b.2.total_cmp(&a.2));
        rows
    }
}

/// Which training assortment occupies the target's leaf, tree by tree.
///
/// The forest must be grown with unit leaves on assortment-only data, so every
/// leaf holds a single in-bag assortment. Each occupant is checked against
/// the PNN definition relative to that tree's in-bag family; a failure is
/// reported as an error because it would contradict the leaf/PNN
/// correspondence.
pub fn pnn_coleaf_frequency(forest: &Forest, s: &Assortment, data: &Dataset) -> Result<PnnReport> {
    if forest.params.leaf_min != 1 {
        return Err(Error::InvalidParameter(format!(
            "co-leaf analysis needs leaf_min = 1, forest has {}",
            forest.params.leaf_min
        )));
    }
    if data.n_features() != 0 || forest.n_features != 0 {
        return Err(Error::InvalidParameter(
            "co-leaf analysis needs assortment-only data".into(),
        ));
    }
    check_dim(forest.n_products, data.n_products())?;
    check_dim(forest.n_products, s.n_products())?;
    if data.len() != forest.n_transactions {
        return Err(Error::InvalidParameter(format!(
            "forest was trained on {} transactions, got {}",
            forest.n_transactions,
            data.len()
        )));
    }

    let n = data.n_products();
    let rows = data.assortments();
    let mut family: Vec<Assortment> = Vec::new();
    let mut id_of: HashMap<Assortment, usize> = HashMap::new();
    let row_id: Vec<usize> = rows
        .iter()
        .map(|a| {
            *id_of.entry(a.clone()).or_insert_with(|| {
                family.push(a.clone());
                family.len() - 1
            })
        })
        .collect();
    let xs: Vec<Vec<f64>> = family
        .iter()
        .map(|a| a.to_feature_vector().into())
        .collect();
    let target: Vec<f64> = s.to_feature_vector().into();

    let z = forest.params.subsample.unwrap_or(data.len());
    let occupants: Vec<usize> = forest
        .trees
        .par_iter()
        .enumerate()
        .map(|(b, tree)| {
            let in_bag = bootstrap_indices(
                forest.params.seed,
                b,
                data.len(),
                z,
                forest.params.with_replacement,
            );
            let mut present = vec![false; family.len()];
            for &i in &in_bag {
                present[row_id[i]] = true;
            }
            let leaf = tree.leaf_index(&target);
            let hits: Vec<usize> = (0..family.len())
                .filter(|&k| present[k] && tree.leaf_index(&xs[k]) == leaf)
                .collect();
            if hits.len() != 1 {
                return Err(Error::InvalidValue(format!(
                    "tree {b}: target leaf holds {} distinct assortments",
                    hits.len()
                )));
            }
            let bag: Vec<Assortment> = (0..family.len())
                .filter(|&k| present[k])
                .map(|k| family[k].clone())
                .collect();
            if !is_pnn(s, &family[hits[0]], &bag)? {
                return Err(Error::InvalidValue(format!(
                    "tree {b}: co-leaf assortment is not a PNN"
                )));
            }
            Ok(hits[0])
        })
        .collect::<Result<_>>()?;

    let mut counts = vec![0usize; family.len()];
    for &o in &occupants {
        counts[o] += 1;
    }
    let b = forest.trees.len();
    let pnn = pnn_set(s, &family)?;
    let pnn_distance = pnn
        .iter()
        .map(|p| symmetric_distance(s, p))
        .collect::<Result<_>>()?;
    debug_assert!(family.iter().all(|a| a.n_products() == n));
    Ok(PnnReport {
        target: s.clone(),
        family,
        pnn,
        pnn_distance,
        frequency: counts.iter().map(|&c| c as f64 / b as f64).collect(),
        n_trees: b,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMode {
    /// Zeros in the largest of `M` uniform `N`-bit numbers: the distance from
    /// the full assortment to the PNN reached by random splitting.
    MeanLargestBinary,
    /// Largest distance over all PNNs of a uniform target in a uniform family.
    AllPnnMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub n_products: usize,
    pub family_size: usize,
    pub reps: usize,
    pub mode: DistanceMode,
    pub mean: f64,
    pub std: f64,
    /// `histogram[d]` counts replications with distance `d`.
    pub histogram: Vec<u64>,
}

fn zeros_in_max<R: Rng>(n: usize, m: usize, rng: &mut R) -> usize {
    let keep = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let mut best = 0u64;
    for _ in 0..m {
        best = best.max(rng.random::<u64>() & keep);
    }
    n - best.count_ones() as usize
}

fn max_pnn_distance<R: Rng>(n: usize, m: usize, rng: &mut R) -> usize {
    let keep = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let s = rng.random::<u64>() & keep;
    let mut diffs: Vec<u64> = (0..m).map(|_| (rng.random::<u64>() & keep) ^ s).collect();
    diffs.sort_unstable();
    diffs.dedup();
    diffs
        .iter()
        .filter(|&&d| !diffs.iter().any(|&e| e != d && e & !d == 0))
        .map(|d| d.count_ones() as usize)
        .max()
        .unwrap_or(0)
}

/// Monte Carlo over random training families of `m` assortments drawn with
/// replacement from all `2^n`. Replication `r` draws from its own stream, so
/// the result does not depend on the thread count.
pub fn pnn_distance_mc(
    n: usize,
    m: usize,
    reps: usize,
    seed: u64,
    mode: DistanceMode,
) -> Result<DistanceStats> {
    if n == 0 || n > 63 {
        return Err(Error::InvalidParameter(format!(
            "n_products = {n} must lie in 1..=63"
        )));
    }
    if m == 0 || reps == 0 {
        return Err(Error::InvalidParameter(
            "family size and reps must be positive".into(),
        ));
    }
    let draws: Vec<usize> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut g = rng::stream(rng::derive(seed, r as u64));
            match mode {
                DistanceMode::MeanLargestBinary => zeros_in_max(n, m, &mut g),
                DistanceMode::AllPnnMax => max_pnn_distance(n, m, &mut g),
            }
        })
        .collect();
    let mut histogram = vec![0u64; n + 1];
    for &d in &draws {
        histogram[d] += 1;
    }
    let (mean, std) = mean_std(draws.iter().map(|&d| d as f64));
    Ok(DistanceStats {
        n_products: n,
        family_size: m,
        reps,
        mode,
        mean,
        std,
        histogram,
    })
}

/// Sample mean and standard deviation (divisor `n - 1`; 0 for one value).
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Gini index of a root split on product `j` when the truth is the ranking
/// `1 ≻ 2 ≻ … ≻ N ≻ 0` and every assortment is equally likely.
pub fn theoretical_gini(j: usize, n: usize) -> Result<f64> {
    if j == 0 || j > n {
        return Err(Error::InvalidParameter(format!(
            "product {j} outside 1..={n}"
        )));
    }
    let q = |k: usize| 1.0 / (3.0 * 4f64.powi(k as i32 - 1));
    Ok(2.0 / 3.0 - q(j) - q(n))
}

/// Weighted Gini index of splitting all of `data` on each product in turn
/// (entry `j - 1` for product `j`); `NaN` where the split leaves a side empty.
pub fn root_split_gini(data: &Dataset) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("root split needs data"));
    }
    let n = data.n_products();
    let k = n + 1;
    let mut counts = vec![0.0f64; n * 2 * k];
    for t in data.iter() {
        for j in 0..n {
            let side = usize::from(t.x.values()[j] > 0.5);
            counts[(j * 2 + side) * k + t.chosen] += 1.0;
        }
    }
    (0..n)
        .map(|j| {
            let l = &counts[(j * 2) * k..(j * 2 + 1) * k];
            let r = &counts[(j * 2 + 1) * k..(j * 2 + 2) * k];
            if l.iter().sum::<f64>() == 0.0 || r.iter().sum::<f64>() == 0.0 {
                Ok(f64::NAN)
            } else {
                gini_index(&[l, r])
            }
        })
        .collect()
}

/// How training assortments are drawn in the ranking-recovery experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum RecoveryScheme {
    /// Every one of the `2^N` assortments (empty included) equally likely.
    Uniform,
    /// Assortment probabilities drawn once per dataset from a flat Dirichlet
    /// over all `2^N` assortments.
    Dirichlet,
    /// Product `j` is offered independently with probability `p_j`, where
    /// `p_j ~ Normal(mean, sd)` clipped to `[0,1]`, drawn once per dataset.
    Occurrence { mean: f64, sd: f64 },
}

impl RecoveryScheme {
    pub fn occurrence() -> Self {
        RecoveryScheme::Occurrence {
            mean: 0.5,
            sd: 0.15,
        }
    }
}

/// The single ranking `1 ≻ 2 ≻ … ≻ N ≻ 0` picks the lowest offered product.
fn lowest_product(s: &Assortment) -> usize {
    s.products().next().unwrap_or(0)
}

/// `t` transactions under the single ranking with assortments from `scheme`.
pub fn ranking_dataset<R: Rng>(
    n: usize,
    t: usize,
    scheme: RecoveryScheme,
    rng: &mut R,
) -> Result<Dataset> {
    if n == 0 || n > 20 {
        return Err(Error::InvalidParameter(format!(
            "n_products = {n} must lie in 1..=20"
        )));
    }
    let keep = (1u64 << n) - 1;
    let masks: Vec<u64> = match scheme {
        RecoveryScheme::Uniform => (0..t).map(|_| rng.random::<u64>() & keep).collect(),
        RecoveryScheme::Dirichlet => {
            let w = dirichlet_weights(&vec![1.0; 1 << n], rng)?;
            let pick = WeightedIndex::new(&w).map_err(|e| Error::InvalidValue(e.to_string()))?;
            (0..t).map(|_| pick.sample(rng) as u64).collect()
        }
        RecoveryScheme::Occurrence { mean, sd } => {
            let normal =
                Normal::new(mean, sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            let p: Vec<f64> = (0..n).map(|_| normal.sample(rng).clamp(0.0, 1.0)).collect();
            (0..t)
                .map(|_| {
                    p.iter()
                        .enumerate()
                        .filter(|&(_, &pj)| rng.random::<f64>() < pj)
                        .fold(0u64, |m, (j, _)| m | 1 << j)
                })
                .collect()
        }
    };
    let tx = masks
        .into_iter()
        .map(|m| {
            let s = Assortment::from_mask(n, m);
            Transaction::from_assortment(lowest_product(&s), &s)
        })
        .collect::<Result<_>>()?;
    Dataset::new(n, 0, tx)
}

/// Consecutive splits on products `1, 2, 3, …` down the branch where every
/// queried product is absent: the branch on which the ranking's decisions
/// remain unresolved.
pub fn correct_splits(tree: &TreeNode) -> usize {
    let mut node = tree;
    let mut k = 0;
    while let TreeNode::Internal { dim, left, .. } = node {
        if *dim != k + 1 {
            break;
        }
        k += 1;
        node = left;
    }
    k
}

/// Forest settings for ranking recovery: ten trees, each on a bootstrap
/// sample of size `T`, every product a candidate, unit leaves.
pub fn recovery_params(n: usize, seed: u64) -> ForestParams {
    ForestParams {
        n_trees: 10,
        subsample: None,
        with_replacement: true,
        mtry: Some(n),
        leaf_min: 1,
        seed,
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryStats {
    pub n_products: usize,
    pub n_transactions: usize,
    pub scheme: RecoveryScheme,
    pub reps: usize,
    pub mean: f64,
    pub std: f64,
    /// One entry per inspected tree, dataset-major.
    pub counts: Vec<usize>,
}

/// Fits `reps` forests on independent single-ranking datasets and records the
/// correct-split count of every tree. The forest seed of replication `r` is
/// derived from `params.seed` and `r`.
pub fn ranking_recovery(
    n: usize,
    t: usize,
    scheme: RecoveryScheme,
    params: &ForestParams,
    reps: usize,
    seed: u64,
) -> Result<RecoveryStats> {
    if reps == 0 || t == 0 {
        return Err(Error::InvalidParameter(
            "reps and transactions must be positive".into(),
        ));
    }
    let per_rep: Vec<Vec<usize>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut g = rng::stream(rng::derive(seed, r as u64));
            let data = ranking_dataset(n, t, scheme, &mut g)?;
            let p = ForestParams {
                seed: rng::derive(params.seed, r as u64),
                ..params.clone()
            };
            let f = Forest::fit(&data, &p)?;
            Ok(f.trees.iter().map(correct_splits).collect())
        })
        .collect::<Result<_>>()?;
    let counts: Vec<usize> = per_rep.into_iter().flatten().collect();
    let (mean, std) = mean_std(counts.iter().map(|&c| c as f64));
    Ok(RecoveryStats {
        n_products: n,
        n_transactions: t,
        scheme,
        reps,
        mean,
        std,
        counts,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. `NaN` if either
/// input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::InvalidParameter(
            "spearman needs at least two points".into(),
        ));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let m = (a.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - m) * (y - m);
        saa += (x - m) * (x - m);
        sbb += (y - m) * (y - m);
    }
    Ok(sab / (saa * sbb).sqrt())
}
