//! Random forest of binary choice trees: bootstrap resampling, ensemble
//! prediction (raw vote shares and support-normalised choice
//! probabilities) and mean-decrease-impurity product importance.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cart::{gini_index, Grower, LeafRule, SplitMode, TreeNode, TreeParams, Units};
use crate::choice::{Assortment, ChoiceDistribution, ChoiceModel, Dataset, FeatureVector};
use crate::error::{check_dim, Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Sub-sample size `z`; `None` means `T`.
    pub subsample: Option<usize>,
    pub with_replacement: bool,
    /// Candidate dimensions per split; `None` means `⌈√d⌉`.
    pub mtry: Option<usize>,
    pub leaf_min: usize,
    pub leaf_rule: LeafRule,
    pub seed: u64,
    /// `None` selects binary mode iff every input is 0 or 1.
    pub split_mode: Option<SplitMode>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 1000,
            subsample: None,
            with_replacement: true,
            mtry: None,
            leaf_min: 50,
            leaf_rule: LeafRule::Children,
            seed: 0,
            split_mode: None,
        }
    }
}

/// `⌈√d⌉`, computed exactly.
pub fn default_mtry(dim: usize) -> usize {
    let mut m = (dim as f64).sqrt() as usize;
    while m * m < dim {
        m += 1;
    }
    while m > 1 && (m - 1) * (m - 1) >= dim {
        m -= 1;
    }
    m.max(1)
}

/// How support-normalised probabilities treat the no-purchase option.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Keep votes for offered products and for item 0.
    #[default]
    IncludeNoPurchase,
    /// Keep votes for offered products only; item 0 gets no mass unless the
    /// fallback applies.
    ProductsOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    /// Parameters with `subsample`, `mtry` and `split_mode` resolved.
    pub params: ForestParams,
    pub n_products: usize,
    pub n_features: usize,
    pub n_transactions: usize,
    pub trees: Vec<TreeNode>,
}

/// In-bag transaction indices of tree `tree`, as a multiset sorted ascending.
/// A pure function of `(seed, tree, n, z, with_replacement)`.
pub fn bootstrap_indices(
    seed: u64,
    tree: usize,
    n: usize,
    z: usize,
    with_replacement: bool,
) -> Vec<usize> {
    let mut r = rng::stream(rng::derive(rng::tree_key(seed, tree), rng::TAG_BOOTSTRAP));
    let mut out: Vec<usize> = if with_replacement {
        (0..z).map(|_| r.random_range(0..n)).collect()
    } else {
        index::sample(&mut r, n, z).into_vec()
    };
    out.sort_unstable();
    out
}

/// Distinct feature vectors of a dataset with each transaction's vector id.
struct DistinctTable {
    dim: usize,
    values: Vec<f64>,
    vector_of: Vec<u32>,
    labels: Vec<usize>,
    n_vectors: usize,
}

impl DistinctTable {
    fn new(data: &Dataset) -> DistinctTable {
        let mut index: HashMap<Vec<u64>, u32> = HashMap::new();
        let mut table = DistinctTable {
            dim: data.dim(),
            values: Vec::new(),
            vector_of: Vec::with_capacity(data.len()),
            labels: Vec::with_capacity(data.len()),
            n_vectors: 0,
        };
        for t in data.iter() {
            let key: Vec<u64> = t.x.values().iter().map(|v| v.to_bits()).collect();
            let id = *index.entry(key).or_insert_with(|| {
                table.values.extend_from_slice(t.x.values());
                table.n_vectors += 1;
                (table.n_vectors - 1) as u32
            });
            table.vector_of.push(id);
            table.labels.push(t.chosen);
        }
        table
    }

    /// Units for one in-bag multiset, ordered by (vector id, label).
    fn units(&self, in_bag: &[usize], n_classes: usize) -> Units {
        let mut counts = vec![0u32; self.n_vectors * n_classes];
        for &t in in_bag {
            counts[self.vector_of[t] as usize * n_classes + self.labels[t]] += 1;
        }
        let mut units = Units {
            dim: self.dim,
            n_classes,
            values: Vec::new(),
            labels: Vec::new(),
            weights: Vec::new(),
        };
        for (k, &w) in counts.iter().enumerate() {
            if w > 0 {
                let v = k / n_classes;
                units
                    .values
                    .extend_from_slice(&self.values[v * self.dim..(v + 1) * self.dim]);
                units.labels.push(k % n_classes);
                units.weights.push(w);
            }
        }
        units
    }
}

impl Forest {
    /// Trains `B` trees, each on its own bootstrap sample. Trees are trained
    /// in parallel; the result does not depend on scheduling.
    pub fn fit(data: &Dataset, params: &ForestParams) -> Result<Forest> {
        if data.is_empty() {
            return Err(Error::Empty("cannot fit a forest on an empty dataset"));
        }
        let t = data.len();
        let d = data.dim();
        if params.n_trees == 0 {
            return Err(Error::InvalidParameter("n_trees must be at least 1".into()));
        }
        let z = params.subsample.unwrap_or(t);
        if z == 0 {
            return Err(Error::InvalidParameter(
                "subsample must be at least 1".into(),
            ));
        }
        if z > t && !params.with_replacement {
            return Err(Error::InvalidParameter(format!(
                "subsample {z} exceeds {t} transactions without replacement"
            )));
        }
        let split_mode = params.split_mode.unwrap_or(if data.is_binary() {
            SplitMode::Binary
        } else {
            SplitMode::Continuous
        });
        let tree_params = TreeParams {
            mtry: params.mtry.unwrap_or_else(|| default_mtry(d)),
            leaf_min: params.leaf_min,
            split_mode,
            leaf_rule: params.leaf_rule,
        };
        tree_params.validate(d)?;

        let table = DistinctTable::new(data);
        let n_classes = data.n_products() + 1;
        let trees: Vec<TreeNode> = (0..params.n_trees)
            .into_par_iter()
            .map(|b| {
                let in_bag = bootstrap_indices(params.seed, b, t, z, params.with_replacement);
                let units = table.units(&in_bag, n_classes);
                let idx = (0..units.len() as u32).collect();
                Grower::new(&units, &tree_params).grow(idx, rng::tree_key(params.seed, b))
            })
            .collect();

        Ok(Forest {
            params: ForestParams {
                subsample: Some(z),
                mtry: Some(tree_params.mtry),
                split_mode: Some(split_mode),
                ..params.clone()
            },
            n_products: data.n_products(),
            n_features: data.n_features(),
            n_transactions: t,
            trees,
        })
    }

    pub fn dim(&self) -> usize {
        self.n_products + self.n_features
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Number of trees voting for each item.
    pub fn votes(&self, x: &FeatureVector) -> Result<Vec<usize>> {
        check_dim(self.dim(), x.dim())?;
        let mut votes = vec![0usize; self.n_products + 1];
        for tree in &self.trees {
            votes[tree.predict(x.values())] += 1;
        }
        Ok(votes)
    }

    /// Share of trees assigning each label; may put mass on products that
    /// are not offered.
    pub fn predict_raw(&self, x: &FeatureVector) -> Result<ChoiceDistribution> {
        let votes = self.votes(x)?;
        let b = self.trees.len() as f64;
        Ok(ChoiceDistribution::new(
            votes.iter().map(|&v| v as f64 / b).collect(),
        ))
    }

    /// Choice probabilities for assortment `s` (with optional customer
    /// features), conditioning on trees that chose an available item.
    pub fn predict_normalized(
        &self,
        s: &Assortment,
        features: Option<&[f64]>,
    ) -> Result<ChoiceDistribution> {
        check_dim(self.n_products, s.n_products())?;
        let mut values = s.to_feature_vector().values().to_vec();
        values.extend_from_slice(features.unwrap_or(&[]));
        let x = FeatureVector::new(values)?;
        self.predict_normalized_x(&x, Normalization::default())
    }

    /// Support-normalised prediction at a general feature vector; product `j`
    /// counts as offered when `x[j] > 0`.
    pub fn predict_normalized_x(
        &self,
        x: &FeatureVector,
        rule: Normalization,
    ) -> Result<ChoiceDistribution> {
        let votes = self.votes(x)?;
        let s = Assortment::from_presence(self.n_products, x.values())?;
        Ok(normalize_votes(&votes, &s, rule))
    }

    /// Mean decrease impurity per dimension (length `d`), recomputed by
    /// replaying each tree's bootstrap over the training data.
    pub fn mdi(&self, data: &Dataset) -> Result<Vec<f64>> {
        check_dim(self.dim(), data.dim())?;
        if data.len() != self.n_transactions {
            return Err(Error::InvalidParameter(format!(
                "mdi needs the {} training transactions, got {}",
                self.n_transactions,
                data.len()
            )));
        }
        let z = self.params.subsample.unwrap_or(data.len());
        let n_classes = self.n_products + 1;
        let per_tree: Vec<Vec<f64>> = self
            .trees
            .par_iter()
            .enumerate()
            .map(|(b, tree)| {
                let in_bag = bootstrap_indices(
                    self.params.seed,
                    b,
                    data.len(),
                    z,
                    self.params.with_replacement,
                );
                let mut acc = vec![0.0; self.dim()];
                accumulate_mdi(
                    tree,
                    data,
                    &in_bag,
                    in_bag.len() as f64,
                    n_classes,
                    &mut acc,
                );
                acc
            })
            .collect();
        let mut out = vec![0.0; self.dim()];
        for acc in &per_tree {
            for (o, a) in out.iter_mut().zip(acc) {
                *o += a;
            }
        }
        let b = self.trees.len() as f64;
        out.iter_mut().for_each(|o| *o /= b);
        Ok(out)
    }
}

fn normalize_votes(votes: &[usize], s: &Assortment, rule: Normalization) -> ChoiceDistribution {
    let keep = |i: usize| match rule {
        Normalization::IncludeNoPurchase => s.offers(i),
        Normalization::ProductsOnly => i != 0 && s.contains(i),
    };
    let denom: usize = (0..votes.len())
        .filter(|&i| keep(i))
        .map(|i| votes[i])
        .sum();
    if denom == 0 {
        return ChoiceDistribution::uniform_over(s);
    }
    ChoiceDistribution::new(
        (0..votes.len())
            .map(|i| {
                if keep(i) {
                    votes[i] as f64 / denom as f64
                } else {
                    0.0
                }
            })
            .collect(),
    )
}

fn class_counts(data: &Dataset, rows: &[usize], n_classes: usize) -> Vec<f64> {
    let mut c = vec![0.0; n_classes];
    for &r in rows {
        c[data.transactions()[r].chosen] += 1.0;
    }
    c
}

fn accumulate_mdi(
    node: &TreeNode,
    data: &Dataset,
    rows: &[usize],
    total: f64,
    n_classes: usize,
    acc: &mut [f64],
) {
    let TreeNode::Internal {
        dim,
        threshold,
        left,
        right,
    } = node
    else {
        return;
    };
    if rows.is_empty() {
        return;
    }
    let (l, r): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .partition(|&&i| data.transactions()[i].x.get(*dim) <= *threshold);
    let parent = class_counts(data, rows, n_classes);
    let children = [
        class_counts(data, &l, n_classes),
        class_counts(data, &r, n_classes),
    ];
    let g_parent = gini_index(&[parent]).expect("non-empty node");
    let g_children = gini_index(&children).expect("non-empty node");
    acc[dim - 1] += rows.len() as f64 / total * (g_parent - g_children);
    accumulate_mdi(left, data, &l, total, n_classes, acc);
    accumulate_mdi(right, data, &r, total, n_classes, acc);
}

impl ChoiceModel for Forest {
    fn n_products(&self) -> usize {
        self.n_products
    }

    /// Requires a forest without customer features.
    fn choice_probabilities(&self, s: &Assortment) -> ChoiceDistribution {
        assert_eq!(
            self.n_features, 0,
            "assortment-only prediction needs a featureless forest"
        );
        self.predict_normalized(s, None)
            .expect("assortment dimension matches forest")
    }
}
