//! Domain types shared by every module: assortments, feature vectors,
//! transactions, datasets, choice distributions and the choice-model trait.
//!
//! Items are indexed `0..=N`; item `0` is the no-purchase option and is
//! always available. Products are `1..=N`.

use std::collections::HashMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Absolute tolerance on the sum of a probability table.
pub const PROB_TOL: f64 = 1e-9;

/// A subset of the products `1..=N`, bit-packed into 64-bit words.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "AssortmentRepr", try_from = "AssortmentRepr")]
pub struct Assortment {
    words: Vec<u64>,
    n_products: usize,
}

#[derive(Serialize, Deserialize)]
struct AssortmentRepr {
    n_products: usize,
    products: Vec<usize>,
}

impl From<Assortment> for AssortmentRepr {
    fn from(s: Assortment) -> Self {
        AssortmentRepr {
            n_products: s.n_products,
            products: s.products().collect(),
        }
    }
}

impl TryFrom<AssortmentRepr> for Assortment {
    type Error = Error;

    fn try_from(r: AssortmentRepr) -> Result<Self> {
        Assortment::from_products(r.n_products, &r.products)
    }
}

impl std::fmt::Debug for Assortment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.products()).finish()
    }
}

fn n_words(n: usize) -> usize {
    n.div_ceil(64).max(1)
}

impl Assortment {
    pub fn empty(n_products: usize) -> Self {
        Assortment {
            words: vec![0; n_words(n_products)],
            n_products,
        }
    }

    pub fn full(n_products: usize) -> Self {
        let mut s = Self::empty(n_products);
        for j in 1..=n_products {
            s.set(j, true);
        }
        s
    }

    pub fn from_products(n_products: usize, products: &[usize]) -> Result<Self> {
        let mut s = Self::empty(n_products);
        for &j in products {
            if j == 0 || j > n_products {
                return Err(Error::InvalidValue(format!(
                    "product {j} outside 1..={n_products}"
                )));
            }
            s.set(j, true);
        }
        Ok(s)
    }

    /// Bit `j - 1` of `mask` marks product `j`. Requires `n_products <= 64`.
    pub fn from_mask(n_products: usize, mask: u64) -> Self {
        assert!(n_products <= 64, "from_mask supports at most 64 products");
        let keep = if n_products == 64 {
            u64::MAX
        } else {
            (1u64 << n_products) - 1
        };
        Assortment {
            words: vec![mask & keep],
            n_products,
        }
    }

    /// Inverse of [`Assortment::from_mask`].
    pub fn mask(&self) -> u64 {
        assert!(self.n_products <= 64, "mask supports at most 64 products");
        self.words[0]
    }

    /// Reads an assortment from the first `n_products` entries of a feature
    /// vector; any positive entry counts as offered.
    pub fn from_presence(n_products: usize, values: &[f64]) -> Result<Self> {
        if values.len() < n_products {
            return Err(Error::DimensionMismatch {
                expected: n_products,
                found: values.len(),
            });
        }
        let mut s = Self::empty(n_products);
        for (j, &v) in values[..n_products].iter().enumerate() {
            if v > 0.0 {
                s.set(j + 1, true);
            }
        }
        Ok(s)
    }

    pub fn n_products(&self) -> usize {
        self.n_products
    }

    /// Whether item `i` can be chosen: the no-purchase option always can.
    pub fn offers(&self, item: usize) -> bool {
        item == 0 || self.contains(item)
    }

    pub fn contains(&self, product: usize) -> bool {
        if product == 0 || product > self.n_products {
            return false;
        }
        let b = product - 1;
        self.words[b / 64] >> (b % 64) & 1 == 1
    }

    pub fn set(&mut self, product: usize, offered: bool) {
        assert!(
            product >= 1 && product <= self.n_products,
            "product {product} outside 1..={}",
            self.n_products
        );
        let b = product - 1;
        if offered {
            self.words[b / 64] |= 1 << (b % 64);
        } else {
            self.words[b / 64] &= !(1 << (b % 64));
        }
    }

    pub fn with(&self, product: usize) -> Self {
        let mut s = self.clone();
        s.set(product, true);
        s
    }

    pub fn without(&self, product: usize) -> Self {
        let mut s = self.clone();
        s.set(product, false);
        s
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Offered products in ascending order.
    pub fn products(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.n_products).filter(move |&j| self.contains(j))
    }

    pub fn symmetric_difference(&self, other: &Assortment) -> Result<Assortment> {
        check_dim(self.n_products, other.n_products)?;
        Ok(Assortment {
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(a, b)| a ^ b)
                .collect(),
            n_products: self.n_products,
        })
    }

    pub fn is_subset(&self, other: &Assortment) -> bool {
        self.n_products == other.n_products
            && self
                .words
                .iter()
                .zip(&other.words)
                .all(|(a, b)| a & !b == 0)
    }

    pub fn is_strict_subset(&self, other: &Assortment) -> bool {
        self.is_subset(other) && self != other
    }

    /// Lossless `{0,1}` encoding of length `N`.
    pub fn to_feature_vector(&self) -> FeatureVector {
        FeatureVector(
            (1..=self.n_products)
                .map(|j| if self.contains(j) { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    /// All `2^N` assortments in mask order (including the empty one).
    pub fn enumerate(n_products: usize) -> impl Iterator<Item = Assortment> {
        assert!(n_products < 31, "enumeration limited to N < 31");
        (0..1u64 << n_products).map(move |m| Assortment::from_mask(n_products, m))
    }

    /// All `2^N - 1` non-empty assortments.
    pub fn enumerate_nonempty(n_products: usize) -> impl Iterator<Item = Assortment> {
        Self::enumerate(n_products).skip(1)
    }
}

/// Cardinality of the symmetric difference of two assortments.
pub fn symmetric_distance(a: &Assortment, b: &Assortment) -> Result<usize> {
    check_dim(a.n_products, b.n_products)?;
    Ok(a.words
        .iter()
        .zip(&b.words)
        .map(|(x, y)| (x ^ y).count_ones() as usize)
        .sum())
}

/// A point of `[0,1]^d`. The first `N` entries are product-presence
/// intensities; trailing entries, if any, are customer features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        FeatureVector::new(v)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(x: FeatureVector) -> Self {
        x.0
    }
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((j, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidValue(format!(
                "feature entry {} = {v} outside [0,1]",
                j + 1
            )));
        }
        Ok(FeatureVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Entry for 1-based dimension `dim`.
    pub fn get(&self, dim: usize) -> f64 {
        self.0[dim - 1]
    }

    pub fn is_binary(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub chosen: usize,
    pub x: FeatureVector,
}

impl Transaction {
    /// A purchased product must be at least partially offered.
    pub fn new(chosen: usize, x: FeatureVector) -> Result<Self> {
        if chosen >= 1 {
            if chosen > x.dim() {
                return Err(Error::InvalidValue(format!(
                    "chosen item {chosen} exceeds dimension {}",
                    x.dim()
                )));
            }
            if x.get(chosen) <= 0.0 {
                return Err(Error::InvalidValue(format!(
                    "chosen product {chosen} is not offered"
                )));
            }
        }
        Ok(Transaction { chosen, x })
    }

    pub fn from_assortment(chosen: usize, s: &Assortment) -> Result<Self> {
        Self::new(chosen, s.to_feature_vector())
    }
}

/// An ordered list of transactions over `N` products and `M` customer
/// features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n_products: usize,
    n_features: usize,
    transactions: Vec<Transaction>,
}

impl Dataset {
    pub fn new(
        n_products: usize,
        n_features: usize,
        transactions: Vec<Transaction>,
    ) -> Result<Self> {
        let mut d = Dataset {
            n_products,
            n_features,
            transactions: Vec::with_capacity(transactions.len()),
        };
        for t in transactions {
            d.push(t)?;
        }
        Ok(d)
    }

    pub fn empty(n_products: usize, n_features: usize) -> Self {
        Dataset {
            n_products,
            n_features,
            transactions: Vec::new(),
        }
    }

    pub fn push(&mut self, t: Transaction) -> Result<()> {
        check_dim(self.dim(), t.x.dim())?;
        if t.chosen > self.n_products {
            return Err(Error::InvalidValue(format!(
                "chosen item {} outside 0..={}",
                t.chosen, self.n_products
            )));
        }
        self.transactions.push(t);
        Ok(())
    }

    pub fn n_products(&self) -> usize {
        self.n_products
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn dim(&self) -> usize {
        self.n_products + self.n_features
    }

    pub fn len(&self) -> usize {
        self.transactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transactions.is_empty()
    }

    pub fn transactions(&self) -> &[Transaction] {
        &self.transactions
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Transaction> {
        self.transactions.iter()
    }

    pub fn is_binary(&self) -> bool {
        self.transactions.iter().all(|t| t.x.is_binary())
    }

    /// Number of transactions whose feature vector equals `x` exactly.
    pub fn occurrence_count(&self, x: &FeatureVector) -> usize {
        self.transactions.iter().filter(|t| &t.x == x).count()
    }

    /// Occurrence counts of every distinct feature vector, in order of first
    /// appearance.
    pub fn occurrence_counts(&self) -> Vec<(FeatureVector, usize)> {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut out: Vec<(FeatureVector, usize)> = Vec::new();
        for t in &self.transactions {
            let key: Vec<u64> = t.x.values().iter().map(|v| v.to_bits()).collect();
            match index.get(&key) {
                Some(&k) => out[k].1 += 1,
                None => {
                    index.insert(key, out.len());
                    out.push((t.x.clone(), 1));
                }
            }
        }
        out
    }

    /// Offered-product sets of each transaction (entries `> 0` count as
    /// offered).
    pub fn assortments(&self) -> Vec<Assortment> {
        self.transactions
            .iter()
            .map(|t| {
                Assortment::from_presence(self.n_products, t.x.values())
                    .expect("dataset dimension checked on insert")
            })
            .collect()
    }

    /// Sub-dataset with the given transaction indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            n_products: self.n_products,
            n_features: self.n_features,
            transactions: indices
                .iter()
                .map(|&i| self.transactions[i].clone())
                .collect(),
        }
    }
}

/// Probability table over the items `0..=N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChoiceDistribution {
    probs: Vec<f64>,
}

impl ChoiceDistribution {
    pub fn new(probs: Vec<f64>) -> Self {
        assert!(
            !probs.is_empty(),
            "distribution needs the no-purchase entry"
        );
        ChoiceDistribution { probs }
    }

    pub fn point_mass(n_products: usize, item: usize) -> Self {
        let mut probs = vec![0.0; n_products + 1];
        probs[item] = 1.0;
        ChoiceDistribution { probs }
    }

    /// Uniform over `s ∪ {0}`.
    pub fn uniform_over(s: &Assortment) -> Self {
        let mut probs = vec![0.0; s.n_products() + 1];
        let w = 1.0 / (s.len() + 1) as f64;
        probs[0] = w;
        for j in s.products() {
            probs[j] = w;
        }
        ChoiceDistribution { probs }
    }

    pub fn n_products(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn get(&self, item: usize) -> f64 {
        self.probs[item]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn total_variation(&self, other: &ChoiceDistribution) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Draws an item by inverse transform.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }
}

/// True iff `dist` is non-negative, sums to one within [`PROB_TOL`] and puts
/// no mass on products outside `s`.
pub fn validate_distribution(dist: &ChoiceDistribution, s: &Assortment) -> Result<bool> {
    check_dim(s.n_products(), dist.n_products())?;
    let mut sum = 0.0;
    for (i, &p) in dist.probs.iter().enumerate() {
        if !(p >= 0.0) || !p.is_finite() {
            return Ok(false);
        }
        if p > 0.0 && !s.offers(i) {
            return Ok(false);
        }
        sum += p;
    }
    Ok((sum - 1.0).abs() <= PROB_TOL)
}

/// A discrete choice model over assortments of `n_products()` products.
pub trait ChoiceModel: Send + Sync {
    fn n_products(&self) -> usize;

    fn choice_probabilities(&self, s: &Assortment) -> ChoiceDistribution;

    /// Simulates one customer facing `s`.
    fn sample(&self, s: &Assortment, rng: &mut dyn RngCore) -> usize {
        self.choice_probabilities(s).sample(rng)
    }
}

impl<M: ChoiceModel + ?Sized> ChoiceModel for Box<M> {
    fn n_products(&self) -> usize {
        (**self).n_products()
    }

    fn choice_probabilities(&self, s: &Assortment) -> ChoiceDistribution {
        (**self).choice_probabilities(s)
    }

    fn sample(&self, s: &Assortment, rng: &mut dyn RngCore) -> usize {
        (**self).sample(s, rng)
    }
}

/// Total absolute change of choice probabilities per unit of assortment
/// distance between `s1` and `s2`.
pub fn phi_continuity<M: ChoiceModel + ?Sized>(
    model: &M,
    s1: &Assortment,
    s2: &Assortment,
) -> Result<f64> {
    check_dim(model.n_products(), s1.n_products())?;
    let d = symmetric_distance(s1, s2)?;
    if d == 0 {
        return Err(Error::ZeroDistance);
    }
    let p1 = model.choice_probabilities(s1);
    let p2 = model.choice_probabilities(s2);
    let num: f64 = p1
        .probs
        .iter()
        .zip(&p2.probs)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(num / d as f64)
}

/// Largest `Φ` over all pairs of non-empty assortments at distance one.
/// Enumerates `2^N` assortments.
pub fn max_adjacent_phi<M: ChoiceModel + ?Sized>(model: &M) -> f64 {
    let n = model.n_products();
    let probs: Vec<ChoiceDistribution> = Assortment::enumerate(n)
        .map(|s| model.choice_probabilities(&s))
        .collect();
    let mut best: f64 = 0.0;
    for mask in 1u64..(1 << n) {
        for b in 0..n {
            let other = mask | (1 << b);
            if other == mask {
                continue;
            }
            let num: f64 = probs[mask as usize]
                .probs
                .iter()
                .zip(&probs[other as usize].probs)
                .map(|(a, b)| (a - b).abs())
                .sum();
            best = best.max(num);
        }
    }
    best
}

/// Whether `Φ ≤ c / N` on every adjacent pair of non-empty assortments.
pub fn is_c_continuous<M: ChoiceModel + ?Sized>(model: &M, c: f64) -> bool {
    max_adjacent_phi(model) <= c / model.n_products() as f64 + PROB_TOL
}
