//! Ground-truth choice models and assortment samplers used to synthesise
//! transaction data.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::cart::TreeNode;
use crate::choice::{Assortment, ChoiceDistribution, ChoiceModel, Dataset, Transaction};
use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::transforms::{PriceDataset, PriceTransaction};

fn check_probability_vector(name: &str, w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::InvalidParameter(format!("{name} is empty")));
    }
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "{name} has a negative or non-finite entry"
        )));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "{name} sums to {s}, not 1"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// MNL

fn default_beta() -> f64 {
    1.0
}

/// Multinomial logit: item `j` has logit `u_j - beta * p_j`, the outside
/// option has logit `outside_utility`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnlModel {
    pub utilities: Vec<f64>,
    #[serde(default)]
    pub prices: Vec<f64>,
    #[serde(default)]
    pub outside_utility: f64,
    #[serde(default = "default_beta")]
    pub price_sensitivity: f64,
}

impl MnlModel {
    pub fn new(utilities: Vec<f64>) -> Result<Self> {
        let m = MnlModel {
            utilities,
            prices: Vec::new(),
            outside_utility: 0.0,
            price_sensitivity: 1.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_prices(mut self, prices: Vec<f64>) -> Result<Self> {
        self.prices = prices;
        self.validate()?;
        Ok(self)
    }

    pub fn with_outside_utility(mut self, u0: f64) -> Self {
        self.outside_utility = u0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.utilities.is_empty() {
            return Err(Error::InvalidParameter(
                "mnl needs at least one product".into(),
            ));
        }
        if self.utilities.iter().any(|u| !u.is_finite())
            || !self.outside_utility.is_finite()
            || !self.price_sensitivity.is_finite()
        {
            return Err(Error::InvalidParameter(
                "mnl utilities must be finite".into(),
            ));
        }
        if !self.prices.is_empty() {
            check_dim(self.utilities.len(), self.prices.len())?;
            if self.prices.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidParameter(
                    "mnl prices must be finite and non-negative".into(),
                ));
            }
        }
        Ok(())
    }

    fn price(&self, j: usize) -> f64 {
        self.prices.get(j - 1).copied().unwrap_or(0.0)
    }

    fn softmax(&self, logits: impl Iterator<Item = (usize, f64)>) -> ChoiceDistribution {
        let n = self.utilities.len();
        let mut out = vec![f64::NEG_INFINITY; n + 1];
        out[0] = self.outside_utility;
        for (j, l) in logits {
            out[j] = l;
        }
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = if v.is_finite() { (*v - max).exp() } else { 0.0 };
            sum += *v;
        }
        out.iter_mut().for_each(|v| *v /= sum);
        ChoiceDistribution::new(out)
    }

    /// Probabilities when product `j` is sold at `prices[j-1]`; an infinite
    /// price means the product is absent.
    pub fn price_probabilities(&self, prices: &[f64]) -> Result<ChoiceDistribution> {
        check_dim(self.utilities.len(), prices.len())?;
        if prices.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidValue("prices must be non-negative".into()));
        }
        Ok(self.softmax(
            prices
                .iter()
                .enumerate()
                .filter(|(_, p)| p.is_finite())
                .map(|(k, &p)| (k + 1, self.utilities[k] - self.price_sensitivity * p)),
        ))
    }
}

/// MNL choice probabilities for assortment `s`.
pub fn mnl_probabilities(m: &MnlModel, s: &Assortment) -> ChoiceDistribution {
    m.softmax(
        s.products()
            .map(|j| (j, m.utilities[j - 1] - m.price_sensitivity * m.price(j))),
    )
}

impl ChoiceModel for MnlModel {
    fn n_products(&self) -> usize {
        self.utilities.len()
    }

    fn choice_probabilities(&self, s: &Assortment) -> ChoiceDistribution {
        mnl_probabilities(self, s)
    }
}

// ---------------------------------------------------------------------------
// Rank-based mixture

/// Mixture of preference lists. Each list orders items from most to least
/// preferred and must contain `0`; products missing from a list, or listed
/// after `0`, are never bought by that customer type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankModel {
    pub n_products: usize,
    pub rankings: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl RankModel {
    pub fn new(n_products: usize, rankings: Vec<Vec<usize>>, weights: Vec<f64>) -> Result<Self> {
        let m = RankModel {
            n_products,
            rankings,
            weights,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn single(n_products: usize, ranking: Vec<usize>) -> Result<Self> {
        Self::new(n_products, vec![ranking], vec![1.0])
    }

    /// The ranking `1 ≻ 2 ≻ … ≻ N ≻ 0`.
    pub fn identity(n_products: usize) -> Self {
        let mut r: Vec<usize> = (1..=n_products).collect();
        r.push(0);
        RankModel {
            n_products,
            rankings: vec![r],
            weights: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_products == 0 {
            return Err(Error::InvalidParameter(
                "rank model needs at least one product".into(),
            ));
        }
        check_dim(self.rankings.len(), self.weights.len())?;
        check_probability_vector("rank weights", &self.weights)?;
        for r in &self.rankings {
            let mut seen = vec![false; self.n_products + 1];
            for &i in r {
                if i > self.n_products || seen[i] {
                    return Err(Error::InvalidParameter(format!(
                        "ranking {r:?} is not a list of distinct items in 0..={}",
                        self.n_products
                    )));
                }
                seen[i] = true;
            }
            if !seen[0] {
                return Err(Error::InvalidParameter(format!(
                    "ranking {r:?} does not contain 0"
                )));
            }
        }
        Ok(())
    }

    /// `k` uniformly random permutations of `0..=N` with uniform-normalised
    /// weights.
    pub fn random<R: Rng + ?Sized>(n_products: usize, k: usize, rng: &mut R) -> Result<Self> {
        let weights = uniform_normalized_weights(k, rng)?;
        let rankings = (0..k)
            .map(|_| {
                let mut r: Vec<usize> = (0..=n_products).collect();
                r.shuffle(rng);
                r
            })
            .collect();
        Self::new(n_products, rankings, weights)
    }

    /// Top offered item of ranking `r`.
    pub fn top_choice(ranking: &[usize], s: &Assortment) -> usize {
        *ranking
            .iter()
            .find(|&&i| s.offers(i))
            .expect("ranking contains 0")
    }
}

/// Probability mass of the rankings whose top offered item is `i`.
pub fn rank_probabilities(r: &RankModel, s: &Assortment) -> ChoiceDistribution {
    let mut p = vec![0.0; r.n_products + 1];
    for (ranking, w) in r.rankings.iter().zip(&r.weights) {
        p[RankModel::top_choice(ranking, s)] += w;
    }
    ChoiceDistribution::new(p)
}

impl ChoiceModel for RankModel {
    fn n_products(&self) -> usize {
        self.n_products
    }

    fn choice_probabilities(&self, s: &Assortment) -> ChoiceDistribution {
        rank_probabilities(self, s)
    }

    fn sample(&self, s: &Assortment, rng: &mut dyn RngCore) -> usize {
        let k = sample_index(&self.weights, rng);
        RankModel::top_choice(&self.rankings[k], s)
    }
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

// ---------------------------------------------------------------------------
// Markov chain

/// Markov chain choice: a customer starts at item `i` with probability
/// `lambda[i]` and, while at an unoffered product `j`, moves to `k` with
/// probability `rho[j][k]`. State 0 absorbs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovModel {
    pub lambda: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
}

impl MarkovModel {
    pub fn new(lambda: Vec<f64>, rho: Vec<Vec<f64>>) -> Result<Self> {
        let m = MarkovModel { lambda, rho };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n1 = self.lambda.len();
        if n1 < 2 {
            return Err(Error::InvalidParameter(
                "markov model needs at least one product".into(),
            ));
        }
        check_probability_vector("lambda", &self.lambda)?;
        check_dim(n1, self.rho.len())?;
        for (j, row) in self.rho.iter().enumerate() {
            check_dim(n1, row.len())?;
            check_probability_vector(&format!("rho row {j}"), row)?;
        }
        if (self.rho[0][0] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(
                "rho row 0 must be absorbing".into(),
            ));
        }
        // Every product must be able to reach 0; otherwise absorption
        // probabilities are undefined for some assortments.
        let mut reaches = vec![false; n1];
        reaches[0] = true;
        loop {
            let mut changed = false;
            for j in 1..n1 {
                if !reaches[j] && (0..n1).any(|k| reaches[k] && self.rho[j][k] > 0.0) {
                    reaches[j] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if let Some(j) = reaches.iter().position(|r| !r) {
            return Err(Error::Singular(format!(
                "product {j} cannot reach the no-purchase state"
            )));
        }
        Ok(())
    }

    /// Random instance: Dirichlet(1) first choices and, for each product,
    /// Dirichlet(1) transitions over the other items.
    pub fn random<R: Rng + ?Sized>(n_products: usize, rng: &mut R) -> Result<Self> {
        let n1 = n_products + 1;
        let lambda = dirichlet_weights(&vec![1.0; n1], rng)?;
        let mut rho = vec![vec![0.0; n1]; n1];
        rho[0][0] = 1.0;
        for (j, row) in rho.iter_mut().enumerate().skip(1) {
            let w = dirichlet_weights(&vec![1.0; n_products], rng)?;
            let mut it = w.into_iter();
            for (k, v) in row.iter_mut().enumerate() {
                if k != j {
                    *v = it.next().unwrap();
                }
            }
        }
        Self::new(lambda, rho)
    }

    pub fn n_products(&self) -> usize {
        self.lambda.len() - 1
    }

    /// Absorption probabilities, solving the linear system for the expected
    /// visits to unoffered products.
    pub fn try_probabilities(&self, s: &Assortment) -> Result<ChoiceDistribution> {
        let n1 = self.lambda.len();
        check_dim(n1 - 1, s.n_products())?;
        let unoffered: Vec<usize> = (1..n1).filter(|&j| !s.contains(j)).collect();
        let mut p = vec![0.0; n1];
        for i in 0..n1 {
            if s.offers(i) {
                p[i] = self.lambda[i];
            }
        }
        if !unoffered.is_empty() {
            let u = unoffered.len();
            // (I - Q)^T v = lambda_U
            let a = DMatrix::from_fn(u, u, |r, c| {
                let (jr, jc) = (unoffered[r], unoffered[c]);
                (if r == c { 1.0 } else { 0.0 }) - self.rho[jc][jr]
            });
            let b = DVector::from_iterator(u, unoffered.iter().map(|&j| self.lambda[j]));
            let v = a
                .lu()
                .solve(&b)
                .ok_or_else(|| Error::Singular("markov absorption system".into()))?;
            for (r, &j) in unoffered.iter().enumerate() {
                for i in 0..n1 {
                    if s.offers(i) {
                        p[i] += v[r] * self.rho[j][i];
                    }
                }
            }
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x = x.max(0.0) / total);
        Ok(ChoiceDistribution::new(p))
    }

    /// Simulates the walk until it hits an offered item or 0.
    pub fn walk<R: Rng + ?Sized>(&self, s: &Assortment, rng: &mut R) -> usize {
        let mut state = sample_index(&self.lambda, rng);
        while !s.offers(state) {
            state = sample_index(&self.rho[state], rng);
        }
        state
    }
}

pub fn markov_probabilities(m: &MarkovModel, s: &Assortment) -> Result<ChoiceDistribution> {
    m.try_probabilities(s)
}

impl ChoiceModel for MarkovModel {
    fn n_products(&self) -> usize {
        self.lambda.len() - 1
    }

    fn choice_probabilities(&self, s: &Assortment) -> ChoiceDistribution {
        self.try_probabilities(s).expect("validated markov model")
    }

    fn sample(&self, s: &Assortment, mut rng: &mut dyn RngCore) -> usize {
        self.walk(s, &mut rng)
    }
}

// ---------------------------------------------------------------------------
// Comparison-based tournament

fn default_true() -> bool {
    true
}

/// What a tournament counts as a win. Attribute ties always split half and
/// half.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TournamentScoring {
    /// Each item scores the attributes on which it beats each opponent,
    /// summed over all its pairings.
    #[default]
    AttributeWins,
    /// Each pairing is one game, won by the item preferable on more
    /// attributes.
    PairWins,
}

/// Round-robin tournament model. `scores[k][i][a]` is customer type `k`'s
/// score of item `i` on attribute `a`; higher is preferable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonModel {
    pub scores: Vec<Vec<Vec<f64>>>,
    pub weights: Vec<f64>,
    /// Whether the no-purchase option plays in the tournament with its own
    /// scores. When it does not, it is chosen only from the empty assortment.
    #[serde(default = "default_true")]
    pub outside_competes: bool,
    #[serde(default)]
    pub scoring: TournamentScoring,
}

impl ComparisonModel {
    pub fn new(scores: Vec<Vec<Vec<f64>>>, weights: Vec<f64>) -> Result<Self> {
        let m = ComparisonModel {
            scores,
            weights,
            outside_competes: true,
            scoring: TournamentScoring::default(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.scores.len(), self.weights.len())?;
        check_probability_vector("comparison weights", &self.weights)?;
        let n1 = self.scores[0].len();
        if n1 < 2 {
            return Err(Error::InvalidParameter(
                "comparison model needs at least one product".into(),
            ));
        }
        let n_attr = self.scores[0][0].len();
        if n_attr == 0 {
            return Err(Error::InvalidParameter(
                "comparison model needs at least one attribute".into(),
            ));
        }
        for t in &self.scores {
            check_dim(n1, t.len())?;
            for item in t {
                check_dim(n_attr, item.len())?;
                if item.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter(
                        "attribute scores must be finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `types` customer types with uniform-normalised weights, each scoring
    /// every item (including no-purchase) on `attributes` attributes drawn
    /// from U[0,1].
    pub fn random<R: Rng + ?Sized>(
        n_products: usize,
        types: usize,
        attributes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weights = uniform_normalized_weights(types, rng)?;
        let scores = (0..types)
            .map(|_| {
                (0..=n_products)
                    .map(|_| (0..attributes).map(|_| rng.random::<f64>()).collect())
                    .collect()
            })
            .collect();
        Self::new(scores, weights)
    }

    pub fn n_products(&self) -> usize {
        self.scores[0].len() - 1
    }

    /// Items of `s ∪ {0}` with the most tournament wins for type `k`.
    pub fn leaders(&self, k: usize, s: &Assortment) -> Vec<usize> {
        let mut players: Vec<usize> = Vec::with_capacity(s.len() + 1);
        if self.outside_competes || s.is_empty() {
            players.push(0);
        }
        players.extend(s.products());
        let table = &self.scores[k];
        let mut wins = vec![0.0; players.len()];
        for a in 0..players.len() {
            for b in a + 1..players.len() {
                let (mut fa, mut fb) = (0.0, 0.0);
                for (x, y) in table[players[a]].iter().zip(&table[players[b]]) {
                    if x > y {
                        fa += 1.0;
                    } else if y > x {
                        fb += 1.0;
                    } else {
                        fa += 0.5;
                        fb += 0.5;
                    }
                }
                let (wa, wb) = match self.scoring {
                    TournamentScoring::AttributeWins => (fa, fb),
                    TournamentScoring::PairWins if fa > fb => (1.0, 0.0),
                    TournamentScoring::PairWins if fb > fa => (0.0, 1.0),
                    TournamentScoring::PairWins => (0.5, 0.5),
                };
                wins[a] += wa;
                wins[b] += wb;
            }
        }
        let best = wins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        players
            .iter()
            .zip(&wins)
            .filter(|(_, &w)| w == best)
            .map(|(&i, _)| i)
            .collect()
    }
}

/// Draws a customer type and runs its tournament over `s ∪ {0}`, breaking
/// ties among leaders uniformly.
pub fn comparison_choose<R: Rng + ?Sized>(
    c: &ComparisonModel,
    s: &Assortment,
    rng: &mut R,
) -> usize {
    let k = sample_index(&c.weights, rng);
    let leaders = c.leaders(k, s);
    leaders[rng.random_range(0..leaders.len())]
}

impl ChoiceModel for ComparisonModel {
    fn n_products(&self) -> usize {
        self.scores[0].len() - 1
    }

    fn choice_probabilities(&self, s: &Assortment) -> ChoiceDistribution {
        let mut p = vec![0.0; self.n_products() + 1];
        for (k, w) in self.weights.iter().enumerate() {
            let leaders = self.leaders(k, s);
            let share = w / leaders.len() as f64;
            for i in leaders {
                p[i] += share;
            }
        }
        ChoiceDistribution::new(p)
    }

    fn sample(&self, s: &Assortment, mut rng: &mut dyn RngCore) -> usize {
        comparison_choose(self, s, &mut rng)
    }
}

// ---------------------------------------------------------------------------
// Sequential search

/// Distribution of a realised value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ValueDistribution {
    Degenerate { value: f64 },
    Discrete { values: Vec<f64>, probs: Vec<f64> },
    Uniform { low: f64, high: f64 },
}

impl ValueDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            ValueDistribution::Degenerate { value } if value.is_finite() => Ok(()),
            ValueDistribution::Discrete { values, probs } => {
                check_dim(values.len(), probs.len())?;
                check_probability_vector("discrete value probabilities", probs)?;
                if values.iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(
                        "discrete values must be finite".into(),
                    ))
                }
            }
            ValueDistribution::Uniform { low, high }
                if low.is_finite() && high.is_finite() && low < high =>
            {
                Ok(())
            }
            other => Err(Error::InvalidParameter(format!(
                "invalid value distribution {other:?}"
            ))),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ValueDistribution::Degenerate { value } => *value,
            ValueDistribution::Discrete { values, probs } => values[sample_index(probs, rng)],
            ValueDistribution::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        }
    }

    /// `E[(V - z)^+]`.
    pub fn expected_excess(&self, z: f64) -> f64 {
        match self {
            ValueDistribution::Degenerate { value } => (value - z).max(0.0),
            ValueDistribution::Discrete { values, probs } => values
                .iter()
                .zip(probs)
                .map(|(v, p)| p * (v - z).max(0.0))
                .sum(),
            ValueDistribution::Uniform { low, high } => {
                if z <= *low {
                    (low + high) / 2.0 - z
                } else if z >= *high {
                    0.0
                } else {
                    (high - z) * (high - z) / (2.0 * (high - low))
                }
            }
        }
    }

    fn support_max(&self) -> f64 {
        match self {
            ValueDistribution::Degenerate { value } => *value,
            ValueDistribution::Discrete { values, .. } => {
                values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            }
            ValueDistribution::Uniform { high, .. } => *high,
        }
    }

    /// Finite support as (value, probability) pairs, if any.
    fn atoms(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            ValueDistribution::Degenerate { value } => Some(vec![(*value, 1.0)]),
            ValueDistribution::Discrete { values, probs } => Some(
                values
                    .iter()
                    .cloned()
                    .zip(probs.iter().cloned())
                    .filter(|a| a.1 > 0.0)
                    .collect(),
            ),
            ValueDistribution::Uniform { .. } => None,
        }
    }
}

/// Root `z > 0` of `E[(V - z)^+] = c`, found by bisection.
pub fn reservation_value(dist: &ValueDistribution, cost: f64) -> Result<f64> {
    dist.validate()?;
    if !(cost > 0.0) || !cost.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "search cost {cost} must be positive"
        )));
    }
    let at_zero = dist.expected_excess(0.0);
    if cost >= at_zero {
        return Err(Error::Infeasible(format!(
            "search cost {cost} is at least E[V^+] = {at_zero}; no positive reservation value exists"
        )));
    }
    let (mut lo, mut hi) = (0.0, dist.support_max());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let r = dist.expected_excess(mid) - cost;
        if r.abs() <= 1e-12 {
            return Ok(mid);
        }
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Weitzman search over the offered products: visit them in descending
/// reservation value (ties by index), stop once the best value in hand
/// exceeds the next reservation value, and buy the best searched item.
/// `values[j-1]` is the realised value of product `j`.
pub fn search_choose(
    reservation: &[f64],
    values: &[f64],
    outside_value: f64,
    s: &Assortment,
) -> usize {
    let mut order: Vec<usize> = s.products().collect();
    order.sort_by(|&a, &b| {
        reservation[b - 1]
            .total_cmp(&reservation[a - 1])
            .then(a.cmp(&b))
    });
    let (mut best, mut w) = (0, outside_value);
    for j in order {
        if w > reservation[j - 1] {
            break;
        }
        if values[j - 1] > w {
            best = j;
            w = values[j - 1];
        }
    }
    best
}

/// Sequential search model with per-customer random values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchModel {
    pub values: Vec<ValueDistribution>,
    pub outside: ValueDistribution,
    pub costs: Vec<f64>,
    #[serde(skip)]
    reservation: Vec<f64>,
}

/// One simulated customer: realised values of every product and of the
/// outside option.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchCustomer {
    pub values: Vec<f64>,
    pub outside_value: f64,
}

impl SearchModel {
    pub fn new(
        values: Vec<ValueDistribution>,
        outside: ValueDistribution,
        costs: Vec<f64>,
    ) -> Result<Self> {
        let mut m = SearchModel {
            values,
            outside,
            costs,
            reservation: Vec::new(),
        };
        m.prepare()?;
        Ok(m)
    }

    /// Validates and computes reservation values; required after
    /// deserialisation.
    pub fn prepare(&mut self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidParameter(
                "search model needs at least one product".into(),
            ));
        }
        check_dim(self.values.len(), self.costs.len())?;
        self.outside.validate()?;
        self.reservation = self
            .values
            .iter()
            .zip(&self.costs)
            .map(|(d, &c)| reservation_value(d, c))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn reservation_values(&self) -> &[f64] {
        &self.reservation
    }

    pub fn draw_customer<R: Rng + ?Sized>(&self, rng: &mut R) -> SearchCustomer {
        SearchCustomer {
            values: self.values.iter().map(|d| d.sample(rng)).collect(),
            outside_value: self.outside.sample(rng),
        }
    }

    pub fn choose(&self, customer: &SearchCustomer, s: &Assortment) -> usize {
        search_choose(
            &self.reservation,
            &customer.values,
            customer.outside_value,
            s,
        )
    }

    /// Binary choice tree reproducing `customer`'s decision on every
    /// assortment: products are tested in search order.
    pub fn to_tree(&self, customer: &SearchCustomer) -> TreeNode {
        let n = self.values.len();
        let mut order: Vec<usize> = (1..=n).collect();
        let z = &self.reservation;
        order.sort_by(|&a, &b| z[b - 1].total_cmp(&z[a - 1]).then(a.cmp(&b)));
        fn build(order: &[usize], z: &[f64], v: &[f64], w: f64, best: usize) -> TreeNode {
            match order.split_first() {
                None => TreeNode::Leaf { label: best },
                Some((&j, rest)) => {
                    if w > z[j - 1] {
                        return TreeNode::Leaf { label: best };
                    }
                    let (w2, best2) = if v[j - 1] > w {
                        (v[j - 1], j)
                    } else {
                        (w, best)
                    };
                    TreeNode::Internal {
                        dim: j,
                        threshold: 0.5,
                        left: Box::new(build(rest, z, v, w, best)),
                        right: Box::new(build(rest, z, v, w2, best2)),
                    }
                }
            }
        }
        build(&order, z, &customer.values, customer.outside_value, 0)
    }
}

const SEARCH_ENUMERATION_LIMIT: usize = 1 << 20;
const SEARCH_MC_DRAWS: usize = 200_000;

impl ChoiceModel for SearchModel {
    fn n_products(&self) -> usize {
        self.values.len()
    }

    /// Exact when every value distribution has finite support of manageable
    /// joint size; otherwise a fixed-seed Monte Carlo estimate.
    fn choice_probabilities(&self, s: &Assortment) -> ChoiceDistribution {
        let n = self.values.len();
        let mut p = vec![0.0; n + 1];
        let mut atoms: Vec<Vec<(f64, f64)>> = Vec::with_capacity(n + 1);
        let mut joint = 1usize;
        let mut finite = true;
        for d in std::iter::once(&self.outside).chain(&self.values) {
            match d.atoms() {
                Some(a) => {
                    joint = joint.saturating_mul(a.len());
                    atoms.push(a);
                }
                None => finite = false,
            }
        }
        if finite && joint <= SEARCH_ENUMERATION_LIMIT {
            let mut idx = vec![0usize; n + 1];
            let mut customer = SearchCustomer {
                values: vec![0.0; n],
                outside_value: 0.0,
            };
            loop {
                let mut prob = 1.0;
                for (k, &i) in idx.iter().enumerate() {
                    let (v, q) = atoms[k][i];
                    prob *= q;
                    if k == 0 {
                        customer.outside_value = v;
                    } else {
                        customer.values[k - 1] = v;
                    }
                }
                p[self.choose(&customer, s)] += prob;
                let mut k = 0;
                loop {
                    if k > n {
                        let total: f64 = p.iter().sum();
                        return ChoiceDistribution::new(p.into_iter().map(|x| x / total).collect());
                    }
                    idx[k] += 1;
                    if idx[k] < atoms[k].len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
            }
        }
        let mut r = rng::stream(rng::derive(s.len() as u64, 0x5EA2C4));
        for _ in 0..SEARCH_MC_DRAWS {
            let c = self.draw_customer(&mut r);
            p[self.choose(&c, s)] += 1.0;
        }
        ChoiceDistribution::new(p.into_iter().map(|x| x / SEARCH_MC_DRAWS as f64).collect())
    }

    fn sample(&self, s: &Assortment, mut rng: &mut dyn RngCore) -> usize {
        let c = self.draw_customer(&mut rng);
        self.choose(&c, s)
    }
}

// ---------------------------------------------------------------------------
// Model specs

/// JSON model specification, tagged by `type`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ModelSpec {
    Mnl(MnlModel),
    Rank(RankModel),
    Markov(MarkovModel),
    Comparison(ComparisonModel),
    Search(SearchModel),
}

impl ModelSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        let mut spec: ModelSpec = crate::error::from_json(s)?;
        spec.prepare()?;
        Ok(spec)
    }

    /// Validates the model and fills derived fields.
    pub fn prepare(&mut self) -> Result<()> {
        match self {
            ModelSpec::Mnl(m) => m.validate(),
            ModelSpec::Rank(m) => m.validate(),
            ModelSpec::Markov(m) => m.validate(),
            ModelSpec::Comparison(m) => m.validate(),
            ModelSpec::Search(m) => m.prepare(),
        }
    }

    pub fn into_model(self) -> Box<dyn ChoiceModel> {
        match self {
            ModelSpec::Mnl(m) => Box::new(m),
            ModelSpec::Rank(m) => Box::new(m),
            ModelSpec::Markov(m) => Box::new(m),
            ModelSpec::Comparison(m) => Box::new(m),
            ModelSpec::Search(m) => Box::new(m),
        }
    }

    pub fn as_model(&self) -> &dyn ChoiceModel {
        match self {
            ModelSpec::Mnl(m) => m,
            ModelSpec::Rank(m) => m,
            ModelSpec::Markov(m) => m,
            ModelSpec::Comparison(m) => m,
            ModelSpec::Search(m) => m,
        }
    }
}

// ---------------------------------------------------------------------------
// Assortment sampling and weights

/// How training assortments are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum AssortmentSampler {
    /// Uniform over the `2^N - 1` non-empty subsets.
    UniformNonEmpty,
    /// Product `j` is included independently with probability `p[j-1]`; a
    /// single entry applies to every product.
    Bernoulli { p: Vec<f64> },
    /// Draws from a fixed pool, uniformly or by `weights`.
    Pool {
        assortments: Vec<Assortment>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
}

impl AssortmentSampler {
    pub fn bernoulli(p: f64) -> Result<Self> {
        let s = AssortmentSampler::Bernoulli { p: vec![p] };
        s.validate(1)?;
        Ok(s)
    }

    pub fn validate(&self, n_products: usize) -> Result<()> {
        match self {
            AssortmentSampler::UniformNonEmpty => Ok(()),
            AssortmentSampler::Bernoulli { p } => {
                if p.len() != 1 && p.len() != n_products {
                    return Err(Error::DimensionMismatch {
                        expected: n_products,
                        found: p.len(),
                    });
                }
                if p.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
                    return Err(Error::InvalidParameter(
                        "bernoulli probabilities must lie in [0,1]".into(),
                    ));
                }
                Ok(())
            }
            AssortmentSampler::Pool {
                assortments,
                weights,
            } => {
                if assortments.is_empty() {
                    return Err(Error::Empty("assortment pool"));
                }
                for s in assortments {
                    check_dim(n_products, s.n_products())?;
                }
                if let Some(w) = weights {
                    check_dim(assortments.len(), w.len())?;
                    if w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                        return Err(Error::InvalidParameter(
                            "pool weights must be non-negative and not all zero".into(),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n_products: usize, rng: &mut R) -> Assortment {
        match self {
            AssortmentSampler::UniformNonEmpty => loop {
                let mut s = Assortment::empty(n_products);
                for j in 1..=n_products {
                    if rng.random::<bool>() {
                        s.set(j, true);
                    }
                }
                if !s.is_empty() {
                    return s;
                }
            },
            AssortmentSampler::Bernoulli { p } => {
                let mut s = Assortment::empty(n_products);
                for j in 1..=n_products {
                    let q = if p.len() == 1 { p[0] } else { p[j - 1] };
                    if rng.random::<f64>() < q {
                        s.set(j, true);
                    }
                }
                s
            }
            AssortmentSampler::Pool {
                assortments,
                weights,
            } => {
                let k = match weights {
                    Some(w) => sample_index(w, rng),
                    None => rng.random_range(0..assortments.len()),
                };
                assortments[k].clone()
            }
        }
    }
}

/// Pre-draws `t1` assortments from `base` and samples uniformly among them.
pub fn fixed_pool<R: Rng + ?Sized>(
    n_products: usize,
    t1: usize,
    base: &AssortmentSampler,
    rng: &mut R,
) -> Result<AssortmentSampler> {
    if t1 == 0 {
        return Err(Error::InvalidParameter(
            "pool size must be at least 1".into(),
        ));
    }
    base.validate(n_products)?;
    Ok(AssortmentSampler::Pool {
        assortments: (0..t1).map(|_| base.sample(n_products, rng)).collect(),
        weights: None,
    })
}

pub fn sample_assortment<R: Rng + ?Sized>(
    sampler: &AssortmentSampler,
    n_products: usize,
    rng: &mut R,
) -> Result<Assortment> {
    sampler.validate(n_products)?;
    Ok(sampler.sample(n_products, rng))
}

/// One draw from the Dirichlet distribution with parameters `alpha`.
pub fn dirichlet_weights<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::InvalidParameter(
            "dirichlet needs at least one component".into(),
        ));
    }
    let mut w = Vec::with_capacity(alpha.len());
    for &a in alpha {
        let g = Gamma::new(a, 1.0)
            .map_err(|e| Error::InvalidParameter(format!("dirichlet alpha {a}: {e}")))?;
        w.push(g.sample(rng));
    }
    let s: f64 = w.iter().sum();
    if s <= 0.0 {
        // Every gamma draw underflowed; only possible for tiny alphas.
        let k = rng.random_range(0..w.len());
        w.iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x = if i == k { 1.0 } else { 0.0 });
        return Ok(w);
    }
    w.iter_mut().for_each(|x| *x /= s);
    Ok(w)
}

/// `u_i / Σ u_j` with `u_i ~ U(0,1)`.
pub fn uniform_normalized_weights<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidParameter("need at least one weight".into()));
    }
    let u: Vec<f64> = (0..k)
        .map(|_| rng.random::<f64>().max(f64::MIN_POSITIVE))
        .collect();
    let s: f64 = u.iter().sum();
    Ok(u.into_iter().map(|x| x / s).collect())
}

/// `t` transactions: each customer faces an assortment from `sampler` and
/// chooses according to `model`.
pub fn simulate<M: ChoiceModel + ?Sized, R: RngCore>(
    model: &M,
    sampler: &AssortmentSampler,
    t: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let n = model.n_products();
    sampler.validate(n)?;
    let mut tx = Vec::with_capacity(t);
    for _ in 0..t {
        let s = sampler.sample(n, rng);
        let c = model.sample(&s, rng);
        tx.push(Transaction::from_assortment(c, &s)?);
    }
    Dataset::new(n, 0, tx)
}

/// `t` price transactions under `model`: every product is offered at a price
/// drawn from U[0, price_max]. All price vectors are drawn before any choice.
pub fn simulate_prices<R: Rng + ?Sized>(
    model: &MnlModel,
    t: usize,
    price_max: f64,
    rng: &mut R,
) -> Result<PriceDataset> {
    if !(price_max > 0.0 && price_max.is_finite()) {
        return Err(Error::InvalidParameter(
            "price_max must be positive and finite".into(),
        ));
    }
    let n = model.utilities.len();
    let prices: Vec<Vec<f64>> = (0..t)
        .map(|_| (0..n).map(|_| rng.random::<f64>() * price_max).collect())
        .collect();
    let mut tx = Vec::with_capacity(t);
    for prices in prices {
        let chosen = model.price_probabilities(&prices)?.sample(rng);
        tx.push(PriceTransaction { chosen, prices });
    }
    PriceDataset::new(n, tx)
}
