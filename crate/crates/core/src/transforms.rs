//! Adapters for non-standard inputs: aggregated booking records, prices
//! mapped through link functions, and customer features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::choice::{Assortment, ChoiceDistribution, Dataset, FeatureVector, Transaction};
use crate::error::{check_dim, Error, Result};
use crate::forest::{Forest, Normalization};
use crate::generators::MnlModel;

/// Bookings over a time window during which product `j` was closed for a
/// fraction `closure[j-1]` of the time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedRecord {
    pub closure: Vec<f64>,
    /// `bookings[0]` counts no-purchase outcomes.
    pub bookings: Vec<u64>,
}

impl AggregatedRecord {
    pub fn validate(&self) -> Result<()> {
        check_dim(self.closure.len() + 1, self.bookings.len())?;
        if self.closure.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidValue(
                "closure fractions must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.bookings.iter().sum()
    }

    pub fn presence(&self) -> Vec<f64> {
        self.closure.iter().map(|c| 1.0 - c).collect()
    }
}

/// One transaction per booking, all sharing `x = 1 - closure`. Within a
/// record, choices appear in ascending item order.
pub fn expand_aggregated(records: &[AggregatedRecord]) -> Result<Dataset> {
    let n = records
        .first()
        .ok_or(Error::Empty("no aggregated records"))?
        .closure
        .len();
    let mut data = Dataset::empty(n, 0);
    for (k, r) in records.iter().enumerate() {
        check_dim(n, r.closure.len())?;
        r.validate()?;
        let x = FeatureVector::new(r.presence())?;
        for (j, &b) in r.bookings.iter().enumerate() {
            for _ in 0..b {
                let t = Transaction::new(j, x.clone())
                    .map_err(|e| Error::InvalidValue(format!("record {k}: {e}")))?;
                data.push(t)?;
            }
        }
    }
    Ok(data)
}

/// Groups consecutive runs of `a` binary transactions into records whose
/// closure is the fraction of the run in which each product was absent.
/// A trailing partial run forms its own record.
pub fn aggregate(data: &Dataset, a: usize) -> Result<Vec<AggregatedRecord>> {
    if a == 0 {
        return Err(Error::InvalidParameter(
            "aggregation level must be at least 1".into(),
        ));
    }
    let n = data.n_products();
    Ok(data
        .transactions()
        .chunks(a)
        .map(|chunk| {
            let mut present = vec![0.0; n];
            let mut bookings = vec![0u64; n + 1];
            for t in chunk {
                for (j, p) in present.iter_mut().enumerate() {
                    *p += t.x.values()[j];
                }
                bookings[t.chosen] += 1;
            }
            let len = chunk.len() as f64;
            AggregatedRecord {
                closure: present.iter().map(|p| 1.0 - p / len).collect(),
                bookings,
            }
        })
        .collect())
}

/// Recreates binary transactions for estimators that need them: each
/// booking gets its own assortment containing product `j` with probability
/// `1 - closure[j-1]`. A booking whose product was not drawn into its
/// assortment cannot be a transaction and is discarded; no-purchase bookings
/// are always kept.
pub fn deaggregate<R: Rng + ?Sized>(records: &[AggregatedRecord], rng: &mut R) -> Result<Dataset> {
    let n = records
        .first()
        .ok_or(Error::Empty("no aggregated records"))?
        .closure
        .len();
    let mut data = Dataset::empty(n, 0);
    for r in records {
        check_dim(n, r.closure.len())?;
        r.validate()?;
        for (chosen, &b) in r.bookings.iter().enumerate() {
            for _ in 0..b {
                let mut s = Assortment::empty(n);
                for j in 1..=n {
                    if rng.random::<f64>() < 1.0 - r.closure[j - 1] {
                        s.set(j, true);
                    }
                }
                if chosen > 0 && !s.contains(chosen) {
                    continue;
                }
                data.push(Transaction::from_assortment(chosen, &s)?)?;
            }
        }
    }
    Ok(data)
}

/// Strictly decreasing map from `[0, ∞]` onto `[0, 1]` with `g(0) = 1` and
/// `g(∞) = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFunction {
    /// `e^{-x}`
    #[default]
    Exp,
    /// `1 - (2/π) atan(x)`
    Arctan,
}

impl LinkFunction {
    pub fn eval(self, x: f64) -> f64 {
        if x == f64::INFINITY {
            return 0.0;
        }
        match self {
            LinkFunction::Exp => (-x).exp(),
            LinkFunction::Arctan => 1.0 - std::f64::consts::FRAC_2_PI * x.atan(),
        }
    }
}

impl std::str::FromStr for LinkFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(LinkFunction::Exp),
            "arctan" => Ok(LinkFunction::Arctan),
            other => Err(Error::InvalidParameter(format!(
                "unknown link '{other}' (expected exp or arctan)"
            ))),
        }
    }
}

/// `x[j] = g(price_j)`; infinite prices mark absent products.
pub fn apply_link(prices: &[f64], link: LinkFunction) -> Result<FeatureVector> {
    if let Some(p) = prices.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::InvalidValue(format!("price {p} is negative")));
    }
    FeatureVector::new(prices.iter().map(|&p| link.eval(p)).collect())
}

/// Concatenates customer features onto `x`.
pub fn append_features(x: &FeatureVector, f: &[f64]) -> Result<FeatureVector> {
    let mut v = x.values().to_vec();
    v.extend_from_slice(f);
    FeatureVector::new(v)
}

/// A purchase observed at a price vector; `prices[j-1] = ∞` when product `j`
/// was not offered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceTransaction {
    pub chosen: usize,
    pub prices: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceDataset {
    pub n_products: usize,
    pub transactions: Vec<PriceTransaction>,
}

impl PriceDataset {
    pub fn new(n_products: usize, transactions: Vec<PriceTransaction>) -> Result<Self> {
        for (k, t) in transactions.iter().enumerate() {
            check_dim(n_products, t.prices.len())?;
            if t.prices.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::InvalidValue(format!(
                    "transaction {k}: negative price"
                )));
            }
            if t.chosen > n_products || (t.chosen > 0 && !t.prices[t.chosen - 1].is_finite()) {
                return Err(Error::InvalidValue(format!(
                    "transaction {k}: product {} is not offered",
                    t.chosen
                )));
            }
        }
        Ok(PriceDataset {
            n_products,
            transactions,
        })
    }

    pub fn len(&self) -> usize {
        self.transactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transactions.is_empty()
    }

    /// Transactions with features `g(price)`.
    pub fn to_dataset(&self, link: LinkFunction) -> Result<Dataset> {
        let tx = self
            .transactions
            .iter()
            .map(|t| Transaction::new(t.chosen, apply_link(&t.prices, link)?))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.n_products, 0, tx)
    }
}

/// A choice model queried at price vectors (`∞` marks an absent product).
pub trait PriceModel: Send + Sync {
    fn n_products(&self) -> usize;

    fn price_probabilities(&self, prices: &[f64]) -> Result<ChoiceDistribution>;
}

impl PriceModel for MnlModel {
    fn n_products(&self) -> usize {
        self.utilities.len()
    }

    fn price_probabilities(&self, prices: &[f64]) -> Result<ChoiceDistribution> {
        MnlModel::price_probabilities(self, prices)
    }
}

/// A forest trained on linked prices, queried at raw prices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkedForest {
    pub forest: Forest,
    pub link: LinkFunction,
}

impl PriceModel for LinkedForest {
    fn n_products(&self) -> usize {
        self.forest.n_products
    }

    fn price_probabilities(&self, prices: &[f64]) -> Result<ChoiceDistribution> {
        let x = apply_link(prices, self.link)?;
        self.forest
            .predict_normalized_x(&x, Normalization::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_of_the_five_product_example() {
        let r = AggregatedRecord {
            closure: vec![0.4, 0.6, 0.2, 0.6, 0.4],
            bookings: vec![1, 2, 0, 1, 1, 0],
        };
        let data = expand_aggregated(std::slice::from_ref(&r)).unwrap();
        assert_eq!(data.len(), 5);
        let chosen: Vec<usize> = data.iter().map(|t| t.chosen).collect();
        assert_eq!(chosen, vec![0, 1, 1, 3, 4]);
        for t in data.iter() {
            let want = [0.6, 0.4, 0.8, 0.4, 0.6];
            assert!(t
                .x
                .values()
                .iter()
                .zip(want)
                .all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn aggregate_reproduces_the_five_product_example() {
        let rows: [([usize; 5], usize); 5] = [
            ([1, 1, 1, 1, 1], 1),
            ([0, 1, 0, 0, 1], 0),
            ([1, 0, 1, 1, 1], 4),
            ([0, 0, 1, 0, 0], 3),
            ([1, 0, 1, 0, 0], 1),
        ];
        let tx = rows
            .iter()
            .map(|(bits, c)| {
                let p: Vec<usize> = (1..=5).filter(|&j| bits[j - 1] == 1).collect();
                Transaction::from_assortment(*c, &Assortment::from_products(5, &p).unwrap())
                    .unwrap()
            })
            .collect();
        let data = Dataset::new(5, 0, tx).unwrap();
        let rec = aggregate(&data, 5).unwrap();
        assert_eq!(rec.len(), 1);
        let x = rec[0].presence();
        assert!(x
            .iter()
            .zip([0.6, 0.4, 0.8, 0.4, 0.6])
            .all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(rec[0].bookings, vec![1, 2, 0, 1, 1, 0]);
    }

    #[test]
    fn level_one_is_identity() {
        let s = Assortment::from_products(3, &[1, 3]).unwrap();
        let tx = vec![
            Transaction::from_assortment(3, &s).unwrap(),
            Transaction::from_assortment(0, &Assortment::full(3)).unwrap(),
        ];
        let data = Dataset::new(3, 0, tx).unwrap();
        let back = expand_aggregated(&aggregate(&data, 1).unwrap()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn expansion_errors() {
        let bad = AggregatedRecord {
            closure: vec![1.0],
            bookings: vec![0, 2],
        };
        assert!(expand_aggregated(&[bad]).is_err());
        let bad = AggregatedRecord {
            closure: vec![1.5],
            bookings: vec![0, 0],
        };
        assert!(expand_aggregated(&[bad]).is_err());
        assert!(expand_aggregated(&[]).is_err());
    }

    #[test]
    fn deaggregation_keeps_feasible_bookings() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let r = AggregatedRecord {
            closure: vec![0.5, 0.0, 1.0],
            bookings: vec![3, 2, 4, 0],
        };
        let full = deaggregate(std::slice::from_ref(&r), &mut rng).unwrap();
        // product 2 is always open, product 3 never
        assert_eq!(full.iter().filter(|t| t.chosen != 1).count(), 7);
        let kept = (0..2000)
            .map(|_| {
                deaggregate(std::slice::from_ref(&r), &mut rng)
                    .unwrap()
                    .iter()
                    .filter(|t| t.chosen == 1)
                    .count()
            })
            .sum::<usize>() as f64;
        assert!((kept / 4000.0 - 0.5).abs() < 0.03);
        for t in full.iter() {
            assert_eq!(t.x.get(2), 1.0);
            assert_eq!(t.x.get(3), 0.0);
            if t.chosen > 0 {
                assert_eq!(t.x.get(t.chosen), 1.0);
            }
        }
    }

    #[test]
    fn link_examples() {
        for link in [LinkFunction::Exp, LinkFunction::Arctan] {
            assert_eq!(link.eval(0.0), 1.0);
            assert_eq!(link.eval(f64::INFINITY), 0.0);
        }
        assert!((LinkFunction::Exp.eval(2f64.ln()) - 0.5).abs() < 1e-15);
        let x = apply_link(&[0.0, f64::INFINITY, 1.0], LinkFunction::Exp).unwrap();
        assert_eq!(x.values()[..2], [1.0, 0.0]);
        assert!(apply_link(&[-1.0], LinkFunction::Exp).is_err());
        assert_eq!(
            "arctan".parse::<LinkFunction>().unwrap(),
            LinkFunction::Arctan
        );
        assert!("log".parse::<LinkFunction>().is_err());
    }

    #[test]
    fn links_satisfy_their_defining_properties() {
        for (link, tail) in [(LinkFunction::Exp, 1e-6), (LinkFunction::Arctan, 1e-5)] {
            let mut prev = link.eval(0.0);
            assert_eq!(prev, 1.0);
            for k in 1..=10_000 {
                let g = link.eval(k as f64 * 0.01);
                assert!(g < prev);
                prev = g;
            }
            assert!(link.eval(1e6) < tail);
        }
    }

    #[test]
    fn appending_features() {
        let x = FeatureVector::new(vec![1.0, 0.0, 0.5]).unwrap();
        assert_eq!(append_features(&x, &[]).unwrap(), x);
        let y = append_features(&x, &[0.2, 0.9]).unwrap();
        assert_eq!(y.dim(), 5);
        assert_eq!(&y.values()[..3], x.values());
        assert!(append_features(&x, &[1.2]).is_err());
    }

    #[test]
    fn price_dataset_validation() {
        let ok = PriceDataset::new(
            2,
            vec![PriceTransaction {
                chosen: 1,
                prices: vec![1.0, f64::INFINITY],
            }],
        )
        .unwrap();
        let d = ok.to_dataset(LinkFunction::Exp).unwrap();
        assert_eq!(d.transactions()[0].x.get(2), 0.0);
        assert!(PriceDataset::new(
            2,
            vec![PriceTransaction {
                chosen: 2,
                prices: vec![1.0, f64::INFINITY],
            }]
        )
        .is_err());
    }
}
