//! Accuracy metrics and the synthetic benchmark harness.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::mean_std;
use crate::baselines::{fit_linear_demand, fit_markov_em, fit_mnl_mle, fit_mnl_price_mle};
use crate::choice::{Assortment, ChoiceModel, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::forest::{Forest, ForestParams};
use crate::generators::{
    fixed_pool, simulate, simulate_prices, AssortmentSampler, ComparisonModel, MarkovModel,
    MnlModel, ModelSpec, RankModel, TournamentScoring,
};
use crate::rng;
use crate::transforms::{
    aggregate, deaggregate, expand_aggregated, LinkFunction, LinkedForest, PriceModel,
};

/// Soft RMSE between two models over `assortments`: squared probability gaps
/// on every offered item and on no-purchase, normalised by `Σ(|S|+1)`.
pub fn rmse_soft<A, B>(truth: &A, estimate: &B, assortments: &[Assortment]) -> Result<f64>
where
    A: ChoiceModel + ?Sized,
    B: ChoiceModel + ?Sized,
{
    if assortments.is_empty() {
        return Err(Error::Empty("rmse needs at least one assortment"));
    }
    check_dim(truth.n_products(), estimate.n_products())?;
    let (mut num, mut den) = (0.0, 0.0);
    for s in assortments {
        check_dim(truth.n_products(), s.n_products())?;
        let p = truth.choice_probabilities(s);
        let q = estimate.choice_probabilities(s);
        num += (p.get(0) - q.get(0)).powi(2);
        for j in s.products() {
            num += (p.get(j) - q.get(j)).powi(2);
        }
        den += (s.len() + 1) as f64;
    }
    Ok((num / den).sqrt())
}

/// Soft RMSE at price vectors; the offered set of a vector is its finite
/// entries.
pub fn rmse_soft_prices<A, B>(truth: &A, estimate: &B, prices: &[Vec<f64>]) -> Result<f64>
where
    A: PriceModel + ?Sized,
    B: PriceModel + ?Sized,
{
    if prices.is_empty() {
        return Err(Error::Empty("rmse needs at least one price vector"));
    }
    check_dim(truth.n_products(), estimate.n_products())?;
    let (mut num, mut den) = (0.0, 0.0);
    for v in prices {
        let p = truth.price_probabilities(v)?;
        let q = estimate.price_probabilities(v)?;
        num += (p.get(0) - q.get(0)).powi(2);
        for (j, x) in v.iter().enumerate() {
            if x.is_finite() {
                num += (p.get(j + 1) - q.get(j + 1)).powi(2);
                den += 1.0;
            }
        }
        den += 1.0;
    }
    Ok((num / den).sqrt())
}

/// Empirical RMSE of `estimate` against the realised choices in `test`.
pub fn rmse_empirical<M: ChoiceModel + ?Sized>(estimate: &M, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("rmse needs a non-empty test set"));
    }
    check_dim(estimate.n_products(), test.n_products())?;
    let n = test.n_products();
    let (mut num, mut den) = (0.0, 0.0);
    for t in test.iter() {
        let s = Assortment::from_presence(n, t.x.values())?;
        let q = estimate.choice_probabilities(&s);
        for j in std::iter::once(0).chain(s.products()) {
            let hit = if j == t.chosen { 1.0 } else { 0.0 };
            num += (hit - q.get(j)).powi(2);
        }
        den += (s.len() + 1) as f64;
    }
    Ok((num / den).sqrt())
}

/// Every non-empty assortment for `n <= 12`, else `sample` uniform draws
/// from `rng`.
pub fn evaluation_assortments<R: Rng + ?Sized>(
    n: usize,
    sample: usize,
    rng: &mut R,
) -> Vec<Assortment> {
    if n <= 12 {
        Assortment::enumerate_nonempty(n).collect()
    } else {
        (0..sample)
            .map(|_| AssortmentSampler::UniformNonEmpty.sample(n, rng))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub mean: f64,
    pub std: f64,
    pub folds: Vec<f64>,
}

/// Fold index of every row: a seeded shuffle cut into `k` near-equal parts.
pub fn fold_assignment(t: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidParameter("k-fold needs k >= 2".into()));
    }
    if t < k {
        return Err(Error::InvalidParameter(format!(
            "{t} rows cannot fill {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..t).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; t];
    for (pos, &row) in order.iter().enumerate() {
        fold[row] = pos * k / t;
    }
    Ok(fold)
}

/// K-fold cross-validated empirical RMSE. `fit` trains on the k−1 retained
/// folds.
pub fn kfold_cv<F>(data: &Dataset, k: usize, fit: F, seed: u64) -> Result<CvResult>
where
    F: Fn(&Dataset) -> Result<Box<dyn ChoiceModel>>,
{
    let fold = fold_assignment(data.len(), k, seed)?;
    let mut scores = Vec::with_capacity(k);
    for f in 0..k {
        let train: Vec<usize> = (0..data.len()).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..data.len()).filter(|&i| fold[i] == f).collect();
        let model = fit(&data.select(&train))?;
        scores.push(rmse_empirical(model.as_ref(), &data.select(&test))?);
    }
    let (mean, std) = mean_std(scores.iter().copied());
    Ok(CvResult {
        mean,
        std,
        folds: scores,
    })
}

// ---------------------------------------------------------------------------
// Experiment harness

/// How the ground-truth model of each replication is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Uniformly random rankings of `0..=N` with uniform-normalised weights.
    Rank { types: usize },
    /// Attribute scores in U[0,1] for every item, no-purchase included.
    Comparison {
        types: usize,
        attributes: usize,
        #[serde(default)]
        scoring: TournamentScoring,
    },
    /// Product and outside utilities in U[0,1].
    Mnl,
    /// Dirichlet arrival and transition probabilities.
    Markov,
    /// The same model in every replication.
    Fixed { model: ModelSpec },
}

impl Generator {
    fn draw<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Box<dyn ChoiceModel>> {
        Ok(match self {
            Generator::Rank { types } => Box::new(RankModel::random(n, *types, rng)?),
            Generator::Comparison {
                types,
                attributes,
                scoring,
            } => {
                let mut m = ComparisonModel::random(n, *types, *attributes, rng)?;
                m.scoring = *scoring;
                Box::new(m)
            }
            Generator::Mnl => {
                let u = (0..n).map(|_| rng.random::<f64>()).collect();
                Box::new(MnlModel::new(u)?.with_outside_utility(rng.random::<f64>()))
            }
            Generator::Markov => Box::new(MarkovModel::random(n, rng)?),
            Generator::Fixed { model } => {
                let mut m = model.clone();
                m.prepare()?;
                if m.as_model().n_products() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: m.as_model().n_products(),
                    });
                }
                m.into_model()
            }
        })
    }
}

/// What data the estimators see.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Scenario {
    /// Binary assortment transactions.
    Choice { generator: Generator },
    /// Transactions aggregated in runs of `level`; the forest sees the
    /// expanded fractional data and the other estimators a de-aggregated
    /// sample.
    Aggregated { generator: Generator, level: usize },
    /// MNL with utilities in U[0, utility_max] and unit price sensitivity;
    /// every product offered at a price in U[0, price_max].
    Price {
        #[serde(default = "five")]
        utility_max: f64,
        #[serde(default = "five")]
        price_max: f64,
        #[serde(default)]
        link: LinkFunction,
    },
}

fn five() -> f64 {
    5.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Rf,
    Mnl,
    Mc,
    Linear,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Estimator::Rf => "RF",
            Estimator::Mnl => "MNL",
            Estimator::Mc => "MC",
            Estimator::Linear => "Linear",
        }
    }
}

/// How non-price scenarios are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum Metric {
    /// Soft RMSE against the truth over every non-empty assortment (a
    /// 10,000-assortment sample when `N > 12`).
    #[default]
    Soft,
    /// Soft RMSE over `assortments` uniform non-empty assortments.
    SoftSampled { assortments: usize },
    /// Empirical RMSE on `test_size` fresh transactions from the training
    /// assortment distribution.
    Empirical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmSettings {
    fn default() -> Self {
        EmSettings {
            tol: 1e-6,
            max_iter: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "ten")]
    pub n_products: usize,
    pub scenario: Scenario,
    /// Number of distinct training assortments `T₁`; `None` draws every
    /// transaction's assortment afresh.
    #[serde(default)]
    pub pool_size: Option<usize>,
    pub transactions: usize,
    pub estimators: Vec<Estimator>,
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub forest: ForestParams,
    #[serde(default)]
    pub em: EmSettings,
    #[serde(default)]
    pub metric: Metric,
    /// Test transactions (empirical metric) or price vectors (price mode).
    #[serde(default = "thousand")]
    pub test_size: usize,
    /// Record wall-clock seconds; off by default so reports are reproducible
    /// byte for byte.
    #[serde(default)]
    pub timing: bool,
}

fn ten() -> usize {
    10
}

fn thousand() -> usize {
    1000
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: ExperimentConfig = crate::error::from_json(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::InvalidParameter(format!("{field}: {msg}")));
        if self.replications == 0 {
            return bad("replications", "must be at least 1");
        }
        if self.transactions == 0 {
            return bad("transactions", "must be at least 1");
        }
        if self.n_products == 0 || self.n_products > 63 {
            return bad("n_products", "must lie in 1..=63");
        }
        if self.estimators.is_empty() {
            return bad("estimators", "list at least one estimator");
        }
        if self.pool_size == Some(0) {
            return bad("pool_size", "must be at least 1");
        }
        if self.test_size == 0 {
            return bad("test_size", "must be at least 1");
        }
        let price = matches!(self.scenario, Scenario::Price { .. });
        for e in &self.estimators {
            match (e, price) {
                (Estimator::Linear, false) => {
                    return bad("estimators", "linear demand needs the price scenario")
                }
                (Estimator::Mc, true) => {
                    return bad("estimators", "the Markov chain model has no price input")
                }
                _ => {}
            }
        }
        match &self.scenario {
            Scenario::Aggregated { level: 0, .. } => bad("scenario.level", "must be at least 1"),
            Scenario::Price {
                utility_max,
                price_max,
                ..
            } if !(utility_max.is_finite() && *price_max > 0.0 && price_max.is_finite()) => bad(
                "scenario",
                "utility_max and price_max must be finite, price_max positive",
            ),
            Scenario::Choice {
                generator: Generator::Rank { types: 0 },
            }
            | Scenario::Aggregated {
                generator: Generator::Rank { types: 0 },
                ..
            } => bad("scenario.generator.types", "must be at least 1"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    /// Mean and sample standard deviation over successful replications.
    pub mean: f64,
    pub std: f64,
    pub successes: usize,
    /// One entry per replication.
    pub rmse: Vec<Option<f64>>,
    pub errors: Vec<Option<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub results: Vec<EstimatorSummary>,
}

impl ExperimentReport {
    pub fn summary(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.results.iter().find(|r| r.estimator == e)
    }
}

struct Outcome {
    rmse: Result<f64>,
    seconds: f64,
}

fn timed(f: impl FnOnce() -> Result<f64>) -> Outcome {
    let start = Instant::now();
    let rmse = f();
    Outcome {
        rmse,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn draw_sampler<R: Rng>(cfg: &ExperimentConfig, rng: &mut R) -> Result<AssortmentSampler> {
    match cfg.pool_size {
        Some(t1) => fixed_pool(cfg.n_products, t1, &AssortmentSampler::UniformNonEmpty, rng),
        None => Ok(AssortmentSampler::UniformNonEmpty),
    }
}

fn forest_params(cfg: &ExperimentConfig, rep: usize) -> ForestParams {
    ForestParams {
        seed: rng::derive(cfg.forest.seed ^ cfg.seed, rep as u64),
        ..cfg.forest.clone()
    }
}

fn score_choice(
    cfg: &ExperimentConfig,
    truth: &dyn ChoiceModel,
    estimate: &dyn ChoiceModel,
    eval: &EvalSet,
) -> Result<f64> {
    match (cfg.metric, eval) {
        (Metric::Empirical, EvalSet::Test(test)) => rmse_empirical(estimate, test),
        (_, EvalSet::Assortments(a)) => rmse_soft(truth, estimate, a),
        _ => unreachable!("evaluation set matches the metric"),
    }
}

enum EvalSet {
    Assortments(Vec<Assortment>),
    Test(Dataset),
}

fn eval_set<R: RngCore>(
    cfg: &ExperimentConfig,
    truth: &dyn ChoiceModel,
    sampler: &AssortmentSampler,
    rng: &mut R,
) -> Result<EvalSet> {
    let n = cfg.n_products;
    Ok(match cfg.metric {
        Metric::Soft => EvalSet::Assortments(evaluation_assortments(n, 10_000, rng)),
        Metric::SoftSampled { assortments } => EvalSet::Assortments(
            (0..assortments.max(1))
                .map(|_| AssortmentSampler::UniformNonEmpty.sample(n, rng))
                .collect(),
        ),
        Metric::Empirical => EvalSet::Test(simulate(truth, sampler, cfg.test_size, rng)?),
    })
}

fn fit_choice(
    e: Estimator,
    data: &Dataset,
    cfg: &ExperimentConfig,
    rep: usize,
) -> Result<Box<dyn ChoiceModel>> {
    Ok(match e {
        Estimator::Rf => Box::new(Forest::fit(data, &forest_params(cfg, rep))?),
        Estimator::Mnl => Box::new(fit_mnl_mle(data)?.model),
        Estimator::Mc => Box::new(fit_markov_em(data, cfg.em.tol, cfg.em.max_iter)?.model),
        Estimator::Linear => unreachable!("rejected by validate"),
    })
}

fn run_choice_rep(
    cfg: &ExperimentConfig,
    generator: &Generator,
    level: Option<usize>,
    rep: usize,
) -> Result<Vec<Outcome>> {
    let mut g = rng::stream(rng::derive(cfg.seed, rep as u64));
    let truth = generator.draw(cfg.n_products, &mut g)?;
    let sampler = draw_sampler(cfg, &mut g)?;
    let data = simulate(truth.as_ref(), &sampler, cfg.transactions, &mut g)?;
    let eval = eval_set(cfg, truth.as_ref(), &sampler, &mut g)?;
    let (forest_data, baseline_data) = match level {
        None => (data.clone(), data),
        Some(a) => {
            let records = aggregate(&data, a)?;
            (expand_aggregated(&records)?, deaggregate(&records, &mut g)?)
        }
    };
    Ok(cfg
        .estimators
        .iter()
        .map(|&e| {
            timed(|| {
                let d = if e == Estimator::Rf {
                    &forest_data
                } else {
                    &baseline_data
                };
                let model = fit_choice(e, d, cfg, rep)?;
                score_choice(cfg, truth.as_ref(), model.as_ref(), &eval)
            })
        })
        .collect())
}

fn price_vectors<R: Rng>(n: usize, count: usize, price_max: f64, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..n).map(|_| rng.random::<f64>() * price_max).collect())
        .collect()
}

fn run_price_rep(
    cfg: &ExperimentConfig,
    utility_max: f64,
    price_max: f64,
    link: LinkFunction,
    rep: usize,
) -> Result<Vec<Outcome>> {
    let n = cfg.n_products;
    let mut g = rng::stream(rng::derive(cfg.seed, rep as u64));
    let truth = MnlModel::new((0..n).map(|_| g.random::<f64>() * utility_max).collect())?;
    let data = simulate_prices(&truth, cfg.transactions, price_max, &mut g)?;
    let test = price_vectors(n, cfg.test_size, price_max, &mut g);
    Ok(cfg
        .estimators
        .iter()
        .map(|&e| {
            timed(|| {
                let model: Box<dyn PriceModel> = match e {
                    Estimator::Rf => Box::new(LinkedForest {
                        forest: Forest::fit(&data.to_dataset(link)?, &forest_params(cfg, rep))?,
                        link,
                    }),
                    Estimator::Mnl => Box::new(fit_mnl_price_mle(&data)?.model),
                    Estimator::Linear => Box::new(fit_linear_demand(&data)?),
                    Estimator::Mc => unreachable!("rejected by validate"),
                };
                rmse_soft_prices(&truth, model.as_ref(), &test)
            })
        })
        .collect())
}

/// Runs every replication (concurrently, each on its own stream) and
/// summarises each estimator. Estimator failures are recorded per
/// replication; a failure to generate a replication's data is fatal.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let reps: Vec<Vec<Outcome>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| match &cfg.scenario {
            Scenario::Choice { generator } => run_choice_rep(cfg, generator, None, r),
            Scenario::Aggregated { generator, level } => {
                run_choice_rep(cfg, generator, Some(*level), r)
            }
            Scenario::Price {
                utility_max,
                price_max,
                link,
            } => run_price_rep(cfg, *utility_max, *price_max, *link, r),
        })
        .collect::<Result<_>>()?;

    let results = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(k, &e)| {
            let rmse: Vec<Option<f64>> = reps
                .iter()
                .map(|o| o[k].rmse.as_ref().ok().copied())
                .collect();
            let errors = reps
                .iter()
                .map(|o| o[k].rmse.as_ref().err().map(|e| e.to_string()))
                .collect();
            let ok: Vec<f64> = rmse.iter().flatten().copied().collect();
            let (mean, std) = mean_std(ok.iter().copied());
            EstimatorSummary {
                estimator: e,
                mean,
                std,
                successes: ok.len(),
                rmse,
                errors,
                mean_seconds: cfg
                    .timing
                    .then(|| reps.iter().map(|o| o[k].seconds).sum::<f64>() / reps.len() as f64),
            }
        })
        .collect();
    Ok(ExperimentReport {
        config: cfg.clone(),
        results,
    })
}

fn row_label(cfg: &ExperimentConfig) -> String {
    match cfg.scenario {
        Scenario::Aggregated { level, .. } => format!("a={level}"),
        _ => cfg.transactions.to_string(),
    }
}

fn row_key(cfg: &ExperimentConfig) -> (usize, usize) {
    match cfg.scenario {
        Scenario::Aggregated { level, .. } => (level, cfg.transactions),
        _ => (cfg.transactions, 0),
    }
}

/// Paper-style table: one row per `T` (or aggregation level), one column
/// per estimator within each pool size `T₁`. Cells read `mean (std)`.
pub fn table_csv(reports: &[ExperimentReport]) -> Result<String> {
    let mut pools: Vec<Option<usize>> = reports.iter().map(|r| r.config.pool_size).collect();
    pools.sort();
    pools.dedup();
    let mut estimators: Vec<Estimator> = Vec::new();
    for r in reports {
        for e in &r.config.estimators {
            if !estimators.contains(e) {
                estimators.push(*e);
            }
        }
    }
    let mut rows: Vec<((usize, usize), String)> = reports
        .iter()
        .map(|r| (row_key(&r.config), row_label(&r.config)))
        .collect();
    rows.sort();
    rows.dedup();

    let first = match reports.first().map(|r| &r.config.scenario) {
        Some(Scenario::Aggregated { .. }) => "level",
        _ => "T",
    };
    let mut header = vec![first.to_string()];
    for p in &pools {
        for e in &estimators {
            header.push(match p {
                Some(t1) => format!("T1={t1} {}", e.label()),
                None => e.label().to_string(),
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for (key, label) in &rows {
        let mut rec = vec![label.clone()];
        for p in &pools {
            let rep = reports
                .iter()
                .find(|r| r.config.pool_size == *p && row_key(&r.config) == *key);
            for e in &estimators {
                rec.push(match rep.and_then(|r| r.summary(*e)) {
                    Some(s) if s.successes > 0 => format!("{:.3} ({:.3})", s.mean, s.std),
                    _ => String::new(),
                });
            }
        }
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidValue(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidValue(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::{ChoiceDistribution, Transaction};
    use proptest::prelude::*;
    use rand::Rng;

    struct Fixed(ChoiceDistribution);

    impl ChoiceModel for Fixed {
        fn n_products(&self) -> usize {
            self.0.n_products()
        }
        fn choice_probabilities(&self, _: &Assortment) -> ChoiceDistribution {
            self.0.clone()
        }
    }

    fn set(n: usize, p: &[usize]) -> Assortment {
        Assortment::from_products(n, p).unwrap()
    }

    #[test]
    fn soft_rmse_examples() {
        let truth = Fixed(ChoiceDistribution::new(vec![0.5, 0.5]));
        let est = Fixed(ChoiceDistribution::new(vec![1.0, 0.0]));
        let s = vec![set(1, &[1])];
        assert!((rmse_soft(&truth, &est, &s).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(rmse_soft(&truth, &truth, &s).unwrap(), 0.0);
        assert!(rmse_soft(&truth, &est, &[]).is_err());
    }

    #[test]
    fn empirical_rmse_examples() {
        let est = Fixed(ChoiceDistribution::new(vec![0.5, 0.5]));
        let one = Dataset::new(
            1,
            0,
            vec![Transaction::from_assortment(1, &set(1, &[1])).unwrap()],
        )
        .unwrap();
        assert!((rmse_empirical(&est, &one).unwrap() - 0.5).abs() < 1e-15);
        let mixed = Dataset::new(
            1,
            0,
            vec![
                Transaction::from_assortment(0, &set(1, &[1])).unwrap(),
                Transaction::from_assortment(1, &set(1, &[1])).unwrap(),
                Transaction::from_assortment(1, &set(1, &[1])).unwrap(),
            ],
        )
        .unwrap();
        assert!((rmse_empirical(&est, &mixed).unwrap() - 0.5).abs() < 1e-15);
        let perfect = Fixed(ChoiceDistribution::new(vec![0.0, 1.0]));
        assert_eq!(rmse_empirical(&perfect, &one).unwrap(), 0.0);
        assert!(rmse_empirical(&est, &Dataset::empty(1, 0)).is_err());
    }

    #[test]
    fn sampled_soft_rmse_tracks_exhaustive() {
        let mut g = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let a = RankModel::random(10, 4, &mut g).unwrap();
            let b = MnlModel::new((0..10).map(|_| g.random::<f64>()).collect()).unwrap();
            let all: Vec<Assortment> = Assortment::enumerate_nonempty(10).collect();
            let sample: Vec<Assortment> = (0..10_000)
                .map(|_| AssortmentSampler::UniformNonEmpty.sample(10, &mut g))
                .collect();
            let exact = rmse_soft(&a, &b, &all).unwrap();
            let approx = rmse_soft(&a, &b, &sample).unwrap();
            assert!((exact - approx).abs() < 0.005, "{exact} vs {approx}");
        }
    }

    #[test]
    fn folds_partition_rows() {
        let f = fold_assignment(4, 4, 1).unwrap();
        let mut sorted = f.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        let f = fold_assignment(10, 3, 2).unwrap();
        let sizes: Vec<usize> = (0..3)
            .map(|k| f.iter().filter(|&&x| x == k).count())
            .collect();
        assert!(sizes.iter().all(|&s| s == 3 || s == 4));
        assert_eq!(fold_assignment(10, 3, 2).unwrap(), f);
        assert!(fold_assignment(2, 3, 0).is_err());
        assert!(fold_assignment(5, 1, 0).is_err());
    }

    #[test]
    fn cv_of_constant_model_matches_direct_scores() {
        let mut g = ChaCha8Rng::seed_from_u64(8);
        let truth = MnlModel::new(vec![0.3, -0.2, 0.5]).unwrap();
        let data = simulate(&truth, &AssortmentSampler::UniformNonEmpty, 50, &mut g).unwrap();
        let constant = ChoiceDistribution::new(vec![0.25; 4]);
        let c = constant.clone();
        let cv = kfold_cv(
            &data,
            5,
            move |_| Ok(Box::new(Fixed(c.clone())) as Box<dyn ChoiceModel>),
            3,
        )
        .unwrap();
        let fold = fold_assignment(data.len(), 5, 3).unwrap();
        for (k, score) in cv.folds.iter().enumerate() {
            let rows: Vec<usize> = (0..data.len()).filter(|&i| fold[i] == k).collect();
            let direct = rmse_empirical(&Fixed(constant.clone()), &data.select(&rows)).unwrap();
            assert!((score - direct).abs() < 1e-15);
        }
    }

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            n_products: 5,
            scenario: Scenario::Choice {
                generator: Generator::Rank { types: 2 },
            },
            pool_size: Some(10),
            transactions: 400,
            estimators: vec![Estimator::Rf, Estimator::Mnl, Estimator::Mc],
            replications: 3,
            seed: 9,
            forest: ForestParams {
                n_trees: 50,
                ..ForestParams::default()
            },
            em: EmSettings::default(),
            metric: Metric::Soft,
            test_size: 100,
            timing: false,
        }
    }

    #[test]
    fn experiment_is_reproducible() {
        let cfg = small_config();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        for s in &a.results {
            assert_eq!(s.successes, 3);
            assert!(s.mean > 0.0 && s.mean < 0.5);
        }
    }

    #[test]
    fn experiment_config_validation() {
        let mut cfg = small_config();
        cfg.replications = 0;
        assert!(run_experiment(&cfg).is_err());
        let mut cfg = small_config();
        cfg.estimators = vec![Estimator::Linear];
        assert!(cfg.validate().is_err());
        let json = r#"{"scenario":{"mode":"choice","generator":{"kind":"rank","types":4}},
            "pool_size":30,"transactions":300,"estimators":["rf","mnl","mc"],"replications":2}"#;
        let cfg = ExperimentConfig::from_json(json).unwrap();
        assert_eq!(cfg.n_products, 10);
        assert_eq!(cfg.forest, ForestParams::default());
        assert!(ExperimentConfig::from_json(r#"{"scenario":{"mode":"price"},"transactions":10,"estimators":["mc"],"replications":1}"#).is_err());

        let err = ExperimentConfig::from_json(
            r#"{"scenario":{"mode":"choice","generator":{"kind":"rank","types":4}},"transactions":10,
                "estimators":["rf"],"replications":1,"forest":{"leaf_min":"many"}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("forest.leaf_min"), "{err}");
        assert!(matches!(ExperimentConfig::from_json(&format!("{json} x")), Err(Error::Json(_))));
    }

    #[test]
    fn other_scenarios_run() {
        let mut cfg = small_config();
        cfg.scenario = Scenario::Aggregated {
            generator: Generator::Mnl,
            level: 5,
        };
        cfg.pool_size = None;
        cfg.metric = Metric::Empirical;
        let r = run_experiment(&cfg).unwrap();
        assert!(r.results.iter().all(|s| s.successes == 3));
        cfg.scenario = Scenario::Price {
            utility_max: 5.0,
            price_max: 5.0,
            link: LinkFunction::Exp,
        };
        cfg.estimators = vec![Estimator::Rf, Estimator::Mnl, Estimator::Linear];
        cfg.timing = true;
        let r = run_experiment(&cfg).unwrap();
        assert!(r
            .results
            .iter()
            .all(|s| s.successes == 3 && s.mean_seconds.is_some()));
        cfg.scenario = Scenario::Choice {
            generator: Generator::Comparison {
                types: 2,
                attributes: 5,
                scoring: TournamentScoring::AttributeWins,
            },
        };
        cfg.estimators = vec![Estimator::Rf];
        cfg.timing = false;
        assert_eq!(run_experiment(&cfg).unwrap().results[0].successes, 3);
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        // three rows cannot identify six linear-demand coefficients
        let mut cfg = small_config();
        cfg.scenario = Scenario::Price {
            utility_max: 5.0,
            price_max: 5.0,
            link: LinkFunction::Exp,
        };
        cfg.transactions = 3;
        cfg.estimators = vec![Estimator::Linear, Estimator::Rf];
        let r = run_experiment(&cfg).unwrap();
        let lin = r.summary(Estimator::Linear).unwrap();
        assert_eq!(lin.successes, 0);
        assert!(lin.mean.is_nan());
        assert!(lin
            .errors
            .iter()
            .all(|e| e.as_deref().is_some_and(|m| m.contains("rank deficient"))));
        assert_eq!(r.summary(Estimator::Rf).unwrap().successes, 3);
    }

    #[test]
    fn table_layout() {
        let mut reports = Vec::new();
        for t1 in [5, 10] {
            for t in [100, 200] {
                let mut cfg = small_config();
                cfg.pool_size = Some(t1);
                cfg.transactions = t;
                cfg.replications = 2;
                cfg.estimators = vec![Estimator::Rf, Estimator::Mnl];
                reports.push(run_experiment(&cfg).unwrap());
            }
        }
        let csv = table_csv(&reports).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "T,T1=5 RF,T1=5 MNL,T1=10 RF,T1=10 MNL");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("100,"));
        assert_eq!(lines[2].matches('(').count(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn soft_rmse_symmetric_and_zero_on_self(seed in any::<u64>(), n in 1usize..6) {
            let mut g = ChaCha8Rng::seed_from_u64(seed);
            let a = RankModel::random(n, 3, &mut g).unwrap();
            let b = MnlModel::new((0..n).map(|_| g.random::<f64>() * 2.0 - 1.0).collect()).unwrap();
            let all: Vec<Assortment> = Assortment::enumerate_nonempty(n).collect();
            prop_assert!(rmse_soft(&a, &a, &all).unwrap() == 0.0);
            let ab = rmse_soft(&a, &b, &all).unwrap();
            let ba = rmse_soft(&b, &a, &all).unwrap();
            prop_assert!((ab - ba).abs() < 1e-15);
        }
    }
}
