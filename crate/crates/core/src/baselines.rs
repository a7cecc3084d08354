//! Comparator estimators: MNL maximum likelihood, Markov chain EM,
//! independent demand and linear demand.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::choice::{Assortment, ChoiceDistribution, ChoiceModel, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::generators::{MarkovModel, MnlModel};
use crate::transforms::{PriceDataset, PriceModel};

/// Box constraint on every logit parameter.
pub const UTILITY_BOUND: f64 = 30.0;

/// Distinct assortments of a binary dataset with per-item choice counts, in
/// order of first appearance.
pub fn group_by_assortment(data: &Dataset) -> Result<Vec<(Assortment, Vec<f64>)>> {
    if !data.is_binary() {
        return Err(Error::InvalidValue(
            "estimator needs binary assortment data".into(),
        ));
    }
    let n = data.n_products();
    let mut index: HashMap<Assortment, usize> = HashMap::new();
    let mut out: Vec<(Assortment, Vec<f64>)> = Vec::new();
    for (t, s) in data.iter().zip(data.assortments()) {
        let k = *index.entry(s.clone()).or_insert_with(|| {
            out.push((s, vec![0.0; n + 1]));
            out.len() - 1
        });
        out[k].1[t.chosen] += 1.0;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Conditional logit

/// Choice situations sharing a set of alternatives. Each alternative has a
/// sparse feature vector; its logit is the dot product with the parameters.
/// The no-purchase alternative carries no features.
struct LogitGroup {
    features: Vec<Vec<(usize, f64)>>,
    counts: Vec<f64>,
}

struct LogitProblem {
    dim: usize,
    groups: Vec<LogitGroup>,
}

struct LogitEval {
    ll: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl LogitProblem {
    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        let mut ll = 0.0;
        let mut eta = Vec::new();
        for g in &self.groups {
            eta.clear();
            eta.extend(
                g.features
                    .iter()
                    .map(|f| f.iter().map(|&(k, v)| theta[k] * v).sum::<f64>()),
            );
            let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + eta.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
            for (e, c) in eta.iter().zip(&g.counts) {
                if *c > 0.0 {
                    ll += c * (e - lse);
                }
            }
        }
        ll
    }

    fn evaluate(&self, theta: &[f64], hessian: bool) -> LogitEval {
        let d = self.dim;
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(if hessian { d } else { 0 }, if hessian { d } else { 0 });
        let mut ll = 0.0;
        let mut p = Vec::new();
        let mut mean = vec![0.0; d];
        for g in &self.groups {
            p.clear();
            p.extend(
                g.features
                    .iter()
                    .map(|f| f.iter().map(|&(k, v)| theta[k] * v).sum::<f64>()),
            );
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = p.iter().map(|e| (e - max).exp()).sum();
            let lse = max + z.ln();
            let total: f64 = g.counts.iter().sum();
            for (e, c) in p.iter().zip(&g.counts) {
                if *c > 0.0 {
                    ll += c * (e - lse);
                }
            }
            p.iter_mut().for_each(|e| *e = (*e - lse).exp());
            mean.iter_mut().for_each(|m| *m = 0.0);
            for (a, f) in g.features.iter().enumerate() {
                for &(k, v) in f {
                    grad[k] += (g.counts[a] - total * p[a]) * v;
                    mean[k] += p[a] * v;
                }
            }
            if hessian {
                for (a, f) in g.features.iter().enumerate() {
                    for &(k, v) in f {
                        for &(l, w) in f {
                            hess[(k, l)] -= total * p[a] * v * w;
                        }
                    }
                }
                let nz: Vec<usize> = (0..d).filter(|&k| mean[k] != 0.0).collect();
                for &k in &nz {
                    for &l in &nz {
                        hess[(k, l)] += total * mean[k] * mean[l];
                    }
                }
            }
        }
        LogitEval { ll, grad, hess }
    }

    /// Projected Newton ascent inside `[-UTILITY_BOUND, UTILITY_BOUND]^d`.
    fn maximize(&self, init: Vec<f64>, grad_tol: f64, max_iter: usize) -> LogitSolution {
        let d = self.dim;
        let (lo, hi) = (-UTILITY_BOUND, UTILITY_BOUND);
        let mut theta: Vec<f64> = init.into_iter().map(|x| x.clamp(lo, hi)).collect();
        let mut iterations = 0;
        let mut eval = self.evaluate(&theta, true);
        let mut pg_norm;
        loop {
            let blocked =
                |k: usize, g: f64, th: &[f64]| (th[k] <= lo && g < 0.0) || (th[k] >= hi && g > 0.0);
            pg_norm = (0..d)
                .filter(|&k| !blocked(k, eval.grad[k], &theta))
                .map(|k| eval.grad[k].abs())
                .fold(0.0, f64::max);
            if pg_norm <= grad_tol || iterations >= max_iter {
                break;
            }
            iterations += 1;
            let free: Vec<usize> = (0..d)
                .filter(|&k| !blocked(k, eval.grad[k], &theta) && eval.hess[(k, k)] < 0.0)
                .collect();
            if free.is_empty() {
                break;
            }
            let f = free.len();
            let neg_h = DMatrix::from_fn(f, f, |r, c| -eval.hess[(free[r], free[c])]);
            let g_f = DVector::from_iterator(f, free.iter().map(|&k| eval.grad[k]));
            let step = match neg_h.clone().cholesky() {
                Some(ch) => ch.solve(&g_f),
                None => {
                    let ridge = 1e-8 * neg_h.diagonal().max().max(1.0);
                    match (neg_h + DMatrix::identity(f, f) * ridge).cholesky() {
                        Some(ch) => ch.solve(&g_f),
                        None => g_f.clone(),
                    }
                }
            };
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let mut cand = theta.clone();
                for (r, &k) in free.iter().enumerate() {
                    cand[k] = (theta[k] + t * step[r]).clamp(lo, hi);
                }
                let ll = self.log_likelihood(&cand);
                let predicted: f64 = free
                    .iter()
                    .map(|&k| eval.grad[k] * (cand[k] - theta[k]))
                    .sum();
                let noise = 1e-11 * eval.ll.abs().max(1.0);
                if (ll >= eval.ll + 1e-4 * predicted && ll >= eval.ll)
                    || (t == 1.0 && ll >= eval.ll - noise)
                {
                    let moved = cand != theta;
                    theta = cand;
                    accepted = moved;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
            eval = self.evaluate(&theta, true);
        }
        LogitSolution {
            theta,
            log_likelihood: eval.ll,
            iterations,
            gradient_norm: pg_norm,
        }
    }
}

struct LogitSolution {
    theta: Vec<f64>,
    log_likelihood: f64,
    iterations: usize,
    gradient_norm: f64,
}

/// Result of an MNL fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnlFit {
    pub model: MnlModel,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Projected-gradient sup norm at the solution.
    pub gradient_norm: f64,
    /// Products whose utility sits on the box constraint (for example never
    /// chosen when offered).
    pub at_bound: Vec<usize>,
    /// Products never offered; their utility stays at the initial value.
    pub unidentified: Vec<usize>,
}

fn mnl_problem(data: &Dataset) -> Result<LogitProblem> {
    let groups = group_by_assortment(data)?
        .into_iter()
        .map(|(s, counts)| {
            let mut features = vec![Vec::new()];
            let mut c = vec![counts[0]];
            for j in s.products() {
                features.push(vec![(j - 1, 1.0)]);
                c.push(counts[j]);
            }
            LogitGroup {
                features,
                counts: c,
            }
        })
        .collect();
    Ok(LogitProblem {
        dim: data.n_products(),
        groups,
    })
}

/// MNL log-likelihood of binary `data` at `utilities` (outside utility 0).
pub fn mnl_log_likelihood(data: &Dataset, utilities: &[f64]) -> Result<f64> {
    check_dim(data.n_products(), utilities.len())?;
    Ok(mnl_problem(data)?.log_likelihood(utilities))
}

/// Gradient of [`mnl_log_likelihood`] in the utilities.
pub fn mnl_gradient(data: &Dataset, utilities: &[f64]) -> Result<Vec<f64>> {
    check_dim(data.n_products(), utilities.len())?;
    Ok(mnl_problem(data)?
        .evaluate(utilities, false)
        .grad
        .iter()
        .cloned()
        .collect())
}

/// Maximum-likelihood MNL with the outside utility fixed at 0, started from
/// all-zero utilities.
pub fn fit_mnl_mle(data: &Dataset) -> Result<MnlFit> {
    fit_mnl_mle_from(data, &vec![0.0; data.n_products()])
}

pub fn fit_mnl_mle_from(data: &Dataset, init: &[f64]) -> Result<MnlFit> {
    if data.is_empty() {
        return Err(Error::Empty("cannot fit an MNL to an empty dataset"));
    }
    check_dim(data.n_products(), init.len())?;
    let problem = mnl_problem(data)?;
    let mut offered = vec![false; data.n_products()];
    let mut chosen = vec![false; data.n_products()];
    for (t, s) in data.iter().zip(data.assortments()) {
        for j in s.products() {
            offered[j - 1] = true;
        }
        if t.chosen > 0 {
            chosen[t.chosen - 1] = true;
        }
    }
    // The likelihood of a product offered but never bought increases
    // without bound as its utility falls; start it on the lower bound.
    let mut start = init.to_vec();
    for j in 0..start.len() {
        if offered[j] && !chosen[j] {
            start[j] = -UTILITY_BOUND;
        }
    }
    let sol = problem.maximize(start, 1e-6, 500);
    let at_bound = (1..=data.n_products())
        .filter(|&j| sol.theta[j - 1].abs() >= UTILITY_BOUND)
        .collect();
    let unidentified = (1..=data.n_products())
        .filter(|&j| !offered[j - 1])
        .collect();
    Ok(MnlFit {
        model: MnlModel::new(sol.theta)?,
        log_likelihood: sol.log_likelihood,
        iterations: sol.iterations,
        gradient_norm: sol.gradient_norm,
        at_bound,
        unidentified,
    })
}

/// MNL with logits `u_j - beta * price_j`, estimating the utilities and the
/// common price sensitivity `beta`.
pub fn fit_mnl_price_mle(data: &PriceDataset) -> Result<MnlFit> {
    if data.is_empty() {
        return Err(Error::Empty("cannot fit an MNL to an empty dataset"));
    }
    let n = data.n_products;
    let groups = data
        .transactions
        .iter()
        .map(|t| {
            let mut features = vec![Vec::new()];
            let mut counts = vec![if t.chosen == 0 { 1.0 } else { 0.0 }];
            for (k, &p) in t.prices.iter().enumerate() {
                if p.is_finite() {
                    features.push(vec![(k, 1.0), (n, -p)]);
                    counts.push(if t.chosen == k + 1 { 1.0 } else { 0.0 });
                }
            }
            LogitGroup { features, counts }
        })
        .collect();
    let problem = LogitProblem { dim: n + 1, groups };
    let sol = problem.maximize(vec![0.0; n + 1], 1e-6, 500);
    let mut model = MnlModel::new(sol.theta[..n].to_vec())?;
    model.price_sensitivity = sol.theta[n];
    Ok(MnlFit {
        at_bound: (1..=n)
            .filter(|&j| sol.theta[j - 1].abs() >= UTILITY_BOUND)
            .collect(),
        unidentified: Vec::new(),
        model,
        log_likelihood: sol.log_likelihood,
        iterations: sol.iterations,
        gradient_norm: sol.gradient_norm,
    })
}

// ---------------------------------------------------------------------------
// Markov chain EM

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovFit {
    pub model: MarkovModel,
    /// Log-likelihood after each iteration, starting with the initial model.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct EmStep {
    ll: f64,
    first: Vec<f64>,
    trans: Vec<Vec<f64>>,
}

fn em_step(model: &MarkovModel, groups: &[(Assortment, Vec<f64>)]) -> Result<EmStep> {
    let n1 = model.lambda.len();
    let (lambda, rho) = (&model.lambda, &model.rho);
    let mut out = EmStep {
        ll: 0.0,
        first: vec![0.0; n1],
        trans: vec![vec![0.0; n1]; n1],
    };
    for (s, counts) in groups {
        let unoffered: Vec<usize> = (1..n1).filter(|&j| !s.contains(j)).collect();
        let offered: Vec<usize> = (0..n1).filter(|&i| s.offers(i)).collect();
        let u = unoffered.len();
        // h[r][i]: absorption probability at offered item i starting from
        // unoffered product unoffered[r]; v[r]: expected visits to it.
        let (h, v) = if u == 0 {
            (DMatrix::zeros(0, n1), DVector::zeros(0))
        } else {
            let i_q = DMatrix::from_fn(u, u, |r, c| {
                (if r == c { 1.0 } else { 0.0 }) - rho[unoffered[r]][unoffered[c]]
            });
            let lu = i_q.lu();
            let r_mat = DMatrix::from_fn(u, n1, |r, i| {
                if s.offers(i) {
                    rho[unoffered[r]][i]
                } else {
                    0.0
                }
            });
            let h = lu
                .solve(&r_mat)
                .ok_or_else(|| Error::Singular("markov absorption system".into()))?;
            let lam_u = DVector::from_iterator(u, unoffered.iter().map(|&j| lambda[j]));
            let v = i_q_transpose_solve(&unoffered, rho, &lam_u)?;
            (h, v)
        };
        for &i in &offered {
            let c = counts[i];
            if c == 0.0 {
                continue;
            }
            let mut p = lambda[i];
            for r in 0..u {
                p += lambda[unoffered[r]] * h[(r, i)];
            }
            if !(p > 0.0) {
                out.ll = f64::NEG_INFINITY;
                continue;
            }
            out.ll += c * p.ln();
            let scale = c / p;
            out.first[i] += scale * lambda[i];
            for r in 0..u {
                let j = unoffered[r];
                out.first[j] += scale * lambda[j] * h[(r, i)];
                // Transitions k -> l on paths absorbed at i.
                let vk = v[r];
                if vk == 0.0 {
                    continue;
                }
                out.trans[j][i] += scale * vk * rho[j][i];
                for r2 in 0..u {
                    let l = unoffered[r2];
                    let w = rho[j][l] * h[(r2, i)];
                    if w != 0.0 {
                        out.trans[j][l] += scale * vk * w;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn i_q_transpose_solve(
    unoffered: &[usize],
    rho: &[Vec<f64>],
    rhs: &DVector<f64>,
) -> Result<DVector<f64>> {
    let u = unoffered.len();
    let a = DMatrix::from_fn(u, u, |r, c| {
        (if r == c { 1.0 } else { 0.0 }) - rho[unoffered[c]][unoffered[r]]
    });
    a.lu()
        .solve(rhs)
        .ok_or_else(|| Error::Singular("markov visit system".into()))
}

/// Fits a Markov chain model by expectation maximisation, starting from a
/// uniform `lambda` and uniform off-diagonal transitions. Stops when the
/// relative log-likelihood gain drops below `tol` or after `max_iter`
/// iterations.
pub fn fit_markov_em(data: &Dataset, tol: f64, max_iter: usize) -> Result<MarkovFit> {
    if data.is_empty() {
        return Err(Error::Empty(
            "cannot fit a Markov chain to an empty dataset",
        ));
    }
    let n = data.n_products();
    let n1 = n + 1;
    let mut rho = vec![vec![0.0; n1]; n1];
    rho[0][0] = 1.0;
    for (j, row) in rho.iter_mut().enumerate().skip(1) {
        for (k, x) in row.iter_mut().enumerate() {
            if k != j {
                *x = 1.0 / n as f64;
            }
        }
    }
    let model = MarkovModel::new(vec![1.0 / n1 as f64; n1], rho)?;
    fit_markov_em_from(data, model, tol, max_iter)
}

pub fn fit_markov_em_from(
    data: &Dataset,
    init: MarkovModel,
    tol: f64,
    max_iter: usize,
) -> Result<MarkovFit> {
    check_dim(data.n_products(), init.n_products())?;
    let groups = group_by_assortment(data)?;
    let mut model = init;
    let mut step = em_step(&model, &groups)?;
    let mut trace = vec![step.ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let total: f64 = step.first.iter().sum();
        let lambda: Vec<f64> = step.first.iter().map(|x| x / total).collect();
        let mut rho = model.rho.clone();
        for j in 1..rho.len() {
            let row_total: f64 = step.trans[j].iter().sum();
            if row_total > 0.0 {
                rho[j] = step.trans[j].iter().map(|x| x / row_total).collect();
            }
        }
        // An estimated row may trap a product away from 0; keep the previous
        // row in that case so absorption stays well defined.
        let next = match MarkovModel::new(lambda.clone(), rho.clone()) {
            Ok(m) => m,
            Err(_) => {
                let mut fixed = rho;
                for j in 1..fixed.len() {
                    let candidate = MarkovModel {
                        lambda: lambda.clone(),
                        rho: fixed.clone(),
                    };
                    if candidate.validate().is_ok() {
                        break;
                    }
                    fixed[j] = model.rho[j].clone();
                }
                MarkovModel::new(lambda, fixed)?
            }
        };
        let next_step = em_step(&next, &groups)?;
        let gain = next_step.ll - step.ll;
        model = next;
        step = next_step;
        trace.push(step.ll);
        if gain.abs() < tol * step.ll.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(MarkovFit {
        model,
        trace,
        iterations,
        converged,
    })
}

// ---------------------------------------------------------------------------
// Independent demand

/// Per-product purchase rates ignoring substitution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependentModel {
    pub rates: Vec<f64>,
}

/// Rate of product `j` = purchases of `j` / transactions offering `j`.
pub fn fit_independent(data: &Dataset) -> Result<IndependentModel> {
    let n = data.n_products();
    let mut bought = vec![0.0; n];
    let mut offered = vec![0.0; n];
    for (t, s) in data.iter().zip(data.assortments()) {
        for j in s.products() {
            offered[j - 1] += 1.0;
        }
        if t.chosen > 0 {
            bought[t.chosen - 1] += 1.0;
        }
    }
    Ok(IndependentModel {
        rates: bought
            .iter()
            .zip(&offered)
            .map(|(b, o)| if *o > 0.0 { b / o } else { 0.0 })
            .collect(),
    })
}

impl ChoiceModel for IndependentModel {
    fn n_products(&self) -> usize {
        self.rates.len()
    }

    /// Offered rates as given; if they exceed one in total they are scaled
    /// down and no-purchase gets nothing.
    fn choice_probabilities(&self, s: &Assortment) -> ChoiceDistribution {
        let mut p = vec![0.0; self.rates.len() + 1];
        let mut sum = 0.0;
        for j in s.products() {
            p[j] = self.rates[j - 1];
            sum += p[j];
        }
        if sum > 1.0 {
            p.iter_mut().for_each(|x| *x /= sum);
        } else {
            p[0] = 1.0 - sum;
        }
        ChoiceDistribution::new(p)
    }
}

// ---------------------------------------------------------------------------
// Linear demand

/// `p(i, price) = (a_i + Σ_j b_ij price_j)^+`, with no-purchase taking the
/// remainder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDemandModel {
    pub intercepts: Vec<f64>,
    /// `slopes[i-1][j-1] = b_ij`
    pub slopes: Vec<Vec<f64>>,
}

/// Column names of the linear-demand design.
fn design_columns(n: usize) -> Vec<String> {
    std::iter::once("intercept".to_string())
        .chain((1..=n).map(|j| format!("price_{j}")))
        .collect()
}

/// Least squares of each target column on `(1, prices)`. Fails when the
/// design is rank deficient, naming the columns involved.
pub fn fit_linear_demand_targets(
    prices: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> Result<LinearDemandModel> {
    let t = prices.len();
    if t == 0 {
        return Err(Error::Empty("linear demand needs observations"));
    }
    check_dim(t, targets.len())?;
    let n = prices[0].len();
    for (p, y) in prices.iter().zip(targets) {
        check_dim(n, p.len())?;
        check_dim(n, y.len())?;
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidValue(
                "linear demand needs finite prices".into(),
            ));
        }
    }
    let k = n + 1;
    let x = DMatrix::from_fn(t, k, |r, c| if c == 0 { 1.0 } else { prices[r][c - 1] });
    let xtx = x.transpose() * &x;
    let eig = xtx.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let names = design_columns(n);
    let mut involved = vec![false; k];
    let mut deficient = false;
    for (e, ev) in eig.eigenvalues.iter().enumerate() {
        if *ev <= 1e-10 * max_ev.max(1e-300) {
            deficient = true;
            let v = eig.eigenvectors.column(e);
            for c in 0..k {
                if v[c].abs() > 1e-6 {
                    involved[c] = true;
                }
            }
        }
    }
    if deficient {
        return Err(Error::RankDeficient {
            columns: (0..k)
                .filter(|&c| involved[c])
                .map(|c| names[c].clone())
                .collect(),
        });
    }
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Singular("linear demand normal equations".into()))?;
    let y = DMatrix::from_fn(t, n, |r, c| targets[r][c]);
    let beta = chol.solve(&(x.transpose() * y));
    Ok(LinearDemandModel {
        intercepts: (0..n).map(|i| beta[(0, i)]).collect(),
        slopes: (0..n)
            .map(|i| (0..n).map(|j| beta[(j + 1, i)]).collect())
            .collect(),
    })
}

/// Regresses purchase indicators of each product on prices.
pub fn fit_linear_demand(data: &PriceDataset) -> Result<LinearDemandModel> {
    let n = data.n_products;
    let prices: Vec<Vec<f64>> = data.transactions.iter().map(|t| t.prices.clone()).collect();
    let targets: Vec<Vec<f64>> = data
        .transactions
        .iter()
        .map(|t| {
            (1..=n)
                .map(|j| if t.chosen == j { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    fit_linear_demand_targets(&prices, &targets)
}

impl PriceModel for LinearDemandModel {
    fn n_products(&self) -> usize {
        self.intercepts.len()
    }

    /// Absent products (infinite price) get no demand and do not enter the
    /// other products' price terms.
    fn price_probabilities(&self, prices: &[f64]) -> Result<ChoiceDistribution> {
        let n = self.intercepts.len();
        check_dim(n, prices.len())?;
        let mut p = vec![0.0; n + 1];
        let mut sum = 0.0;
        for i in 0..n {
            if !prices[i].is_finite() {
                continue;
            }
            let mut v = self.intercepts[i];
            for j in 0..n {
                if prices[j].is_finite() {
                    v += self.slopes[i][j] * prices[j];
                }
            }
            p[i + 1] = v.max(0.0);
            sum += p[i + 1];
        }
        if sum > 1.0 {
            p.iter_mut().for_each(|x| *x /= sum);
        } else {
            p[0] = 1.0 - sum;
        }
        Ok(ChoiceDistribution::new(p))
    }
}
