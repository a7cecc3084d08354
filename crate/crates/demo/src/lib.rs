//! Browser bindings: fit a forest to simulated MNL data, run the PNN distance
//! Monte Carlo, and draw root-split Gini curves. Results cross the boundary as
//! JSON strings.

use rand::Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

use choiceforest::analysis::{
    pnn_distance_mc, ranking_dataset, root_split_gini, theoretical_gini, DistanceMode,
    RecoveryScheme,
};
use choiceforest::generators::{fixed_pool, simulate, AssortmentSampler, MnlModel};
use choiceforest::{rng, Assortment, ChoiceModel, Forest, ForestParams};

fn js(e: choiceforest::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A forest fitted to transactions from a random MNL model, kept next to the
/// model so predictions can be compared with the truth.
#[wasm_bindgen]
pub struct Fitted {
    truth: MnlModel,
    forest: Forest,
    pool: Vec<u64>,
}

#[wasm_bindgen]
impl Fitted {
    /// Utilities are U[0,1]; the `pool` training assortments are uniform
    /// non-empty ones.
    #[wasm_bindgen(constructor)]
    pub fn new(
        n_products: usize,
        transactions: usize,
        pool: usize,
        trees: usize,
        leaf_min: usize,
        seed: u64,
    ) -> Result<Fitted, JsError> {
        if !(1..=12).contains(&n_products) {
            return Err(JsError::new("products must lie in 1..=12"));
        }
        let mut g = rng::stream(seed);
        let utilities = (0..n_products).map(|_| g.random::<f64>()).collect();
        let truth = MnlModel::new(utilities)
            .map_err(js)?
            .with_outside_utility(g.random());
        let sampler = fixed_pool(
            n_products,
            pool,
            &AssortmentSampler::UniformNonEmpty,
            &mut g,
        )
        .map_err(js)?;
        let pool = match &sampler {
            AssortmentSampler::Pool { assortments, .. } => {
                assortments.iter().map(Assortment::mask).collect()
            }
            _ => Vec::new(),
        };
        let data = simulate(&truth, &sampler, transactions, &mut g).map_err(js)?;
        let params = ForestParams {
            n_trees: trees,
            leaf_min,
            seed,
            ..Default::default()
        };
        let forest = Forest::fit(&data, &params).map_err(js)?;
        Ok(Fitted {
            truth,
            forest,
            pool,
        })
    }

    /// `{offered, truth, forest, seen}` for a comma-separated product list.
    pub fn compare(&self, products: &str) -> Result<String, JsError> {
        let list = products
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| JsError::new(&format!("not a product: {t}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let s = Assortment::from_products(self.truth.n_products(), &list).map_err(js)?;
        let forest = self.forest.predict_normalized(&s, None).map_err(js)?;
        Ok(json!({
            "offered": s.products().collect::<Vec<_>>(),
            "truth": self.truth.choice_probabilities(&s).probs(),
            "forest": forest.probs(),
            "seen": self.pool.contains(&s.mask()),
        })
        .to_string())
    }

    /// Root mean squared error over every non-empty assortment, split into
    /// assortments seen in training and unseen ones.
    pub fn rmse(&self) -> Result<String, JsError> {
        let mut seen = (0.0, 0usize);
        let mut unseen = (0.0, 0usize);
        for s in Assortment::enumerate_nonempty(self.truth.n_products()) {
            let p = self.forest.predict_normalized(&s, None).map_err(js)?;
            let q = self.truth.choice_probabilities(&s);
            let se: f64 = p
                .probs()
                .iter()
                .zip(q.probs())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let bucket = if self.pool.contains(&s.mask()) {
                &mut seen
            } else {
                &mut unseen
            };
            bucket.0 += se;
            bucket.1 += s.len() + 1;
        }
        let r = |(sum, n): (f64, usize)| {
            if n == 0 {
                None
            } else {
                Some((sum / n as f64).sqrt())
            }
        };
        Ok(json!({ "seen": r(seen), "unseen": r(unseen) }).to_string())
    }
}

/// Distance from a random target to its nearest neighbours in a family of
/// `family` random training assortments.
#[wasm_bindgen]
pub fn pnn_distance(
    n_products: usize,
    family: usize,
    reps: usize,
    seed: u64,
) -> Result<String, JsError> {
    let stats = pnn_distance_mc(
        n_products,
        family,
        reps,
        seed,
        DistanceMode::MeanLargestBinary,
    )
    .map_err(js)?;
    serde_json::to_string(&stats).map_err(|e| JsError::new(&e.to_string()))
}

/// Theoretical and sampled Gini index of a root split on each product under
/// the ranking 1 > 2 > ... > N > no purchase.
#[wasm_bindgen]
pub fn gini_curves(n_products: usize, transactions: usize, seed: u64) -> Result<String, JsError> {
    let theory = (1..=n_products)
        .map(|j| theoretical_gini(j, n_products))
        .collect::<Result<Vec<_>, _>>()
        .map_err(js)?;
    let mut g = rng::stream(seed);
    let data =
        ranking_dataset(n_products, transactions, RecoveryScheme::Uniform, &mut g).map_err(js)?;
    let sampled: Vec<Option<f64>> = root_split_gini(&data)
        .map_err(js)?
        .into_iter()
        .map(|v| v.is_finite().then_some(v))
        .collect();
    Ok(json!({ "theoretical": theory, "sampled": sampled }).to_string())
}
