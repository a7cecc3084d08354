//! Random-forest estimation of discrete choice models.
//!
//! Item `0` is the no-purchase option and products are `1..=N`. A transaction
//! records the chosen item together with a feature vector whose first `N`
//! entries describe the offered assortment.

// `!(x >= 0.0)` is how NaN gets rejected; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod baselines;
pub mod cart;
pub mod choice;
pub mod error;
pub mod eval;
pub mod forest;
pub mod generators;
pub mod io;
pub mod rng;
pub mod transforms;

pub use cart::{
    best_split, gini_index, grow_tree, tree_predict, LeafRule, SplitMode, TreeNode, TreeParams,
};
pub use choice::{
    max_adjacent_phi, phi_continuity, symmetric_distance, validate_distribution, Assortment,
    ChoiceDistribution, ChoiceModel, Dataset, FeatureVector, Transaction,
};
pub use error::{Error, Result};
pub use forest::{bootstrap_indices, Forest, ForestParams, Normalization};
