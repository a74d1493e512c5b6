//! Gradient-boosted regression trees under squared loss.
//!
//! Each round fits a depth-limited tree to the current residuals with greedy
//! variance-reduction splits, searched exhaustively over the midpoints of
//! adjacent observed feature values. Rows are put in a canonical order first
//! so that fitting is bit-for-bit independent of the training row order; ties
//! between equally good splits go to the lowest feature index, then the
//! lowest threshold.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::BaselineError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams { n_trees: 200, max_depth: 3, learning_rate: 0.05, min_leaf: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Leaf { value: f64 },
    /// Rows with `x[feature] < threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Nodes stored in a flat arena; index 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub trees: Vec<RegressionTree>,
    pub learning_rate: f64,
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub base_prediction: f64,
    pub n_features: usize,
    /// Training MSE before the first tree and after each round.
    pub training_mse: Vec<f64>,
}

fn mse(residuals: &[f64]) -> f64 {
    residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Rows are held in a canonical order (lexicographic by features, then
/// target) and each feature's ascending order is computed once, so every sum
/// below is taken in an order that does not depend on how the caller ordered
/// the training rows.
struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    residuals: &'a [f64],
    sorted: &'a [Vec<usize>],
    params: &'a GbdtParams,
    member: Vec<bool>,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn best_split(&mut self, rows: &[usize], total: f64) -> Option<Split> {
        let n = rows.len();
        let min_leaf = self.params.min_leaf.max(1);
        if n < 2 * min_leaf {
            return None;
        }
        rows.iter().for_each(|&i| self.member[i] = true);
        let parent = total * total / n as f64;
        let mut best: Option<Split> = None;
        for (feature, order) in self.sorted.iter().enumerate() {
            let mut left_sum = 0.0;
            let mut k = 0;
            let mut prev: Option<usize> = None;
            for &i in order.iter().filter(|&&i| self.member[i]) {
                if let Some(p) = prev {
                    let (lo, hi) = (self.x[p][feature], self.x[i][feature]);
                    if k >= min_leaf && n - k >= min_leaf && lo.total_cmp(&hi) == Ordering::Less {
                        let right_sum = total - left_sum;
                        let gain = left_sum * left_sum / k as f64 + right_sum * right_sum / (n - k) as f64 - parent;
                        if gain > best.as_ref().map_or(0.0, |b| b.gain) {
                            let mut threshold = lo + (hi - lo) / 2.0;
                            if !(threshold > lo) {
                                threshold = hi;
                            }
                            best = Some(Split { feature, threshold, gain });
                        }
                    }
                }
                left_sum += self.residuals[i];
                k += 1;
                prev = Some(i);
            }
        }
        rows.iter().for_each(|&i| self.member[i] = false);
        best
    }

    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        let total: f64 = rows.iter().map(|&i| self.residuals[i]).sum();
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: total / rows.len() as f64 });
        if depth >= self.params.max_depth {
            return id;
        }
        let Some(split) = self.best_split(rows, total) else { return id };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| self.x[i][split.feature] < split.threshold);
        let left = self.grow(&left_rows, depth + 1);
        let right = self.grow(&right_rows, depth + 1);
        self.nodes[id] = Node::Split { feature: split.feature, threshold: split.threshold, left, right };
        id
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

pub fn fit_gbdt(x: &[Vec<f64>], y: &[f64], params: &GbdtParams) -> Result<GbdtModel, BaselineError> {
    if x.len() != y.len() {
        return Err(BaselineError::Argument(format!("{} rows but {} targets", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(BaselineError::Argument("gradient boosting needs at least 2 samples".into()));
    }
    if params.min_leaf == 0 || params.min_leaf >= x.len() {
        return Err(BaselineError::Argument(format!(
            "min_leaf must be in [1, {}), got {}",
            x.len(),
            params.min_leaf
        )));
    }
    if params.max_depth == 0 {
        return Err(BaselineError::Argument("max_depth must be positive".into()));
    }
    if !(params.learning_rate > 0.0 && params.learning_rate <= 1.0) {
        return Err(BaselineError::Argument(format!("learning_rate must be in (0, 1], got {}", params.learning_rate)));
    }
    let n_features = x[0].len();
    if x.iter().any(|r| r.len() != n_features) {
        return Err(BaselineError::Argument("rows have differing feature counts".into()));
    }

    let mut canon: Vec<usize> = (0..x.len()).collect();
    canon.sort_by(|&a, &b| lexicographic(&x[a], &x[b]).then_with(|| y[a].total_cmp(&y[b])));
    let x: Vec<Vec<f64>> = canon.iter().map(|&i| x[i].clone()).collect();
    let y: Vec<f64> = canon.iter().map(|&i| y[i]).collect();
    let sorted: Vec<Vec<usize>> = (0..n_features)
        .map(|f| {
            let mut order: Vec<usize> = (0..x.len()).collect();
            order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
            order
        })
        .collect();

    let base_prediction = y.iter().sum::<f64>() / y.len() as f64;
    let mut residuals: Vec<f64> = y.iter().map(|v| v - base_prediction).collect();
    let mut training_mse = vec![mse(&residuals)];
    let rows: Vec<usize> = (0..x.len()).collect();
    let mut trees = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        let mut builder =
            TreeBuilder { x: &x, residuals: &residuals, sorted: &sorted, params, member: vec![false; x.len()], nodes: Vec::new() };
        builder.grow(&rows, 0);
        let mut tree = RegressionTree { nodes: builder.nodes };
        let updated: Vec<f64> = residuals.iter().zip(&x).map(|(r, row)| r - params.learning_rate * tree.predict(row)).collect();
        let before = *training_mse.last().expect("seeded");
        let after = mse(&updated);
        // A least-squares step cannot raise the training error; a rise here
        // is rounding, and the round is replaced by a zero tree.
        if after <= before {
            residuals = updated;
            training_mse.push(after);
        } else {
            tree = RegressionTree { nodes: vec![Node::Leaf { value: 0.0 }] };
            training_mse.push(before);
        }
        trees.push(tree);
    }
    Ok(GbdtModel {
        trees,
        learning_rate: params.learning_rate,
        n_trees: params.n_trees,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
        base_prediction,
        n_features,
        training_mse,
    })
}

pub fn predict_gbdt(model: &GbdtModel, x: &[f64]) -> Result<f64, BaselineError> {
    if x.len() != model.n_features {
        return Err(BaselineError::Argument(format!("expected {} features, got {}", model.n_features, x.len())));
    }
    Ok(model.base_prediction + model.learning_rate * model.trees.iter().map(|t| t.predict(x)).sum::<f64>())
}
