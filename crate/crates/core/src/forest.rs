//! Binary random forests with Gini splits, used by the annotation loop.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("need at least 2 rows and 1 feature (got {rows} rows, {features} features)")]
    TooSmall { rows: usize, features: usize },
    #[error("row {row} has {got} features, expected {expected}")]
    Dimension { row: usize, got: usize, expected: usize },
    #[error("{0} labels for {1} rows")]
    LabelCount(usize, usize),
    #[error("feature {0} is not finite")]
    NonFinite(usize),
    #[error("invalid forest configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per node; `None` means `ceil(sqrt(d))`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 8,
            min_leaf: 2,
            max_features: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    fn features_per_node(&self, d: usize) -> usize {
        self.max_features
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        p: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// A binary tree; rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub n_features: usize,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { p } => return p,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

fn validate(x: &[Vec<f64>], y: &[bool]) -> Result<usize, ForestError> {
    let d = x.first().map_or(0, |r| r.len());
    if x.len() < 2 || d == 0 {
        return Err(ForestError::TooSmall {
            rows: x.len(),
            features: d,
        });
    }
    if y.len() != x.len() {
        return Err(ForestError::LabelCount(y.len(), x.len()));
    }
    for (row, r) in x.iter().enumerate() {
        if r.len() != d {
            return Err(ForestError::Dimension {
                row,
                got: r.len(),
                expected: d,
            });
        }
        if let Some(f) = r.iter().position(|v| !v.is_finite()) {
            return Err(ForestError::NonFinite(f));
        }
    }
    Ok(d)
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

/// Best `(feature, threshold, weighted child impurity)` over the given features,
/// scanning midpoints between distinct sorted values. Ties keep the earlier
/// feature in `features` and the smaller threshold.
pub(crate) fn best_split(
    x: &[Vec<f64>],
    y: &[bool],
    rows: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Option<(usize, f64, f64)> {
    let n = rows.len();
    let total_pos = rows.iter().filter(|&&r| y[r]).count();
    let mut best: Option<(usize, f64, f64)> = None;
    let mut order = rows.to_vec();
    for &f in features {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        let mut left_pos = 0;
        for i in 0..n - 1 {
            left_pos += y[order[i]] as usize;
            let (lo, hi) = (x[order[i]][f], x[order[i + 1]][f]);
            let left_n = i + 1;
            if lo == hi || left_n < min_leaf || n - left_n < min_leaf {
                continue;
            }
            let score = (left_n as f64 * gini(left_pos, left_n)
                + (n - left_n) as f64 * gini(total_pos - left_pos, n - left_n))
                / n as f64;
            if best.is_none_or(|b| score < b.2) {
                best = Some((f, lo + (hi - lo) / 2.0, score));
            }
        }
    }
    best
}

/// Grows one tree on a bootstrap sample (when enabled) with random feature subsets.
pub fn train_tree(x: &[Vec<f64>], y: &[bool], config: &ForestConfig, rng: &mut ChaCha8Rng) -> Result<DecisionTree, ForestError> {
    let d = validate(x, y)?;
    if config.min_leaf == 0 {
        return Err(ForestError::Config("min_leaf must be at least 1".into()));
    }
    let rows: Vec<usize> = if config.bootstrap {
        (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect()
    } else {
        (0..x.len()).collect()
    };
    let k = config.features_per_node(d);
    let mut tree = DecisionTree {
        nodes: Vec::new(),
        n_features: d,
    };
    grow(&mut tree, x, y, rows, 0, config, k, rng);
    Ok(tree)
}

#[allow(clippy::too_many_arguments)]
fn grow(
    tree: &mut DecisionTree,
    x: &[Vec<f64>],
    y: &[bool],
    rows: Vec<usize>,
    depth: usize,
    config: &ForestConfig,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    let id = tree.nodes.len();
    let pos = rows.iter().filter(|&&r| y[r]).count();
    let p = pos as f64 / rows.len() as f64;
    tree.nodes.push(Node::Leaf { p });
    if pos == 0 || pos == rows.len() || depth >= config.max_depth || rows.len() < 2 * config.min_leaf {
        return id;
    }
    let features: Vec<usize> = if k >= tree.n_features {
        (0..tree.n_features).collect()
    } else {
        sample(rng, tree.n_features, k).into_vec()
    };
    let Some((feature, threshold, score)) = best_split(x, y, &rows, &features, config.min_leaf) else {
        return id;
    };
    if score >= gini(pos, rows.len()) {
        return id;
    }
    let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i][feature] <= threshold);
    let left = grow(tree, x, y, l, depth + 1, config, k, rng);
    let right = grow(tree, x, y, r, depth + 1, config, k, rng);
    tree.nodes[id] = Node::Split {
        feature,
        threshold,
        left,
        right,
    };
    id
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
    pub config: ForestConfig,
}

/// Seed of tree `i`, derived from the forest seed.
pub fn tree_seed(forest_seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(forest_seed);
    rng.set_stream(i as u64 + 1);
    rng.gen()
}

/// Trains `n_trees` independent trees (in parallel; each has its own seed).
pub fn train_forest(x: &[Vec<f64>], y: &[bool], config: &ForestConfig) -> Result<RandomForest, ForestError> {
    validate(x, y)?;
    if config.n_trees == 0 {
        return Err(ForestError::Config("n_trees must be positive".into()));
    }
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|i| train_tree(x, y, config, &mut ChaCha8Rng::seed_from_u64(tree_seed(config.seed, i))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RandomForest {
        trees,
        config: config.clone(),
    })
}

/// Mean leaf probability over trees.
pub fn forest_predict(forest: &RandomForest, features: &[f64]) -> Result<f64, ForestError> {
    let expected = forest.trees.first().map_or(0, |t| t.n_features);
    if features.len() != expected {
        return Err(ForestError::Dimension {
            row: 0,
            got: features.len(),
            expected,
        });
    }
    Ok(forest.trees.iter().map(|t| t.predict(features)).sum::<f64>() / forest.trees.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_forest(ps: &[f64]) -> RandomForest {
        RandomForest {
            trees: ps
                .iter()
                .map(|&p| DecisionTree {
                    nodes: vec![Node::Leaf { p }],
                    n_features: 1,
                })
                .collect(),
            config: ForestConfig::default(),
        }
    }

    #[test]
    fn forest_mean_of_leaves() {
        assert_eq!(forest_predict(&leaf_forest(&[1.0, 1.0]), &[0.0]).unwrap(), 1.0);
        assert_eq!(forest_predict(&leaf_forest(&[0.0, 1.0]), &[0.0]).unwrap(), 0.5);
        assert!(forest_predict(&leaf_forest(&[0.0]), &[0.0, 1.0]).is_err());
    }

    #[test]
    fn pure_data_gives_single_leaf() {
        let x = vec![vec![1.0], vec![2.0], vec![3.0]];
        let t = train_tree(&x, &[true; 3], &ForestConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.nodes, vec![Node::Leaf { p: 1.0 }]);
    }

    #[test]
    fn identical_rows_give_single_leaf() {
        let x = vec![vec![1.0, 2.0]; 6];
        let y = [true, false, true, false, true, false];
        let t = train_tree(&x, &y, &ForestConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.nodes.len(), 1);
    }

    #[test]
    fn input_validation() {
        let cfg = ForestConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(train_tree(&[vec![1.0]], &[true], &cfg, &mut rng), Err(ForestError::TooSmall { .. })));
        assert!(train_tree(&[vec![1.0], vec![1.0, 2.0]], &[true, false], &cfg, &mut rng).is_err());
        assert!(train_tree(&[vec![1.0], vec![2.0]], &[true], &cfg, &mut rng).is_err());
    }
}
