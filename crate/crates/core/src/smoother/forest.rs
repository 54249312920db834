//! Random forest of axis-aligned Gini trees with leaf positive-fractions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestHyperparams {
    pub num_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub features_per_split: usize,
}

impl Default for ForestHyperparams {
    fn default() -> Self {
        // features_per_split = ceil(sqrt(15)) for the 15 lag statistics.
        ForestHyperparams { num_trees: 100, max_depth: 12, min_leaf: 5, features_per_split: 4 }
    }
}

/// Node of a fitted tree; children reference indices into the tree's node
/// array, node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForestModel {
    pub trees: Vec<Vec<TreeNode>>,
    pub hyperparameters: ForestHyperparams,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ForestFile {
    format_version: u32,
    n_features: usize,
    model: RandomForestModel,
}

impl RandomForestModel {
    /// Mean of leaf positive-fractions across trees.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let mut sum = 0.0;
        for tree in &self.trees {
            sum += eval_tree(tree, x)?;
        }
        Ok(sum / self.trees.len() as f64)
    }

    pub fn write_json(&self, path: &Path, n_features: usize) -> Result<()> {
        let file = ForestFile { format_version: 1, n_features, model: self.clone() };
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        serde_json::to_writer(&mut out, &file).map_err(|e| Error::format(path, e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<(RandomForestModel, usize)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let parsed: ForestFile =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))?;
        if parsed.format_version != 1 {
            return Err(Error::format(path, format!("unsupported forest format version {}", parsed.format_version)));
        }
        for (t, tree) in parsed.model.trees.iter().enumerate() {
            for node in tree {
                if let TreeNode::Leaf { value } = node {
                    if !(0.0..=1.0).contains(value) {
                        return Err(Error::format(path, format!("tree {t} has leaf value {value} outside [0,1]")));
                    }
                }
            }
        }
        Ok((parsed.model, parsed.n_features))
    }
}

fn eval_tree(tree: &[TreeNode], x: &[f64]) -> Result<f64> {
    let mut at = 0usize;
    loop {
        match &tree[at] {
            TreeNode::Leaf { value } => return Ok(*value),
            TreeNode::Split { feature, threshold, left, right } => {
                let v = *x.get(*feature).ok_or_else(|| {
                    Error::Shape(format!("feature vector of length {} lacks index {feature}", x.len()))
                })?;
                at = if v <= *threshold { *left } else { *right };
            }
        }
    }
}

/// Bootstrap resample of `0..n`, same size, with replacement; deterministic
/// per `(seed, tree_index)`.
fn bootstrap_indices(seed: u64, tree_index: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, tree_index as u64));
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Fit a forest on binary labels (1 = positive). Each tree trains on a
/// seeded bootstrap resample; at each node `features_per_split` candidate
/// features are sampled without replacement and the split with the largest
/// Gini impurity decrease wins. Recursion stops at `max_depth`, when a
/// child would fall under `min_leaf` samples, or at purity.
pub fn train_forest(
    features: &[Vec<f64>],
    labels: &[u8],
    hyperparameters: &ForestHyperparams,
    seed: u64,
) -> Result<RandomForestModel> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!("{} feature rows vs {} labels", features.len(), labels.len())));
    }
    if features.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let n_features = features[0].len();
    if features.iter().any(|row| row.len() != n_features) {
        return Err(Error::Shape("feature rows have inconsistent widths".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Class(format!(
            "forest training needs both classes, got {positives} positives of {}",
            labels.len()
        )));
    }
    if hyperparameters.num_trees == 0 {
        return Err(Error::Config("forest needs at least one tree".into()));
    }

    let trees: Vec<Vec<TreeNode>> = (0..hyperparameters.num_trees)
        .into_par_iter()
        .map(|t| {
            let sample = bootstrap_indices(seed, t, features.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, (t as u64) | 1 << 32));
            let mut nodes = Vec::new();
            grow(features, labels, hyperparameters, &mut rng, sample, 0, &mut nodes);
            nodes
        })
        .collect();

    Ok(RandomForestModel { trees, hyperparameters: *hyperparameters, seed })
}

fn grow(
    xs: &[Vec<f64>],
    ys: &[u8],
    hp: &ForestHyperparams,
    rng: &mut ChaCha8Rng,
    idx: Vec<usize>,
    depth: usize,
    nodes: &mut Vec<TreeNode>,
) -> usize {
    let n = idx.len();
    let positives = idx.iter().filter(|&&i| ys[i] == 1).count();
    let make_leaf = |nodes: &mut Vec<TreeNode>| {
        nodes.push(TreeNode::Leaf { value: positives as f64 / n as f64 });
        nodes.len() - 1
    };

    if depth >= hp.max_depth || positives == 0 || positives == n || n < 2 * hp.min_leaf {
        return make_leaf(nodes);
    }

    let candidates = sample_features(rng, xs[0].len(), hp.features_per_split);
    let Some((feature, threshold)) = best_split(xs, ys, &idx, &candidates, hp.min_leaf) else {
        return make_leaf(nodes);
    };

    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
        idx.into_iter().partition(|&i| xs[i][feature] <= threshold);

    let at = nodes.len();
    nodes.push(TreeNode::Split { feature, threshold, left: 0, right: 0 });
    let left = grow(xs, ys, hp, rng, left_idx, depth + 1, nodes);
    let right = grow(xs, ys, hp, rng, right_idx, depth + 1, nodes);
    nodes[at] = TreeNode::Split { feature, threshold, left, right };
    at
}

/// Partial Fisher-Yates draw of `k` distinct feature indices.
fn sample_features(rng: &mut ChaCha8Rng, n_features: usize, k: usize) -> Vec<usize> {
    let k = k.min(n_features).max(1);
    let mut pool: Vec<usize> = (0..n_features).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n_features);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Best (feature, threshold) by Gini impurity decrease over the candidate
/// features; thresholds sit at midpoints between distinct consecutive
/// values. Ties keep the first candidate encountered.
fn best_split(
    xs: &[Vec<f64>],
    ys: &[u8],
    idx: &[usize],
    candidates: &[usize],
    min_leaf: usize,
) -> Option<(usize, f64)> {
    let n = idx.len() as f64;
    let pos = idx.iter().filter(|&&i| ys[i] == 1).count() as f64;
    let gini = |p: f64, m: f64| -> f64 {
        if m == 0.0 {
            0.0
        } else {
            let q = p / m;
            1.0 - q * q - (1.0 - q) * (1.0 - q)
        }
    };
    let parent = gini(pos, n);

    let mut best: Option<(f64, usize, f64)> = None; // (decrease, feature, threshold)
    let mut column: Vec<(f64, u8)> = Vec::with_capacity(idx.len());
    for &f in candidates {
        column.clear();
        column.extend(idx.iter().map(|&i| (xs[i][f], ys[i])));
        column.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

        let mut pos_left = 0.0;
        for split_at in 1..column.len() {
            pos_left += f64::from(column[split_at - 1].1);
            if column[split_at].0 == column[split_at - 1].0 {
                continue;
            }
            let nl = split_at as f64;
            let nr = n - nl;
            if (nl as usize) < min_leaf || (nr as usize) < min_leaf {
                continue;
            }
            let decrease = parent - (nl / n) * gini(pos_left, nl) - (nr / n) * gini(pos - pos_left, nr);
            if decrease > 1e-12 && best.map_or(true, |(d, _, _)| decrease > d) {
                let threshold = 0.5 * (column[split_at - 1].0 + column[split_at].0);
                best = Some((decrease, f, threshold));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{roc_auc, ScoredLabelSet};
    use rand::Rng;

    fn auc_of(scores: &[f64], labels: &[u8]) -> f64 {
        let pairs = scores.iter().zip(labels).map(|(&s, &l)| (s, l)).collect();
        roc_auc(&ScoredLabelSet::new(pairs).unwrap()).unwrap()
    }

    #[test]
    fn aligned_single_feature_separates_with_one_stump() {
        let features: Vec<Vec<f64>> = (0..40).map(|i| vec![f64::from(i % 2)]).collect();
        let labels: Vec<u8> = (0..40).map(|i| i % 2).collect();
        let hp = ForestHyperparams { num_trees: 1, max_depth: 1, min_leaf: 1, features_per_split: 1 };
        let model = train_forest(&features, &labels, &hp, 3).unwrap();
        let scores: Vec<f64> = features.iter().map(|x| model.predict(x).unwrap()).collect();
        assert_eq!(auc_of(&scores, &labels), 1.0);
    }

    #[test]
    fn random_labels_give_chance_out_of_bag_auc() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 2000;
        let features: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.gen::<f64>()).collect()).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let hp = ForestHyperparams { num_trees: 40, max_depth: 8, min_leaf: 5, features_per_split: 2 };
        let seed = 4;
        let model = train_forest(&features, &labels, &hp, seed).unwrap();

        // Out-of-bag scores: average only the trees whose bootstrap did not
        // contain the sample.
        let mut in_bag = vec![vec![false; n]; hp.num_trees];
        for (t, flags) in in_bag.iter_mut().enumerate() {
            for i in bootstrap_indices(seed, t, n) {
                flags[i] = true;
            }
        }
        let mut oob_scores = Vec::new();
        let mut oob_labels = Vec::new();
        for i in 0..n {
            let (mut sum, mut count) = (0.0, 0usize);
            for (t, tree) in model.trees.iter().enumerate() {
                if !in_bag[t][i] {
                    sum += eval_tree(tree, &features[i]).unwrap();
                    count += 1;
                }
            }
            if count > 0 {
                oob_scores.push(sum / count as f64);
                oob_labels.push(labels[i]);
            }
        }
        let auc = auc_of(&oob_scores, &oob_labels);
        assert!((auc - 0.5).abs() < 0.05, "out-of-bag AUC {auc}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let features: Vec<Vec<f64>> =
            (0..200).map(|_| (0..4).map(|_| rng.gen::<f64>()).collect()).collect();
        let labels: Vec<u8> = (0..200).map(|i| u8::from(i % 3 == 0)).collect();
        let hp = ForestHyperparams { num_trees: 10, max_depth: 6, min_leaf: 2, features_per_split: 2 };
        let a = train_forest(&features, &labels, &hp, 99).unwrap();
        let b = train_forest(&features, &labels, &hp, 99).unwrap();
        assert_eq!(a, b);
        let c = train_forest(&features, &labels, &hp, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_class_is_class_error() {
        let features: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let labels = vec![1u8; 10];
        let err = train_forest(&features, &labels, &ForestHyperparams::default(), 1).unwrap_err();
        assert!(matches!(err, Error::Class(_)));
    }

    #[test]
    fn predict_averages_leaf_values() {
        let model = RandomForestModel {
            trees: vec![vec![TreeNode::Leaf { value: 0.2 }], vec![TreeNode::Leaf { value: 0.6 }]],
            hyperparameters: ForestHyperparams::default(),
            seed: 0,
        };
        assert_eq!(model.predict(&[0.0; 17]).unwrap(), 0.4);

        let ones = RandomForestModel {
            trees: vec![vec![TreeNode::Leaf { value: 1.0 }]; 5],
            hyperparameters: ForestHyperparams::default(),
            seed: 0,
        };
        assert_eq!(ones.predict(&[0.0; 17]).unwrap(), 1.0);
    }

    #[test]
    fn single_tree_prediction_matches_manual_traversal() {
        let tree = vec![
            TreeNode::Split { feature: 1, threshold: 0.5, left: 1, right: 2 },
            TreeNode::Leaf { value: 0.1 },
            TreeNode::Split { feature: 0, threshold: -1.0, left: 3, right: 4 },
            TreeNode::Leaf { value: 0.7 },
            TreeNode::Leaf { value: 0.9 },
        ];
        let model = RandomForestModel {
            trees: vec![tree],
            hyperparameters: ForestHyperparams::default(),
            seed: 0,
        };
        // x[1] = 0.4 <= 0.5 -> leaf 0.1
        assert_eq!(model.predict(&[0.0, 0.4]).unwrap(), 0.1);
        // x[1] = 0.6 > 0.5, x[0] = -2 <= -1 -> leaf 0.7
        assert_eq!(model.predict(&[-2.0, 0.6]).unwrap(), 0.7);
        // x[1] = 0.6 > 0.5, x[0] = 0 > -1 -> leaf 0.9
        assert_eq!(model.predict(&[0.0, 0.6]).unwrap(), 0.9);
    }

    #[test]
    fn adding_a_tree_moves_the_score_by_at_most_its_weight() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let features: Vec<Vec<f64>> =
            (0..300).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
        let labels: Vec<u8> = features.iter().map(|x| u8::from(x[0] + x[1] > 1.0)).collect();
        let hp = ForestHyperparams { num_trees: 12, max_depth: 5, min_leaf: 3, features_per_split: 2 };
        let model = train_forest(&features, &labels, &hp, 55).unwrap();
        let x = &features[0];
        let mut prefix_mean = 0.0;
        for (k, tree) in model.trees.iter().enumerate() {
            let leaf = eval_tree(tree, x).unwrap();
            let next_mean = (prefix_mean * k as f64 + leaf) / (k as f64 + 1.0);
            if k > 0 {
                assert!(
                    (next_mean - prefix_mean).abs() <= 1.0 / (k as f64 + 1.0) + 1e-12,
                    "tree {k} moved the score too far"
                );
            }
            prefix_mean = next_mean;
        }
    }

    #[test]
    fn forest_scores_stay_in_unit_interval() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let features: Vec<Vec<f64>> =
            (0..400).map(|_| (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let labels: Vec<u8> = (0..400).map(|_| u8::from(rng.gen_bool(0.2))).collect();
        let model = train_forest(&features, &labels, &ForestHyperparams::default(), 7).unwrap();
        for x in &features {
            let s = model.predict(x).unwrap();
            assert!((0.0..=1.0).contains(&s), "score {s}");
        }
    }

    #[test]
    fn forest_json_round_trip() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let features: Vec<Vec<f64>> =
            (0..100).map(|_| (0..4).map(|_| rng.gen::<f64>()).collect()).collect();
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i % 4 == 0)).collect();
        let hp = ForestHyperparams { num_trees: 5, max_depth: 4, min_leaf: 2, features_per_split: 2 };
        let model = train_forest(&features, &labels, &hp, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest.json");
        model.write_json(&path, 4).unwrap();
        let (back, n_features) = RandomForestModel::read_json(&path).unwrap();
        assert_eq!(model, back);
        assert_eq!(n_features, 4);
    }
}
