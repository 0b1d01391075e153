//! Random forest of CART trees with Gini splits.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 100, max_depth: 8, min_samples_split: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(bool),
    Split { feature: usize, threshold: f64, left: Box<Node>, right: Box<Node> },
}

impl Node {
    fn predict(&self, x: &[f64]) -> bool {
        match self {
            Node::Leaf(y) => *y,
            Node::Split { feature, threshold, left, right } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    root: Node,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a, R> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    n_features: usize,
    params: ForestParams,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn leaf(&self, idx: &[usize]) -> Node {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        // ties go to non-member
        Node::Leaf(2 * pos > idx.len())
    }

    fn best_split(&mut self, idx: &[usize]) -> Option<(usize, f64, f64)> {
        let d = self.x[0].len();
        let mut features: Vec<usize> = (0..d).collect();
        // partial Fisher-Yates for the candidate subset
        let m = self.n_features.min(d);
        for i in 0..m {
            let j = self.rng.random_range(i..d);
            features.swap(i, j);
        }
        let n = idx.len();
        let total_pos = idx.iter().filter(|&&i| self.y[i]).count();
        let mut best: Option<(usize, f64, f64)> = None;
        for &f in &features[..m] {
            let mut sorted: Vec<(f64, bool)> = idx.iter().map(|&i| (self.x[i][f], self.y[i])).collect();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0;
            for k in 1..n {
                left_pos += sorted[k - 1].1 as usize;
                if sorted[k].0 == sorted[k - 1].0 {
                    continue;
                }
                let impurity =
                    (k as f64 * gini(left_pos, k) + (n - k) as f64 * gini(total_pos - left_pos, n - k)) / n as f64;
                if best.is_none_or(|b| impurity < b.2) {
                    best = Some((f, 0.5 * (sorted[k - 1].0 + sorted[k].0), impurity));
                }
            }
        }
        best
    }

    fn build(&mut self, idx: &[usize], depth: usize) -> Node {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        if pos == 0 || pos == idx.len() || depth >= self.params.max_depth || idx.len() < self.params.min_samples_split {
            return self.leaf(idx);
        }
        let Some((feature, threshold, impurity)) = self.best_split(idx) else {
            return self.leaf(idx);
        };
        if impurity >= gini(pos, idx.len()) {
            return self.leaf(idx);
        }
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        Node::Split {
            feature,
            threshold,
            left: Box::new(self.build(&l, depth + 1)),
            right: Box::new(self.build(&r, depth + 1)),
        }
    }
}

impl DecisionTree {
    fn fit<R: Rng>(
        x: &[Vec<f64>],
        y: &[bool],
        idx: &[usize],
        n_features: usize,
        params: ForestParams,
        rng: &mut R,
    ) -> Self {
        let mut b = Builder { x, y, n_features, params, rng };
        Self { root: b.build(idx, 0) }
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.root.predict(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
}

impl RandomForest {
    /// Bootstrap-sampled trees, each split drawn from `ceil(sqrt(d))` features.
    pub fn fit(x: &[Vec<f64>], y: &[bool], params: ForestParams, seed: u64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Input("training set is empty or labels do not match rows".into()));
        }
        let d = x[0].len();
        if d == 0 || x.iter().any(|r| r.len() != d) {
            return Err(Error::Input("feature rows must share a positive dimension".into()));
        }
        if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
            return Err(Error::Input("training labels contain a single class".into()));
        }
        let n_features = (d as f64).sqrt().ceil() as usize;
        let stream = SeedStream::new(seed).child("forest");
        let trees = (0..params.n_trees)
            .map(|t| {
                let mut rng = stream.index(t as u64).rng();
                let idx: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
                DecisionTree::fit(x, y, &idx, n_features, params, &mut rng)
            })
            .collect();
        Ok(Self { trees })
    }

    /// Majority vote; ties go to non-member.
    pub fn predict(&self, x: &[f64]) -> bool {
        let votes = self.trees.iter().filter(|t| t.predict(x)).count();
        2 * votes > self.trees.len()
    }
}
