use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ProbabilityVector;

const MIN_HESSIAN: f64 = 1e-16;

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtParams {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// Minimum rows on each side of a split.
    pub min_samples: usize,
    /// L2 penalty on leaf values.
    pub lambda: f64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_rounds: 50,
            max_depth: 3,
            learning_rate: 0.1,
            min_samples: 1,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        /// Rows with `x[feature] <= threshold` go left.
        left: usize,
        right: usize,
        gain: f64,
    },
}

/// Regression tree stored as a node vector with the root at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: ArrayView1<f64>) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if row[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub n_classes: usize,
    pub n_features: usize,
    pub learning_rate: f64,
    pub n_rounds: usize,
    /// `trees[round][class]`.
    pub trees: Vec<Vec<Tree>>,
    pub feature_gains: Vec<f64>,
    /// Mean training log-loss before the first round and after each round.
    pub train_log_loss: Vec<f64>,
    pub class_names: Vec<String>,
    /// Column names in feature order; empty if the caller never set them.
    #[serde(default)]
    pub feature_names: Vec<String>,
}

impl GbdtModel {
    pub fn raw_scores(&self, row: ArrayView1<f64>) -> Result<Vec<f64>> {
        if row.len() != self.n_features {
            return Err(Error::invalid(format!(
                "row has {} features, model expects {}",
                row.len(),
                self.n_features
            )));
        }
        let mut s = vec![0.0; self.n_classes];
        for round in &self.trees {
            for (c, t) in round.iter().enumerate() {
                s[c] += t.predict(row);
            }
        }
        Ok(s)
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<ProbabilityVector> {
        let s = self.raw_scores(ArrayView1::from(row))?;
        ProbabilityVector::from_logits(&s, self.class_names.clone())
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_classes {
            return Err(Error::invalid(format!("{} names for {} classes", names.len(), self.n_classes)));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_features {
            return Err(Error::invalid(format!("{} names for {} features", names.len(), self.n_features)));
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn gbdt_predict_proba(model: &GbdtModel, row: &[f64]) -> Result<ProbabilityVector> {
    model.predict_proba(row)
}

/// Per-feature split gain summed over every tree.
pub fn gain_importance(model: &GbdtModel) -> Vec<f64> {
    model.feature_gains.clone()
}

fn softmax_in_place(s: &mut [f64]) {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in s.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in s.iter_mut() {
        *v /= z;
    }
}

fn mean_log_loss(scores: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in scores.rows().into_iter().zip(labels) {
        let mut p = row.to_vec();
        softmax_in_place(&mut p);
        total -= p[y].max(1e-300).ln();
    }
    total / labels.len() as f64
}

struct Grower<'a> {
    x: &'a Array2<f64>,
    g: &'a [f64],
    h: &'a [f64],
    params: &'a GbdtParams,
    nodes: Vec<Node>,
    gains: &'a mut [f64],
}

impl Grower<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    fn leaf(&mut self, rows: &[usize]) -> usize {
        let g: f64 = rows.iter().map(|&r| self.g[r]).sum();
        let h: f64 = rows.iter().map(|&r| self.h[r]).sum();
        self.nodes.push(Node::Leaf {
            value: -self.params.learning_rate * g / (h + self.params.lambda),
        });
        self.nodes.len() - 1
    }

    /// Exact greedy search over midpoints between consecutive distinct values.
    fn best_split(&self, rows: &[usize]) -> Option<(usize, f64, f64)> {
        let g_all: f64 = rows.iter().map(|&r| self.g[r]).sum();
        let h_all: f64 = rows.iter().map(|&r| self.h[r]).sum();
        let parent = self.score(g_all, h_all);
        let min = self.params.min_samples.max(1);
        let mut best: Option<(usize, f64, f64)> = None;
        let mut order = rows.to_vec();
        for f in 0..self.x.ncols() {
            order.sort_by(|&a, &b| self.x[[a, f]].total_cmp(&self.x[[b, f]]).then(a.cmp(&b)));
            let (mut gl, mut hl) = (0.0, 0.0);
            for i in 0..order.len() - 1 {
                gl += self.g[order[i]];
                hl += self.h[order[i]];
                let (lo, hi) = (self.x[[order[i], f]], self.x[[order[i + 1], f]]);
                if lo == hi || i + 1 < min || order.len() - i - 1 < min {
                    continue;
                }
                let gain = 0.5 * (self.score(gl, hl) + self.score(g_all - gl, h_all - hl) - parent);
                if gain > 1e-12 && best.is_none_or(|(_, _, bg)| gain > bg) {
                    best = Some((f, lo + (hi - lo) / 2.0, gain));
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        if depth >= self.params.max_depth || rows.len() < 2 {
            return self.leaf(rows);
        }
        let Some((feature, threshold, gain)) = self.best_split(rows) else {
            return self.leaf(rows);
        };
        self.gains[feature] += gain;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[[i, feature]] <= threshold);
        let left = self.grow(&l, depth + 1);
        let right = self.grow(&r, depth + 1);
        self.nodes[id] = Node::Split { feature, threshold, left, right, gain };
        id
    }
}

/// Multi-class boosting on the softmax log-loss: each round fits one
/// depth-limited Newton tree per class to the current gradients.
pub fn gbdt_fit(features: &Array2<f64>, labels: &[usize], params: &GbdtParams) -> Result<GbdtModel> {
    let (n, d) = features.dim();
    if n != labels.len() {
        return Err(Error::invalid(format!("{n} rows but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::invalid("no training rows"));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features must be finite"));
    }
    if params.learning_rate.is_nan() || params.learning_rate <= 0.0 || params.lambda < 0.0 {
        return Err(Error::invalid("learning_rate must be positive and lambda non-negative"));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid("GBDT needs at least two classes in the labels"));
    }
    let mut scores = Array2::<f64>::zeros((n, n_classes));
    let mut gains = vec![0.0; d];
    let mut trees = Vec::with_capacity(params.n_rounds);
    let mut history = vec![mean_log_loss(&scores, labels)];
    let all_rows: Vec<usize> = (0..n).collect();
    for _ in 0..params.n_rounds {
        let mut probs = scores.clone();
        for mut row in probs.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous"));
        }
        let mut round = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            let g: Vec<f64> = (0..n).map(|i| probs[[i, c]] - f64::from(u8::from(labels[i] == c))).collect();
            let h: Vec<f64> = (0..n).map(|i| (probs[[i, c]] * (1.0 - probs[[i, c]])).max(MIN_HESSIAN)).collect();
            let mut grower = Grower {
                x: features,
                g: &g,
                h: &h,
                params,
                nodes: Vec::new(),
                gains: &mut gains,
            };
            grower.grow(&all_rows, 0);
            round.push(Tree { nodes: grower.nodes });
        }
        for (i, row) in features.rows().into_iter().enumerate() {
            for (c, t) in round.iter().enumerate() {
                scores[[i, c]] += t.predict(row);
            }
        }
        history.push(mean_log_loss(&scores, labels));
        trees.push(round);
    }
    Ok(GbdtModel {
        n_classes,
        n_features: d,
        learning_rate: params.learning_rate,
        n_rounds: params.n_rounds,
        trees,
        feature_gains: gains,
        train_log_loss: history,
        class_names: (0..n_classes).map(|i| i.to_string()).collect(),
        feature_names: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// 200 points in the unit square labelled by `x + y > 1`, plus a constant
    /// third column.
    fn separable(seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((200, 3));
        let mut y = Vec::new();
        for i in 0..200 {
            let (a, b): (f64, f64) = (rng.gen(), rng.gen());
            x[[i, 0]] = a;
            x[[i, 1]] = b;
            x[[i, 2]] = 7.0;
            y.push(usize::from(a + b > 1.0));
        }
        (x, y)
    }

    fn train_accuracy(m: &GbdtModel, x: &Array2<f64>, y: &[usize]) -> f64 {
        let hits = x
            .rows()
            .into_iter()
            .zip(y)
            .filter(|(r, &l)| m.predict_proba(&r.to_vec()).unwrap().argmax() == l)
            .count();
        hits as f64 / y.len() as f64
    }

    #[test]
    fn separable_set_is_learned() {
        let (x, y) = separable(1);
        let m = gbdt_fit(&x, &y, &GbdtParams::default()).unwrap();
        assert!(train_accuracy(&m, &x, &y) >= 0.95);
        assert!(m.predict_proba(&[0.95, 0.95, 7.0]).unwrap().probs()[1] >= 0.9);
        assert!(m.predict_proba(&[0.05, 0.05, 7.0]).unwrap().probs()[0] >= 0.9);
        assert_eq!(gain_importance(&m)[2], 0.0);
        assert!(m.trees.iter().flatten().all(|t| t.depth() <= 3));
    }

    #[test]
    fn log_loss_never_increases() {
        let (x, y) = separable(2);
        let m = gbdt_fit(&x, &y, &GbdtParams::default()).unwrap();
        for w in m.train_log_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{w:?}");
        }
    }

    #[test]
    fn zero_rounds_give_uniform_probabilities() {
        let (x, y) = separable(3);
        let m = gbdt_fit(&x, &y, &GbdtParams { n_rounds: 0, ..Default::default() }).unwrap();
        assert_eq!(m.predict_proba(&[0.3, 0.2, 7.0]).unwrap().probs(), &[0.5, 0.5]);
    }

    #[test]
    fn informative_feature_outranks_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = Array2::zeros((150, 2));
        let mut y = Vec::new();
        for i in 0..150 {
            let label = i % 3;
            x[[i, 0]] = label as f64 + rng.gen_range(-0.2..0.2);
            x[[i, 1]] = rng.gen_range(0.0..1.0);
            y.push(label);
        }
        let m = gbdt_fit(&x, &y, &GbdtParams::default()).unwrap();
        let gains = gain_importance(&m);
        assert!(gains[0] > gains[1]);
        let split_total: f64 = m
            .trees
            .iter()
            .flatten()
            .flat_map(|t| &t.nodes)
            .map(|n| match n {
                Node::Split { gain, .. } => *gain,
                Node::Leaf { .. } => 0.0,
            })
            .sum();
        assert!((gains.iter().sum::<f64>() - split_total).abs() < 1e-9 * split_total.max(1.0));
        assert!(gains.iter().all(|&g| g >= 0.0));
    }

    #[test]
    fn errors_and_determinism() {
        let (x, y) = separable(5);
        assert!(gbdt_fit(&x, &vec![0; 200], &GbdtParams::default()).is_err());
        let a = gbdt_fit(&x, &y, &GbdtParams { n_rounds: 5, ..Default::default() }).unwrap();
        let b = gbdt_fit(&x, &y, &GbdtParams { n_rounds: 5, ..Default::default() }).unwrap();
        assert_eq!(a, b);
        assert!(a.predict_proba(&[0.1, 0.2]).is_err());
        assert_eq!(GbdtModel::from_json(&a.to_json().unwrap()).unwrap(), a);
    }
}
