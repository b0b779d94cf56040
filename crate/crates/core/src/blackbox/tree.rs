use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{argmax, check_width, tensor, BlackBox};
use crate::error::{Error, Result};
use crate::nn::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_samples_split: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: 3,
            min_samples_split: 2,
        }
    }
}

/// Node of the flat table. Leaves have `feature == None`; internal nodes send
/// rows with `x[feature] <= threshold` to `left`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: Option<usize>,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    /// Training rows per class that reached this node.
    pub class_counts: Vec<usize>,
}

impl TreeNode {
    pub fn label(&self) -> usize {
        let counts: Vec<f64> = self.class_counts.iter().map(|&c| c as f64).collect();
        argmax(&counts)
    }

    pub fn samples(&self) -> usize {
        self.class_counts.iter().sum()
    }
}

/// CART classifier with Gini impurity.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
    num_features: usize,
    num_classes: usize,
}

struct Builder<'a> {
    x: &'a Matrix,
    labels: &'a [usize],
    num_classes: usize,
    config: &'a TreeConfig,
    nodes: Vec<TreeNode>,
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

impl Builder<'_> {
    fn counts(&self, rows: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        rows.iter().for_each(|&r| c[self.labels[r]] += 1);
        c
    }

    /// Best (feature, threshold) by Gini decrease. Features and thresholds are
    /// scanned in ascending order and only a strictly larger decrease replaces
    /// the incumbent.
    fn best_split(&self, rows: &[usize], parent: f64) -> Option<(usize, f64)> {
        let n = rows.len();
        let mut best: Option<(usize, f64, f64)> = None;
        let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(n);
        for f in 0..self.x.cols() {
            sorted.clear();
            sorted.extend(rows.iter().map(|&r| (self.x.get(r, f), self.labels[r])));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = vec![0usize; self.num_classes];
            let mut right = self.counts(rows);
            for i in 0..n - 1 {
                let (v, y) = sorted[i];
                left[y] += 1;
                right[y] -= 1;
                let next = sorted[i + 1].0;
                if next == v {
                    continue;
                }
                let nl = i + 1;
                let nr = n - nl;
                let child = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
                let decrease = parent - child;
                if best.is_none_or(|(_, _, d)| decrease > d) {
                    best = Some((f, v + (next - v) / 2.0, decrease));
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let counts = self.counts(&rows);
        let impurity = gini(&counts, rows.len());
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            feature: None,
            threshold: 0.0,
            left: 0,
            right: 0,
            class_counts: counts,
        });
        if depth >= self.config.max_depth || rows.len() < self.config.min_samples_split || impurity == 0.0 {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&rows, impurity) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x.get(i, feature) <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        let node = &mut self.nodes[id];
        node.feature = Some(feature);
        node.threshold = threshold;
        node.left = left;
        node.right = right;
        id
    }
}

impl DecisionTree {
    pub fn train(x: &Matrix, labels: &[usize], num_classes: usize, config: &TreeConfig) -> Result<Self> {
        if config.max_depth < 1 {
            return Err(Error::Config("decision tree max_depth must be at least 1".into()));
        }
        if config.min_samples_split < 2 {
            return Err(Error::Config("decision tree min_samples_split must be at least 2".into()));
        }
        if x.rows() != labels.len() || x.rows() == 0 {
            return Err(Error::Dimension(format!(
                "{} rows but {} labels",
                x.rows(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y >= num_classes) {
            return Err(Error::Config(format!("label outside {num_classes} classes")));
        }
        let mut b = Builder {
            x,
            labels,
            num_classes,
            config,
            nodes: Vec::new(),
        };
        b.grow((0..x.rows()).collect(), 0);
        Ok(DecisionTree {
            nodes: b.nodes,
            num_features: x.cols(),
            num_classes,
        })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i].feature {
                None => 0,
                Some(_) => 1 + walk(nodes, nodes[i].left).max(walk(nodes, nodes[i].right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Leaf reached by one encoded row.
    pub fn leaf(&self, row: &[f64]) -> &TreeNode {
        let mut node = &self.nodes[0];
        while let Some(f) = node.feature {
            node = &self.nodes[if row[f] <= node.threshold { node.left } else { node.right }];
        }
        node
    }

    /// Flat node table: one row per node with columns
    /// `[feature or -1, threshold, left, right, count_0, .., count_{K-1}]`.
    pub fn to_tensors(&self) -> BTreeMap<String, Matrix> {
        let width = 4 + self.num_classes;
        let mut table = Matrix::zeros(self.nodes.len(), width);
        for (i, n) in self.nodes.iter().enumerate() {
            let row = table.row_mut(i);
            row[0] = n.feature.map_or(-1.0, |f| f as f64);
            row[1] = n.threshold;
            row[2] = n.left as f64;
            row[3] = n.right as f64;
            for (slot, &c) in row[4..].iter_mut().zip(&n.class_counts) {
                *slot = c as f64;
            }
        }
        BTreeMap::from([
            ("nodes".to_string(), table),
            ("num_features".to_string(), Matrix::row_vector(vec![self.num_features as f64])),
        ])
    }

    pub fn from_tensors(tensors: &BTreeMap<String, Matrix>) -> Result<Self> {
        let table = tensor(tensors, "nodes")?;
        let num_features = tensor(tensors, "num_features")?.data().first().copied().unwrap_or(-1.0);
        let bad = || Error::Format("malformed decision tree node table".into());
        if table.rows() == 0 || table.cols() < 5 || num_features < 1.0 {
            return Err(bad());
        }
        let n = table.rows();
        let as_index = |v: f64, bound: usize| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < bound {
                Ok(v as usize)
            } else {
                Err(bad())
            }
        };
        let mut nodes = Vec::with_capacity(n);
        for (i, row) in table.iter_rows().enumerate() {
            let feature = if row[0] == -1.0 {
                None
            } else {
                Some(as_index(row[0], num_features as usize)?)
            };
            let (left, right) = match feature {
                // Children always follow their parent in the table, so a
                // valid table cannot loop.
                Some(_) => {
                    let (l, r) = (as_index(row[2], n)?, as_index(row[3], n)?);
                    if l <= i || r <= i {
                        return Err(bad());
                    }
                    (l, r)
                }
                None => (0, 0),
            };
            let class_counts = row[4..]
                .iter()
                .map(|&c| as_index(c, usize::MAX))
                .collect::<Result<Vec<_>>>()?;
            nodes.push(TreeNode {
                feature,
                threshold: row[1],
                left,
                right,
                class_counts,
            });
        }
        Ok(DecisionTree {
            nodes,
            num_features: num_features as usize,
            num_classes: table.cols() - 4,
        })
    }
}

impl BlackBox for DecisionTree {
    fn predict_labels(&self, batch: &Matrix) -> Result<Vec<usize>> {
        check_width(batch, self.num_features)?;
        Ok(batch.iter_rows().map(|r| self.leaf(r).label()).collect())
    }
}
