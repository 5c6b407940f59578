//! Many-class prediction through a tree of at most `c_max`-way sub-tasks.
//!
//! Classes are split recursively into near-equal groups. Each node is a
//! small classification task over its children (or, at a leaf, over its
//! member classes) solved by the ICL transformer on the shared row
//! embeddings; a class probability is the product of node probabilities
//! along its root-to-leaf path.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::icl::ClassProbabilities;
use crate::model::{Batching, TabIcl};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    /// Original class ids, ascending.
    pub classes: Vec<usize>,
    /// Child node indices; empty at a leaf.
    pub children: Vec<usize>,
    /// Root has level 1.
    pub level: usize,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Number of outcomes of this node's sub-task.
    pub fn arity(&self) -> usize {
        if self.is_leaf() {
            self.classes.len()
        } else {
            self.children.len()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassTree {
    pub k: usize,
    pub c_max: usize,
    /// Node 0 is the root.
    pub nodes: Vec<TreeNode>,
}

/// Groups for a node of `j` classes: `min(c_max, ceil(j / c_max))`.
pub fn group_count(j: usize, c_max: usize) -> usize {
    j.div_ceil(c_max).min(c_max)
}

pub fn build_tree(k: usize, c_max: usize) -> Result<ClassTree> {
    if k < 2 {
        return Err(Error::Input(format!("a class tree needs at least 2 classes, got {k}")));
    }
    if c_max < 2 {
        return Err(Error::Config(format!("c_max must be at least 2, got {c_max}")));
    }
    let mut nodes = vec![TreeNode {
        classes: (0..k).collect(),
        children: Vec::new(),
        level: 1,
    }];
    let mut i = 0;
    while i < nodes.len() {
        let j = nodes[i].classes.len();
        if j > c_max {
            let g = group_count(j, c_max);
            let mut groups = vec![Vec::with_capacity(j.div_ceil(g)); g];
            for (pos, &c) in nodes[i].classes.iter().enumerate() {
                groups[pos % g].push(c);
            }
            let level = nodes[i].level + 1;
            for classes in groups {
                nodes.push(TreeNode {
                    classes,
                    children: Vec::new(),
                    level,
                });
                let child = nodes.len() - 1;
                nodes[i].children.push(child);
            }
        }
        i += 1;
    }
    Ok(ClassTree { k, c_max, nodes })
}

impl ClassTree {
    /// Number of classifier levels on the longest path.
    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    /// Which outcome of `node` class `c` falls under, if any.
    pub fn outcome_of(&self, node: usize, c: usize) -> Option<usize> {
        let n = &self.nodes[node];
        if n.is_leaf() {
            n.classes.iter().position(|&m| m == c)
        } else {
            n.children.iter().position(|&ch| self.nodes[ch].classes.contains(&c))
        }
    }

    /// Root-to-leaf `(node, outcome)` pairs for class `c`.
    pub fn path(&self, c: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut node = 0;
        while let Some(o) = self.outcome_of(node, c) {
            out.push((node, o));
            if self.nodes[node].is_leaf() {
                break;
            }
            node = self.nodes[node].children[o];
        }
        out
    }

    /// Chain-rule combination of per-node outcome probabilities; `node_probs[i]`
    /// is `rows x arity(i)`.
    pub fn combine(&self, node_probs: &[ClassProbabilities]) -> Result<ClassProbabilities> {
        if node_probs.len() != self.nodes.len() {
            return Err(Error::Input(format!("{} node outputs for {} nodes", node_probs.len(), self.nodes.len())));
        }
        let rows = node_probs[0].rows;
        for (i, p) in node_probs.iter().enumerate() {
            if p.rows != rows || p.classes != self.nodes[i].arity() {
                return Err(Error::shape(
                    "class_tree",
                    format!("node {i}: {}x{} for arity {}", p.rows, p.classes, self.nodes[i].arity()),
                ));
            }
        }
        let paths: Vec<Vec<(usize, usize)>> = (0..self.k).map(|c| self.path(c)).collect();
        let mut data = vec![0f32; rows * self.k];
        for r in 0..rows {
            for (c, path) in paths.iter().enumerate() {
                let p: f64 = path.iter().map(|&(node, o)| node_probs[node].row(r)[o] as f64).product();
                data[r * self.k + c] = p as f32;
            }
        }
        ClassProbabilities::new(rows, self.k, data)
    }
}

/// Probabilities for the test rows of `h` (train rows first) over all `k`
/// classes, reusing `h` for every node.
pub fn predict_tree_from_embeddings<T: Scalar>(
    model: &TabIcl<T>,
    tree: &ClassTree,
    h: &Tensor<T>,
    y_train: &[usize],
) -> Result<ClassProbabilities> {
    let (n, width) = (h.shape()[0], h.shape()[1]);
    let n_train = y_train.len();
    if n_train >= n {
        return Err(Error::Input(format!("{n_train} train rows leave no test rows among {n}")));
    }
    if let Some(&bad) = y_train.iter().find(|&&y| y >= tree.k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: tree.k });
    }
    let n_test = n - n_train;
    let node_probs = (0..tree.nodes.len())
        .into_par_iter()
        .map(|i| {
            let node = &tree.nodes[i];
            let arity = node.arity();
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (r, &y) in y_train.iter().enumerate() {
                if let Some(o) = tree.outcome_of(i, y) {
                    rows.push(r);
                    labels.push(o);
                }
            }
            if arity == 1 {
                return ClassProbabilities::new(n_test, 1, vec![1.0; n_test]);
            }
            if rows.is_empty() {
                return ClassProbabilities::new(n_test, arity, vec![1.0 / arity as f32; n_test * arity]);
            }
            let sub = if rows.len() == n_train {
                h.clone()
            } else {
                let mut data = Vec::with_capacity((rows.len() + n_test) * width);
                for &r in rows.iter().chain(&(n_train..n).collect::<Vec<_>>()) {
                    data.extend_from_slice(&h.data()[r * width..(r + 1) * width]);
                }
                Tensor::new(vec![rows.len() + n_test, width], data)?
            };
            model.predict_from_embeddings(&sub, &labels, arity)
        })
        .collect::<Result<Vec<_>>>()?;
    tree.combine(&node_probs)
}

/// Full pipeline for any number of classes: row embeddings are computed
/// once and shared by every node of the class tree.
pub fn predict_hierarchical<T: Scalar>(
    model: &TabIcl<T>,
    x: &Tensor<T>,
    y_train: &[usize],
    k: usize,
    batching: Batching,
) -> Result<ClassProbabilities> {
    let tree = build_tree(k, model.config.icl.c_max)?;
    let h = model.row_embeddings(x, y_train.len(), batching)?;
    predict_tree_from_embeddings(model, &tree, &h, y_train)
}

#[cfg(test)]
#[path = "class_tree_tests.rs"]
mod tests;
