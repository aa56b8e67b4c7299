//! Binary causal super-graphs and masked weighted adjacency matrices.
//!
//! A [`GraphMask`] fixes which directed edges between latent factors are
//! permitted at all; a [`WeightedAdjacency`] carries the learnable edge
//! weights, kept exactly zero wherever the mask forbids an edge.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("mask has a nonzero diagonal entry at node {0}")]
    NonzeroDiagonal(usize),
    #[error("graph contains a directed cycle through node {0}")]
    Cycle(usize),
    #[error("invalid permutation: index {0} appears more than once or is out of range")]
    InvalidPermutation(usize),
    #[error("shape mismatch: weights are {got:?}, mask is {want}x{want}")]
    ShapeMismatch { got: (usize, usize), want: usize },
    #[error("edge endpoint {0} out of range for {1} nodes")]
    EdgeOutOfRange(usize, usize),
}

/// Binary super-graph over `k` latent factors. `edges[(i, j)] == true` means
/// the directed edge `i -> j` is permitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphMask {
    k: usize,
    edges: Vec<bool>, // row-major k*k
}

impl GraphMask {
    /// Empty mask (no permitted edges) on `k` nodes.
    pub fn empty(k: usize) -> Self {
        Self { k, edges: vec![false; k * k] }
    }

    /// Mask from an explicit edge list of 0-based `(from, to)` pairs.
    pub fn from_edges(k: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut mask = Self::empty(k);
        for &(i, j) in edges {
            if i >= k {
                return Err(GraphError::EdgeOutOfRange(i, k));
            }
            if j >= k {
                return Err(GraphError::EdgeOutOfRange(j, k));
            }
            if i == j {
                return Err(GraphError::NonzeroDiagonal(i));
            }
            mask.edges[i * k + j] = true;
        }
        Ok(mask)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn permits(&self, from: usize, to: usize) -> bool {
        self.edges[from * self.k + to]
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }

    /// Parents of `node`: all `i` with a permitted edge `i -> node`.
    pub fn parents(&self, node: usize) -> Vec<usize> {
        (0..self.k).filter(|&i| self.permits(i, node)).collect()
    }

    /// Children of `node`: all `j` with a permitted edge `node -> j`.
    pub fn children(&self, node: usize) -> Vec<usize> {
        (0..self.k).filter(|&j| self.permits(node, j)).collect()
    }

    /// All nodes reachable from `roots` along permitted edges, excluding the
    /// roots themselves.
    pub fn descendants(&self, roots: &[usize]) -> Vec<usize> {
        let mut seen = vec![false; self.k];
        let mut stack: Vec<usize> = roots.to_vec();
        while let Some(n) = stack.pop() {
            for c in self.children(n) {
                if !seen[c] {
                    seen[c] = true;
                    stack.push(c);
                }
            }
        }
        for &r in roots {
            seen[r] = false;
        }
        (0..self.k).filter(|&i| seen[i]).collect()
    }
}

/// True iff the permitted-edge graph has no directed cycle.
///
/// Runs Kahn's algorithm; a mask with a nonzero diagonal is rejected outright.
pub fn is_acyclic(mask: &GraphMask) -> Result<bool, GraphError> {
    for i in 0..mask.k {
        if mask.permits(i, i) {
            return Err(GraphError::NonzeroDiagonal(i));
        }
    }
    Ok(kahn_order(mask).len() == mask.k)
}

/// Topological order of the permitted-edge DAG, ties broken by ascending
/// node index. Errors on a cyclic mask, naming one node that lies on a cycle.
pub fn topological_order(mask: &GraphMask) -> Result<Vec<usize>, GraphError> {
    for i in 0..mask.k {
        if mask.permits(i, i) {
            return Err(GraphError::NonzeroDiagonal(i));
        }
    }
    let order = kahn_order(mask);
    if order.len() == mask.k {
        return Ok(order);
    }
    // Some node was never freed; walk parent links within the leftover set
    // until a node repeats, which pins an actual cycle member.
    let mut leftover = vec![true; mask.k];
    for &n in &order {
        leftover[n] = false;
    }
    let start = (0..mask.k).find(|&i| leftover[i]).expect("leftover node exists");
    let mut seen = vec![false; mask.k];
    let mut cur = start;
    loop {
        if seen[cur] {
            return Err(GraphError::Cycle(cur));
        }
        seen[cur] = true;
        cur = *mask
            .parents(cur)
            .iter()
            .find(|&&p| leftover[p])
            .expect("node in leftover set has a leftover parent");
    }
}

fn kahn_order(mask: &GraphMask) -> Vec<usize> {
    let k = mask.k;
    let mut indegree = vec![0usize; k];
    for j in 0..k {
        indegree[j] = mask.parents(j).len();
    }
    let mut removed = vec![false; k];
    let mut order = Vec::with_capacity(k);
    // k is small; scanning for the least ready index keeps ties deterministic.
    loop {
        let next = (0..k).find(|&i| !removed[i] && indegree[i] == 0);
        match next {
            Some(i) => {
                removed[i] = true;
                order.push(i);
                for c in mask.children(i) {
                    indegree[c] -= 1;
                }
            }
            None => return order,
        }
    }
}

/// Super-graph induced by a causal order: edge `i -> j` is permitted iff `i`
/// precedes `j` in `order`. The result has `k(k-1)/2` permitted edges.
pub fn super_graph_from_order(order: &[usize]) -> Result<GraphMask, GraphError> {
    let k = order.len();
    let mut pos = vec![usize::MAX; k];
    for (rank, &n) in order.iter().enumerate() {
        if n >= k {
            return Err(GraphError::InvalidPermutation(n));
        }
        if pos[n] != usize::MAX {
            return Err(GraphError::InvalidPermutation(n));
        }
        pos[n] = rank;
    }
    let mut mask = GraphMask::empty(k);
    for i in 0..k {
        for j in 0..k {
            if i != j && pos[i] < pos[j] {
                mask.edges[i * k + j] = true;
            }
        }
    }
    Ok(mask)
}

/// Learnable weighted adjacency, exactly zero off the permitted edge set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedAdjacency {
    weights: Array2<f64>,
    mask: GraphMask,
}

impl WeightedAdjacency {
    pub fn zeros(mask: GraphMask) -> Self {
        let k = mask.k();
        Self { weights: Array2::zeros((k, k)), mask }
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn mask(&self) -> &GraphMask {
        &self.mask
    }

    pub fn k(&self) -> usize {
        self.mask.k()
    }

    /// Weight of the edge `from -> to` (zero when the edge is masked out).
    pub fn weight(&self, from: usize, to: usize) -> f64 {
        self.weights[(from, to)]
    }

    /// Overwrite the weights and re-project onto the mask.
    pub fn set_weights(&mut self, weights: Array2<f64>) -> Result<(), GraphError> {
        let k = self.mask.k();
        if weights.dim() != (k, k) {
            return Err(GraphError::ShapeMismatch { got: weights.dim(), want: k });
        }
        self.weights = weights;
        self.project();
        Ok(())
    }

    /// Zero every entry the mask forbids. Called after every optimizer step.
    pub fn project(&mut self) {
        let k = self.mask.k();
        for i in 0..k {
            for j in 0..k {
                if !self.mask.permits(i, j) {
                    self.weights[(i, j)] = 0.0;
                }
            }
        }
    }
}

/// Project free weights onto the permitted structure: output equals `weights`
/// where the mask permits the edge and is exactly zero elsewhere.
pub fn apply_mask(weights: Array2<f64>, mask: GraphMask) -> Result<WeightedAdjacency, GraphError> {
    let k = mask.k();
    if weights.dim() != (k, k) {
        return Err(GraphError::ShapeMismatch { got: weights.dim(), want: k });
    }
    let mut adj = WeightedAdjacency { weights, mask };
    adj.project();
    Ok(adj)
}

/// The Pendulum benchmark's ground-truth structure on 4 factors
/// (0=pendulum angle, 1=light angle, 2=shadow length, 3=shadow position):
/// both angles point at both shadow factors.
pub fn pendulum_true_graph() -> GraphMask {
    GraphMask::from_edges(4, &[(0, 2), (0, 3), (1, 2), (1, 3)]).expect("static edge list is valid")
}
