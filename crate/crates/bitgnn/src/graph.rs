//! Graph representation: destination-major CSR adjacency, self-loop
//! handling, and mini-batching as disjoint-union graphs.
//!
//! Edges are stored as `(source, destination)` with messages flowing
//! source -> destination; row `i` of the CSR lists the in-neighbor
//! sources of node `i`. Construction inserts a self-loop for every
//! node that lacks one, so in-degrees are always >= 1, and sorts each
//! row by source index so the layout is canonical regardless of input
//! edge order.

use std::sync::Arc;

use thiserror::Error;

use crate::matrix::Matrix;
use crate::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("node index {node} out of range for graph with {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error("edge endpoint {node} out of range for graph with {num_nodes} nodes")]
    EdgeOutOfRange { node: usize, num_nodes: usize },
    #[error("feature matrix has {rows} rows but graph has {num_nodes} nodes")]
    FeatureRowMismatch { rows: usize, num_nodes: usize },
    #[error("feature width mismatch in batch: expected {expected}, got {got}")]
    FeatDimMismatch { expected: usize, got: usize },
    #[error("cannot batch an empty list of graphs")]
    EmptyBatch,
}

/// Destination-major CSR adjacency. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    sources: Vec<usize>,
}

impl Adjacency {
    /// Builds the canonical CSR from a directed edge list, inserting a
    /// self-loop for every node that does not already have one.
    fn build(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(src, dst) in edges {
            rows[dst].push(src);
        }
        for (i, row) in rows.iter_mut().enumerate() {
            if !row.contains(&i) {
                row.push(i);
            }
            row.sort_unstable();
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut sources = Vec::new();
        offsets.push(0);
        for row in rows {
            sources.extend_from_slice(&row);
            offsets.push(sources.len());
        }
        Self { offsets, sources }
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    /// Sources of the in-edges of `node`, sorted ascending.
    #[inline]
    pub fn in_neighbors(&self, node: usize) -> &[usize] {
        &self.sources[self.offsets[node]..self.offsets[node + 1]]
    }

    /// CSR row length (includes the self-loop).
    #[inline]
    pub fn in_degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    /// Directed edge multiset as `(src, dst)` pairs.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for dst in 0..self.num_nodes() {
            for &src in self.in_neighbors(dst) {
                out.push((src, dst));
            }
        }
        out
    }
}

/// Immutable graph with dense per-node features and optional targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph<F: Scalar> {
    adj: Arc<Adjacency>,
    features: Matrix<F>,
    graph_target: Option<Vec<F>>,
    node_labels: Option<Vec<usize>>,
}

impl<F: Scalar> Graph<F> {
    /// Builds a graph from a directed edge list. Every node gets a
    /// self-loop if missing; rows are canonically sorted.
    pub fn new(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Matrix<F>,
        graph_target: Option<Vec<F>>,
        node_labels: Option<Vec<usize>>,
    ) -> Result<Self, GraphError> {
        for &(src, dst) in edges {
            for node in [src, dst] {
                if node >= num_nodes {
                    return Err(GraphError::EdgeOutOfRange { node, num_nodes });
                }
            }
        }
        if features.rows() != num_nodes {
            return Err(GraphError::FeatureRowMismatch {
                rows: features.rows(),
                num_nodes,
            });
        }
        Ok(Self {
            adj: Arc::new(Adjacency::build(num_nodes, edges)),
            features,
            graph_target,
            node_labels,
        })
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.adj.num_nodes()
    }

    #[inline]
    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn adjacency(&self) -> &Arc<Adjacency> {
        &self.adj
    }

    pub fn features(&self) -> &Matrix<F> {
        &self.features
    }

    pub fn graph_target(&self) -> Option<&[F]> {
        self.graph_target.as_deref()
    }

    pub fn node_labels(&self) -> Option<&[usize]> {
        self.node_labels.as_deref()
    }

    /// In-degree after preprocessing (always >= 1).
    pub fn in_degree(&self, node: usize) -> Result<usize, GraphError> {
        if node >= self.num_nodes() {
            return Err(GraphError::NodeOutOfRange { node, num_nodes: self.num_nodes() });
        }
        Ok(self.adj.in_degree(node))
    }
}

/// Disjoint union of graphs with a node -> originating-graph map.
#[derive(Debug, Clone)]
pub struct GraphBatch<F: Scalar> {
    merged: Graph<F>,
    segments: Arc<Vec<usize>>,
    num_graphs: usize,
    targets: Option<Matrix<F>>,
}

impl<F: Scalar> GraphBatch<F> {
    pub fn graph(&self) -> &Graph<F> {
        &self.merged
    }

    pub fn segments(&self) -> &Arc<Vec<usize>> {
        &self.segments
    }

    #[inline]
    pub fn num_graphs(&self) -> usize {
        self.num_graphs
    }

    /// Per-graph targets stacked as a `[num_graphs x k]` matrix; `None`
    /// when any member graph lacks a target.
    pub fn targets(&self) -> Option<&Matrix<F>> {
        self.targets.as_ref()
    }

    /// Per-graph class labels, reading each target's first entry as a
    /// class index.
    pub fn classes(&self) -> Option<Vec<usize>> {
        let t = self.targets.as_ref()?;
        let mut out = Vec::with_capacity(t.rows());
        for g in 0..t.rows() {
            let v = t.get(g, 0).to_f64()?;
            if v < 0.0 || v.fract() != 0.0 {
                return None;
            }
            out.push(v as usize);
        }
        Some(out)
    }
}

/// Concatenates graphs by node-index offsetting.
pub fn batch<F: Scalar>(graphs: &[&Graph<F>]) -> Result<GraphBatch<F>, GraphError> {
    if graphs.is_empty() {
        return Err(GraphError::EmptyBatch);
    }
    let feat_dim = graphs[0].feat_dim();
    let mut total_nodes = 0usize;
    for g in graphs {
        if g.feat_dim() != feat_dim {
            return Err(GraphError::FeatDimMismatch { expected: feat_dim, got: g.feat_dim() });
        }
        total_nodes += g.num_nodes();
    }

    let mut edges = Vec::new();
    let mut features = Matrix::zeros(total_nodes, feat_dim);
    let mut segments = Vec::with_capacity(total_nodes);
    let mut offset = 0usize;
    for (k, g) in graphs.iter().enumerate() {
        for (src, dst) in g.adjacency().edge_list() {
            edges.push((src + offset, dst + offset));
        }
        for n in 0..g.num_nodes() {
            features.row_mut(offset + n).copy_from_slice(g.features().row(n));
            segments.push(k);
        }
        offset += g.num_nodes();
    }

    let target_width = graphs[0].graph_target().map(<[F]>::len);
    let targets = match target_width {
        Some(w) if graphs.iter().all(|g| g.graph_target().map(<[F]>::len) == Some(w)) => {
            let mut t = Matrix::zeros(graphs.len(), w);
            for (k, g) in graphs.iter().enumerate() {
                t.row_mut(k).copy_from_slice(g.graph_target().unwrap());
            }
            Some(t)
        }
        _ => None,
    };

    let merged = Graph::new(total_nodes, &edges, features, None, None)?;
    Ok(GraphBatch {
        merged,
        segments: Arc::new(segments),
        num_graphs: graphs.len(),
        targets,
    })
}
