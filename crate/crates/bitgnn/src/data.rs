//! Dataset loading, the GTXT text format, and the synthetic
//! generators.
//!
//! GTXT, one graph per blank-line-separated block, whitespace tokens,
//! 0-based decimal indices:
//!
//! ```text
//! graph <num_nodes> <num_edges> <feat_dim>
//! node <id> <f_1> ... <f_feat_dim>
//! edge <src> <dst>
//! target <t_1> ... <t_k>      (optional, graph-level)
//! label <id> <class>          (optional, node-level)
//! ```
//!
//! Edges are undirected on disk: the loader expands each `edge u v`
//! into both directions and inserts missing self-loops, and the writer
//! emits each undirected edge once with self-loops implied.

use std::path::Path;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aggregators::AggregatorKind;
use crate::analyze::{exact_stats, kind_equal};
use crate::config::TaskKind;
use crate::graph::{Graph, GraphError};
use crate::matrix::Matrix;
use crate::{cast, Scalar};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("graph {graph_index} is missing a target present on earlier graphs")]
    MissingTarget { graph_index: usize },
    #[error("no collision pairs exist for the given bounds")]
    NoCollisionPairs,
    #[error("graphs cannot be serialized: {0}")]
    NotSerializable(String),
}

/// Train/validation/test membership.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A list of graphs with a task kind and per-graph split assignment.
#[derive(Debug, Clone)]
pub struct Dataset<F: Scalar> {
    pub graphs: Vec<Graph<F>>,
    pub task: TaskKind,
    splits: Vec<Split>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// 8:1:1 split as a pure function of (seed, index).
pub fn split_of(seed: u64, index: usize) -> Split {
    match splitmix64(seed ^ ((index as u64 + 1).wrapping_mul(0x2545F4914F6CDD1D))) % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

impl<F: Scalar> Dataset<F> {
    /// Wraps graphs with seeded 8:1:1 splits.
    pub fn new(graphs: Vec<Graph<F>>, task: TaskKind, split_seed: u64) -> Self {
        let splits = (0..graphs.len()).map(|i| split_of(split_seed, i)).collect();
        Self { graphs, task, splits }
    }

    /// Overrides the split assignment (tools and tests).
    pub fn with_splits(mut self, splits: Vec<Split>) -> Self {
        assert_eq!(splits.len(), self.graphs.len(), "one split per graph");
        self.splits = splits;
        self
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.splits[index]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.graphs.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn feat_dim(&self) -> usize {
        self.graphs.first().map_or(0, Graph::feat_dim)
    }

    /// Width of the regression target vector, when targets exist.
    pub fn target_width(&self) -> Option<usize> {
        self.graphs.first().and_then(|g| g.graph_target().map(<[F]>::len))
    }

    /// `max class + 1` over graph targets, for classification tasks.
    pub fn num_classes(&self) -> Option<usize> {
        let mut max = None;
        for g in &self.graphs {
            let c = g.graph_target()?.first()?.to_f64()?;
            if c < 0.0 || c.fract() != 0.0 {
                return None;
            }
            max = Some(max.unwrap_or(0).max(c as usize));
        }
        max.map(|m| m + 1)
    }
}

// --- GTXT ---------------------------------------------------------------

struct BlockBuilder<F: Scalar> {
    header_line: usize,
    num_nodes: usize,
    num_edges: usize,
    feat_dim: usize,
    features: Vec<Option<Vec<F>>>,
    edges: Vec<(usize, usize)>,
    target: Option<Vec<F>>,
    labels: Vec<(usize, usize)>,
}

impl<F: Scalar> BlockBuilder<F> {
    fn finish(self) -> Result<Graph<F>, DataError> {
        let err = |msg: String| DataError::Parse { line: self.header_line, msg };
        if self.edges.len() != self.num_edges {
            return Err(err(format!(
                "graph declares {} edges but block has {}",
                self.num_edges,
                self.edges.len()
            )));
        }
        let mut feats = Matrix::zeros(self.num_nodes, self.feat_dim);
        for (i, row) in self.features.iter().enumerate() {
            match row {
                Some(r) => feats.row_mut(i).copy_from_slice(r),
                None => return Err(err(format!("node {i} has no feature line"))),
            }
        }
        // Undirected expansion.
        let mut directed = Vec::with_capacity(self.edges.len() * 2);
        for &(u, v) in &self.edges {
            directed.push((u, v));
            if u != v {
                directed.push((v, u));
            }
        }
        let labels = if self.labels.is_empty() {
            None
        } else {
            let mut l = vec![0usize; self.num_nodes];
            for &(id, class) in &self.labels {
                l[id] = class;
            }
            Some(l)
        };
        Ok(Graph::new(self.num_nodes, &directed, feats, self.target, labels)?)
    }
}

/// Parses a GTXT file into graphs. An empty file is an empty dataset,
/// not an error.
pub fn load_gtxt<F: Scalar>(path: &Path) -> Result<Vec<Graph<F>>, DataError> {
    parse_gtxt(&std::fs::read_to_string(path)?)
}

pub fn parse_gtxt<F: Scalar>(text: &str) -> Result<Vec<Graph<F>>, DataError> {
    let mut graphs: Vec<Graph<F>> = Vec::new();
    let mut block: Option<BlockBuilder<F>> = None;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let perr = |msg: String| DataError::Parse { line, msg };
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        match tokens[0] {
            "graph" => {
                if let Some(b) = block.take() {
                    graphs.push(b.finish()?);
                }
                if tokens.len() != 4 {
                    return Err(perr("expected: graph <num_nodes> <num_edges> <feat_dim>".into()));
                }
                let parse = |s: &str, what: &str| {
                    s.parse::<usize>().map_err(|_| perr(format!("bad {what}: {s:?}")))
                };
                let num_nodes = parse(tokens[1], "node count")?;
                let num_edges = parse(tokens[2], "edge count")?;
                let feat_dim = parse(tokens[3], "feature width")?;
                block = Some(BlockBuilder {
                    header_line: line,
                    num_nodes,
                    num_edges,
                    feat_dim,
                    features: vec![None; num_nodes],
                    edges: Vec::new(),
                    target: None,
                    labels: Vec::new(),
                });
            }
            "node" => {
                let b = block.as_mut().ok_or_else(|| perr("node line before graph header".into()))?;
                if tokens.len() != 2 + b.feat_dim {
                    return Err(perr(format!(
                        "node line needs id plus {} features",
                        b.feat_dim
                    )));
                }
                let id: usize =
                    tokens[1].parse().map_err(|_| perr(format!("bad node id {:?}", tokens[1])))?;
                if id >= b.num_nodes {
                    return Err(perr(format!("node id {id} out of range (n={})", b.num_nodes)));
                }
                if b.features[id].is_some() {
                    return Err(perr(format!("duplicate node line for id {id}")));
                }
                let mut row = Vec::with_capacity(b.feat_dim);
                for t in &tokens[2..] {
                    let v: f64 =
                        t.parse().map_err(|_| perr(format!("bad feature value {t:?}")))?;
                    row.push(cast::<F>(v));
                }
                b.features[id] = Some(row);
            }
            "edge" => {
                let b = block.as_mut().ok_or_else(|| perr("edge line before graph header".into()))?;
                if tokens.len() != 3 {
                    return Err(perr("expected: edge <src> <dst>".into()));
                }
                let u: usize =
                    tokens[1].parse().map_err(|_| perr(format!("bad src {:?}", tokens[1])))?;
                let v: usize =
                    tokens[2].parse().map_err(|_| perr(format!("bad dst {:?}", tokens[2])))?;
                if u >= b.num_nodes || v >= b.num_nodes {
                    return Err(perr(format!("edge ({u}, {v}) out of range (n={})", b.num_nodes)));
                }
                b.edges.push((u, v));
            }
            "target" => {
                let b = block.as_mut().ok_or_else(|| perr("target line before graph header".into()))?;
                if tokens.len() < 2 {
                    return Err(perr("target line needs at least one value".into()));
                }
                let mut t = Vec::with_capacity(tokens.len() - 1);
                for tok in &tokens[1..] {
                    let v: f64 =
                        tok.parse().map_err(|_| perr(format!("bad target value {tok:?}")))?;
                    t.push(cast::<F>(v));
                }
                b.target = Some(t);
            }
            "label" => {
                let b = block.as_mut().ok_or_else(|| perr("label line before graph header".into()))?;
                if tokens.len() != 3 {
                    return Err(perr("expected: label <id> <class>".into()));
                }
                let id: usize =
                    tokens[1].parse().map_err(|_| perr(format!("bad node id {:?}", tokens[1])))?;
                if id >= b.num_nodes {
                    return Err(perr(format!("label id {id} out of range (n={})", b.num_nodes)));
                }
                let class: usize =
                    tokens[2].parse().map_err(|_| perr(format!("bad class {:?}", tokens[2])))?;
                b.labels.push((id, class));
            }
            other => return Err(perr(format!("unknown line kind {other:?}"))),
        }
    }
    if let Some(b) = block.take() {
        graphs.push(b.finish()?);
    }

    // Targets must be all-present or all-absent.
    if let Some(first_with) = graphs.iter().position(|g| g.graph_target().is_some()) {
        for (i, g) in graphs.iter().enumerate() {
            if g.graph_target().is_none() {
                let _ = first_with;
                return Err(DataError::MissingTarget { graph_index: i });
            }
        }
    }
    Ok(graphs)
}

/// Serializes graphs to GTXT. Requires the adjacency to be symmetric
/// with exactly one self-loop per node (which everything built by this
/// crate satisfies); self-loops are implied on disk.
pub fn write_gtxt<F: Scalar>(graphs: &[Graph<F>], path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for g in graphs {
        let mut undirected: Vec<(usize, usize)> = Vec::new();
        let mut forward: Vec<(usize, usize)> = Vec::new();
        let mut backward: Vec<(usize, usize)> = Vec::new();
        for (s, d) in g.adjacency().edge_list() {
            if s == d {
                continue;
            }
            if s < d {
                forward.push((s, d));
            } else {
                backward.push((d, s));
            }
        }
        forward.sort_unstable();
        backward.sort_unstable();
        if forward != backward {
            return Err(DataError::NotSerializable(
                "adjacency is not symmetric; GTXT stores undirected edges".into(),
            ));
        }
        undirected.extend(forward);

        out.push_str(&format!(
            "graph {} {} {}\n",
            g.num_nodes(),
            undirected.len(),
            g.feat_dim()
        ));
        for n in 0..g.num_nodes() {
            out.push_str(&format!("node {n}"));
            for v in g.features().row(n) {
                out.push_str(&format!(" {v}"));
            }
            out.push('\n');
        }
        for (u, v) in undirected {
            out.push_str(&format!("edge {u} {v}\n"));
        }
        if let Some(t) = g.graph_target() {
            out.push_str("target");
            for v in t {
                out.push_str(&format!(" {v}"));
            }
            out.push('\n');
        }
        if let Some(labels) = g.node_labels() {
            for (id, class) in labels.iter().enumerate() {
                out.push_str(&format!("label {id} {class}\n"));
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// --- topology-pair generator ---------------------------------------------

/// Parameters for the star-graph classification generator.
#[derive(Debug, Clone)]
pub struct TopologyPairsSpec {
    pub max_degree: usize,
    pub value_lo: i64,
    pub value_hi: i64,
    pub n_per_class: usize,
    pub seed: u64,
    /// Aggregators that must collide across the class pair; the fixed
    /// designated aggregator is `mean` by default.
    pub collide: Vec<AggregatorKind>,
    /// Aggregator that must distinguish the pair.
    pub separate: AggregatorKind,
}

impl Default for TopologyPairsSpec {
    fn default() -> Self {
        Self {
            max_degree: 4,
            value_lo: -2,
            value_hi: 2,
            n_per_class: 200,
            seed: 0,
            collide: vec![AggregatorKind::Mean],
            separate: AggregatorKind::Sum,
        }
    }
}

/// Non-decreasing non-constant multisets of sizes `2..=max` over the
/// range, in canonical order.
fn candidate_multisets(max: usize, lo: i64, hi: i64) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    fn rec(out: &mut Vec<Vec<i64>>, current: &mut Vec<i64>, from: i64, hi: i64, left: usize) {
        if left == 0 {
            if current.windows(2).any(|w| w[0] != w[1]) {
                out.push(current.clone());
            }
            return;
        }
        for v in from..=hi {
            current.push(v);
            rec(out, current, v, hi, left - 1);
            current.pop();
        }
    }
    for size in 2..=max {
        rec(&mut out, &mut current, lo, hi, size);
    }
    out
}

/// Finds the first certified collision pair: all `collide` aggregators
/// equal, the `separate` aggregator distinct. Constant multisets are
/// skipped so the task carries feature structure.
pub fn mine_collision_pair(
    spec: &TopologyPairsSpec,
) -> Result<(Vec<i64>, Vec<i64>), DataError> {
    let sets = candidate_multisets(spec.max_degree, spec.value_lo, spec.value_hi);
    let stats: Vec<_> = sets.iter().map(|m| exact_stats(m)).collect();
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            let all_collide =
                spec.collide.iter().all(|&k| kind_equal(k, &stats[i], &stats[j]));
            let separated = !kind_equal(spec.separate, &stats[i], &stats[j]);
            if all_collide && separated {
                return Ok((sets[i].clone(), sets[j].clone()));
            }
        }
    }
    Err(DataError::NoCollisionPairs)
}

/// Balanced 2-class dataset of star graphs whose center neighbor
/// multisets come from a certified collision pair. Feature channel 0
/// carries the multiset value, channel 1 a seeded integer distractor;
/// the center takes the (shared) multiset mean so its neighborhood
/// mean stays blind even with the self-loop included.
pub fn gen_topology_pairs<F: Scalar>(spec: &TopologyPairsSpec) -> Result<Dataset<F>, DataError> {
    let (a, b) = mine_collision_pair(spec)?;

    // Certify once more through the exact-arithmetic module before any
    // graph is emitted, including the designated aggregator on the
    // self-loop-extended center multiset.
    let (sa, sb) = (exact_stats(&a), exact_stats(&b));
    for &k in &spec.collide {
        assert!(kind_equal(k, &sa, &sb), "mined pair fails certification");
    }
    assert!(!kind_equal(spec.separate, &sa, &sb), "mined pair fails separation");
    if spec.collide.contains(&AggregatorKind::Mean) {
        let with_center = |m: &[i64], mean: Ratio<i64>| {
            let mut q: Vec<Ratio<i64>> = m.iter().map(|&v| Ratio::from_integer(v)).collect();
            q.push(mean);
            crate::stats::mean(&q)
        };
        assert_eq!(
            with_center(&a, sa.mean),
            with_center(&b, sb.mean),
            "center mean must stay blind with the self-loop"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut graphs = Vec::with_capacity(spec.n_per_class * 2);
    let centers = [
        *sa.mean.numer() as f64 / *sa.mean.denom() as f64,
        *sb.mean.numer() as f64 / *sb.mean.denom() as f64,
    ];
    let classes = [a, b];
    for _ in 0..spec.n_per_class {
        for class in 0..2 {
            let mut leaves = classes[class].clone();
            // Shuffle the leaf order for within-class variety.
            for i in (1..leaves.len()).rev() {
                let j = rng.gen_range(0..=i);
                leaves.swap(i, j);
            }
            let n = leaves.len() + 1;
            let mut feats = Matrix::zeros(n, 2);
            feats.set(0, 0, cast::<F>(centers[class]));
            feats.set(0, 1, cast::<F>(rng.gen_range(-2..=2) as f64));
            for (l, &v) in leaves.iter().enumerate() {
                feats.set(l + 1, 0, cast::<F>(v as f64));
                feats.set(l + 1, 1, cast::<F>(rng.gen_range(-2..=2) as f64));
            }
            let mut edges = Vec::with_capacity(2 * (n - 1));
            for l in 1..n {
                edges.push((l, 0));
                edges.push((0, l));
            }
            let target = vec![cast::<F>(class as f64)];
            graphs.push(Graph::new(n, &edges, feats, Some(target), None)?);
        }
    }
    Ok(Dataset::new(graphs, TaskKind::GraphClassification, spec.seed))
}

// --- regression generator -------------------------------------------------

/// The generator's documented target statistic, a weighted count of
/// degree-feature motifs normalized by node count:
///
/// * every non-self undirected edge (u, v) whose channel-0 features
///   are equal contributes `(deg_u + deg_v) / 2`, degrees taken after
///   self-loop insertion;
/// * every node contributes its wedge count `C(deg - 1, 2)`, the
///   number of 2-paths centered on it (self-loop excluded).
///
/// The total is divided by `num_nodes`.
pub fn regression_target<F: Scalar>(g: &Graph<F>) -> F {
    let adj = g.adjacency();
    let mut acc = 0.0f64;
    for (s, d) in adj.edge_list() {
        if s < d {
            let fu = g.features().get(s, 0);
            let fv = g.features().get(d, 0);
            if fu == fv {
                acc += (adj.in_degree(s) + adj.in_degree(d)) as f64 / 2.0;
            }
        }
    }
    for node in 0..g.num_nodes() {
        let d = adj.in_degree(node) - 1;
        acc += (d * d.saturating_sub(1)) as f64 / 2.0;
    }
    cast::<F>(acc / g.num_nodes() as f64)
}

/// Random connected graphs (8..=24 nodes) with integer features in
/// [-2, 2] and the exact [`regression_target`] statistic as the label.
pub fn gen_regression<F: Scalar>(seed: u64, n_graphs: usize) -> Dataset<F> {
    assert!(n_graphs >= 1, "need at least one graph");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(n_graphs);
    for _ in 0..n_graphs {
        let n = rng.gen_range(8..=24);
        let mut undirected: Vec<(usize, usize)> = Vec::new();
        // Random spanning tree keeps the graph connected.
        for i in 1..n {
            let p = rng.gen_range(0..i);
            undirected.push((p.min(i), p.max(i)));
        }
        let extra = rng.gen_range(n / 4..=n / 2);
        for _ in 0..extra {
            let u = rng.gen_range(0..n);
            let v = rng.gen_range(0..n);
            if u == v {
                continue;
            }
            let e = (u.min(v), u.max(v));
            if !undirected.contains(&e) {
                undirected.push(e);
            }
        }
        let feats = Matrix::from_fn(n, 4, |_, _| cast::<F>(rng.gen_range(-2..=2) as f64));
        let mut directed = Vec::with_capacity(undirected.len() * 2);
        for &(u, v) in &undirected {
            directed.push((u, v));
            directed.push((v, u));
        }
        let mut g = Graph::new(n, &directed, feats, None, None).expect("generator bounds");
        let t = regression_target(&g);
        g = Graph::new(
            n,
            &directed,
            g.features().clone(),
            Some(vec![t]),
            None,
        )
        .expect("generator bounds");
        graphs.push(g);
    }
    Dataset::new(graphs, TaskKind::GraphRegression, seed)
}
