//! The candidate pool of neighborhood aggregators and the two mixed
//! multi-aggregator baselines.
//!
//! Pool ordering is part of the checkpoint format and of the selector
//! logits layout, so it is fixed: mean=0, max=1, min=2, sum=3, std=4,
//! var=5.

use crate::graph::Graph;
use crate::tape::Var;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggregatorKind {
    Mean,
    Max,
    Min,
    Sum,
    Std,
    Var,
}

/// Fixed, stable pool ordering.
pub const POOL: [AggregatorKind; 6] = [
    AggregatorKind::Mean,
    AggregatorKind::Max,
    AggregatorKind::Min,
    AggregatorKind::Sum,
    AggregatorKind::Std,
    AggregatorKind::Var,
];

/// The five standard aggregators combined by the mixed baselines.
pub const MIXED_STANDARD: [AggregatorKind; 5] = [
    AggregatorKind::Mean,
    AggregatorKind::Max,
    AggregatorKind::Min,
    AggregatorKind::Std,
    AggregatorKind::Var,
];

impl AggregatorKind {
    pub fn index(self) -> usize {
        POOL.iter().position(|&k| k == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        POOL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Max => "max",
            Self::Min => "min",
            Self::Sum => "sum",
            Self::Std => "std",
            Self::Var => "var",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        POOL.iter().copied().find(|k| k.name() == s)
    }
}

/// Aggregates `feats` over each node's in-neighborhood with the chosen
/// statistic, differentiable through the tape.
pub fn aggregate<'t, F: Scalar>(
    kind: AggregatorKind,
    g: &Graph<F>,
    feats: Var<'t, F>,
) -> Var<'t, F> {
    feats.aggregate(kind, g.adjacency())
}

/// Sums the outputs of several aggregators (the first mixed baseline).
pub fn mixed_sum_aggregate<'t, F: Scalar>(
    g: &Graph<F>,
    feats: Var<'t, F>,
    kinds: &[AggregatorKind],
) -> Var<'t, F> {
    assert!(!kinds.is_empty(), "mixed aggregation needs at least one kind");
    let mut acc = aggregate(kinds[0], g, feats);
    for &k in &kinds[1..] {
        acc = acc.add(aggregate(k, g, feats));
    }
    acc
}

/// Concatenates aggregator outputs column-wise in pool order (the
/// second mixed baseline).
pub fn mixed_concat_aggregate<'t, F: Scalar>(
    g: &Graph<F>,
    feats: Var<'t, F>,
    kinds: &[AggregatorKind],
) -> Var<'t, F> {
    assert!(!kinds.is_empty(), "mixed aggregation needs at least one kind");
    let mut ordered: Vec<AggregatorKind> = kinds.to_vec();
    ordered.sort_by_key(|k| k.index());
    let parts: Vec<Var<'t, F>> = ordered.iter().map(|&k| aggregate(k, g, feats)).collect();
    Var::concat_cols(&parts)
}
