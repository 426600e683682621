//! The 1-bit graph auto-encoder and the two meta-aggregators.
//!
//! GNA draws Gumbel noise over per-node encoder logits and relaxes the
//! argmax with a tempered softmax during training; at eval time the
//! choice is the hard, deterministic argmax, so inference runs exactly
//! one pool aggregator per node.
//!
//! ANA is the diffused aggregator
//! `(1/beta) * log((1/deg) * sum exp(beta * x))`, which sweeps from
//! mean-like (beta -> 0) to max-like (beta -> inf) behavior. A min
//! variant negates the inputs, a variance variant uses
//! `Var = mean(x^2) - mean(x)^2`, and the hybrid mixes several terms
//! with learned per-node weights. The hybrid's third term is the
//! degree-scaled smooth neighborhood norm `sqrt(deg * ANA(x^2))`, a
//! sum-like statistic that survives degree-only differences the
//! normalized forms cannot see while staying 1-homogeneous in the
//! features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregators::{self, AggregatorKind, POOL};
use crate::binarize::{bit_linear, sign_binarize};
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::stats;
use crate::tape::{Tape, Var};
use crate::{cast, Scalar};

/// Selector mode: the training relaxation or the hard eval path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Train,
    Eval,
}

/// Seedable Gumbel(0, 1) noise source with the softmax temperature.
pub struct GumbelSampler {
    rng: ChaCha8Rng,
    tau: f64,
    eval_noise: bool,
}

impl GumbelSampler {
    pub fn new(seed: u64, tau: f64) -> Self {
        assert!(tau > 0.0, "softmax temperature must be positive");
        Self { rng: ChaCha8Rng::seed_from_u64(seed), tau, eval_noise: false }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) {
        assert!(tau > 0.0, "softmax temperature must be positive");
        self.tau = tau;
    }

    /// Keep Gumbel noise on at eval (off by default; eval is
    /// deterministic).
    pub fn set_eval_noise(&mut self, on: bool) {
        self.eval_noise = on;
    }

    pub fn eval_noise(&self) -> bool {
        self.eval_noise
    }

    /// `G = -log(-log(U))` with `U` uniform on (0, 1) exclusive.
    pub fn sample<F: Scalar>(&mut self, rows: usize, cols: usize) -> Matrix<F> {
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let mut u: f64 = self.rng.gen();
                while u <= 0.0 {
                    u = self.rng.gen();
                }
                out.set(i, j, cast::<F>(-(-u.ln()).ln()));
            }
        }
        out
    }
}

/// Maps a raw encoder scalar into `[beta_min, beta_max]` through a
/// logistic squashing.
#[derive(Clone, Copy, Debug)]
pub struct BetaMap<F: Scalar> {
    beta_min: F,
    beta_max: F,
}

impl<F: Scalar> BetaMap<F> {
    pub fn new(beta_min: F, beta_max: F) -> Self {
        assert!(
            F::zero() < beta_min && beta_min < beta_max,
            "need 0 < beta_min < beta_max"
        );
        Self { beta_min, beta_max }
    }

    pub fn bounds(&self) -> (F, F) {
        (self.beta_min, self.beta_max)
    }

    /// `beta = beta_min + (beta_max - beta_min) * sigmoid(raw)`.
    pub fn map<'t>(&self, raw: Var<'t, F>) -> Var<'t, F> {
        raw.sigmoid()
            .scalar_mul(self.beta_max - self.beta_min)
            .add_scalar(self.beta_min)
    }
}

/// One binarized linear layer on `[x_i || mean of in-neighbors]` whose
/// integer pre-activation comes from the bit kernel. Weights are
/// latent full-precision and binarized with STE each forward, like the
/// main network.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryGraphAutoEncoder<F: Scalar> {
    weight: Matrix<F>,
    bias: Option<Matrix<F>>,
}

impl<F: Scalar> BinaryGraphAutoEncoder<F> {
    /// `in_dim` is the node feature width; the encoder consumes the
    /// 2*in_dim concatenation.
    pub fn new(in_dim: usize, out_width: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = 2 * in_dim;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Matrix::from_fn(fan_in, out_width, |_, _| {
            cast::<F>(rng.gen_range(-bound..bound))
        });
        let bias = bias.then(|| Matrix::zeros(1, out_width));
        Self { weight, bias }
    }

    pub fn from_parts(weight: Matrix<F>, bias: Option<Matrix<F>>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Matrix<F> {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Matrix<F>> {
        self.bias.as_ref()
    }

    pub fn out_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<F>> {
        let mut out = vec![&mut self.weight];
        if let Some(b) = self.bias.as_mut() {
            out.push(b);
        }
        out
    }

    /// Encodes the graph: binarize `[x || mean-neighbor(x)]`, run the
    /// bit kernel against the binarized weights, add the optional
    /// full-precision bias. Returns the raw output and the tape ids of
    /// the registered parameters.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape<F>,
        g: &Graph<F>,
        feats: Var<'t, F>,
    ) -> (Var<'t, F>, Vec<usize>) {
        let w = tape.leaf(self.weight.clone());
        let mut ids = vec![w.id()];
        let b = self.bias.as_ref().map(|b| {
            let v = tape.leaf(b.clone());
            ids.push(v.id());
            v
        });
        (self.encode_with(g, feats, w, b), ids)
    }

    /// [`Self::encode`] with the parameters already registered on the
    /// tape, so callers control registration order.
    ///
    /// The integer kernel pre-activation is scaled by `1/fan_in`
    /// before the bias: raw selector logits and beta inputs must stay
    /// within O(1) or the downstream softmax/sigmoid saturate, Gumbel
    /// noise stops flipping decisions, and the selector collapses onto
    /// one aggregator independent of the input.
    pub fn encode_with<'t>(
        &self,
        g: &Graph<F>,
        feats: Var<'t, F>,
        weight: Var<'t, F>,
        bias: Option<Var<'t, F>>,
    ) -> Var<'t, F> {
        let nb_mean = aggregators::aggregate(AggregatorKind::Mean, g, feats);
        let enc_in = Var::concat_cols(&[feats, nb_mean]);
        let fan_in = self.weight.rows();
        let scale = F::one() / cast::<F>(fan_in as f64);
        let mut raw = bit_linear(sign_binarize(enc_in), sign_binarize(weight)).scalar_mul(scale);
        if let Some(bv) = bias {
            raw = raw.add_bias(bv);
        }
        raw
    }
}

/// Stochastic or deterministic selection over the aggregator pool.
///
/// Train mode returns the relaxation `softmax((logits + G) / tau)`
/// with fresh Gumbel noise, rows summing to 1; eval mode returns the
/// hard one-hot argmax of the logits (noise off by default), ties to
/// the lowest index.
pub fn gna_select<'t, F: Scalar>(
    tape: &'t Tape<F>,
    logits: Var<'t, F>,
    sampler: &mut GumbelSampler,
    mode: SelectMode,
) -> Var<'t, F> {
    let (rows, cols) = logits.shape();
    match mode {
        SelectMode::Train => {
            let noise = tape.leaf(sampler.sample::<F>(rows, cols));
            logits.add(noise).softmax(cast::<F>(sampler.tau()))
        }
        SelectMode::Eval => {
            let mut scores = logits.value();
            if sampler.eval_noise {
                let noise = sampler.sample::<F>(rows, cols);
                for (s, &n) in scores.data_mut().iter_mut().zip(noise.data()) {
                    *s += n;
                }
            }
            let mut onehot = Matrix::zeros(rows, cols);
            for i in 0..rows {
                let row = scores.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                onehot.set(i, best, F::one());
            }
            tape.leaf(onehot)
        }
    }
}

/// Convex per-node mixture of the pool aggregators. Rows of `weights`
/// must sum to 1 within 1e-4.
pub fn gna_aggregate<'t, F: Scalar>(
    g: &Graph<F>,
    feats: Var<'t, F>,
    weights: Var<'t, F>,
) -> Var<'t, F> {
    let w = weights.value();
    assert_eq!(w.cols(), POOL.len(), "weights must have one column per pool kind");
    let tol = cast::<F>(1e-4);
    for i in 0..w.rows() {
        let s: F = w.row(i).iter().copied().sum();
        assert!(
            (s - F::one()).abs() <= tol,
            "GNA weight row {i} sums to {s}, expected 1"
        );
    }
    let mut acc: Option<Var<'t, F>> = None;
    for (k, &kind) in POOL.iter().enumerate() {
        let term = aggregators::aggregate(kind, g, feats).mul_col(weights.slice_cols(k, 1));
        acc = Some(match acc {
            Some(a) => a.add(term),
            None => term,
        });
    }
    acc.unwrap()
}

/// Hard-selection fast path: computes exactly one pool aggregator per
/// node (no tape). `selection[i]` is a pool index.
pub fn select_aggregate<F: Scalar>(
    g: &Graph<F>,
    feats: &Matrix<F>,
    selection: &[usize],
) -> Matrix<F> {
    let adj = g.adjacency();
    assert_eq!(selection.len(), adj.num_nodes(), "one selection per node");
    let d = feats.cols();
    let mut out = Matrix::zeros(adj.num_nodes(), d);
    let mut scratch = Vec::new();
    for (i, &sel) in selection.iter().enumerate() {
        let kind = AggregatorKind::from_index(sel).expect("selection indexes the pool");
        for c in 0..d {
            scratch.clear();
            scratch.extend(adj.in_neighbors(i).iter().map(|&j| feats.get(j, c)));
            let v = match kind {
                AggregatorKind::Mean => stats::mean(&scratch),
                AggregatorKind::Max => stats::max(&scratch),
                AggregatorKind::Min => stats::min(&scratch),
                AggregatorKind::Sum => stats::sum(&scratch),
                AggregatorKind::Var => stats::var(&scratch).max(F::zero()),
                AggregatorKind::Std => stats::std_dev(&scratch),
            };
            out.set(i, c, v);
        }
    }
    out
}

/// Diffused aggregation
/// `(1/beta_i) * log((1/deg_i) * sum_j exp(beta_i * x_j))` with a
/// per-node `beta` column.
pub fn ana_aggregate<'t, F: Scalar>(
    g: &Graph<F>,
    feats: Var<'t, F>,
    beta: Var<'t, F>,
) -> Var<'t, F> {
    feats.ana(beta, g.adjacency())
}

/// Smooth minimum: `-ANA(-x, beta)`.
pub fn ana_min_aggregate<'t, F: Scalar>(
    g: &Graph<F>,
    feats: Var<'t, F>,
    beta: Var<'t, F>,
) -> Var<'t, F> {
    feats.neg().ana(beta, g.adjacency()).neg()
}

/// Smooth variance: `ANA(x^2, beta) - ANA(x, beta)^2`, the
/// `mean(x^2) - mean(x)^2` identity with both means diffused.
pub fn ana_var_aggregate<'t, F: Scalar>(
    g: &Graph<F>,
    feats: Var<'t, F>,
    beta: Var<'t, F>,
) -> Var<'t, F> {
    let m = feats.ana(beta, g.adjacency());
    let sq = feats.mul_elem(feats).ana(beta, g.adjacency());
    sq.sub(m.mul_elem(m))
}

/// Degree-scaled smooth neighborhood norm:
/// `sqrt(deg_i * ANA(x^2, beta))`, which tends to the Euclidean norm
/// `sqrt(sum(x^2))` as beta -> 0. Unlike the normalized terms it
/// distinguishes neighborhoods that differ only in size, and it scales
/// linearly with the features like the other hybrid terms.
pub fn ana_norm_aggregate<'t, F: Scalar>(
    tape: &'t Tape<F>,
    g: &Graph<F>,
    feats: Var<'t, F>,
    beta: Var<'t, F>,
) -> Var<'t, F> {
    let adj = g.adjacency();
    let deg = Matrix::from_fn(adj.num_nodes(), 1, |i, _| cast::<F>(adj.in_degree(i) as f64));
    feats
        .mul_elem(feats)
        .ana(beta, adj)
        .mul_col(tape.leaf(deg))
        .sqrt_guarded()
}

/// Number of raw encoder channels the hybrid consumes for `h` terms:
/// one beta channel per term plus, when mixing, one weight channel per
/// term.
pub fn hybrid_raw_width(h: usize) -> usize {
    assert!((1..=3).contains(&h), "hybrid term count must be in 1..=3");
    if h == 1 {
        1
    } else {
        2 * h
    }
}

/// Weighted hybrid of diffused terms. `raw` carries `h` beta channels
/// followed by `h` weight-logit channels (none when `h == 1`). Term
/// order: plain ANA, smooth min, degree-scaled smooth neighborhood
/// norm. With `h == 1` this is exactly [`ana_aggregate`].
pub fn ana_hybrid_aggregate<'t, F: Scalar>(
    tape: &'t Tape<F>,
    g: &Graph<F>,
    feats: Var<'t, F>,
    raw: Var<'t, F>,
    h: usize,
    beta_map: &BetaMap<F>,
) -> Var<'t, F> {
    let width = hybrid_raw_width(h);
    assert_eq!(raw.shape().1, width, "hybrid raw width mismatch for h={h}");

    let term = |t: usize| {
        let beta = beta_map.map(raw.slice_cols(t, 1));
        match t {
            0 => ana_aggregate(g, feats, beta),
            1 => ana_min_aggregate(g, feats, beta),
            2 => ana_norm_aggregate(tape, g, feats, beta),
            _ => unreachable!(),
        }
    };

    if h == 1 {
        return term(0);
    }
    let omega = raw.slice_cols(h, h).softmax(F::one());
    let mut acc: Option<Var<'t, F>> = None;
    for t in 0..h {
        let weighted = term(t).mul_col(omega.slice_cols(t, 1));
        acc = Some(match acc {
            Some(a) => a.add(weighted),
            None => weighted,
        });
    }
    acc.unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn star(leaf_values: &[f64], center: f64) -> Graph<f64> {
        let n = leaf_values.len() + 1;
        let edges: Vec<(usize, usize)> = (1..n).map(|l| (l, 0)).collect();
        let mut feats = Matrix::zeros(n, 1);
        feats.set(0, 0, center);
        for (i, &v) in leaf_values.iter().enumerate() {
            feats.set(i + 1, 0, v);
        }
        Graph::new(n, &edges, feats, None, None).unwrap()
    }

    /// Direct log-mean-exp evaluation over a value multiset.
    fn ana_direct(vals: &[f64], beta: f64) -> f64 {
        let m = vals.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(beta * v));
        let s: f64 = vals.iter().map(|&v| (beta * v - m).exp()).sum();
        (m + s.ln() - (vals.len() as f64).ln()) / beta
    }

    fn const_beta<'t>(tape: &'t Tape<f64>, n: usize, beta: f64) -> Var<'t, f64> {
        tape.leaf(Matrix::from_fn(n, 1, |_, _| beta))
    }

    #[test]
    fn gumbel_eval_is_argmax_one_hot() {
        let tape = Tape::new();
        let logits = tape.leaf(Matrix::row_vector(&[5.0_f64, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let mut sampler = GumbelSampler::new(3, 1.0);
        let sel = gna_select(&tape, logits, &mut sampler, SelectMode::Eval).value();
        assert_eq!(sel.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gumbel_train_rows_are_distributions() {
        let tape = Tape::new();
        let logits = tape.leaf(Matrix::from_fn(8, 6, |r, c| ((r + c) as f64) * 0.1));
        let mut sampler = GumbelSampler::new(7, 0.5);
        let sel = gna_select(&tape, logits, &mut sampler, SelectMode::Train).value();
        for i in 0..8 {
            let s: f64 = sel.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(sel.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn train_selection_frequencies_follow_softmax() {
        // Gumbel-max: the argmax of the relaxed sample is a
        // categorical draw from softmax(logits), independent of tau.
        let logits_row = [1.0f64, 0.5, 0.0, -0.5, -1.0, 2.0];
        let n = 100_000usize;
        let tape = Tape::new();
        let logits = tape.leaf(Matrix::from_fn(n, 6, |_, c| logits_row[c]));
        let mut sampler = GumbelSampler::new(31, 0.7);
        let sel = gna_select(&tape, logits, &mut sampler, SelectMode::Train).value();
        let mut counts = [0usize; 6];
        for i in 0..n {
            let row = sel.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            counts[best] += 1;
        }
        let m = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits_row.iter().map(|&l| (l - m).exp()).sum();
        for (k, &c) in counts.iter().enumerate() {
            let want = (logits_row[k] - m).exp() / z;
            let got = c as f64 / n as f64;
            assert!((got - want).abs() < 0.02, "kind {k}: {got} vs {want}");
        }
    }

    #[test]
    fn uniform_logits_select_uniformly() {
        // Gumbel-max: argmax(logits + G) ~ Categorical(softmax(logits)).
        let mut sampler = GumbelSampler::new(99, 1.0);
        let mut counts = [0usize; 6];
        let n = 100_000;
        let noise = sampler.sample::<f64>(n, 6);
        for i in 0..n {
            let row = noise.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            counts[best] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 1.0 / 6.0).abs() < 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn gna_one_hot_reproduces_single_aggregator() {
        let g = star(&[1.0, -1.0, 2.0], 0.5);
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        let mut onehot = Matrix::zeros(4, 6);
        for i in 0..4 {
            onehot.set(i, AggregatorKind::Mean.index(), 1.0);
        }
        let w = tape.leaf(onehot);
        let mixed = gna_aggregate(&g, x, w).value();
        let plain = aggregators::aggregate(AggregatorKind::Mean, &g, x).value();
        assert_eq!(mixed, plain);
    }

    #[test]
    fn gna_half_mean_half_max() {
        // Neighbors {1, -1} (self-loop value 1): mean 0, max 1.
        let g = star(&[-1.0], 1.0);
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        let mut w = Matrix::zeros(2, 6);
        for i in 0..2 {
            w.set(i, AggregatorKind::Mean.index(), 0.5);
            w.set(i, AggregatorKind::Max.index(), 0.5);
        }
        let w = tape.leaf(w);
        let out = gna_aggregate(&g, x, w).value();
        assert_eq!(out.get(0, 0), 0.5);
    }

    #[test]
    fn gna_soft_weights_match_explicit_convex_combination() {
        let g = star(&[2.0, -1.0, 0.5, 3.0], -0.5);
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        let logits = tape.leaf(Matrix::from_fn(5, 6, |r, c| ((r * 6 + c) as f64).sin()));
        let weights = logits.softmax(1.0);
        let got = gna_aggregate(&g, x, weights).value();

        let wv = weights.value();
        let mut want = Matrix::zeros(5, 1);
        for (k, &kind) in POOL.iter().enumerate() {
            let part = aggregators::aggregate(kind, &g, x).value();
            for i in 0..5 {
                want.set(i, 0, want.get(i, 0) + wv.get(i, k) * part.get(i, 0));
            }
        }
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn select_aggregate_matches_one_hot_mixture() {
        let g = star(&[2.0, -1.0, 0.5], 1.5);
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        let selection = vec![3usize, 0, 1, 5];
        let mut onehot = Matrix::zeros(4, 6);
        for (i, &s) in selection.iter().enumerate() {
            onehot.set(i, s, 1.0);
        }
        let w = tape.leaf(onehot);
        let mixed = gna_aggregate(&g, x, w).value();
        let direct = select_aggregate(&g, g.features(), &selection);
        assert_eq!(mixed, direct);
    }

    #[test]
    #[should_panic(expected = "sums to")]
    fn gna_rejects_unnormalized_rows() {
        let g = star(&[1.0], 0.0);
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        let w = tape.leaf(Matrix::from_fn(2, 6, |_, _| 0.3));
        let _ = gna_aggregate(&g, x, w);
    }

    #[test]
    fn ana_single_neighbor_is_exact_identity() {
        let g = Graph::new(1, &[], Matrix::from_vec(1, 1, vec![0.73_f64]), None, None).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        for beta in [0.1, 1.0, 9.5] {
            let b = const_beta(&tape, 1, beta);
            let out = ana_aggregate(&g, x, b).value();
            assert!((out.get(0, 0) - 0.73).abs() < 1e-12, "beta {beta}");
        }
    }

    #[test]
    fn ana_matches_direct_high_precision_evaluation() {
        // Multiset {1, -1, -1} at beta = 8: (1/8) ln((e^8 + 2e^-8)/3).
        let g = star(&[-1.0, -1.0], 1.0);
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        let b = const_beta(&tape, 3, 8.0);
        let out = ana_aggregate(&g, x, b).value();
        let want = ((8f64.exp() + 2.0 * (-8f64).exp()) / 3.0).ln() / 8.0;
        assert!((want - 0.8627).abs() < 1e-3, "sanity on the quoted value");
        assert!((out.get(0, 0) - want).abs() < 1e-9);
    }

    #[test]
    fn ana_small_beta_approaches_mean() {
        let g = star(&[4.0], 2.0); // multiset {2, 4}
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        let b = const_beta(&tape, 2, 1e-3);
        let out = ana_aggregate(&g, x, b).value();
        assert!((out.get(0, 0) - 3.0).abs() < 1e-2);
    }

    #[test]
    fn ana_min_variant() {
        let g = star(&[-1.0, -1.0], 1.0); // multiset {1, -1, -1}
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());

        let b = const_beta(&tape, 3, 50.0);
        let out = ana_min_aggregate(&g, x, b).value();
        assert!((out.get(0, 0) - (-1.0)).abs() <= 3f64.ln() / 50.0);

        // Exact symmetry: min variant is literally -ANA(-x).
        let b2 = const_beta(&tape, 3, 7.3);
        let lhs = ana_min_aggregate(&g, x, b2).value();
        let rhs = x.neg().ana(b2, g.adjacency()).neg().value();
        assert_eq!(lhs, rhs);

        let single =
            Graph::new(1, &[], Matrix::from_vec(1, 1, vec![-2.4_f64]), None, None).unwrap();
        let t2 = Tape::new();
        let xs = t2.leaf(single.features().clone());
        let bs = const_beta(&t2, 1, 3.0);
        assert!((ana_min_aggregate(&single, xs, bs).value().get(0, 0) + 2.4).abs() < 1e-12);
    }

    #[test]
    fn ana_var_variant() {
        // Constant neighborhood -> 0 for any beta.
        let g = star(&[2.0], 2.0);
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        let b = const_beta(&tape, 2, 4.2);
        assert!(ana_var_aggregate(&g, x, b).value().get(0, 0).abs() < 1e-6);

        // {1, -1} at beta -> 0 approaches the population variance 1.
        let g = star(&[-1.0], 1.0);
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        let b = const_beta(&tape, 2, 1e-3);
        assert!((ana_var_aggregate(&g, x, b).value().get(0, 0) - 1.0).abs() < 1e-2);

        // Single neighbor -> exactly 0.
        let single =
            Graph::new(1, &[], Matrix::from_vec(1, 1, vec![1.7_f64]), None, None).unwrap();
        let t = Tape::new();
        let xs = t.leaf(single.features().clone());
        let bs = const_beta(&t, 1, 2.0);
        assert_eq!(ana_var_aggregate(&single, xs, bs).value().get(0, 0), 0.0);
    }

    #[test]
    fn ana_sandwich_bound_at_large_beta() {
        let mut seed = 13u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64) / ((1u64 << 53) as f64)
        };
        for _ in 0..40 {
            let n = 1 + (next() * 7.0) as usize;
            let vals: Vec<f64> = (0..n).map(|_| next() * 6.0 - 3.0).collect();
            let center = next() * 6.0 - 3.0;
            let g = star(&vals, center);
            let tape = Tape::new();
            let x = tape.leaf(g.features().clone());
            let beta = 50.0;
            let b = const_beta(&tape, n + 1, beta);
            let out = ana_aggregate(&g, x, b).value();
            let mx = aggregators::aggregate(AggregatorKind::Max, &g, x).value();
            for i in 0..=n {
                let deg = g.in_degree(i).unwrap() as f64;
                let lo = mx.get(i, 0) - deg.ln() / beta;
                assert!(out.get(i, 0) <= mx.get(i, 0) + 1e-9);
                assert!(out.get(i, 0) >= lo - 1e-9);
            }
        }
    }

    #[test]
    fn ana_monotone_in_beta() {
        let g = star(&[3.0, -2.0, 0.5], 1.0);
        let grid = [0.1, 0.3, 1.0, 2.5, 5.0, 10.0];
        let mut prev = f64::NEG_INFINITY;
        for &beta in &grid {
            let tape = Tape::new();
            let x = tape.leaf(g.features().clone());
            let b = const_beta(&tape, 4, beta);
            let v = ana_aggregate(&g, x, b).value().get(0, 0);
            assert!(v >= prev - 1e-9, "ANA not monotone at beta {beta}");
            prev = v;
        }
    }

    #[test]
    fn ana_permutation_invariance() {
        let edges = vec![(1, 0), (2, 0), (3, 0), (1, 2)];
        let mut rev = edges.clone();
        rev.reverse();
        let feats = Matrix::from_fn(4, 2, |r, c| ((r * 2 + c) as f64) * 0.53 - 1.2);
        let a = Graph::new(4, &edges, feats.clone(), None, None).unwrap();
        let b = Graph::new(4, &rev, feats, None, None).unwrap();
        let tape = Tape::new();
        let xa = tape.leaf(a.features().clone());
        let xb = tape.leaf(b.features().clone());
        let ba = const_beta(&tape, 4, 2.2);
        assert_eq!(
            ana_aggregate(&a, xa, ba).value(),
            ana_aggregate(&b, xb, ba).value()
        );
    }

    #[test]
    fn ana_gradients_match_finite_differences() {
        let g = star(&[1.3, -0.7, 0.2], 0.9);
        let feats0 = g.features().clone();
        for beta in [0.1, 1.0, 10.0] {
            let tape = Tape::new();
            let x = tape.leaf(feats0.clone());
            let b = tape.leaf(Matrix::from_fn(4, 1, |i, _| beta + 0.01 * i as f64));
            let loss = ana_aggregate(&g, x, b).sum_all();
            let grads = tape.backward(loss).unwrap();

            let eval = |fm: &Matrix<f64>, bm: &Matrix<f64>| {
                let t = Tape::new();
                let xv = t.leaf(fm.clone());
                let bv = t.leaf(bm.clone());
                ana_aggregate(&g, xv, bv).sum_all().value().get(0, 0)
            };
            let step = 1e-5;
            let b0 = Matrix::from_fn(4, 1, |i, _| beta + 0.01 * i as f64);
            for i in 0..4 {
                let mut hi = feats0.clone();
                hi.set(i, 0, feats0.get(i, 0) + step);
                let mut lo = feats0.clone();
                lo.set(i, 0, feats0.get(i, 0) - step);
                let fd = (eval(&hi, &b0) - eval(&lo, &b0)) / (2.0 * step);
                assert!(
                    (grads.get(x).get(i, 0) - fd).abs() < 1e-3,
                    "feature grad at beta {beta}"
                );

                let mut bhi = b0.clone();
                bhi.set(i, 0, b0.get(i, 0) + step);
                let mut blo = b0.clone();
                blo.set(i, 0, b0.get(i, 0) - step);
                let fdb = (eval(&feats0, &bhi) - eval(&feats0, &blo)) / (2.0 * step);
                assert!(
                    (grads.get(b).get(i, 0) - fdb).abs() < 1e-3,
                    "beta grad at beta {beta}"
                );
            }
        }
    }

    #[test]
    fn hybrid_h1_is_plain_ana() {
        let g = star(&[2.0, -1.0], 0.3);
        let beta_map = BetaMap::new(0.1, 10.0);
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        let raw = tape.leaf(Matrix::from_fn(3, 1, |i, _| i as f64 * 0.4 - 0.3));
        let hybrid = ana_hybrid_aggregate(&tape, &g, x, raw, 1, &beta_map).value();
        let beta = beta_map.map(raw);
        let plain = ana_aggregate(&g, x, beta).value();
        assert_eq!(hybrid, plain);
    }

    #[test]
    fn hybrid_forced_one_hot_weights_equal_single_term() {
        let g = star(&[2.0, -1.0, 0.5], 0.3);
        let beta_map = BetaMap::new(0.1, 10.0);
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        // Raw: three beta channels at 0, weight logits hugely favoring
        // term 0 so omega is (1, 0, 0) to double precision.
        let raw = tape.leaf(Matrix::from_fn(4, 6, |_, c| match c {
            3 => 60.0,
            4 | 5 => -60.0,
            _ => 0.0,
        }));
        let hybrid = ana_hybrid_aggregate(&tape, &g, x, raw, 3, &beta_map).value();
        let beta = beta_map.map(raw.slice_cols(0, 1));
        let term1 = ana_aggregate(&g, x, beta).value();
        assert!(hybrid.max_abs_diff(&term1) < 1e-9);
    }

    #[test]
    fn hybrid_random_weights_match_explicit_combination() {
        let g = star(&[1.0, 2.0, -2.0], -0.4);
        let beta_map = BetaMap::new(0.1, 10.0);
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        let raw0 = Matrix::from_fn(4, 6, |r, c| ((r * 6 + c) as f64 * 0.7).sin());
        let raw = tape.leaf(raw0.clone());
        let hybrid = ana_hybrid_aggregate(&tape, &g, x, raw, 3, &beta_map).value();

        let omega = raw.slice_cols(3, 3).softmax(1.0).value();
        let mut want = Matrix::zeros(4, 1);
        for t in 0..3 {
            let beta = beta_map.map(raw.slice_cols(t, 1));
            let term = match t {
                0 => ana_aggregate(&g, x, beta),
                1 => ana_min_aggregate(&g, x, beta),
                _ => ana_norm_aggregate(&tape, &g, x, beta),
            }
            .value();
            for i in 0..4 {
                want.set(i, 0, want.get(i, 0) + omega.get(i, t) * term.get(i, 0));
            }
        }
        assert!(hybrid.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    #[should_panic(expected = "hybrid term count")]
    fn hybrid_rejects_bad_h() {
        hybrid_raw_width(4);
    }

    #[test]
    fn eval_noise_flag_randomizes_eval_selection() {
        let tape = Tape::new();
        // Near-tied logits so noise actually flips choices.
        let logits = tape.leaf(Matrix::from_fn(64, 6, |_, c| c as f64 * 1e-3));
        let mut quiet = GumbelSampler::new(3, 1.0);
        let d1 = gna_select(&tape, logits, &mut quiet, SelectMode::Eval).value();
        let mut quiet2 = GumbelSampler::new(4, 1.0);
        let d2 = gna_select(&tape, logits, &mut quiet2, SelectMode::Eval).value();
        assert_eq!(d1, d2, "noise-free eval ignores sampler state");

        let mut noisy = GumbelSampler::new(5, 1.0);
        noisy.set_eval_noise(true);
        assert!(noisy.eval_noise());
        let n1 = gna_select(&tape, logits, &mut noisy, SelectMode::Eval).value();
        assert_ne!(n1, d1, "eval noise should perturb near-tied selections");
        for i in 0..64 {
            assert_eq!(n1.row(i).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn beta_map_stays_in_bounds() {
        let beta_map = BetaMap::new(0.1_f64, 10.0);
        let tape = Tape::new();
        let raw = tape.leaf(Matrix::row_vector(&[-1e6, -1.0, 0.0, 1.0, 1e6]));
        let out = beta_map.map(raw).value();
        for &b in out.data() {
            assert!((0.1..=10.0).contains(&b));
        }
        assert!((out.get(0, 3) + out.get(0, 1) - 10.1).abs() < 1e-9, "sigmoid symmetry");
    }

    #[test]
    fn encoder_output_is_scaled_bit_kernel_preactivation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = star(&[1.0, -2.0, 0.5], 0.1);
        let enc = BinaryGraphAutoEncoder::<f64>::new(1, 6, false, &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        let (raw, ids) = enc.encode(&tape, &g, x);
        assert_eq!(ids.len(), 1);
        let v = raw.value();
        assert_eq!(v.shape(), (4, 6));
        let fan_in = 2.0f64; // 2 * in_dim
        for &e in v.data() {
            // Undoing the 1/fan_in scale recovers the integer
            // pre-activation of the bit kernel.
            let pre = e * fan_in;
            assert!((pre - pre.round()).abs() < 1e-9, "pre-activation not integer: {pre}");
            assert!(pre.abs() <= fan_in, "bounded by the reduction length");
        }
    }

    #[test]
    fn ana_direct_agrees_with_tape_on_multiset() {
        let vals = [1.0, -1.0, -1.0];
        let g = star(&vals[1..], vals[0]);
        let tape = Tape::new();
        let x = tape.leaf(g.features().clone());
        let b = const_beta(&tape, 3, 8.0);
        let got = ana_aggregate(&g, x, b).value().get(0, 0);
        assert!((got - ana_direct(&vals, 8.0)).abs() < 1e-12);
    }
}
