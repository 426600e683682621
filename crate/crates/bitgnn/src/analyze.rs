//! Brute-force distinguishability analysis over small integer
//! multisets.
//!
//! Statistics are evaluated in exact rational arithmetic so equality
//! verdicts carry no float noise; the standard-deviation verdict
//! follows from the variance one (sqrt is injective on non-negatives),
//! and the five-aggregator mixed-sum verdict resolves the irrational
//! sqrt term exactly via a perfect-square test.
//!
//! The diffused-aggregator check evaluates three quantities on a beta
//! grid: plain `ANA`, the normalized variance form (blind to
//! proportional multisets by construction, since both depend only on
//! the empirical value distribution), and the degree-scaled smooth
//! neighborhood norm, the sum-like term the hybrid mixes in.

use num_rational::Ratio;
use rayon::prelude::*;
use thiserror::Error;

use crate::aggregators::AggregatorKind;
use crate::stats;

type Q = Ratio<i64>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalyzeError {
    #[error("enumeration guard exceeded: max_size {max_size} > 6 or value span {span} > 9")]
    GuardExceeded { max_size: usize, span: usize },
    #[error("empty value range")]
    EmptyRange,
}

/// Exact statistics of an integer multiset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactStats {
    pub mean: Q,
    pub max: Q,
    pub min: Q,
    pub sum: Q,
    pub var: Q,
}

pub fn exact_stats(vals: &[i64]) -> ExactStats {
    assert!(!vals.is_empty(), "empty multiset");
    let q: Vec<Q> = vals.iter().map(|&v| Ratio::from_integer(v)).collect();
    ExactStats {
        mean: stats::mean(&q),
        max: stats::max(&q),
        min: stats::min(&q),
        sum: stats::sum(&q),
        var: stats::var(&q),
    }
}

/// Exact equality of one aggregator across two multisets. `Std`
/// delegates to the variance comparison.
pub fn kind_equal(kind: AggregatorKind, a: &ExactStats, b: &ExactStats) -> bool {
    match kind {
        AggregatorKind::Mean => a.mean == b.mean,
        AggregatorKind::Max => a.max == b.max,
        AggregatorKind::Min => a.min == b.min,
        AggregatorKind::Sum => a.sum == b.sum,
        AggregatorKind::Var | AggregatorKind::Std => a.var == b.var,
    }
}

fn isqrt_exact(n: i64) -> Option<i64> {
    if n < 0 {
        return None;
    }
    let r = (n as f64).sqrt().round() as i64;
    [r - 1, r, r + 1].into_iter().find(|&c| c >= 0 && c * c == n)
}

/// Exact sqrt of a non-negative rational, when it is rational.
fn rational_sqrt(q: Q) -> Option<Q> {
    Some(Ratio::new(isqrt_exact(*q.numer())?, isqrt_exact(*q.denom())?))
}

/// Equality of `mean + max + min + std + var` (the five-aggregator
/// mixed sum), exact. With distinct variances the sums can only agree
/// when both standard deviations are rational.
pub fn mixed_sum_equal(a: &ExactStats, b: &ExactStats) -> bool {
    let ra = a.mean + a.max + a.min + a.var;
    let rb = b.mean + b.max + b.min + b.var;
    if a.var == b.var {
        return ra == rb;
    }
    match (rational_sqrt(a.var), rational_sqrt(b.var)) {
        (Some(sa), Some(sb)) => ra + sa == rb + sb,
        _ => false,
    }
}

/// The concatenation collides only if every component does.
pub fn mixed_concat_equal(a: &ExactStats, b: &ExactStats) -> bool {
    use AggregatorKind::{Max, Mean, Min, Std, Var};
    [Mean, Max, Min, Std, Var].iter().all(|&k| kind_equal(k, a, b))
}

/// Direct diffused-aggregator evaluation
/// `(1/beta) * log(mean(exp(beta * v)))` over a multiset: the multiset
/// size plays the degree role.
pub fn ana_value(vals: &[i64], beta: f64) -> f64 {
    let m = vals.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(beta * v as f64));
    let s: f64 = vals.iter().map(|&v| (beta * v as f64 - m).exp()).sum();
    (m + s.ln() - (vals.len() as f64).ln()) / beta
}

fn ana_var_value(vals: &[i64], beta: f64) -> f64 {
    let sq: Vec<i64> = vals.iter().map(|&v| v * v).collect();
    ana_value(&sq, beta) - ana_value(vals, beta).powi(2)
}

fn ana_norm_value(vals: &[i64], beta: f64) -> f64 {
    let sq: Vec<i64> = vals.iter().map(|&v| v * v).collect();
    (vals.len() as f64 * ana_value(&sq, beta)).max(0.0).sqrt()
}

/// Log-spaced grid over the default beta bounds.
pub fn default_beta_grid() -> Vec<f64> {
    let (lo, hi) = (0.1f64, 10.0f64);
    let n = 25;
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Outcome of the diffused-aggregator separation check.
#[derive(Debug, Clone, PartialEq)]
pub struct AnaSeparation {
    /// First grid beta where plain ANA values differ, if any.
    pub plain_witness: Option<f64>,
    /// Whether the normalized variance term separates anywhere on the
    /// grid.
    pub normalized_var_separates: bool,
    /// Whether the degree-scaled smooth-norm term separates.
    pub sum_like_separates: bool,
}

impl AnaSeparation {
    /// True when plain ANA or the hybrid's sum-like term separates.
    pub fn separates(&self) -> bool {
        self.plain_witness.is_some() || self.sum_like_separates
    }
}

const SEP_TOL: f64 = 1e-6;

pub fn ana_separates(a: &[i64], b: &[i64], beta_grid: &[f64]) -> AnaSeparation {
    let mut plain_witness = None;
    let mut var_sep = false;
    let mut sumsq_sep = false;
    for &beta in beta_grid {
        if plain_witness.is_none() && (ana_value(a, beta) - ana_value(b, beta)).abs() > SEP_TOL {
            plain_witness = Some(beta);
        }
        var_sep |= (ana_var_value(a, beta) - ana_var_value(b, beta)).abs() > SEP_TOL;
        sumsq_sep |= (ana_norm_value(a, beta) - ana_norm_value(b, beta)).abs() > SEP_TOL;
    }
    AnaSeparation {
        plain_witness,
        normalized_var_separates: var_sep,
        sum_like_separates: sumsq_sep,
    }
}

/// Per-pair verdicts; `true` means the statistic is equal on both
/// multisets.
#[derive(Debug, Clone)]
pub struct PairRow {
    pub a: u32,
    pub b: u32,
    pub equal: [bool; 6], // pool order: mean, max, min, sum, std, var
    pub mixed_sum_equal: bool,
    pub mixed_concat_equal: bool,
    pub ana: AnaSeparation,
}

#[derive(Debug, Clone)]
pub struct CollisionReport {
    pub multisets: Vec<Vec<i64>>,
    pub rows: Vec<PairRow>,
}

fn fmt_multiset(vals: &[i64]) -> String {
    vals.iter().map(i64::to_string).collect::<Vec<_>>().join(" ")
}

impl CollisionReport {
    pub fn multiset(&self, id: u32) -> &[i64] {
        &self.multisets[id as usize]
    }

    /// Finds the row for an unordered multiset pair.
    pub fn find(&self, a: &[i64], b: &[i64]) -> Option<&PairRow> {
        let fa = self.multisets.iter().position(|m| m == a)? as u32;
        let fb = self.multisets.iter().position(|m| m == b)? as u32;
        let (lo, hi) = if fa < fb { (fa, fb) } else { (fb, fa) };
        self.rows.iter().find(|r| r.a == lo && r.b == hi)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "size_a,multiset_a,size_b,multiset_b,mean,max,min,sum,std,var,mixed_sum,mixed_concat,ana_witness_beta\n",
        );
        let eq = |v: bool| if v { "eq" } else { "ne" };
        for row in &self.rows {
            let ma = &self.multisets[row.a as usize];
            let mb = &self.multisets[row.b as usize];
            let ana = match (&row.ana.plain_witness, row.ana.sum_like_separates) {
                (Some(w), _) => w.to_string(),
                (None, true) => "hybrid".to_string(),
                (None, false) => "none".to_string(),
            };
            // Column order: mean, max, min, sum, std, var.
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                ma.len(),
                fmt_multiset(ma),
                mb.len(),
                fmt_multiset(mb),
                eq(row.equal[0]),
                eq(row.equal[1]),
                eq(row.equal[2]),
                eq(row.equal[3]),
                eq(row.equal[4]),
                eq(row.equal[5]),
                eq(row.mixed_sum_equal),
                eq(row.mixed_concat_equal),
                ana,
            ));
        }
        out
    }
}

/// All non-decreasing integer sequences of the given sizes.
fn enumerate_multisets(max_size: usize, lo: i64, hi: i64) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    fn rec(out: &mut Vec<Vec<i64>>, current: &mut Vec<i64>, from: i64, hi: i64, left: usize) {
        if left == 0 {
            out.push(current.clone());
            return;
        }
        for v in from..=hi {
            current.push(v);
            rec(out, current, v, hi, left - 1);
            current.pop();
        }
    }
    for size in 1..=max_size {
        rec(&mut out, &mut current, lo, hi, size);
    }
    out
}

/// Evaluates every unordered multiset pair of sizes up to `max_size`
/// with values in `[lo, hi]`. Guarded combinatorially.
pub fn enumerate_collisions(
    max_size: usize,
    lo: i64,
    hi: i64,
) -> Result<CollisionReport, AnalyzeError> {
    if lo > hi {
        return Err(AnalyzeError::EmptyRange);
    }
    let span = (hi - lo + 1) as usize;
    if max_size > 6 || span > 9 || max_size == 0 {
        return Err(AnalyzeError::GuardExceeded { max_size, span });
    }
    let multisets = enumerate_multisets(max_size, lo, hi);
    let stats: Vec<ExactStats> = multisets.iter().map(|m| exact_stats(m)).collect();
    let grid = default_beta_grid();
    // Precompute the grid-valued diffused statistics once per multiset.
    let ana_grids: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = multisets
        .par_iter()
        .map(|m| {
            let plain: Vec<f64> = grid.iter().map(|&b| ana_value(m, b)).collect();
            let var: Vec<f64> = grid.iter().map(|&b| ana_var_value(m, b)).collect();
            let sumsq: Vec<f64> = grid.iter().map(|&b| ana_norm_value(m, b)).collect();
            (plain, var, sumsq)
        })
        .collect();

    let n = multisets.len();
    let pairs: Vec<(u32, u32)> = (0..n as u32)
        .flat_map(|i| ((i + 1)..n as u32).map(move |j| (i, j)))
        .collect();
    let rows: Vec<PairRow> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (sa, sb) = (&stats[i as usize], &stats[j as usize]);
            let equal = [
                kind_equal(AggregatorKind::Mean, sa, sb),
                kind_equal(AggregatorKind::Max, sa, sb),
                kind_equal(AggregatorKind::Min, sa, sb),
                kind_equal(AggregatorKind::Sum, sa, sb),
                kind_equal(AggregatorKind::Std, sa, sb),
                kind_equal(AggregatorKind::Var, sa, sb),
            ];
            let (pa, va, ka) = &ana_grids[i as usize];
            let (pb, vb, kb) = &ana_grids[j as usize];
            let mut plain_witness = None;
            let mut var_sep = false;
            let mut sumsq_sep = false;
            for (g, &beta) in grid.iter().enumerate() {
                if plain_witness.is_none() && (pa[g] - pb[g]).abs() > SEP_TOL {
                    plain_witness = Some(beta);
                }
                var_sep |= (va[g] - vb[g]).abs() > SEP_TOL;
                sumsq_sep |= (ka[g] - kb[g]).abs() > SEP_TOL;
            }
            PairRow {
                a: i,
                b: j,
                equal,
                mixed_sum_equal: mixed_sum_equal(sa, sb),
                mixed_concat_equal: mixed_concat_equal(sa, sb),
                ana: AnaSeparation {
                    plain_witness,
                    normalized_var_separates: var_sep,
                    sum_like_separates: sumsq_sep,
                },
            }
        })
        .collect();

    Ok(CollisionReport { multisets, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_pool_collision_pair() {
        // {1,-1} vs {1,1,-1,-1}: every pool statistic coincides,
        // including sum (0 vs 0).
        let a = [-1i64, 1];
        let b = [-1i64, -1, 1, 1];
        let (sa, sb) = (exact_stats(&a), exact_stats(&b));
        for kind in crate::aggregators::POOL {
            assert!(kind_equal(kind, &sa, &sb), "{}", kind.name());
        }
        assert!(mixed_sum_equal(&sa, &sb));
        assert!(mixed_concat_equal(&sa, &sb));
        // Plain ANA is blind (identical value proportions) and so is
        // the normalized variance term; the degree-scaled sum-like
        // term separates through the size difference.
        let sep = ana_separates(&a, &b, &default_beta_grid());
        assert_eq!(sep.plain_witness, None);
        assert!(!sep.normalized_var_separates);
        assert!(sep.sum_like_separates);
        assert!(sep.separates());
    }

    #[test]
    fn sum_separable_pair() {
        // {3,1} vs {3,3,1,1}: mean=2, max=3, min=1, std=var=1 all
        // coincide; only sum (4 vs 8) distinguishes.
        let a = [1i64, 3];
        let b = [1i64, 1, 3, 3];
        let (sa, sb) = (exact_stats(&a), exact_stats(&b));
        use AggregatorKind::*;
        for kind in [Mean, Max, Min, Std, Var] {
            assert!(kind_equal(kind, &sa, &sb), "{}", kind.name());
        }
        assert!(!kind_equal(Sum, &sa, &sb));
        assert!(mixed_sum_equal(&sa, &sb), "five-standard mixed sum collides");
        assert!(mixed_concat_equal(&sa, &sb));

        let sep = ana_separates(&a, &b, &default_beta_grid());
        assert_eq!(sep.plain_witness, None, "proportional multisets blind plain ANA");
        assert!(!sep.normalized_var_separates, "normalized var term also fails");
        assert!(sep.sum_like_separates, "sum-like term separates");
    }

    #[test]
    fn identical_multisets_never_distinct() {
        let m = [2i64, -1, 0];
        let s = exact_stats(&m);
        for kind in crate::aggregators::POOL {
            assert!(kind_equal(kind, &s, &s));
        }
        assert!(mixed_sum_equal(&s, &s));
        assert!(mixed_concat_equal(&s, &s));
        let sep = ana_separates(&m, &m, &default_beta_grid());
        assert_eq!(sep.plain_witness, None);
        assert!(!sep.normalized_var_separates);
        assert!(!sep.sum_like_separates);
        assert!(!sep.separates());
    }

    #[test]
    fn mean_equal_max_distinct_pair_has_plain_witness() {
        // {2,4} vs {3,3}: equal mean, smooth-max differs; beta = 2
        // already separates.
        let a = [2i64, 4];
        let b = [3i64, 3];
        let va = ana_value(&a, 2.0);
        let vb = ana_value(&b, 2.0);
        assert!((va - vb).abs() > 0.1, "{va} vs {vb}");
        // High-precision check of the direct evaluation.
        let want = ((4.0f64.exp() + 8.0f64.exp()) / 2.0).ln() / 2.0;
        assert!((va - want).abs() < 1e-12);

        let sep = ana_separates(&a, &b, &default_beta_grid());
        let w = sep.plain_witness.expect("witness expected");
        assert!((ana_value(&a, w) - ana_value(&b, w)).abs() > SEP_TOL);
    }

    #[test]
    fn smooth_max_sandwich_holds_for_all_grid_betas() {
        let sets: [&[i64]; 4] = [&[1, -1], &[3, 1, 1], &[-2, -2, 4, 0], &[2]];
        for vals in sets {
            let mx = *vals.iter().max().unwrap() as f64;
            let deg = vals.len() as f64;
            for &beta in &default_beta_grid() {
                let v = ana_value(vals, beta);
                assert!(v <= mx + 1e-9);
                assert!(v >= mx - deg.ln() / beta - 1e-9);
            }
        }
    }

    #[test]
    fn enumerate_finds_the_reference_rows() {
        let report = enumerate_collisions(4, -2, 2).unwrap();
        // {-1,1} vs {-1,-1,1,1} is a full-pool collision row.
        let row = report.find(&[-1, 1], &[-1, -1, 1, 1]).expect("row present");
        assert!(row.equal.iter().all(|&e| e));
        assert!(row.mixed_sum_equal);
        assert!(row.mixed_concat_equal);
        assert_eq!(row.ana.plain_witness, None);
        assert!(row.ana.sum_like_separates);

        // CSV carries the row with all-eq pool verdicts.
        let csv = report.to_csv();
        let line = csv
            .lines()
            .find(|l| l.starts_with("2,-1 1,4,-1 -1 1 1,"))
            .expect("csv row present");
        assert!(line.contains("eq,eq,eq,eq,eq,eq,eq,eq,hybrid"));
    }

    #[test]
    fn enumerate_within_small_range_finds_sum_separable_pair() {
        let report = enumerate_collisions(4, 1, 3).unwrap();
        let row = report.find(&[1, 3], &[1, 1, 3, 3]).expect("row present");
        // mean, max, min, std, var equal; sum distinct.
        assert!(row.equal[0] && row.equal[1] && row.equal[2]);
        assert!(row.equal[4] && row.equal[5]);
        assert!(!row.equal[3]);
    }

    #[test]
    fn guard_rejects_oversized_requests() {
        assert!(matches!(
            enumerate_collisions(7, 0, 1),
            Err(AnalyzeError::GuardExceeded { .. })
        ));
        assert!(matches!(
            enumerate_collisions(3, -5, 5),
            Err(AnalyzeError::GuardExceeded { .. })
        ));
        assert!(matches!(enumerate_collisions(3, 2, 1), Err(AnalyzeError::EmptyRange)));
    }

    #[test]
    fn csv_generation_is_reproducible() {
        let a = enumerate_collisions(3, -1, 1).unwrap().to_csv();
        let b = enumerate_collisions(3, -1, 1).unwrap().to_csv();
        assert_eq!(a, b);
    }

    #[test]
    fn mixed_sum_handles_irrational_std_exactly() {
        // var 2 (std = sqrt(2), irrational) vs var 1/2: the five-sums
        // cannot coincide.
        let a = [0i64, 2, 4]; // mean 2, var 8/3
        let b = [1i64, 3]; // mean 2, var 1
        let (sa, sb) = (exact_stats(&a), exact_stats(&b));
        assert_ne!(sa.var, sb.var);
        assert!(!mixed_sum_equal(&sa, &sb));
    }

    #[test]
    fn exact_stats_reference_values() {
        let s = exact_stats(&[3, 1]);
        assert_eq!(s.mean, Ratio::from_integer(2));
        assert_eq!(s.max, Ratio::from_integer(3));
        assert_eq!(s.min, Ratio::from_integer(1));
        assert_eq!(s.sum, Ratio::from_integer(4));
        assert_eq!(s.var, Ratio::from_integer(1));
    }
}
