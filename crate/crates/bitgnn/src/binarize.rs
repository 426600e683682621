//! Sign binarization, straight-through gradients, bit packing and the
//! XNOR+popcount linear kernel.
//!
//! Bit layout: row-major 64-bit words, bit `b` of word `w` in a row
//! encodes column `64*w + b`; bit 1 is +1 and bit 0 is -1. Padding
//! bits in the last word of each row are zero and are excluded from
//! popcounts via the stored column count.

use thiserror::Error;

use crate::matrix::Matrix;
use crate::tape::Var;
use crate::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitError {
    #[error("entry at ({row}, {col}) is not ±1")]
    NotBinary { row: usize, col: usize },
    #[error("inner dimension mismatch: lhs has {lhs} columns, rhs has {rhs}")]
    InnerDimMismatch { lhs: usize, rhs: usize },
}

/// Scalar binarization rule: `sign(x) = +1 for x >= 0, -1 otherwise`.
#[inline]
pub fn sign<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one()
    } else {
        -F::one()
    }
}

/// Binarizes a tracked tensor, registering the straight-through
/// backward rule on the tape.
pub fn sign_binarize<'t, F: Scalar>(v: Var<'t, F>) -> Var<'t, F> {
    v.sign_ste()
}

/// The straight-through backward rule as a standalone function: the
/// gradient passes through where the latent lies in the open interval
/// (-1, 1) and is zero elsewhere.
pub fn ste_backward<F: Scalar>(grad_out: &Matrix<F>, latent: &Matrix<F>) -> Matrix<F> {
    assert_eq!(grad_out.shape(), latent.shape(), "STE shape mismatch");
    Matrix::from_fn(latent.rows(), latent.cols(), |i, j| {
        let x = latent.get(i, j);
        if x > -F::one() && x < F::one() {
            grad_out.get(i, j)
        } else {
            F::zero()
        }
    })
}

/// Row-major ±1 matrix packed into 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl PackedBitMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Reconstructs a packed matrix from its serialized parts.
    pub fn from_words(rows: usize, cols: usize, words: Vec<u64>) -> Self {
        let words_per_row = cols.div_ceil(64);
        assert_eq!(words.len(), rows * words_per_row, "word count mismatch");
        Self { rows, cols, words_per_row, words }
    }

    /// Serialized payload size in bits, padding included.
    pub fn bit_size(&self) -> usize {
        self.words.len() * 64
    }
}

/// Packs a ±1 matrix. Errors on any entry that is not exactly ±1.
pub fn pack<F: Scalar>(m: &Matrix<F>) -> Result<PackedBitMatrix, BitError> {
    let words_per_row = m.cols().div_ceil(64);
    let mut words = vec![0u64; m.rows() * words_per_row];
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let v = m.get(i, j);
            if v == F::one() {
                words[i * words_per_row + j / 64] |= 1u64 << (j % 64);
            } else if v != -F::one() {
                return Err(BitError::NotBinary { row: i, col: j });
            }
        }
    }
    Ok(PackedBitMatrix { rows: m.rows(), cols: m.cols(), words_per_row, words })
}

/// Unpacks back to a ±1 matrix; exact inverse of [`pack`].
pub fn unpack<F: Scalar>(p: &PackedBitMatrix) -> Matrix<F> {
    Matrix::from_fn(p.rows, p.cols, |i, j| {
        if p.words[i * p.words_per_row + j / 64] >> (j % 64) & 1 == 1 {
            F::one()
        } else {
            -F::one()
        }
    })
}

/// `a [m x k] * b^T [n x k] -> [m x n]` over ±1 entries: entry (i, j)
/// is `2 * popcount(XNOR(row_i, row_j)) - k` with the padding bits
/// masked out, which equals the float dot product of the ±1 rows
/// exactly. `b` is supplied pre-transposed, rows along the reduction
/// axis.
pub fn xnor_popcount_matmul(
    a: &PackedBitMatrix,
    b: &PackedBitMatrix,
) -> Result<Matrix<i32>, BitError> {
    if a.cols != b.cols {
        return Err(BitError::InnerDimMismatch { lhs: a.cols, rhs: b.cols });
    }
    let k = a.cols;
    let wpr = a.words_per_row;
    let tail_bits = k - 64 * (wpr.saturating_sub(1));
    let tail_mask: u64 = if k == 0 || tail_bits == 64 { !0 } else { (1u64 << tail_bits) - 1 };

    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = &a.words[i * wpr..(i + 1) * wpr];
        for j in 0..b.rows {
            let brow = &b.words[j * wpr..(j + 1) * wpr];
            let mut matches = 0u32;
            for w in 0..wpr {
                let mask = if w + 1 == wpr { tail_mask } else { !0 };
                matches += (!(arow[w] ^ brow[w]) & mask).count_ones();
            }
            out.set(i, j, 2 * matches as i32 - k as i32);
        }
    }
    Ok(out)
}

/// Binary linear transform on the tape: both operands must already be
/// ±1 (outputs of [`sign_binarize`]). The forward value comes from the
/// packed kernel; the backward rule is the ordinary matmul rule on the
/// binarized operands.
pub fn bit_linear<'t, F: Scalar>(x_b: Var<'t, F>, w_b: Var<'t, F>) -> Var<'t, F> {
    let xv = x_b.value();
    let wv = w_b.value();
    let px = pack(&xv).expect("bit_linear lhs must be ±1");
    let pw = pack(&wv.transpose()).expect("bit_linear rhs must be ±1");
    let ints = xnor_popcount_matmul(&px, &pw).expect("bit_linear inner dims");
    let value = ints.map(|v| crate::cast::<F>(f64::from(v)));
    x_b.matmul_with_value(w_b, value)
}
