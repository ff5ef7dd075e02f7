//! Dense cross-attention math.
//!
//! A cross-attention layer produces, per head, an `M x N` block of query-key
//! products (`M` spatial cells on a `w x w` grid, `N` prompt tokens). Row-wise
//! softmax of that block turns it into an attention map whose column `t`,
//! reshaped row-major to `w x w`, shows where token `t` lands on the image.

use std::fmt;

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of a cross-attention layer within a network layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId(pub u16);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

/// Raw query-key products `Q K^T` of one layer, shape `H x M x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBlock {
    pub logits: Array3<f64>,
    /// Key dimension; logits are divided by `sqrt(d)` before the softmax.
    pub d: usize,
    pub layer: LayerId,
    /// Grid side, `w * w == M`.
    pub w: usize,
}

impl LogitBlock {
    pub fn new(logits: Array3<f64>, d: usize, layer: LayerId, w: usize) -> Result<Self> {
        let (h, m, n) = logits.dim();
        if h == 0 || n == 0 {
            return Err(Error::Empty("logit block needs at least one head and one token"));
        }
        if w * w != m {
            return Err(Error::ShapeMismatch {
                context: "logit block grid",
                expected: format!("M = w^2 = {}", w * w),
                actual: format!("M = {m}"),
            });
        }
        if d == 0 {
            return Err(crate::error::invalid("d", "key dimension must be >= 1"));
        }
        Ok(Self { logits, d, layer, w })
    }

    pub fn heads(&self) -> usize {
        self.logits.dim().0
    }
    pub fn cells(&self) -> usize {
        self.logits.dim().1
    }
    pub fn tokens(&self) -> usize {
        self.logits.dim().2
    }

    fn check_finite(&self) -> Result<()> {
        for ((head, row, col), v) in self.logits.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFiniteLogit { head, row, col });
            }
        }
        Ok(())
    }
}

/// Row-stochastic attention weights, shape `H x M x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub values: Array3<f64>,
    pub layer: LayerId,
    pub w: usize,
}

impl AttentionMap {
    pub fn heads(&self) -> usize {
        self.values.dim().0
    }
    pub fn cells(&self) -> usize {
        self.values.dim().1
    }
    pub fn tokens(&self) -> usize {
        self.values.dim().2
    }

    /// Mean over heads, shape `M x N`.
    pub fn head_mean(&self) -> Array2<f64> {
        let h = self.heads() as f64;
        self.values.sum_axis(Axis(0)) / h
    }

    /// Largest deviation of any row sum from 1, together with the smallest entry.
    pub fn stochasticity_defect(&self) -> (f64, f64) {
        let mut worst = 0.0f64;
        let mut min = f64::INFINITY;
        for head in self.values.outer_iter() {
            for row in head.outer_iter() {
                let s: f64 = row.sum();
                worst = worst.max((s - 1.0).abs());
                for &v in row {
                    min = min.min(v);
                }
            }
        }
        (worst, min)
    }

    /// Validates entries in `[0, 1]`, finite, rows summing to one within `tol`.
    pub fn check_row_stochastic(&self, tol: f64) -> std::result::Result<(), String> {
        for (h, head) in self.values.outer_iter().enumerate() {
            for (m, row) in head.outer_iter().enumerate() {
                let mut s = 0.0;
                for &v in row {
                    if !v.is_finite() || !(0.0..=1.0 + tol).contains(&v) {
                        return Err(format!("entry {v} at head {h}, row {m} outside [0, 1]"));
                    }
                    s += v;
                }
                if (s - 1.0).abs() > tol {
                    return Err(format!("row sum {s} at head {h}, row {m}"));
                }
            }
        }
        Ok(())
    }

    /// Per-token column of one head, length `M`.
    pub fn column(&self, head: usize, token: usize) -> ArrayView1<'_, f64> {
        self.values.index_axis(Axis(0), head).index_axis_move(Axis(1), token)
    }
}

/// One token's attention column reshaped to its spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMap2D {
    pub grid: Array2<f64>,
    pub token: usize,
}

impl TokenMap2D {
    pub fn max(&self) -> f64 {
        self.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major flattening, the inverse of [`unravel`].
    pub fn flatten(&self) -> Vec<f64> {
        self.grid.iter().copied().collect()
    }
}

/// Numerically stable softmax of `(row + shift) * scale`, written into `out`.
///
/// Shared by the unedited and edited paths so that a zero shift reproduces the
/// unedited result bit-for-bit.
pub(crate) fn softmax_row_into(
    row: ArrayView1<'_, f64>,
    shift: Option<ArrayView1<'_, f64>>,
    scale: f64,
    mut out: ArrayViewMut1<'_, f64>,
) {
    match shift {
        Some(s) => {
            for ((o, &x), &ds) in out.iter_mut().zip(row).zip(s) {
                *o = (x + ds) * scale;
            }
        }
        None => {
            for (o, &x) in out.iter_mut().zip(row) {
                *o = x * scale;
            }
        }
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Softmax over tokens of each head's logit rows scaled by `1/sqrt(d)`.
pub fn compute_attention(block: &LogitBlock) -> Result<AttentionMap> {
    softmax_block(block, None)
}

/// Softmax with an optional per-cell, per-token additive shift shared by all heads.
pub(crate) fn softmax_block(block: &LogitBlock, shift: Option<ArrayView2<'_, f64>>) -> Result<AttentionMap> {
    block.check_finite()?;
    if let Some(s) = shift {
        if s.dim() != (block.cells(), block.tokens()) {
            return Err(Error::ShapeMismatch {
                context: "logit shift",
                expected: format!("{:?}", (block.cells(), block.tokens())),
                actual: format!("{:?}", s.dim()),
            });
        }
    }
    let scale = 1.0 / (block.d as f64).sqrt();
    let mut values = Array3::<f64>::zeros(block.logits.raw_dim());
    for (head_in, mut head_out) in block.logits.outer_iter().zip(values.outer_iter_mut()) {
        for (m, (row, out)) in head_in.outer_iter().zip(head_out.outer_iter_mut()).enumerate() {
            softmax_row_into(row, shift.as_ref().map(|s| s.row(m)), scale, out);
        }
    }
    Ok(AttentionMap {
        values,
        layer: block.layer,
        w: block.w,
    })
}

/// Applies attention to values: `A_h · V` for every head. `values` is `N x d_v`.
pub fn attention_output(attn: &AttentionMap, values: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
    let (h, m, n) = attn.values.dim();
    if values.nrows() != n {
        return Err(Error::ShapeMismatch {
            context: "attention_output",
            expected: format!("V with {n} rows"),
            actual: format!("{} rows", values.nrows()),
        });
    }
    let dv = values.ncols();
    let mut out = Array3::<f64>::zeros((h, m, dv));
    for (a, mut o) in attn.values.outer_iter().zip(out.outer_iter_mut()) {
        o.assign(&a.dot(&values));
    }
    Ok(out)
}

/// Row-major reshape of one token column into a `w x w` grid.
pub fn unravel(attn: &AttentionMap, head: usize, token: usize) -> Result<TokenMap2D> {
    if head >= attn.heads() {
        return Err(Error::IndexOutOfRange {
            what: "head",
            index: head,
            len: attn.heads(),
        });
    }
    if token >= attn.tokens() {
        return Err(Error::IndexOutOfRange {
            what: "token",
            index: token,
            len: attn.tokens(),
        });
    }
    let col: Vec<f64> = attn.column(head, token).to_vec();
    let grid = Array2::from_shape_vec((attn.w, attn.w), col).expect("M = w^2 checked at construction");
    Ok(TokenMap2D { grid, token })
}
