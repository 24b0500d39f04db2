//! 3D rotary position embedding.
//!
//! The head dimension is split across the temporal/height/width axes;
//! each axis block is rotated pairwise by angles `pos · base^(−2i/d_axis)`.
//! Rotations are isometries, and attention logits built from rotated
//! queries and keys depend only on relative positions — which is why
//! window-local coordinates are equivalent to global ones.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Frequency configuration for one attention head.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RopeParams {
    pub head_dim: usize,
    /// Even per-axis sub-dimensions `(d_t, d_h, d_w)` summing to `head_dim`.
    pub axis_dims: (usize, usize, usize),
    pub base: f64,
}

impl RopeParams {
    pub fn new(head_dim: usize, axis_dims: (usize, usize, usize), base: f64) -> Result<Self> {
        let (dt, dh, dw) = axis_dims;
        for (name, d) in [("t", dt), ("h", dh), ("w", dw)] {
            if d < 2 || d % 2 != 0 {
                return Err(Error::Config(format!(
                    "axis dim {name}={d} must be even and >= 2"
                )));
            }
        }
        if dt + dh + dw != head_dim {
            return Err(Error::Config(format!(
                "axis dims {axis_dims:?} do not sum to head_dim {head_dim}"
            )));
        }
        Ok(RopeParams {
            head_dim,
            axis_dims,
            base,
        })
    }

    /// Default split: the largest even allocation proportional to
    /// (1, 2, 2) over (t, h, w), spatial axes absorbing the remainder
    /// (width last, matching the fastest-varying layout axis).
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        if head_dim < 6 || head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {head_dim} must be even and >= 6 for a 3-axis split"
            )));
        }
        let even_floor = |x: usize| (x - x % 2).max(2);
        let dt = even_floor(head_dim / 5);
        let rest = head_dim - dt;
        let dh = even_floor(rest / 2);
        let dw = rest - dh;
        Self::new(head_dim, (dt, dh, dw), 10_000.0)
    }

    /// Rotation angles for one position triple, in column-pair order.
    fn angles(&self, pos: (i64, i64, i64)) -> Vec<f64> {
        let (dt, dh, dw) = self.axis_dims;
        let mut out = Vec::with_capacity(self.head_dim / 2);
        for (d_axis, p) in [(dt, pos.0), (dh, pos.1), (dw, pos.2)] {
            let pairs = d_axis / 2;
            for i in 0..pairs {
                let freq = self.base.powf(-2.0 * i as f64 / d_axis as f64);
                out.push(p as f64 * freq);
            }
        }
        out
    }
}

/// Rotate each row of a multi-head matrix. `x` has `heads * head_dim`
/// columns; every head block receives the same per-row angles. `sign < 0`
/// applies the inverse rotation (used by the backward pass).
pub(crate) fn rope_apply<T: Scalar>(
    x: &Tensor<T>,
    positions: &[(i64, i64, i64)],
    params: &RopeParams,
    heads: usize,
    sign: f64,
) -> Tensor<T> {
    let cols = x.cols();
    debug_assert_eq!(cols, heads * params.head_dim);
    debug_assert_eq!(x.rows(), positions.len());
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let angles = params.angles(pos);
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for h in 0..heads {
            let block = &mut row[h * params.head_dim..(h + 1) * params.head_dim];
            for (i, &theta) in angles.iter().enumerate() {
                let (c, s) = ((sign * theta).cos(), (sign * theta).sin());
                let (c, s) = (T::from_f64(c), T::from_f64(s));
                let a = block[2 * i];
                let b = block[2 * i + 1];
                block[2 * i] = a * c - b * s;
                block[2 * i + 1] = a * s + b * c;
            }
        }
    }
    out
}

/// Rotate single-head rows `x[n × head_dim]` by their positions.
pub fn rope_rotate<T: Scalar>(
    x: &Tensor<T>,
    positions: &[(i64, i64, i64)],
    params: &RopeParams,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.cols() != params.head_dim {
        return Err(Error::dim(format!(
            "rope_rotate: expected [n x {}], got {:?}",
            params.head_dim,
            x.shape()
        )));
    }
    if x.rows() != positions.len() {
        return Err(Error::dim(format!(
            "rope_rotate: {} rows vs {} positions",
            x.rows(),
            positions.len()
        )));
    }
    Ok(rope_apply(x, positions, params, 1, 1.0))
}

/// Taped multi-head rotation; the backward pass applies the inverse
/// rotation to the gradient (exact adjoint of an orthogonal map).
pub fn rope_rotate_t<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    positions: Rc<Vec<(i64, i64, i64)>>,
    params: RopeParams,
    heads: usize,
) -> Var {
    let v = rope_apply(tape.value(x), &positions, &params, heads, 1.0);
    tape.push(
        v,
        Some(Box::new(move |g, _, _| {
            vec![(x, rope_apply(g, &positions, &params, heads, -1.0))]
        })),
    )
}
