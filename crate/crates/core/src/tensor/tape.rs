//! Reverse-mode differentiation over a recorded operation graph.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Each
//! recorded node carries a backward closure that maps the node's output
//! gradient to gradient contributions for its parents; [`Tape::backward`]
//! replays the nodes in reverse creation order, visiting each exactly once.
//! The tape is confined to a single training-step owner and never shared
//! across threads.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::kernels;
use super::{Scalar, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Read-only view of the recorded forward values, usable inside backward
/// closures.
pub struct Vals<'a, T> {
    nodes: &'a [Node<T>],
}

impl<'a, T: Scalar> Vals<'a, T> {
    pub fn get(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }
}

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &Vals<'_, T>, Var) -> Vec<(Var, Tensor<T>)>>;

struct Node<T> {
    value: Tensor<T>,
    back: Option<BackFn<T>>,
}

/// Recorded operation graph plus accumulated gradients.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Record an input tensor (parameter or data).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, back: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Accumulate gradients of a scalar `loss` into every recorded node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::dim(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(Tensor::filled(
            self.nodes[loss.0].value.shape(),
            T::one(),
        ));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].as_ref() else {
                continue;
            };
            let Some(back) = self.nodes[i].back.as_ref() else {
                continue;
            };
            let vals = Vals { nodes: &self.nodes };
            let contributions = back(g, &vals, Var(i));
            for (parent, delta) in contributions {
                debug_assert!(parent.0 < i, "backward edge must point to an earlier node");
                match &mut self.grads[parent.0] {
                    Some(acc) => {
                        debug_assert_eq!(acc.shape(), delta.shape());
                        for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a += *d;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    // ---- elementwise ops ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b)).expect("tape add shapes");
        self.push(
            v,
            Some(Box::new(move |g, _, _| {
                vec![(a, g.clone()), (b, g.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b)).expect("tape sub shapes");
        self.push(
            v,
            Some(Box::new(move |g, _, _| {
                vec![(a, g.clone()), (b, g.scale(-T::one()))]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b)).expect("tape mul shapes");
        self.push(
            v,
            Some(Box::new(move |g, vals, _| {
                let da = g.mul(vals.get(b)).expect("mul backward");
                let db = g.mul(vals.get(a)).expect("mul backward");
                vec![(a, da), (b, db)]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(
            v,
            Some(Box::new(move |g, _, _| vec![(a, g.scale(s))])),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Some(Box::new(move |g, _, _| vec![(a, g.clone())])))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(
            v,
            Some(Box::new(move |g, vals, out| {
                let dx = g.mul(vals.get(out)).expect("exp backward");
                vec![(a, dx)]
            })),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(
            v,
            Some(Box::new(move |g, vals, _| {
                let x = vals.get(a);
                let dx = Tensor::from_fn(x.shape(), |i| {
                    let xv = x.data()[i];
                    if xv > T::zero() {
                        g.data()[i]
                    } else if xv < T::zero() {
                        -g.data()[i]
                    } else {
                        T::zero()
                    }
                });
                vec![(a, dx)]
            })),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::gelu);
        self.push(
            v,
            Some(Box::new(move |g, vals, _| {
                let x = vals.get(a);
                let dx = Tensor::from_fn(x.shape(), |i| {
                    g.data()[i] * kernels::gelu_deriv(x.data()[i])
                });
                vec![(a, dx)]
            })),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::silu);
        self.push(
            v,
            Some(Box::new(move |g, vals, _| {
                let x = vals.get(a);
                let dx = Tensor::from_fn(x.shape(), |i| {
                    g.data()[i] * kernels::silu_deriv(x.data()[i])
                });
                vec![(a, dx)]
            })),
        )
    }

    // ---- matrix ops ---------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "tape matmul inner dims");
        let v = kernels::mm_nn(av, bv);
        self.push(
            v,
            Some(Box::new(move |g, vals, _| {
                let da = kernels::mm_nt(g, vals.get(b));
                let db = kernels::mm_tn(vals.get(a), g);
                vec![(a, da), (b, db)]
            })),
        )
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "tape matmul_nt inner dims");
        let v = kernels::mm_nt(av, bv);
        self.push(
            v,
            Some(Box::new(move |g, vals, _| {
                let da = kernels::mm_nn(g, vals.get(b));
                let db = kernels::mm_tn(g, vals.get(a));
                vec![(a, da), (b, db)]
            })),
        )
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let v = kernels::softmax_lastdim(self.value(a));
        self.push(
            v,
            Some(Box::new(move |g, vals, out| {
                vec![(a, kernels::softmax_backward(vals.get(out), g))]
            })),
        )
    }

    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let v = kernels::layer_norm(self.value(a), eps);
        self.push(
            v,
            Some(Box::new(move |g, vals, out| {
                let dx = kernels::layer_norm_backward(vals.get(a), vals.get(out), g, eps);
                vec![(a, dx)]
            })),
        )
    }

    // ---- shape and indexing ops ----------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshape(shape).expect("tape reshape numel");
        let old_shape = self.value(a).shape().to_vec();
        self.push(
            v,
            Some(Box::new(move |g, _, _| {
                vec![(a, g.reshape(&old_shape).expect("reshape backward"))]
            })),
        )
    }

    /// Row gather on a rank-2 tensor: `out[i, :] = x[idx[i], :]`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let d = x.cols();
        let mut v = Tensor::zeros(&[idx.len(), d]);
        for (i, &src) in idx.iter().enumerate() {
            v.data_mut()[i * d..(i + 1) * d].copy_from_slice(x.row(src));
        }
        let rows = x.rows();
        self.push(
            v,
            Some(Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(&[rows, d]);
                for (i, &src) in idx.iter().enumerate() {
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let drow = &mut dx.data_mut()[src * d..(src + 1) * d];
                    for (o, &gv) in drow.iter_mut().zip(grow) {
                        *o += gv;
                    }
                }
                vec![(a, dx)]
            })),
        )
    }

    /// Flat element gather: `out.data[i] = x.data[idx[i]]` with an
    /// arbitrary output shape. Backward scatter-adds in ascending output
    /// order, so duplicated indices accumulate deterministically.
    pub fn gather_elems(&mut self, a: Var, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Var {
        let x = self.value(a);
        debug_assert_eq!(idx.len(), out_shape.iter().product::<usize>());
        let v = Tensor::from_fn(out_shape, |i| x.data()[idx[i]]);
        let in_shape = x.shape().to_vec();
        self.push(
            v,
            Some(Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(&in_shape);
                for (i, &src) in idx.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[i];
                }
                vec![(a, dx)]
            })),
        )
    }

    /// Contiguous row slice `x[r0..r1, :]`.
    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let x = self.value(a);
        let d = x.cols();
        let rows = x.rows();
        assert!(r0 <= r1 && r1 <= rows, "tape slice_rows range");
        let v = Tensor::new(
            vec![r1 - r0, d],
            x.data()[r0 * d..r1 * d].to_vec(),
        )
        .expect("slice shape");
        self.push(
            v,
            Some(Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(&[rows, d]);
                dx.data_mut()[r0 * d..r1 * d].copy_from_slice(g.data());
                vec![(a, dx)]
            })),
        )
    }

    /// Column slice `x[:, c0..c1]`.
    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        assert!(c0 <= c1 && c1 <= cols, "tape slice_cols range");
        let w = c1 - c0;
        let mut v = Tensor::zeros(&[rows, w]);
        for r in 0..rows {
            v.data_mut()[r * w..(r + 1) * w].copy_from_slice(&x.row(r)[c0..c1]);
        }
        self.push(
            v,
            Some(Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    dx.data_mut()[r * cols + c0..r * cols + c1]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                vec![(a, dx)]
            })),
        )
    }

    /// Stack rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), d, "tape concat_rows widths");
            row_counts.push(t.rows());
            data.extend_from_slice(t.data());
        }
        let total: usize = row_counts.iter().sum();
        let v = Tensor::new(vec![total, d], data).expect("concat shape");
        let parts = parts.to_vec();
        self.push(
            v,
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(parts.len());
                let mut r = 0;
                for (&p, &nr) in parts.iter().zip(&row_counts) {
                    let slice = &g.data()[r * d..(r + nr) * d];
                    out.push((
                        p,
                        Tensor::new(vec![nr, d], slice.to_vec()).expect("split shape"),
                    ));
                    r += nr;
                }
                out
            })),
        )
    }

    /// Concatenate two rank-2 tensors along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (xa, xb) = (self.value(a), self.value(b));
        assert_eq!(xa.rows(), xb.rows(), "tape concat_cols rows");
        let (rows, ca, cb) = (xa.rows(), xa.cols(), xb.cols());
        let mut v = Tensor::zeros(&[rows, ca + cb]);
        for r in 0..rows {
            let o = &mut v.data_mut()[r * (ca + cb)..(r + 1) * (ca + cb)];
            o[..ca].copy_from_slice(xa.row(r));
            o[ca..].copy_from_slice(xb.row(r));
        }
        self.push(
            v,
            Some(Box::new(move |g, _, _| {
                let mut da = Tensor::zeros(&[rows, ca]);
                let mut db = Tensor::zeros(&[rows, cb]);
                for r in 0..rows {
                    let grow = &g.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                    da.data_mut()[r * ca..(r + 1) * ca].copy_from_slice(&grow[..ca]);
                    db.data_mut()[r * cb..(r + 1) * cb].copy_from_slice(&grow[ca..]);
                }
                vec![(a, da), (b, db)]
            })),
        )
    }

    // ---- broadcasts and reductions --------------------------------------------

    /// Multiply every row of `x[N×d]` elementwise by `v[d]`.
    pub fn mul_rowvec(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        let (rows, d) = (xv.rows(), xv.cols());
        assert_eq!(vv.numel(), d, "tape mul_rowvec width");
        let mut out = xv.clone();
        for r in 0..rows {
            for (o, &s) in out.data_mut()[r * d..(r + 1) * d]
                .iter_mut()
                .zip(vv.data())
            {
                *o *= s;
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, vals, _| {
                let xv = vals.get(x);
                let vv = vals.get(v);
                let mut dx = g.clone();
                for r in 0..rows {
                    for (o, &s) in dx.data_mut()[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(vv.data())
                    {
                        *o *= s;
                    }
                }
                let mut dv = Tensor::zeros(vv.shape());
                for r in 0..rows {
                    for c in 0..d {
                        dv.data_mut()[c] += g.data()[r * d + c] * xv.data()[r * d + c];
                    }
                }
                vec![(x, dx), (v, dv)]
            })),
        )
    }

    /// Add `v[d]` to every row of `x[N×d]` (bias add).
    pub fn add_rowvec(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        let (rows, d) = (xv.rows(), xv.cols());
        assert_eq!(vv.numel(), d, "tape add_rowvec width");
        let mut out = xv.clone();
        for r in 0..rows {
            for (o, &s) in out.data_mut()[r * d..(r + 1) * d]
                .iter_mut()
                .zip(vv.data())
            {
                *o += s;
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, vals, _| {
                let mut dv = Tensor::zeros(vals.get(v).shape());
                for r in 0..rows {
                    for c in 0..d {
                        dv.data_mut()[c] += g.data()[r * d + c];
                    }
                }
                vec![(x, g.clone()), (v, dv)]
            })),
        )
    }

    /// Mean over rows of `x[N×d]`, yielding `[d]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        let inv = T::from_f64(1.0 / rows as f64);
        let mut out = Tensor::zeros(&[d]);
        for r in 0..rows {
            for c in 0..d {
                out.data_mut()[c] += xv.data()[r * d + c];
            }
        }
        for o in out.data_mut() {
            *o *= inv;
        }
        self.push(
            out,
            Some(Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(&[rows, d]);
                for r in 0..rows {
                    for c in 0..d {
                        dx.data_mut()[r * d + c] = g.data()[c] * inv;
                    }
                }
                vec![(x, dx)]
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            Tensor::scalar(acc),
            Some(Box::new(move |g, _, _| {
                vec![(x, Tensor::filled(&shape, g.item()))]
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let inv = T::from_f64(1.0 / n as f64);
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            Tensor::scalar(acc * inv),
            Some(Box::new(move |g, _, _| {
                vec![(x, Tensor::filled(&shape, g.item() * inv))]
            })),
        )
    }

    /// Mean squared difference, reduced to a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Mean absolute difference, reduced to a scalar.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.mean_all(ad)
    }
}
