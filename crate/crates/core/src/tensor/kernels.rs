//! Raw numeric kernels shared by the public ops and the tape backwards.
//!
//! Every kernel accumulates each output element in a fixed left-to-right
//! order, so results are bit-identical across runs and thread counts;
//! rayon only ever splits work across independent output elements.

use rayon::prelude::*;

use super::{Scalar, Tensor};

const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// a[m×k] · b[k×n]
pub fn mm_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    let mut out = Tensor::zeros(&[m, n]);
    let bd = b.data();
    let run_row = |i: usize, orow: &mut [T]| {
        let arow = a.row(i);
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.data_mut()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| run_row(i, orow));
    } else {
        for (i, orow) in out.data_mut().chunks_mut(n).enumerate() {
            run_row(i, orow);
        }
    }
    out
}

/// a[m×k] · b[n×k]ᵀ
pub fn mm_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    debug_assert_eq!(k, b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    let run_row = |i: usize, orow: &mut [T]| {
        let arow = a.row(i);
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = b.row(j);
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.data_mut()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| run_row(i, orow));
    } else {
        for (i, orow) in out.data_mut().chunks_mut(n).enumerate() {
            run_row(i, orow);
        }
    }
    out
}

/// a[k×m]ᵀ · b[k×n]
pub fn mm_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let run_row = |i: usize, orow: &mut [T]| {
        for kk in 0..k {
            let av = ad[kk * m + i];
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.data_mut()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| run_row(i, orow));
    } else {
        for (i, orow) in out.data_mut().chunks_mut(n).enumerate() {
            run_row(i, orow);
        }
    }
    out
}

pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().expect("rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.max(v);
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// d(softmax)/dx given forward output `y` and upstream grad `g`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let d = *y.shape().last().expect("rank >= 1");
    let mut out = Tensor::zeros(y.shape());
    for ((orow, yrow), grow) in out
        .data_mut()
        .chunks_mut(d)
        .zip(y.data().chunks(d))
        .zip(g.data().chunks(d))
    {
        let mut dot = T::zero();
        for (&yv, &gv) in yrow.iter().zip(grow) {
            dot = dot + yv * gv;
        }
        for ((o, &yv), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
            *o = yv * (gv - dot);
        }
    }
    out
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let d = *x.shape().last().expect("rank >= 1");
    let nd = T::from_f64(d as f64);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mut mean = T::zero();
        for &v in row.iter() {
            mean += v;
        }
        mean /= nd;
        let mut var = T::zero();
        for &v in row.iter() {
            let c = v - mean;
            var += c * c;
        }
        var /= nd;
        let inv = (var + eps).sqrt().recip();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// d(layer_norm)/dx given input `x`, forward output `y`, and upstream `g`.
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    g: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    let d = *x.shape().last().expect("rank >= 1");
    let nd = T::from_f64(d as f64);
    let mut out = Tensor::zeros(x.shape());
    for (((orow, xrow), yrow), grow) in out
        .data_mut()
        .chunks_mut(d)
        .zip(x.data().chunks(d))
        .zip(y.data().chunks(d))
        .zip(g.data().chunks(d))
    {
        let mut mean = T::zero();
        for &v in xrow.iter() {
            mean += v;
        }
        mean /= nd;
        let mut var = T::zero();
        for &v in xrow.iter() {
            let c = v - mean;
            var += c * c;
        }
        var /= nd;
        let inv = (var + eps).sqrt().recip();
        let mut gmean = T::zero();
        let mut gydot = T::zero();
        for (&gv, &yv) in grow.iter().zip(yrow) {
            gmean += gv;
            gydot = gydot + gv * yv;
        }
        gmean /= nd;
        gydot /= nd;
        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
            *o = inv * (gv - gmean - yv * gydot);
        }
    }
    out
}

// ---- activations -----------------------------------------------------------

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_deriv<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub fn silu_deriv<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s + x * s * (T::one() - s)
}
