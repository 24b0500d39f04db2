//! Causal 3D convolution, frame-wise group normalization, and causal
//! nearest-neighbor upsampling, with tape-registered backward passes.
//!
//! Temporal padding is applied only on the past side and replicates the
//! first frame, so output frame `j` depends on input frames `<= j*stride`
//! and a leading frame maps to a leading output alone. Spatial padding is
//! symmetric zeros. All backward scatter loops enumerate contributions per
//! destination in a fixed order, so gradients are bit-deterministic.

use std::rc::Rc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub st: usize,
    pub sh: usize,
    pub sw: usize,
    pub ot: usize,
    pub oh: usize,
    pub ow: usize,
    pub ph: usize,
    pub pw: usize,
}

pub(crate) fn conv_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: (usize, usize, usize),
) -> Result<ConvDims> {
    if x_shape.len() != 4 || w_shape.len() != 5 {
        return Err(Error::dim(format!(
            "conv3d expects x[T,H,W,Cin] and w[kt,kh,kw,Cin,Cout], got {x_shape:?} and {w_shape:?}"
        )));
    }
    let (t, h, w, cin) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (kt, kh, kw, wcin, cout) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3], w_shape[4]);
    if wcin != cin {
        return Err(Error::dim(format!(
            "conv3d: kernel expects {wcin} input channels, tensor has {cin}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 || kt == 0 {
        return Err(Error::dim(format!(
            "conv3d: spatial kernel extents must be odd and k_t >= 1, got ({kt},{kh},{kw})"
        )));
    }
    let (st, sh, sw) = stride;
    if st == 0 || sh == 0 || sw == 0 {
        return Err(Error::dim("conv3d: stride components must be >= 1"));
    }
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(Error::dim(format!(
            "conv3d: spatial input ({h},{w}) smaller than kernel ({kh},{kw})"
        )));
    }
    Ok(ConvDims {
        t,
        h,
        w,
        cin,
        kt,
        kh,
        kw,
        cout,
        st,
        sh,
        sw,
        // past-side temporal pad of kt-1 frames gives floor((T-1)/st)+1 outputs
        ot: (t - 1) / st + 1,
        oh: (h + 2 * ph - kh) / sh + 1,
        ow: (w + 2 * pw - kw) / sw + 1,
        ph,
        pw,
    })
}

impl ConvDims {
    /// Source frame for padded temporal index `j` (replicate frame 0).
    #[inline]
    fn src_t(&self, j: usize) -> usize {
        j.saturating_sub(self.kt - 1)
    }
}

pub(crate) fn conv3d_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    d: &ConvDims,
) -> Tensor<T> {
    let mut out = Tensor::zeros(&[d.ot, d.oh, d.ow, d.cout]);
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let (cin, cout) = (d.cin, d.cout);
    let x_stride = [d.h * d.w * cin, d.w * cin, cin];
    let w_stride = [d.kh * d.kw * cin * cout, d.kw * cin * cout, cin * cout];
    let row_len = d.ow * cout;

    let run_row = |flat_row: usize, orow: &mut [T]| {
        let ot = flat_row / d.oh;
        let oh = flat_row % d.oh;
        for (ow_i, ocell) in orow.chunks_mut(cout).enumerate() {
            ocell.copy_from_slice(bd);
            for dt in 0..d.kt {
                let src_t = d.src_t(ot * d.st + dt);
                for dh in 0..d.kh {
                    let ih = (oh * d.sh + dh) as isize - d.ph as isize;
                    if ih < 0 || ih as usize >= d.h {
                        continue;
                    }
                    for dw in 0..d.kw {
                        let iw = (ow_i * d.sw + dw) as isize - d.pw as isize;
                        if iw < 0 || iw as usize >= d.w {
                            continue;
                        }
                        let xbase =
                            src_t * x_stride[0] + ih as usize * x_stride[1] + iw as usize * cin;
                        let wbase = dt * w_stride[0] + dh * w_stride[1] + dw * w_stride[2];
                        for ci in 0..cin {
                            let xv = xd[xbase + ci];
                            let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (o, &wv) in ocell.iter_mut().zip(wrow) {
                                *o = *o + xv * wv;
                            }
                        }
                    }
                }
            }
        }
    };

    let rows = d.ot * d.oh;
    if rows * row_len >= 1 << 13 && rows > 1 {
        out.data_mut()
            .par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, orow)| run_row(i, orow));
    } else {
        for (i, orow) in out.data_mut().chunks_mut(row_len).enumerate() {
            run_row(i, orow);
        }
    }
    out
}

pub(crate) fn conv3d_bwd_input<T: Scalar>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    d: &ConvDims,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(&[d.t, d.h, d.w, d.cin]);
    let gd = g.data();
    let wd = w.data();
    let (cin, cout) = (d.cin, d.cout);
    let g_stride = [d.oh * d.ow * cout, d.ow * cout, cout];
    let w_stride = [d.kh * d.kw * cin * cout, d.kw * cin * cout, cin * cout];
    let row_len = d.w * cin;

    // gather per input position so rows parallelize without write races
    let run_row = |flat_row: usize, drow: &mut [T]| {
        let it = flat_row / d.h;
        let ih = flat_row % d.h;
        // padded temporal positions that read input frame `it`
        let padded: Vec<usize> = if it == 0 {
            (0..d.kt).collect()
        } else {
            vec![it + d.kt - 1]
        };
        for (iw, dcell) in drow.chunks_mut(cin).enumerate() {
            for &j in &padded {
                for dt in 0..d.kt {
                    if j < dt || (j - dt) % d.st != 0 {
                        continue;
                    }
                    let ot = (j - dt) / d.st;
                    if ot >= d.ot {
                        continue;
                    }
                    for dh in 0..d.kh {
                        let num = ih + d.ph;
                        if num < dh || (num - dh) % d.sh != 0 {
                            continue;
                        }
                        let oh = (num - dh) / d.sh;
                        if oh >= d.oh {
                            continue;
                        }
                        for dw in 0..d.kw {
                            let num = iw + d.pw;
                            if num < dw || (num - dw) % d.sw != 0 {
                                continue;
                            }
                            let ow = (num - dw) / d.sw;
                            if ow >= d.ow {
                                continue;
                            }
                            let gbase = ot * g_stride[0] + oh * g_stride[1] + ow * cout;
                            let wbase = dt * w_stride[0] + dh * w_stride[1] + dw * w_stride[2];
                            for (ci, dst) in dcell.iter_mut().enumerate() {
                                let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                                let grow = &gd[gbase..gbase + cout];
                                let mut acc = T::zero();
                                for (&gv, &wv) in grow.iter().zip(wrow) {
                                    acc = acc + gv * wv;
                                }
                                *dst = *dst + acc;
                            }
                        }
                    }
                }
            }
        }
    };

    let rows = d.t * d.h;
    if rows > 1 && d.t * d.h * d.w * cin >= 1 << 13 {
        dx.data_mut()
            .par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, r)| run_row(i, r));
    } else {
        for (i, r) in dx.data_mut().chunks_mut(row_len).enumerate() {
            run_row(i, r);
        }
    }
    dx
}

pub(crate) fn conv3d_bwd_weight<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    d: &ConvDims,
) -> Tensor<T> {
    let mut dw = Tensor::zeros(&[d.kt, d.kh, d.kw, d.cin, d.cout]);
    let xd = x.data();
    let gd = g.data();
    let (cin, cout) = (d.cin, d.cout);
    let x_stride = [d.h * d.w * cin, d.w * cin, cin];
    let g_stride = [d.oh * d.ow * cout, d.ow * cout, cout];
    let tap_len = cin * cout;

    dw.data_mut()
        .par_chunks_mut(tap_len)
        .enumerate()
        .for_each(|(tap, dtap)| {
            let dt = tap / (d.kh * d.kw);
            let dh = (tap / d.kw) % d.kh;
            let dw_i = tap % d.kw;
            for ot in 0..d.ot {
                let src_t = d.src_t(ot * d.st + dt);
                for oh in 0..d.oh {
                    let ih = (oh * d.sh + dh) as isize - d.ph as isize;
                    if ih < 0 || ih as usize >= d.h {
                        continue;
                    }
                    for ow in 0..d.ow {
                        let iw = (ow * d.sw + dw_i) as isize - d.pw as isize;
                        if iw < 0 || iw as usize >= d.w {
                            continue;
                        }
                        let xbase =
                            src_t * x_stride[0] + ih as usize * x_stride[1] + iw as usize * cin;
                        let gbase = ot * g_stride[0] + oh * g_stride[1] + ow * cout;
                        let grow = &gd[gbase..gbase + cout];
                        for ci in 0..cin {
                            let xv = xd[xbase + ci];
                            let drow = &mut dtap[ci * cout..(ci + 1) * cout];
                            for (o, &gv) in drow.iter_mut().zip(grow) {
                                *o = *o + xv * gv;
                            }
                        }
                    }
                }
            }
        });
    dw
}

pub(crate) fn conv3d_bwd_bias<T: Scalar>(g: &Tensor<T>, d: &ConvDims) -> Tensor<T> {
    let mut db = Tensor::zeros(&[d.cout]);
    for cell in g.data().chunks(d.cout) {
        for (o, &gv) in db.data_mut().iter_mut().zip(cell) {
            *o += gv;
        }
    }
    db
}

/// Causal 3D convolution over plain tensors (zero bias).
pub fn causal_conv3d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: (usize, usize, usize),
) -> Result<Tensor<T>> {
    let d = conv_dims(x.shape(), kernel.shape(), stride)?;
    let bias = Tensor::zeros(&[d.cout]);
    Ok(conv3d_fwd(x, kernel, &bias, &d))
}

/// Taped causal convolution with bias.
pub fn conv3d_t<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    stride: (usize, usize, usize),
) -> Result<Var> {
    let d = conv_dims(tape.value(x).shape(), tape.value(w).shape(), stride)?;
    let v = conv3d_fwd(tape.value(x), tape.value(w), tape.value(b), &d);
    Ok(tape.push(
        v,
        Some(Box::new(move |g, vals, _| {
            vec![
                (x, conv3d_bwd_input(g, vals.get(w), &d)),
                (w, conv3d_bwd_weight(vals.get(x), g, &d)),
                (b, conv3d_bwd_bias(g, &d)),
            ]
        })),
    ))
}

// ---- frame-wise group normalization -------------------------------------------

/// Normalize over (H, W, channels-of-group) independently per frame, so no
/// statistic ever mixes time steps and causality survives normalization.
fn group_norm_fwd<T: Scalar>(x: &Tensor<T>, groups: usize, eps: T) -> (Tensor<T>, Vec<(T, T)>) {
    let (t, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let gc = c / groups;
    let n = T::from_f64((h * w * gc) as f64);
    let mut out = x.clone();
    let mut stats = Vec::with_capacity(t * groups);
    for ft in 0..t {
        let frame = &mut out.data_mut()[ft * h * w * c..(ft + 1) * h * w * c];
        for g in 0..groups {
            let mut mean = T::zero();
            for cell in frame.chunks(c) {
                for &v in &cell[g * gc..(g + 1) * gc] {
                    mean += v;
                }
            }
            mean /= n;
            let mut var = T::zero();
            for cell in frame.chunks(c) {
                for &v in &cell[g * gc..(g + 1) * gc] {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var /= n;
            let inv = (var + eps).sqrt().recip();
            for cell in frame.chunks_mut(c) {
                for v in &mut cell[g * gc..(g + 1) * gc] {
                    *v = (*v - mean) * inv;
                }
            }
            stats.push((mean, inv));
        }
    }
    (out, stats)
}

/// Taped frame-wise group norm (no affine; apply scale/shift separately).
pub fn group_norm_t<T: Scalar>(tape: &mut Tape<T>, x: Var, groups: usize, eps: T) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[3] % groups != 0 {
        return Err(Error::dim(format!(
            "group_norm: shape {shape:?} incompatible with {groups} groups"
        )));
    }
    let (v, stats) = group_norm_fwd(tape.value(x), groups, eps);
    let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let gc = c / groups;
    Ok(tape.push(
        v,
        Some(Box::new(move |g, vals, out| {
            let y = vals.get(out);
            let n = T::from_f64((h * w * gc) as f64);
            let mut dx = Tensor::zeros(&[t, h, w, c]);
            for ft in 0..t {
                let base = ft * h * w * c;
                for grp in 0..groups {
                    let (_, inv) = stats[ft * groups + grp];
                    let mut gmean = T::zero();
                    let mut gydot = T::zero();
                    for cell in 0..h * w {
                        let off = base + cell * c + grp * gc;
                        for i in 0..gc {
                            gmean += g.data()[off + i];
                            gydot = gydot + g.data()[off + i] * y.data()[off + i];
                        }
                    }
                    gmean /= n;
                    gydot /= n;
                    for cell in 0..h * w {
                        let off = base + cell * c + grp * gc;
                        for i in 0..gc {
                            dx.data_mut()[off + i] = inv
                                * (g.data()[off + i] - gmean - y.data()[off + i] * gydot);
                        }
                    }
                }
            }
            vec![(x, dx)]
        })),
    ))
}

// ---- causal nearest upsampling --------------------------------------------------

/// Index map doubling H and W by nearest neighbor.
pub(crate) fn upsample_spatial_map(shape: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let out_shape = vec![t, 2 * h, 2 * w, c];
    let mut map = Vec::with_capacity(t * 4 * h * w * c);
    for ft in 0..t {
        for oh in 0..2 * h {
            for ow in 0..2 * w {
                let base = ((ft * h + oh / 2) * w + ow / 2) * c;
                for ci in 0..c {
                    map.push(base + ci);
                }
            }
        }
    }
    (map, out_shape)
}

/// Index map for causal temporal doubling: `T -> 2(T-1)+1`. Output frame 0
/// comes from latent 0 alone; output frames `2j-1` and `2j` come from
/// latent `j`, so the leading frame is preserved and no output looks ahead.
pub(crate) fn upsample_temporal_map(shape: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let out_t = 2 * (t - 1) + 1;
    let out_shape = vec![out_t, h, w, c];
    let frame = h * w * c;
    let mut map = Vec::with_capacity(out_t * frame);
    for ot in 0..out_t {
        let src = ot.div_ceil(2);
        for i in 0..frame {
            map.push(src * frame + i);
        }
    }
    (map, out_shape)
}

pub fn upsample_spatial_t<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let (map, out_shape) = upsample_spatial_map(tape.value(x).shape());
    let flat_len: usize = tape.value(x).shape().iter().product();
    let flat = tape.reshape(x, &[flat_len]);
    tape.gather_elems(flat, Rc::new(map), &out_shape)
}

pub fn upsample_temporal_t<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let (map, out_shape) = upsample_temporal_map(tape.value(x).shape());
    let flat_len: usize = tape.value(x).shape().iter().product();
    let flat = tape.reshape(x, &[flat_len]);
    tape.gather_elems(flat, Rc::new(map), &out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;
    use crate::tensor::gradcheck::grad_check;

    #[test]
    fn identity_kernel_is_identity() {
        let x: Tensor<f32> = gaussian(&[3, 4, 4, 2], 1);
        // 1x1x1 kernel carrying the 2x2 identity
        let kernel = Tensor::new(vec![1, 1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = causal_conv3d(&x, &kernel, (1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn causality_perturbation() {
        let x: Tensor<f32> = gaussian(&[5, 3, 3, 2], 2);
        let kernel: Tensor<f32> = gaussian(&[3, 3, 3, 2, 4], 3);
        let base = causal_conv3d(&x, &kernel, (1, 1, 1)).unwrap();
        let mut perturbed = x.clone();
        let j = 3;
        perturbed.data_mut()[j * 3 * 3 * 2 + 5] += 1.0;
        let out = causal_conv3d(&perturbed, &kernel, (1, 1, 1)).unwrap();
        let frame = 3 * 3 * 4;
        for f in 0..j {
            assert_eq!(
                &out.data()[f * frame..(f + 1) * frame],
                &base.data()[f * frame..(f + 1) * frame],
                "frame {f} changed"
            );
        }
        assert_ne!(
            &out.data()[j * frame..(j + 1) * frame],
            &base.data()[j * frame..(j + 1) * frame]
        );
    }

    #[test]
    fn temporal_averaging_kernel_hand_case() {
        // k_t = 3 averaging kernel on the step sequence [0,0,1,1,1] with
        // past-replicate padding: output (0+0+0)/3 = 0 at frame 1 and
        // [0, 0, 1/3, 2/3, 1] overall
        let x = Tensor::new(vec![5, 1, 1, 1], vec![0.0f64, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let third = 1.0 / 3.0;
        let kernel = Tensor::new(vec![3, 1, 1, 1, 1], vec![third; 3]).unwrap();
        let y = causal_conv3d(&x, &kernel, (1, 1, 1)).unwrap();
        let want = [0.0, 0.0, third, 2.0 * third, 1.0];
        for (got, w) in y.data().iter().zip(&want) {
            assert!((got - w).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_output_shapes() {
        let x: Tensor<f32> = Tensor::zeros(&[5, 8, 8, 3]);
        let kernel: Tensor<f32> = Tensor::zeros(&[3, 3, 3, 3, 7]);
        let y = causal_conv3d(&x, &kernel, (2, 2, 2)).unwrap();
        assert_eq!(y.shape(), &[3, 4, 4, 7]);
        let y = causal_conv3d(&x, &kernel, (1, 2, 2)).unwrap();
        assert_eq!(y.shape(), &[5, 4, 4, 7]);
        // single-frame input stays single-frame under temporal stride
        let x1: Tensor<f32> = Tensor::zeros(&[1, 8, 8, 3]);
        let y = causal_conv3d(&x1, &kernel, (2, 2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 7]);
    }

    #[test]
    fn stride_shape_inconsistency_errors() {
        let x: Tensor<f32> = Tensor::zeros(&[5, 8, 8, 3]);
        let bad_cin: Tensor<f32> = Tensor::zeros(&[3, 3, 3, 4, 7]);
        assert!(causal_conv3d(&x, &bad_cin, (1, 1, 1)).is_err());
        let even: Tensor<f32> = Tensor::zeros(&[3, 2, 3, 3, 7]);
        assert!(causal_conv3d(&x, &even, (1, 1, 1)).is_err());
        let k: Tensor<f32> = Tensor::zeros(&[3, 3, 3, 3, 7]);
        assert!(causal_conv3d(&x, &k, (0, 1, 1)).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x: Tensor<f64> = gaussian(&[3, 4, 4, 2], 5);
        let w: Tensor<f64> = gaussian(&[2, 3, 3, 2, 3], 6).scale(0.5);
        let b: Tensor<f64> = gaussian(&[3], 7).scale(0.5);
        for stride in [(1, 1, 1), (2, 2, 2), (1, 2, 2)] {
            let report = grad_check(
                |tape, vars| {
                    let y = conv3d_t(tape, vars[0], vars[1], vars[2], stride)?;
                    let sq = tape.mul(y, y);
                    Ok(tape.mean_all(sq))
                },
                &[("x", x.clone()), ("w", w.clone()), ("b", b.clone())],
                1e-5,
                60,
                11,
            )
            .unwrap();
            assert!(report.max_rel_err <= 1e-6, "stride {stride:?}: {report:?}");
        }
    }

    #[test]
    fn group_norm_gradients_and_stats() {
        let x: Tensor<f64> = gaussian(&[2, 3, 3, 8], 8);
        let report = grad_check(
            |tape, vars| {
                let y = group_norm_t(tape, vars[0], 4, 1e-6)?;
                let w = tape.gelu(y);
                Ok(tape.mean_all(w))
            },
            &[("x", x.clone())],
            1e-5,
            50,
            12,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "{report:?}");

        // per-frame, per-group unit stats
        let (y, _) = group_norm_fwd(&x, 4, 1e-6);
        for ft in 0..2 {
            for g in 0..4 {
                let mut vals = Vec::new();
                for cell in 0..9 {
                    for i in 0..2 {
                        vals.push(y.data()[ft * 9 * 8 + cell * 8 + g * 2 + i]);
                    }
                }
                let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
                let var: f64 =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn upsampling_maps_are_causal_and_shape_correct() {
        let x: Tensor<f32> = gaussian(&[3, 2, 2, 1], 9);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let up = upsample_temporal_t(&mut tape, xv);
        assert_eq!(tape.value(up).shape(), &[5, 2, 2, 1]);
        // frame 0 preserved; frames (1,2) copy latent 1; (3,4) copy latent 2
        let frame = 4;
        let out = tape.value(up).clone();
        assert_eq!(&out.data()[0..frame], &x.data()[0..frame]);
        assert_eq!(&out.data()[frame..2 * frame], &x.data()[frame..2 * frame]);
        assert_eq!(
            &out.data()[2 * frame..3 * frame],
            &x.data()[frame..2 * frame]
        );

        let sp = upsample_spatial_t(&mut tape, xv);
        assert_eq!(tape.value(sp).shape(), &[3, 4, 4, 1]);
    }
}
