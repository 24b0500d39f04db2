//! Regular and half-shifted 3D window partitions of a latent volume.
//!
//! Windows tile the full `(T, H, W)` token volume exactly: boundary
//! windows are simply smaller, never masked or cyclically wrapped. The
//! shifted variant offsets boundaries toward the origin by half the
//! window extent per axis, so consecutive transformer blocks exchange
//! information across window borders.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Token extents of a latent volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Volume3 {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Volume3 {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "volume extents must be >= 1, got ({t},{h},{w})"
            )));
        }
        Ok(Volume3 { t, h, w })
    }

    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }
}

/// Nominal window extents plus the shift flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowSpec {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    #[serde(default)]
    pub shifted: bool,
}

impl WindowSpec {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "window extents must be >= 1, got ({t},{h},{w})"
            )));
        }
        Ok(WindowSpec {
            t,
            h,
            w,
            shifted: false,
        })
    }

    pub fn shifted(mut self, shifted: bool) -> Self {
        self.shifted = shifted;
        self
    }
}

/// One window of a layout: origin, extents, and the flattened token
/// indices it covers (in local t-major order).
#[derive(Debug, Clone)]
pub struct Window {
    pub origin: (usize, usize, usize),
    pub extent: (usize, usize, usize),
    pub tokens: Vec<usize>,
}

impl Window {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// Window-local coordinates of each token, in token order.
    pub fn local_positions(&self) -> Vec<(i64, i64, i64)> {
        let (dt, dh, dw) = self.extent;
        let mut out = Vec::with_capacity(dt * dh * dw);
        for t in 0..dt {
            for h in 0..dh {
                for w in 0..dw {
                    out.push((t as i64, h as i64, w as i64));
                }
            }
        }
        out
    }
}

/// Complete disjoint cover of a volume by windows, ordered
/// lexicographically by origin.
#[derive(Debug, Clone)]
pub struct WindowLayout {
    pub volume: Volume3,
    pub spec: WindowSpec,
    pub windows: Vec<Window>,
    /// Cumulative token offsets; `offsets[i]..offsets[i+1]` addresses
    /// window `i` inside a packed sequence.
    pub offsets: Vec<usize>,
}

impl WindowLayout {
    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    /// Packed-order permutation: `perm[packed_row] = flat_token_index`.
    pub fn permutation(&self) -> Vec<usize> {
        let mut perm = Vec::with_capacity(self.volume.tokens());
        for w in &self.windows {
            perm.extend_from_slice(&w.tokens);
        }
        perm
    }

    /// Inverse of [`Self::permutation`].
    pub fn inverse_permutation(&self) -> Vec<usize> {
        let perm = self.permutation();
        let mut inv = vec![0usize; perm.len()];
        for (packed, &flat) in perm.iter().enumerate() {
            inv[flat] = packed;
        }
        inv
    }
}

/// Row-major flattening `t·H·W + h·W + w`; bijective over the volume.
pub fn flatten_index(pos: (usize, usize, usize), volume: Volume3) -> Result<usize> {
    let (t, h, w) = pos;
    if t >= volume.t || h >= volume.h || w >= volume.w {
        return Err(Error::Index(format!(
            "position ({t},{h},{w}) outside volume ({},{},{})",
            volume.t, volume.h, volume.w
        )));
    }
    Ok(t * volume.h * volume.w + h * volume.w + w)
}

/// Per-axis segments `[start, start+len)` for a regular partition:
/// boundaries at `0, w, 2w, …`, with only the trailing segment short.
fn axis_segments_regular(extent: usize, window: usize) -> Vec<(usize, usize)> {
    let mut segs = Vec::new();
    let mut start = 0;
    while start < extent {
        let len = window.min(extent - start);
        segs.push((start, len));
        start += len;
    }
    segs
}

/// Per-axis segments for a half-shifted partition: boundaries at
/// `0, s, s+w, s+2w, …` with `s = floor(w/2)`, clipped to the extent.
/// Degenerates to the regular partition when `s == 0`.
fn axis_segments_shifted(extent: usize, window: usize) -> Vec<(usize, usize)> {
    let shift = window / 2;
    if shift == 0 {
        return axis_segments_regular(extent, window);
    }
    if shift >= extent {
        return vec![(0, extent)];
    }
    let mut segs = vec![(0, shift)];
    let mut start = shift;
    while start < extent {
        let len = window.min(extent - start);
        segs.push((start, len));
        start += len;
    }
    segs
}

fn build_layout(
    volume: Volume3,
    spec: WindowSpec,
    seg_fn: fn(usize, usize) -> Vec<(usize, usize)>,
) -> WindowLayout {
    let segs_t = seg_fn(volume.t, spec.t);
    let segs_h = seg_fn(volume.h, spec.h);
    let segs_w = seg_fn(volume.w, spec.w);
    let mut windows = Vec::with_capacity(segs_t.len() * segs_h.len() * segs_w.len());
    for &(t0, dt) in &segs_t {
        for &(h0, dh) in &segs_h {
            for &(w0, dw) in &segs_w {
                let mut tokens = Vec::with_capacity(dt * dh * dw);
                for t in t0..t0 + dt {
                    for h in h0..h0 + dh {
                        for w in w0..w0 + dw {
                            tokens.push(t * volume.h * volume.w + h * volume.w + w);
                        }
                    }
                }
                windows.push(Window {
                    origin: (t0, h0, w0),
                    extent: (dt, dh, dw),
                    tokens,
                });
            }
        }
    }
    let mut offsets = Vec::with_capacity(windows.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for w in &windows {
        acc += w.token_count();
        offsets.push(acc);
    }
    WindowLayout {
        volume,
        spec,
        windows,
        offsets,
    }
}

/// Partition with boundaries anchored at the volume origin.
pub fn partition_regular(volume: Volume3, spec: WindowSpec) -> WindowLayout {
    build_layout(volume, spec.shifted(false), axis_segments_regular)
}

/// Partition offset toward the origin by half the window extent per axis.
pub fn partition_shifted(volume: Volume3, spec: WindowSpec) -> WindowLayout {
    build_layout(volume, spec.shifted(true), axis_segments_shifted)
}

/// Dispatch on `spec.shifted`.
pub fn partition(volume: Volume3, spec: WindowSpec) -> WindowLayout {
    if spec.shifted {
        partition_shifted(volume, spec)
    } else {
        partition_regular(volume, spec)
    }
}

/// Flattened window sequences with cumulative-length offsets. No padding
/// rows exist anywhere: boundary windows simply contribute fewer rows.
#[derive(Debug, Clone)]
pub struct PackedBatch<T> {
    pub data: Tensor<T>,
    pub offsets: Vec<usize>,
}

/// Reorder token rows so each window's tokens are contiguous.
pub fn pack_windows<T: Scalar>(layout: &WindowLayout, x: &Tensor<T>) -> Result<PackedBatch<T>> {
    if x.rank() != 2 || x.rows() != layout.volume.tokens() {
        return Err(Error::dim(format!(
            "pack_windows: expected {} rows, got shape {:?}",
            layout.volume.tokens(),
            x.shape()
        )));
    }
    let d = x.cols();
    let mut data = Tensor::zeros(&[x.rows(), d]);
    for (packed, &flat) in layout.permutation().iter().enumerate() {
        data.data_mut()[packed * d..(packed + 1) * d].copy_from_slice(x.row(flat));
    }
    Ok(PackedBatch {
        data,
        offsets: layout.offsets.clone(),
    })
}

/// Exact inverse permutation of [`pack_windows`].
pub fn unpack_windows<T: Scalar>(
    layout: &WindowLayout,
    packed: &PackedBatch<T>,
) -> Result<Tensor<T>> {
    let x = &packed.data;
    if x.rank() != 2 || x.rows() != layout.volume.tokens() {
        return Err(Error::dim(format!(
            "unpack_windows: expected {} rows, got shape {:?}",
            layout.volume.tokens(),
            x.shape()
        )));
    }
    if packed.offsets != layout.offsets {
        return Err(Error::dim(
            "unpack_windows: offsets do not match layout".to_string(),
        ));
    }
    let d = x.cols();
    let mut out = Tensor::zeros(&[x.rows(), d]);
    for (packed_row, &flat) in layout.permutation().iter().enumerate() {
        out.data_mut()[flat * d..(flat + 1) * d].copy_from_slice(x.row(packed_row));
    }
    Ok(out)
}

/// Per-axis shifted segment count: `1 + ceil((D − s)/w)` for `s = floor(w/2)`
/// when `0 < s < D`; degenerates to the regular `ceil(D/w)` at `s = 0` and
/// to one window when `s >= D`.
pub fn shifted_axis_count(extent: usize, window: usize) -> usize {
    let s = window / 2;
    if s == 0 {
        extent.div_ceil(window)
    } else if s >= extent {
        1
    } else {
        1 + (extent - s).div_ceil(window)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, rng};
    use proptest::prelude::*;
    use rand::Rng;

    fn vol(t: usize, h: usize, w: usize) -> Volume3 {
        Volume3::new(t, h, w).unwrap()
    }

    fn spec(t: usize, h: usize, w: usize) -> WindowSpec {
        WindowSpec::new(t, h, w).unwrap()
    }

    #[test]
    fn flatten_index_examples() {
        let v = vol(5, 8, 8);
        assert_eq!(flatten_index((0, 0, 0), v).unwrap(), 0);
        assert_eq!(flatten_index((1, 2, 3), v).unwrap(), 83);
        assert_eq!(flatten_index((4, 7, 7), v).unwrap(), 319);
        assert!(flatten_index((5, 0, 0), v).is_err());
    }

    #[test]
    fn regular_partition_examples() {
        let l = partition_regular(vol(5, 8, 8), spec(5, 4, 4));
        assert_eq!(l.window_count(), 4);
        assert!(l.windows.iter().all(|w| w.extent == (5, 4, 4)));

        let l = partition_regular(vol(2, 5, 5), spec(2, 4, 4));
        let extents: Vec<_> = l.windows.iter().map(|w| w.extent).collect();
        assert_eq!(
            extents,
            vec![(2, 4, 4), (2, 4, 1), (2, 1, 4), (2, 1, 1)]
        );

        let l = partition_regular(vol(6, 8, 8), spec(5, 4, 4));
        assert_eq!(l.window_count(), 8);
        let mut temporal: Vec<usize> = l.windows.iter().map(|w| w.extent.0).collect();
        temporal.sort_unstable();
        temporal.dedup();
        assert_eq!(temporal, vec![1, 5]);
    }

    #[test]
    fn shifted_axis_matches_paper_count_on_divisible_dims() {
        // D=8, w=4, s=2 -> [0,2) [2,6) [6,8): D/w + 1 = 3 segments.
        assert_eq!(axis_segments_shifted(8, 4), vec![(0, 2), (2, 4), (6, 2)]);
        assert_eq!(shifted_axis_count(8, 4), 3);
        for w in 2..=8usize {
            for k in 1..=6usize {
                let d = w * k;
                assert_eq!(shifted_axis_count(d, w), d / w + 1, "D={d} w={w}");
            }
        }
    }

    #[test]
    fn shifted_partition_examples() {
        let l = partition_shifted(vol(5, 8, 8), spec(5, 4, 4));
        assert_eq!(l.window_count(), 2 * 3 * 3);

        // zero shift degenerates to the regular partition
        let a = partition_shifted(vol(4, 6, 7), spec(1, 1, 1));
        let b = partition_regular(vol(4, 6, 7), spec(1, 1, 1));
        assert_eq!(a.window_count(), b.window_count());
        for (wa, wb) in a.windows.iter().zip(&b.windows) {
            assert_eq!(wa.origin, wb.origin);
            assert_eq!(wa.extent, wb.extent);
            assert_eq!(wa.tokens, wb.tokens);
        }
    }

    #[test]
    fn interior_shifted_windows_are_full_sized() {
        let l = partition_shifted(vol(10, 12, 12), spec(4, 4, 4));
        for w in &l.windows {
            let interior = w.origin.0 > 0
                && w.origin.1 > 0
                && w.origin.2 > 0
                && w.origin.0 + w.extent.0 < 10
                && w.origin.1 + w.extent.1 < 12
                && w.origin.2 + w.extent.2 < 12;
            if interior {
                assert_eq!(w.extent, (4, 4, 4));
            }
        }
    }

    fn assert_disjoint_cover(l: &WindowLayout) {
        let n = l.volume.tokens();
        let mut seen = vec![false; n];
        for w in &l.windows {
            assert!(w.extent.0 <= l.spec.t);
            assert!(w.extent.1 <= l.spec.h);
            assert!(w.extent.2 <= l.spec.w);
            for &tok in &w.tokens {
                assert!(!seen[tok], "token {tok} appears twice");
                seen[tok] = true;
            }
        }
        assert!(seen.into_iter().all(|s| s), "cover is incomplete");
        assert_eq!(*l.offsets.last().unwrap(), n);
    }

    #[test]
    fn fuzzed_partitions_cover_disjointly() {
        let mut r = rng(99);
        for _ in 0..300 {
            let v = vol(
                r.gen_range(1..=12),
                r.gen_range(1..=16),
                r.gen_range(1..=16),
            );
            let s = spec(
                r.gen_range(1..=8),
                r.gen_range(1..=8),
                r.gen_range(1..=8),
            );
            assert_disjoint_cover(&partition_regular(v, s));
            assert_disjoint_cover(&partition_shifted(v, s));
        }
    }

    #[test]
    fn count_laws() {
        let mut r = rng(7);
        for _ in 0..200 {
            let v = vol(
                r.gen_range(1..=20),
                r.gen_range(1..=20),
                r.gen_range(1..=20),
            );
            let s = spec(
                r.gen_range(1..=10),
                r.gen_range(1..=10),
                r.gen_range(1..=10),
            );
            let reg = partition_regular(v, s);
            assert_eq!(
                reg.window_count(),
                v.t.div_ceil(s.t) * v.h.div_ceil(s.h) * v.w.div_ceil(s.w)
            );
            let sh = partition_shifted(v, s);
            assert_eq!(
                sh.window_count(),
                shifted_axis_count(v.t, s.t)
                    * shifted_axis_count(v.h, s.h)
                    * shifted_axis_count(v.w, s.w)
            );
        }
    }

    #[test]
    fn single_window_pack_is_identity() {
        let v = vol(2, 3, 3);
        let l = partition_regular(v, spec(2, 3, 3));
        assert_eq!(l.window_count(), 1);
        let x: Tensor<f32> = gaussian(&[18, 4], 1);
        let p = pack_windows(&l, &x).unwrap();
        assert_eq!(p.data, x);
        assert_eq!(p.offsets, vec![0, 18]);
    }

    #[test]
    fn pack_row_count_mismatch_errors() {
        let l = partition_regular(vol(2, 2, 2), spec(1, 2, 2));
        let x: Tensor<f32> = gaussian(&[7, 3], 2);
        assert!(pack_windows(&l, &x).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trips(
            vt in 1usize..6, vh in 1usize..8, vw in 1usize..8,
            st in 1usize..5, sh in 1usize..5, sw in 1usize..5,
            shifted in any::<bool>(), seed in 0u64..1000,
        ) {
            let v = vol(vt, vh, vw);
            let s = spec(st, sh, sw).shifted(shifted);
            let l = partition(v, s);
            let x: Tensor<f32> = gaussian(&[v.tokens(), 3], seed);
            let packed = pack_windows(&l, &x).unwrap();
            prop_assert_eq!(packed.data.rows(), v.tokens());
            let back = unpack_windows(&l, &packed).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
