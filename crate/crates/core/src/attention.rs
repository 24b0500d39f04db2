//! Dual-stream attention: video tokens attend within their window to the
//! concatenated video+text keys/values; text queries are repeated per
//! window and merged back by average pooling, so the text sequence length
//! never depends on the video resolution.
//!
//! [`full_mm_attention`] is the joint-sequence baseline kept as an
//! independent equivalence oracle; the windowed path is the production
//! implementation and must match it whenever a single window covers the
//! volume and rotation is disabled.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, gaussian};
use crate::rope::{rope_rotate_t, RopeParams};
use crate::tensor::kernels;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::window::WindowLayout;

/// Prompt embedding shared by all windows of one video. A null prompt is
/// an all-zeros embedding of length `L`, never an empty sequence.
#[derive(Debug, Clone)]
pub struct TextEmbedding<T> {
    pub tokens: Tensor<T>,
}

impl<T: Scalar> TextEmbedding<T> {
    pub fn new(tokens: Tensor<T>) -> Result<Self> {
        if tokens.rank() != 2 || tokens.rows() == 0 {
            return Err(Error::dim(format!(
                "text embedding must be [L x d] with L >= 1, got {:?}",
                tokens.shape()
            )));
        }
        Ok(TextEmbedding { tokens })
    }

    /// All-zeros embedding of the same shape (the null prompt).
    pub fn null(len: usize, width: usize) -> Self {
        TextEmbedding {
            tokens: Tensor::zeros(&[len, width]),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// Q/K/V/O projections of one modality.
#[derive(Debug, Clone)]
pub struct ModalityProjections<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

impl<T: Scalar> ModalityProjections<T> {
    pub fn seeded(d: usize, seed: u64) -> Self {
        let std = T::from_f64(1.0 / (d as f64).sqrt());
        let g = |label: &str| gaussian::<T>(&[d, d], derive_seed(seed, label)).scale(std);
        ModalityProjections {
            wq: g("wq"),
            wk: g("wk"),
            wv: g("wv"),
            wo: g("wo"),
        }
    }
}

/// Separate per-modality projection weights plus the head split.
#[derive(Debug, Clone)]
pub struct AttentionWeights<T> {
    pub video: ModalityProjections<T>,
    pub text: ModalityProjections<T>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn seeded(heads: usize, head_dim: usize, seed: u64) -> Self {
        let d = heads * head_dim;
        AttentionWeights {
            video: ModalityProjections::seeded(d, derive_seed(seed, "video")),
            text: ModalityProjections::seeded(d, derive_seed(seed, "text")),
            heads,
            head_dim,
        }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Exact query-key interaction counts for one attention call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairCounts {
    /// Video queries against video keys: `Σ n_i²`.
    pub video_video: u64,
    /// Video queries against text keys: `Σ n_i·L`.
    pub video_text: u64,
    /// Text queries against all keys: `Σ L·(n_i + L)`.
    pub text_query: u64,
}

impl PairCounts {
    pub fn total(&self) -> u64 {
        self.video_video + self.video_text + self.text_query
    }
}

/// Attention outputs for both streams plus the exact cost counter.
#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    pub video: Tensor<T>,
    pub text: Tensor<T>,
    pub pairs: PairCounts,
}

fn validate_streams<T: Scalar>(
    video: &Tensor<T>,
    text: &TextEmbedding<T>,
    wts: &AttentionWeights<T>,
) -> Result<()> {
    let d = wts.width();
    if video.rank() != 2 || video.cols() != d {
        return Err(Error::dim(format!(
            "video stream must be [N x {d}], got {:?}",
            video.shape()
        )));
    }
    if text.width() != d {
        return Err(Error::dim(format!(
            "text stream must be [L x {d}], got {:?}",
            text.tokens.shape()
        )));
    }
    Ok(())
}

/// Full joint-sequence attention over `[video; text]` with per-modality
/// projections — the baseline the windowed path is checked against.
pub fn full_mm_attention<T: Scalar>(
    video: &Tensor<T>,
    text: &TextEmbedding<T>,
    wts: &AttentionWeights<T>,
) -> Result<AttentionOutput<T>> {
    validate_streams(video, text, wts)?;
    let (n, l, d) = (video.rows(), text.len(), wts.width());
    let hd = wts.head_dim;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    let stack = |a: &Tensor<T>, b: &Tensor<T>| {
        let mut data = Vec::with_capacity((n + l) * d);
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        Tensor::new(vec![n + l, d], data).expect("stack shape")
    };
    let q = stack(
        &kernels::mm_nn(video, &wts.video.wq),
        &kernels::mm_nn(&text.tokens, &wts.text.wq),
    );
    let k = stack(
        &kernels::mm_nn(video, &wts.video.wk),
        &kernels::mm_nn(&text.tokens, &wts.text.wk),
    );
    let v = stack(
        &kernels::mm_nn(video, &wts.video.wv),
        &kernels::mm_nn(&text.tokens, &wts.text.wv),
    );

    let mut joint = Tensor::zeros(&[n + l, d]);
    for h in 0..wts.heads {
        let cols = h * hd..(h + 1) * hd;
        let sub = |m: &Tensor<T>| {
            let mut s = Tensor::zeros(&[n + l, hd]);
            for r in 0..n + l {
                s.data_mut()[r * hd..(r + 1) * hd].copy_from_slice(&m.row(r)[cols.clone()]);
            }
            s
        };
        let (qh, kh, vh) = (sub(&q), sub(&k), sub(&v));
        let logits = kernels::mm_nt(&qh, &kh).scale(scale);
        let p = kernels::softmax_lastdim(&logits);
        let oh = kernels::mm_nn(&p, &vh);
        for r in 0..n + l {
            joint.data_mut()[r * d + h * hd..r * d + (h + 1) * hd]
                .copy_from_slice(oh.row(r));
        }
    }

    let video_rows = Tensor::new(vec![n, d], joint.data()[..n * d].to_vec())?;
    let text_rows = Tensor::new(vec![l, d], joint.data()[n * d..].to_vec())?;
    Ok(AttentionOutput {
        video: kernels::mm_nn(&video_rows, &wts.video.wo),
        text: kernels::mm_nn(&text_rows, &wts.text.wo),
        pairs: PairCounts {
            video_video: (n * n) as u64,
            video_text: (n * l) as u64,
            text_query: (l * (n + l)) as u64,
        },
    })
}

/// Projection variables of one attention call recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ProjVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub video: ProjVars,
    pub text: ProjVars,
}

impl AttentionVars {
    pub fn leaf<T: Scalar>(tape: &mut Tape<T>, wts: &AttentionWeights<T>) -> Self {
        let lift = |tape: &mut Tape<T>, p: &ModalityProjections<T>| ProjVars {
            wq: tape.leaf(p.wq.clone()),
            wk: tape.leaf(p.wk.clone()),
            wv: tape.leaf(p.wv.clone()),
            wo: tape.leaf(p.wo.clone()),
        };
        AttentionVars {
            video: lift(tape, &wts.video),
            text: lift(tape, &wts.text),
        }
    }
}

/// Windowed dual-stream attention on a tape.
///
/// Per window `i` with `n_i` tokens: Q/K/V of the window's video tokens
/// (rotation on Q and K only), Q/K/V of the full text (no rotation),
/// `K = [K_v; K_t]`, `V = [V_v; V_t]`; window video output is
/// `Attn(Q_v, K, V)` scattered back to token order, window text output is
/// `Attn(Q_t, K, V)`. The final text stream is the arithmetic mean over
/// windows, taken in window-index order so reductions are reproducible.
/// Output projections apply per modality at the end.
pub fn window_attention_t<T: Scalar>(
    tape: &mut Tape<T>,
    video: Var,
    text: Var,
    layout: &WindowLayout,
    wts: AttentionVars,
    heads: usize,
    head_dim: usize,
    rope: Option<&RopeParams>,
) -> (Var, Var, PairCounts) {
    let d = heads * head_dim;
    let n = tape.value(video).rows();
    let l = tape.value(text).rows();
    debug_assert_eq!(n, layout.volume.tokens());

    let qv = tape.matmul(video, wts.video.wq);
    let kv = tape.matmul(video, wts.video.wk);
    let vv = tape.matmul(video, wts.video.wv);
    let qt = tape.matmul(text, wts.text.wq);
    let kt = tape.matmul(text, wts.text.wk);
    let vt = tape.matmul(text, wts.text.wv);

    // per-head text projections, shared by every window
    let head_cols = |h: usize| (h * head_dim, (h + 1) * head_dim);
    let text_heads: Vec<(Var, Var, Var)> = (0..heads)
        .map(|h| {
            let (c0, c1) = head_cols(h);
            (
                tape.slice_cols(qt, c0, c1),
                tape.slice_cols(kt, c0, c1),
                tape.slice_cols(vt, c0, c1),
            )
        })
        .collect();

    let perm = Rc::new(layout.permutation());
    let pq = tape.gather_rows(qv, perm.clone());
    let pk = tape.gather_rows(kv, perm.clone());
    let pv = tape.gather_rows(vv, perm);

    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut window_video_outs = Vec::with_capacity(layout.window_count());
    let mut text_mean: Option<Var> = None;
    let mut pairs = PairCounts::default();

    for (i, window) in layout.windows.iter().enumerate() {
        let (r0, r1) = (layout.offsets[i], layout.offsets[i + 1]);
        let ni = r1 - r0;
        pairs.video_video += (ni * ni) as u64;
        pairs.video_text += (ni * l) as u64;
        pairs.text_query += (l * (ni + l)) as u64;

        let mut qs = tape.slice_rows(pq, r0, r1);
        let mut ks = tape.slice_rows(pk, r0, r1);
        let vs = tape.slice_rows(pv, r0, r1);
        if let Some(params) = rope {
            let pos = Rc::new(window.local_positions());
            qs = rope_rotate_t(tape, qs, pos.clone(), *params, heads);
            ks = rope_rotate_t(tape, ks, pos, *params, heads);
        }

        let mut video_out: Option<Var> = None;
        let mut text_out: Option<Var> = None;
        for (h, &(qth, kth, vth)) in text_heads.iter().enumerate() {
            let (c0, c1) = head_cols(h);
            let qsh = tape.slice_cols(qs, c0, c1);
            let ksh = tape.slice_cols(ks, c0, c1);
            let vsh = tape.slice_cols(vs, c0, c1);
            let k_cat = tape.concat_rows(&[ksh, kth]);
            let v_cat = tape.concat_rows(&[vsh, vth]);

            let logits = tape.matmul_nt(qsh, k_cat);
            let logits = tape.scale(logits, scale);
            let p = tape.softmax_lastdim(logits);
            let oh = tape.matmul(p, v_cat);
            video_out = Some(match video_out {
                Some(acc) => tape.concat_cols(acc, oh),
                None => oh,
            });

            let tlogits = tape.matmul_nt(qth, k_cat);
            let tlogits = tape.scale(tlogits, scale);
            let tp = tape.softmax_lastdim(tlogits);
            let toh = tape.matmul(tp, v_cat);
            text_out = Some(match text_out {
                Some(acc) => tape.concat_cols(acc, toh),
                None => toh,
            });
        }
        window_video_outs.push(video_out.expect("at least one head"));
        let t_i = text_out.expect("at least one head");
        text_mean = Some(match text_mean {
            Some(acc) => tape.add(acc, t_i),
            None => t_i,
        });
    }

    let packed = tape.concat_rows(&window_video_outs);
    let inv = Rc::new(layout.inverse_permutation());
    let video_tokens = tape.gather_rows(packed, inv);
    let video_final = tape.matmul(video_tokens, wts.video.wo);

    let inv_w = T::from_f64(1.0 / layout.window_count() as f64);
    let text_avg = tape.scale(text_mean.expect("at least one window"), inv_w);
    let text_final = tape.matmul(text_avg, wts.text.wo);

    debug_assert_eq!(tape.value(video_final).shape(), &[n, d]);
    (video_final, text_final, pairs)
}

/// Windowed dual-stream attention over plain tensors.
pub fn window_mm_attention<T: Scalar>(
    video: &Tensor<T>,
    text: &TextEmbedding<T>,
    layout: &WindowLayout,
    wts: &AttentionWeights<T>,
    rope: Option<&RopeParams>,
) -> Result<AttentionOutput<T>> {
    validate_streams(video, text, wts)?;
    if video.rows() != layout.volume.tokens() {
        return Err(Error::dim(format!(
            "video rows {} do not match layout volume {} tokens",
            video.rows(),
            layout.volume.tokens()
        )));
    }
    if let Some(params) = rope {
        if params.head_dim != wts.head_dim {
            return Err(Error::Config(format!(
                "rope head_dim {} vs attention head_dim {}",
                params.head_dim, wts.head_dim
            )));
        }
    }
    let mut tape = Tape::new();
    let video_v = tape.leaf(video.clone());
    let text_v = tape.leaf(text.tokens.clone());
    let vars = AttentionVars::leaf(&mut tape, wts);
    let (vo, to, pairs) = window_attention_t(
        &mut tape,
        video_v,
        text_v,
        layout,
        vars,
        wts.heads,
        wts.head_dim,
        rope,
    );
    Ok(AttentionOutput {
        video: tape.value(vo).clone(),
        text: tape.value(to).clone(),
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, rng};
    use crate::window::{partition_regular, Volume3, WindowSpec};
    use rand::Rng;

    fn layout_single(t: usize, h: usize, w: usize) -> WindowLayout {
        partition_regular(
            Volume3::new(t, h, w).unwrap(),
            WindowSpec::new(t, h, w).unwrap(),
        )
    }

    #[test]
    fn zero_value_projections_give_zero_outputs() {
        let mut wts = AttentionWeights::<f32>::seeded(1, 4, 0);
        wts.video.wv = Tensor::zeros(&[4, 4]);
        wts.text.wv = Tensor::zeros(&[4, 4]);
        let video = gaussian::<f32>(&[1, 4], 1);
        let text = TextEmbedding::new(gaussian(&[1, 4], 2)).unwrap();
        let out = full_mm_attention(&video, &text, &wts).unwrap();
        assert!(out.video.max_abs() == 0.0 && out.text.max_abs() == 0.0);
        let wout =
            window_mm_attention(&video, &text, &layout_single(1, 1, 1), &wts, None).unwrap();
        assert!(wout.video.max_abs() == 0.0 && wout.text.max_abs() == 0.0);
    }

    #[test]
    fn permuting_video_rows_permutes_video_out() {
        let wts = AttentionWeights::<f32>::seeded(2, 4, 3);
        let video = gaussian::<f32>(&[6, 8], 4);
        let text = TextEmbedding::new(gaussian(&[2, 8], 5)).unwrap();
        let base = full_mm_attention(&video, &text, &wts).unwrap();

        // reverse the rows
        let mut rev = Tensor::zeros(&[6, 8]);
        for r in 0..6 {
            rev.data_mut()[r * 8..(r + 1) * 8].copy_from_slice(video.row(5 - r));
        }
        // key order changes with the permutation, so sums re-round: compare
        // with a tight tolerance rather than bitwise
        let out = full_mm_attention(&rev, &text, &wts).unwrap();
        for r in 0..6 {
            for (a, b) in out.video.row(r).iter().zip(base.video.row(5 - r)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!(out.text.max_abs_diff(&base.text) < 1e-6);
    }

    #[test]
    fn two_token_hand_case() {
        // identity projections, 1 head, d = 2, one video token pair, L = 1
        let eye = Tensor::<f64>::eye(2);
        let wts = AttentionWeights {
            video: ModalityProjections {
                wq: eye.clone(),
                wk: eye.clone(),
                wv: eye.clone(),
                wo: eye.clone(),
            },
            text: ModalityProjections {
                wq: eye.clone(),
                wk: eye.clone(),
                wv: eye.clone(),
                wo: eye,
            },
            heads: 1,
            head_dim: 2,
        };
        let video = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let text = TextEmbedding::new(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        let out = full_mm_attention(&video, &text, &wts).unwrap();

        // row 0 logits over keys [(1,0),(0,1),(1,1)]: (1,0,1)/sqrt(2)
        let s = 1.0 / 2.0f64.sqrt();
        let exps = [s.exp(), 1.0f64.exp().powf(0.0), s.exp()];
        let z = exps[0] + 1.0 + exps[2];
        let w = [exps[0] / z, 1.0 / z, exps[2] / z];
        let want_row0 = [w[0] + w[2], w[1] + w[2]];
        assert!((out.video.row(0)[0] - want_row0[0]).abs() < 1e-12);
        assert!((out.video.row(0)[1] - want_row0[1]).abs() < 1e-12);

        // text query (1,1): logits (s, s, 2/sqrt(2)) over the same keys
        let t = 2.0 / 2.0f64.sqrt();
        let te = [s.exp(), s.exp(), t.exp()];
        let tz = te[0] + te[1] + te[2];
        let want_text = [
            te[0] / tz + te[2] / tz,
            te[1] / tz + te[2] / tz,
        ];
        assert!((out.text.row(0)[0] - want_text[0]).abs() < 1e-12);
        assert!((out.text.row(0)[1] - want_text[1]).abs() < 1e-12);
    }

    #[test]
    fn single_window_matches_full_attention() {
        let mut r = rng(1234);
        for case in 0..100 {
            let heads = r.gen_range(1..=4);
            let hd = [2usize, 4, 8][r.gen_range(0..3)];
            let (t, h, w) = (
                r.gen_range(1..=4),
                r.gen_range(1..=8),
                r.gen_range(1..=8),
            );
            let l = r.gen_range(1..=8);
            let d = heads * hd;
            let wts = AttentionWeights::<f32>::seeded(heads, hd, r.gen());
            let video = gaussian::<f32>(&[t * h * w, d], r.gen());
            let text = TextEmbedding::new(gaussian(&[l, d], r.gen())).unwrap();
            let layout = layout_single(t, h, w);
            let full = full_mm_attention(&video, &text, &wts).unwrap();
            let win = window_mm_attention(&video, &text, &layout, &wts, None).unwrap();
            let dv = full.video.max_abs_diff(&win.video);
            let dt = full.text.max_abs_diff(&win.text);
            assert!(dv < 1e-5 && dt < 1e-5, "case {case}: dv={dv} dt={dt}");
        }
    }

    #[test]
    fn duplicated_window_contents_pool_to_single_window_text() {
        // two temporal copies of the same content, window = one copy
        let wts = AttentionWeights::<f32>::seeded(2, 4, 9);
        let tile = gaussian::<f32>(&[4, 8], 10);
        let mut doubled = Tensor::zeros(&[8, 8]);
        doubled.data_mut()[..32].copy_from_slice(tile.data());
        doubled.data_mut()[32..].copy_from_slice(tile.data());
        let text = TextEmbedding::new(gaussian(&[3, 8], 11)).unwrap();

        let two = partition_regular(
            Volume3::new(2, 2, 2).unwrap(),
            WindowSpec::new(1, 2, 2).unwrap(),
        );
        let one = layout_single(1, 2, 2);
        let a = window_mm_attention(&doubled, &text, &two, &wts, None).unwrap();
        let b = window_mm_attention(&tile, &text, &one, &wts, None).unwrap();
        assert!(a.text.max_abs_diff(&b.text) < 1e-6);
    }

    #[test]
    fn matches_brute_force_per_window_attention() {
        // volume 2x4x3 (N=24), window 1x2x2, L=3, 2 heads of width 2
        let (heads, hd) = (2usize, 2usize);
        let d = heads * hd;
        let wts = AttentionWeights::<f64>::seeded(heads, hd, 77);
        let video = gaussian::<f64>(&[24, d], 78);
        let text = TextEmbedding::new(gaussian(&[3, d], 79)).unwrap();
        let layout = partition_regular(
            Volume3::new(2, 4, 3).unwrap(),
            WindowSpec::new(1, 2, 2).unwrap(),
        );
        let got = window_mm_attention(&video, &text, &layout, &wts, None).unwrap();

        // independent brute force, straight from the formula
        let mm = |x: &Tensor<f64>, w: &Tensor<f64>| -> Vec<Vec<f64>> {
            let (r, k, c) = (x.rows(), x.cols(), w.cols());
            (0..r)
                .map(|i| {
                    (0..c)
                        .map(|j| (0..k).map(|kk| x.row(i)[kk] * w.data()[kk * c + j]).sum())
                        .collect()
                })
                .collect()
        };
        let qv = mm(&video, &wts.video.wq);
        let kv = mm(&video, &wts.video.wk);
        let vv = mm(&video, &wts.video.wv);
        let qt = mm(&text.tokens, &wts.text.wq);
        let kt = mm(&text.tokens, &wts.text.wk);
        let vt = mm(&text.tokens, &wts.text.wv);
        let scale = 1.0 / (hd as f64).sqrt();

        let mut video_pre = vec![vec![0.0; d]; 24];
        let mut text_pre = vec![vec![0.0; d]; 3];
        for win in &layout.windows {
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                // keys/values of this window+text for head h
                let mut keys: Vec<&[f64]> = Vec::new();
                let mut vals: Vec<&[f64]> = Vec::new();
                for &tok in &win.tokens {
                    keys.push(&kv[tok][cols.clone()]);
                    vals.push(&vv[tok][cols.clone()]);
                }
                for row in 0..3 {
                    keys.push(&kt[row][cols.clone()]);
                    vals.push(&vt[row][cols.clone()]);
                }
                let attend = |q: &[f64]| -> Vec<f64> {
                    let logits: Vec<f64> = keys
                        .iter()
                        .map(|k| k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * scale)
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let es: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
                    let z: f64 = es.iter().sum();
                    let mut o = vec![0.0; hd];
                    for (e, val) in es.iter().zip(&vals) {
                        for (oo, vv) in o.iter_mut().zip(*val) {
                            *oo += e / z * vv;
                        }
                    }
                    o
                };
                for &tok in &win.tokens {
                    let o = attend(&qv[tok][cols.clone()]);
                    video_pre[tok][cols.clone()].copy_from_slice(&o);
                }
                for row in 0..3 {
                    let o = attend(&qt[row][cols.clone()]);
                    for (slot, val) in text_pre[row][cols.clone()].iter_mut().zip(&o) {
                        *slot += val / layout.window_count() as f64;
                    }
                }
            }
        }
        let flat = |rows: &[Vec<f64>]| {
            Tensor::new(
                vec![rows.len(), d],
                rows.iter().flatten().copied().collect(),
            )
            .unwrap()
        };
        let want_video = kernels::mm_nn(&flat(&video_pre), &wts.video.wo);
        let want_text = kernels::mm_nn(&flat(&text_pre), &wts.text.wo);
        assert!(got.video.max_abs_diff(&want_video) < 1e-10);
        assert!(got.text.max_abs_diff(&want_text) < 1e-10);
    }

    #[test]
    fn perturbing_one_window_leaves_others_bit_exact() {
        let wts = AttentionWeights::<f32>::seeded(2, 4, 20);
        let layout = partition_regular(
            Volume3::new(2, 4, 4).unwrap(),
            WindowSpec::new(1, 2, 2).unwrap(),
        );
        let video = gaussian::<f32>(&[32, 8], 21);
        let text = TextEmbedding::new(gaussian(&[2, 8], 22)).unwrap();
        let base = window_mm_attention(&video, &text, &layout, &wts, None).unwrap();

        let victim = layout.windows[3].tokens[0];
        let mut perturbed = video.clone();
        perturbed.data_mut()[victim * 8] += 2.5;
        let out = window_mm_attention(&perturbed, &text, &layout, &wts, None).unwrap();
        for w in &layout.windows {
            let touched = w.tokens.contains(&victim);
            for &tok in &w.tokens {
                let same = out.video.row(tok) == base.video.row(tok);
                assert_eq!(same, !touched, "token {tok}");
            }
        }
    }

    #[test]
    fn scaling_values_scales_outputs_linearly() {
        let mut wts = AttentionWeights::<f64>::seeded(2, 4, 30);
        let layout = partition_regular(
            Volume3::new(1, 4, 4).unwrap(),
            WindowSpec::new(1, 2, 2).unwrap(),
        );
        let video = gaussian::<f64>(&[16, 8], 31);
        let text = TextEmbedding::new(gaussian(&[2, 8], 32)).unwrap();
        let base = window_mm_attention(&video, &text, &layout, &wts, None).unwrap();
        let c = 3.0;
        wts.video.wv = wts.video.wv.scale(c);
        wts.text.wv = wts.text.wv.scale(c);
        let scaled = window_mm_attention(&video, &text, &layout, &wts, None).unwrap();
        assert!(scaled.video.max_abs_diff(&base.video.scale(c)) < 1e-6);
        assert!(scaled.text.max_abs_diff(&base.text.scale(c)) < 1e-6);
    }

    #[test]
    fn pair_counts_match_enumeration() {
        let mut r = rng(55);
        for _ in 0..50 {
            let v = Volume3::new(
                r.gen_range(1..=4),
                r.gen_range(1..=6),
                r.gen_range(1..=6),
            )
            .unwrap();
            let spec = WindowSpec::new(
                r.gen_range(1..=3),
                r.gen_range(1..=4),
                r.gen_range(1..=4),
            )
            .unwrap();
            let l = r.gen_range(1..=5);
            let layout = partition_regular(v, spec);
            let wts = AttentionWeights::<f32>::seeded(1, 4, r.gen());
            let video = gaussian::<f32>(&[v.tokens(), 4], r.gen());
            let text = TextEmbedding::new(gaussian(&[l, 4], r.gen())).unwrap();
            let out = window_mm_attention(&video, &text, &layout, &wts, None).unwrap();

            let mut vv = 0u64;
            let mut vt = 0u64;
            let mut tq = 0u64;
            for w in &layout.windows {
                let n = w.token_count() as u64;
                vv += n * n;
                vt += n * l as u64;
                tq += l as u64 * (n + l as u64);
            }
            assert_eq!(out.pairs, PairCounts {
                video_video: vv,
                video_text: vt,
                text_query: tq,
            });
        }
    }
}
