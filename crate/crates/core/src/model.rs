//! The dual-stream transformer block and the velocity-prediction model.
//!
//! Blocks alternate regular and half-shifted window partitions by block
//! index parity. Each block applies pre-norm adaptive modulation, the
//! windowed dual-stream attention, and a per-modality MLP, with
//! zero-initialized gates so a freshly constructed block is the identity.
//! The model maps (noisy latent, degraded-input latent, text, timestep)
//! to a velocity field of the same shape as the latent.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use crate::attention::{
    window_attention_t, AttentionVars, AttentionWeights, ModalityProjections, PairCounts,
    TextEmbedding,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, gaussian};
use crate::rope::RopeParams;
use crate::tensor::io::{load_tensors, save_tensors, DynTensor};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::window::{partition_regular, partition_shifted, Volume3, WindowLayout, WindowSpec};

const NORM_EPS: f64 = 1e-6;

/// Architecture hyperparameters. Window extents are expressed in latent
/// tokens (the token volume after patchification).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Block count; even so regular/shifted blocks pair up.
    pub depth: usize,
    /// Model width `d = heads * head_dim`.
    pub width: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Nominal window extents `(t, h, w)`.
    pub window: (usize, usize, usize),
    pub latent_channels: usize,
    /// Patchification of the latent into tokens; `(1,1,1)` keeps window
    /// sizes in latent-token units and accepts any input extents.
    pub patch: (usize, usize, usize),
    pub mlp_ratio: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // scaled stand-in for the production-scale 5x64x64 window: the
        // toy latent volumes are 8x smaller per spatial axis
        ModelConfig {
            depth: 4,
            width: 64,
            heads: 4,
            head_dim: 16,
            window: (2, 4, 4),
            latent_channels: 16,
            patch: (1, 1, 1),
            mlp_ratio: 4,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth % 2 != 0 {
            return Err(Error::Config(format!(
                "depth {} must be positive and even",
                self.depth
            )));
        }
        if self.width != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "width {} != heads {} * head_dim {}",
                self.width, self.heads, self.head_dim
            )));
        }
        if self.latent_channels != 16 {
            return Err(Error::Config(format!(
                "latent_channels must be 16, got {}",
                self.latent_channels
            )));
        }
        let (t, h, w) = self.window;
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::Config("window extents must be >= 1".into()));
        }
        let (pt, ph, pw) = self.patch;
        if pt == 0 || ph == 0 || pw == 0 {
            return Err(Error::Config("patch extents must be >= 1".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be >= 1".into()));
        }
        self.rope()?;
        Ok(())
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            t: self.window.0,
            h: self.window.1,
            w: self.window.2,
            shifted: false,
        }
    }

    pub fn rope(&self) -> Result<RopeParams> {
        RopeParams::for_head_dim(self.head_dim).map(|p| RopeParams {
            base: self.rope_base,
            ..p
        })
    }

    /// Channels of one input token: noisy and conditioning latents are
    /// channel-concatenated, then patchified.
    pub fn token_in_channels(&self) -> usize {
        let (pt, ph, pw) = self.patch;
        2 * self.latent_channels * pt * ph * pw
    }

    pub fn token_out_channels(&self) -> usize {
        let (pt, ph, pw) = self.patch;
        self.latent_channels * pt * ph * pw
    }
}

/// Window layout used by block `block_index` on a token volume: even
/// blocks use the regular partition, odd blocks the shifted one.
pub fn layout_for_block(
    config: &ModelConfig,
    tokens: Volume3,
    block_index: usize,
) -> WindowLayout {
    let spec = config.window_spec();
    if block_index % 2 == 0 {
        partition_regular(tokens, spec)
    } else {
        partition_shifted(tokens, spec.shifted(true))
    }
}

/// Sinusoidal features of a timestep in `[0, 1]` at geometrically spaced
/// frequencies; first half sine, second half cosine.
pub fn timestep_embedding<T: Scalar>(t: T, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "timestep embedding dim {dim} must be even and positive"
        )));
    }
    let half = dim / 2;
    let tv = t.to_f64();
    let mut data = vec![T::zero(); dim];
    for i in 0..half {
        // frequencies span [1, 1/10000) of the base rate 1000
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        let arg = tv * 1000.0 * freq;
        data[i] = T::from_f64(arg.sin());
        data[half + i] = T::from_f64(arg.cos());
    }
    Tensor::new(vec![dim], data)
}

// ---- weights ----------------------------------------------------------------

/// Modulation and MLP weights of one modality inside a block.
#[derive(Debug, Clone)]
pub struct StreamWeights<T> {
    /// adaLN projection `[d x 6d]` producing shift/scale/gate for the
    /// attention and MLP sub-layers; zero-initialized (identity block).
    pub mod_w: Tensor<T>,
    pub mod_b: Tensor<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
}

impl<T: Scalar> StreamWeights<T> {
    fn seeded(d: usize, ratio: usize, seed: u64) -> Self {
        let hidden = d * ratio;
        let xavier = |rows: usize, cols: usize, label: &str| {
            gaussian::<T>(&[rows, cols], derive_seed(seed, label))
                .scale(T::from_f64(1.0 / (rows as f64).sqrt()))
        };
        StreamWeights {
            mod_w: Tensor::zeros(&[d, 6 * d]),
            mod_b: Tensor::zeros(&[6 * d]),
            mlp_w1: xavier(d, hidden, "mlp_w1"),
            mlp_b1: Tensor::zeros(&[hidden]),
            mlp_w2: xavier(hidden, d, "mlp_w2"),
            mlp_b2: Tensor::zeros(&[d]),
        }
    }
}

/// One transformer block: per-modality modulation + MLP plus the shared
/// attention projections.
#[derive(Debug, Clone)]
pub struct BlockWeights<T> {
    pub video: StreamWeights<T>,
    pub text: StreamWeights<T>,
    pub attn: AttentionWeights<T>,
}

impl<T: Scalar> BlockWeights<T> {
    pub fn seeded(config: &ModelConfig, seed: u64) -> Self {
        BlockWeights {
            video: StreamWeights::seeded(config.width, config.mlp_ratio, derive_seed(seed, "v")),
            text: StreamWeights::seeded(config.width, config.mlp_ratio, derive_seed(seed, "t")),
            attn: AttentionWeights::seeded(config.heads, config.head_dim, derive_seed(seed, "a")),
        }
    }
}

/// Full model weights.
#[derive(Debug, Clone)]
pub struct DitWeights<T> {
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Scalar> DitWeights<T> {
    /// Seeded initialization: identity blocks (zero modulation), zero
    /// output head, Xavier-scaled projections elsewhere.
    pub fn seeded(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let cin = config.token_in_channels();
        let cout = config.token_out_channels();
        Ok(DitWeights {
            embed_w: gaussian::<T>(&[cin, d], derive_seed(seed, "embed"))
                .scale(T::from_f64(1.0 / (cin as f64).sqrt())),
            embed_b: Tensor::zeros(&[d]),
            blocks: (0..config.depth)
                .map(|i| BlockWeights::seeded(config, derive_seed(seed, &format!("block{i}"))))
                .collect(),
            head_w: Tensor::zeros(&[d, cout]),
            head_b: Tensor::zeros(&[cout]),
        })
    }

    pub fn for_each_param(&self, f: &mut impl FnMut(&str, &Tensor<T>)) {
        f("embed.w", &self.embed_w);
        f("embed.b", &self.embed_b);
        for (i, b) in self.blocks.iter().enumerate() {
            for (stream, sw) in [("video", &b.video), ("text", &b.text)] {
                f(&format!("block{i}.{stream}.mod_w"), &sw.mod_w);
                f(&format!("block{i}.{stream}.mod_b"), &sw.mod_b);
                f(&format!("block{i}.{stream}.mlp_w1"), &sw.mlp_w1);
                f(&format!("block{i}.{stream}.mlp_b1"), &sw.mlp_b1);
                f(&format!("block{i}.{stream}.mlp_w2"), &sw.mlp_w2);
                f(&format!("block{i}.{stream}.mlp_b2"), &sw.mlp_b2);
            }
            for (stream, p) in [("video", &b.attn.video), ("text", &b.attn.text)] {
                f(&format!("block{i}.attn.{stream}.wq"), &p.wq);
                f(&format!("block{i}.attn.{stream}.wk"), &p.wk);
                f(&format!("block{i}.attn.{stream}.wv"), &p.wv);
                f(&format!("block{i}.attn.{stream}.wo"), &p.wo);
            }
        }
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        f("embed.w", &mut self.embed_w);
        f("embed.b", &mut self.embed_b);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (stream, sw) in [("video", &mut b.video), ("text", &mut b.text)] {
                f(&format!("block{i}.{stream}.mod_w"), &mut sw.mod_w);
                f(&format!("block{i}.{stream}.mod_b"), &mut sw.mod_b);
                f(&format!("block{i}.{stream}.mlp_w1"), &mut sw.mlp_w1);
                f(&format!("block{i}.{stream}.mlp_b1"), &mut sw.mlp_b1);
                f(&format!("block{i}.{stream}.mlp_w2"), &mut sw.mlp_w2);
                f(&format!("block{i}.{stream}.mlp_b2"), &mut sw.mlp_b2);
            }
            for (stream, p) in [("video", &mut b.attn.video), ("text", &mut b.attn.text)] {
                f(&format!("block{i}.attn.{stream}.wq"), &mut p.wq);
                f(&format!("block{i}.attn.{stream}.wk"), &mut p.wk);
                f(&format!("block{i}.attn.{stream}.wv"), &mut p.wv);
                f(&format!("block{i}.attn.{stream}.wo"), &mut p.wo);
            }
        }
        f("head.w", &mut self.head_w);
        f("head.b", &mut self.head_b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.numel());
        n
    }
}

// ---- taped forward -----------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct StreamVars {
    pub mod_w: Var,
    pub mod_b: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub video: StreamVars,
    pub text: StreamVars,
    pub attn: AttentionVars,
}

#[derive(Debug, Clone)]
pub struct DitVars {
    pub embed_w: Var,
    pub embed_b: Var,
    pub blocks: Vec<BlockVars>,
    pub head_w: Var,
    pub head_b: Var,
}

impl DitVars {
    /// Insert every weight as a tape leaf, in `for_each_param` order, and
    /// return the vars both structured and flat.
    pub fn leaf<T: Scalar>(tape: &mut Tape<T>, w: &DitWeights<T>) -> (Self, Vec<Var>) {
        let mut flat = Vec::new();
        let lv = |tape: &mut Tape<T>, t: &Tensor<T>, flat: &mut Vec<Var>| {
            let v = tape.leaf(t.clone());
            flat.push(v);
            v
        };
        let embed_w = lv(tape, &w.embed_w, &mut flat);
        let embed_b = lv(tape, &w.embed_b, &mut flat);
        let mut blocks = Vec::with_capacity(w.blocks.len());
        for b in &w.blocks {
            let stream = |tape: &mut Tape<T>, sw: &StreamWeights<T>, flat: &mut Vec<Var>| {
                StreamVars {
                    mod_w: lv(tape, &sw.mod_w, flat),
                    mod_b: lv(tape, &sw.mod_b, flat),
                    mlp_w1: lv(tape, &sw.mlp_w1, flat),
                    mlp_b1: lv(tape, &sw.mlp_b1, flat),
                    mlp_w2: lv(tape, &sw.mlp_w2, flat),
                    mlp_b2: lv(tape, &sw.mlp_b2, flat),
                }
            };
            let video = stream(tape, &b.video, &mut flat);
            let text = stream(tape, &b.text, &mut flat);
            let proj = |tape: &mut Tape<T>, p: &ModalityProjections<T>, flat: &mut Vec<Var>| {
                crate::attention::ProjVars {
                    wq: lv(tape, &p.wq, flat),
                    wk: lv(tape, &p.wk, flat),
                    wv: lv(tape, &p.wv, flat),
                    wo: lv(tape, &p.wo, flat),
                }
            };
            let attn = AttentionVars {
                video: proj(tape, &b.attn.video, &mut flat),
                text: proj(tape, &b.attn.text, &mut flat),
            };
            blocks.push(BlockVars { video, text, attn });
        }
        let head_w = lv(tape, &w.head_w, &mut flat);
        let head_b = lv(tape, &w.head_b, &mut flat);
        (
            DitVars {
                embed_w,
                embed_b,
                blocks,
                head_w,
                head_b,
            },
            flat,
        )
    }
}

fn modulation_params<T: Scalar>(
    tape: &mut Tape<T>,
    cond: Var,
    sw: &StreamVars,
    d: usize,
) -> [Var; 6] {
    let c = tape.silu(cond);
    let m = tape.matmul(c, sw.mod_w);
    let m = tape.add_rowvec(m, sw.mod_b);
    let mut out = [m; 6];
    for (i, slot) in out.iter_mut().enumerate() {
        let s = tape.slice_cols(m, i * d, (i + 1) * d);
        *slot = tape.reshape(s, &[d]);
    }
    out
}

fn modulate<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Var {
    let h = tape.layer_norm(x, T::from_f64(NORM_EPS));
    let one_plus = tape.add_scalar(scale, T::one());
    let h = tape.mul_rowvec(h, one_plus);
    tape.add_rowvec(h, shift)
}

fn mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, sw: &StreamVars) -> Var {
    let h = tape.matmul(x, sw.mlp_w1);
    let h = tape.add_rowvec(h, sw.mlp_b1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, sw.mlp_w2);
    tape.add_rowvec(h, sw.mlp_b2)
}

/// One block on the tape. `cond` is a `[1 x d]` conditioning row.
#[allow(clippy::too_many_arguments)]
pub fn block_forward_t<T: Scalar>(
    tape: &mut Tape<T>,
    video: Var,
    text: Var,
    cond: Var,
    block: &BlockVars,
    layout: &WindowLayout,
    rope: &RopeParams,
    heads: usize,
    head_dim: usize,
) -> (Var, Var, PairCounts) {
    let d = heads * head_dim;
    let [vs1, vc1, vg1, vs2, vc2, vg2] = modulation_params(tape, cond, &block.video, d);
    let [ts1, tc1, tg1, ts2, tc2, tg2] = modulation_params(tape, cond, &block.text, d);

    let hv = modulate(tape, video, vs1, vc1);
    let ht = modulate(tape, text, ts1, tc1);
    let (av, at, pairs) = window_attention_t(
        tape,
        hv,
        ht,
        layout,
        block.attn,
        heads,
        head_dim,
        Some(rope),
    );
    let gv = tape.mul_rowvec(av, vg1);
    let video = tape.add(video, gv);
    let gt = tape.mul_rowvec(at, tg1);
    let text = tape.add(text, gt);

    let hv = modulate(tape, video, vs2, vc2);
    let mv = mlp(tape, hv, &block.video);
    let gv = tape.mul_rowvec(mv, vg2);
    let video = tape.add(video, gv);

    let ht = modulate(tape, text, ts2, tc2);
    let mt = mlp(tape, ht, &block.text);
    let gt = tape.mul_rowvec(mt, tg2);
    let text = tape.add(text, gt);

    (video, text, pairs)
}

/// One block over plain tensors; `block_index` parity picks the layout.
pub fn block_forward<T: Scalar>(
    video: &Tensor<T>,
    text: &TextEmbedding<T>,
    cond_vec: &Tensor<T>,
    weights: &BlockWeights<T>,
    block_index: usize,
    tokens: Volume3,
    config: &ModelConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if video.rank() != 2 || video.rows() != tokens.tokens() || video.cols() != config.width {
        return Err(Error::dim(format!(
            "block_forward: video shape {:?} does not match {} tokens x width {}",
            video.shape(),
            tokens.tokens(),
            config.width
        )));
    }
    if cond_vec.numel() != config.width {
        return Err(Error::dim(format!(
            "block_forward: cond width {} != {}",
            cond_vec.numel(),
            config.width
        )));
    }
    let layout = layout_for_block(config, tokens, block_index);
    let rope = config.rope()?;
    let mut tape = Tape::new();
    let v = tape.leaf(video.clone());
    let t = tape.leaf(text.tokens.clone());
    let c = tape.leaf(cond_vec.reshape(&[1, config.width])?);
    let mut flat = Vec::new();
    let mut lv = |tape: &mut Tape<T>, x: &Tensor<T>| {
        let v = tape.leaf(x.clone());
        flat.push(v);
        v
    };
    let block = BlockVars {
        video: StreamVars {
            mod_w: lv(&mut tape, &weights.video.mod_w),
            mod_b: lv(&mut tape, &weights.video.mod_b),
            mlp_w1: lv(&mut tape, &weights.video.mlp_w1),
            mlp_b1: lv(&mut tape, &weights.video.mlp_b1),
            mlp_w2: lv(&mut tape, &weights.video.mlp_w2),
            mlp_b2: lv(&mut tape, &weights.video.mlp_b2),
        },
        text: StreamVars {
            mod_w: lv(&mut tape, &weights.text.mod_w),
            mod_b: lv(&mut tape, &weights.text.mod_b),
            mlp_w1: lv(&mut tape, &weights.text.mlp_w1),
            mlp_b1: lv(&mut tape, &weights.text.mlp_b1),
            mlp_w2: lv(&mut tape, &weights.text.mlp_w2),
            mlp_b2: lv(&mut tape, &weights.text.mlp_b2),
        },
        attn: AttentionVars::leaf(&mut tape, &weights.attn),
    };
    let (vo, to, _) = block_forward_t(
        &mut tape,
        v,
        t,
        c,
        &block,
        &layout,
        &rope,
        config.heads,
        config.head_dim,
    );
    Ok((tape.value(vo).clone(), tape.value(to).clone()))
}

// ---- patchify / model forward --------------------------------------------------

fn check_latent_shape<T: Scalar>(x: &Tensor<T>, config: &ModelConfig, what: &str) -> Result<()> {
    if x.rank() != 4 || x.shape()[3] != config.latent_channels {
        return Err(Error::dim(format!(
            "{what}: expected [T' x H' x W' x {}], got {:?}",
            config.latent_channels,
            x.shape()
        )));
    }
    Ok(())
}

/// Channel-concatenate the noisy and conditioning latents and flatten to
/// token rows of width `2 * C * patch_volume`.
pub fn patchify<T: Scalar>(
    noisy: &Tensor<T>,
    cond: &Tensor<T>,
    config: &ModelConfig,
) -> Result<(Tensor<T>, Volume3)> {
    check_latent_shape(noisy, config, "patchify noisy latent")?;
    if noisy.shape() != cond.shape() {
        return Err(Error::dim(format!(
            "patchify: latent shapes {:?} and {:?} differ",
            noisy.shape(),
            cond.shape()
        )));
    }
    let (t, h, w, c) = (
        noisy.shape()[0],
        noisy.shape()[1],
        noisy.shape()[2],
        noisy.shape()[3],
    );
    let (pt, ph, pw) = config.patch;
    for (axis, (dim, p)) in [("T'", (t, pt)), ("H'", (h, ph)), ("W'", (w, pw))] {
        if dim % p != 0 {
            return Err(Error::shape(format!(
                "patchify: {axis}={dim} is not divisible by patch {p}"
            )));
        }
    }
    let tokens = Volume3::new(t / pt, h / ph, w / pw)?;
    let pv = pt * ph * pw;
    let row_w = 2 * c * pv;
    let mut out = Tensor::zeros(&[tokens.tokens(), row_w]);
    let strides = [h * w * c, w * c, c];
    let mut row = 0;
    for tt in 0..tokens.t {
        for hh in 0..tokens.h {
            for ww in 0..tokens.w {
                let base_row = row * row_w;
                let mut slot = 0;
                for dt in 0..pt {
                    for dh in 0..ph {
                        for dw in 0..pw {
                            let src = (tt * pt + dt) * strides[0]
                                + (hh * ph + dh) * strides[1]
                                + (ww * pw + dw) * strides[2];
                            out.data_mut()[base_row + slot..base_row + slot + c]
                                .copy_from_slice(&noisy.data()[src..src + c]);
                            out.data_mut()
                                [base_row + c * pv + slot..base_row + c * pv + slot + c]
                                .copy_from_slice(&cond.data()[src..src + c]);
                            slot += c;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Ok((out, tokens))
}

/// Element map sending head output rows `[N x C*pv]` back to a
/// `[T' x H' x W' x C]` latent.
fn unpatchify_index_map(config: &ModelConfig, tokens: Volume3) -> Vec<usize> {
    let (pt, ph, pw) = config.patch;
    let c = config.latent_channels;
    let pv = pt * ph * pw;
    let (t, h, w) = (tokens.t * pt, tokens.h * ph, tokens.w * pw);
    let mut map = vec![0usize; t * h * w * c];
    let row_w = c * pv;
    let mut out_pos = 0;
    for tt in 0..t {
        for hh in 0..h {
            for ww in 0..w {
                let token = (tt / pt) * tokens.h * tokens.w + (hh / ph) * tokens.w + (ww / pw);
                let slot = ((tt % pt) * ph * pw + (hh % ph) * pw + (ww % pw)) * c;
                for ch in 0..c {
                    map[out_pos] = token * row_w + slot + ch;
                    out_pos += 1;
                }
            }
        }
    }
    map
}

/// Conditioning row: timestep features plus the mean text token.
fn cond_row_t<T: Scalar>(
    tape: &mut Tape<T>,
    text: Var,
    t: T,
    width: usize,
) -> Result<Var> {
    let temb = tape.leaf(timestep_embedding(t, width)?.reshape(&[1, width])?);
    let pooled = tape.mean_rows(text);
    let pooled = tape.reshape(pooled, &[1, width]);
    Ok(tape.add(temb, pooled))
}

/// Full model forward on a tape. Latents and text are recorded as
/// constants; weights come in as `vars`.
pub fn dit_forward_t<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &DitVars,
    config: &ModelConfig,
    noisy: &Tensor<T>,
    lq: &Tensor<T>,
    text: &TextEmbedding<T>,
    t: T,
) -> Result<Var> {
    if t < T::zero() || t > T::one() {
        return Err(Error::Domain(format!("timestep {t} outside [0, 1]")));
    }
    if text.width() != config.width {
        return Err(Error::dim(format!(
            "text width {} != model width {}",
            text.width(),
            config.width
        )));
    }
    let (tokens_in, tokens) = patchify(noisy, lq, config)?;
    let text_var = tape.leaf(text.tokens.clone());
    let cond = cond_row_t(tape, text_var, t, config.width)?;

    let x = tape.leaf(tokens_in);
    let x = tape.matmul(x, vars.embed_w);
    let mut video = tape.add_rowvec(x, vars.embed_b);
    let mut text_stream = text_var;
    let rope = config.rope()?;
    for (i, block) in vars.blocks.iter().enumerate() {
        let layout = layout_for_block(config, tokens, i);
        let (v, tx, _) = block_forward_t(
            tape,
            video,
            text_stream,
            cond,
            block,
            &layout,
            &rope,
            config.heads,
            config.head_dim,
        );
        video = v;
        text_stream = tx;
    }
    let out = tape.matmul(video, vars.head_w);
    let out = tape.add_rowvec(out, vars.head_b);

    let map = Rc::new(unpatchify_index_map(config, tokens));
    let flat = tape.reshape(out, &[tokens.tokens() * config.token_out_channels()]);
    let shape = noisy.shape().to_vec();
    let gathered = tape.gather_elems(flat, map, &shape);
    Ok(gathered)
}

/// Velocity prediction over plain tensors.
pub fn dit_forward<T: Scalar>(
    noisy: &Tensor<T>,
    lq: &Tensor<T>,
    text: &TextEmbedding<T>,
    t: T,
    config: &ModelConfig,
    weights: &DitWeights<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (vars, _) = DitVars::leaf(&mut tape, weights);
    let out = dit_forward_t(&mut tape, &vars, config, noisy, lq, text, t)?;
    Ok(tape.value(out).clone())
}

// ---- checkpointing -----------------------------------------------------------

/// Write `<stem>.svt` (named tensors) and `<stem>.json` (config sidecar).
pub fn save_dit_checkpoint<T: Scalar>(
    dir: &Path,
    stem: &str,
    config: &ModelConfig,
    weights: &DitWeights<T>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut names: Vec<(String, Tensor<T>)> = Vec::new();
    weights.for_each_param(&mut |name, t| names.push((name.to_string(), t.clone())));
    let entries: Vec<(&str, &Tensor<T>)> =
        names.iter().map(|(n, t)| (n.as_str(), t)).collect();
    save_tensors(dir.join(format!("{stem}.svt")), &entries)?;
    let json = serde_json::to_string_pretty(config).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

/// Load a checkpoint written by [`save_dit_checkpoint`].
pub fn load_dit_checkpoint<T: Scalar>(
    dir: &Path,
    stem: &str,
) -> Result<(ModelConfig, DitWeights<T>)> {
    let json = std::fs::read_to_string(dir.join(format!("{stem}.json")))?;
    let config: ModelConfig =
        serde_json::from_str(&json).map_err(|e| Error::Parse(e.to_string()))?;
    config.validate()?;
    let mut weights = DitWeights::<T>::seeded(&config, 0)?;
    let entries = load_tensors(dir.join(format!("{stem}.svt")))?;
    let mut map: HashMap<String, DynTensor> = entries.into_iter().collect();
    let mut err: Option<Error> = None;
    weights.for_each_param_mut(&mut |name, slot| {
        if err.is_some() {
            return;
        }
        match map.remove(name) {
            Some(dyn_t) => match dyn_t.into_tensor::<T>() {
                Ok(t) if t.shape() == slot.shape() => *slot = t,
                Ok(t) => {
                    err = Some(Error::shape(format!(
                        "checkpoint tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )))
                }
                Err(e) => err = Some(e),
            },
            None => err = Some(Error::Parse(format!("checkpoint missing tensor {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if !map.is_empty() {
        return Err(Error::Parse(format!(
            "checkpoint has {} unexpected tensors (e.g. {:?})",
            map.len(),
            map.keys().next()
        )));
    }
    Ok((config, weights))
}
