//! Causal video variational autoencoder.
//!
//! 8× spatial and 4× temporal compression into 16-channel latents with
//! strict temporal causality: frame 0 maps to latent 0 alone, every later
//! group of four frames to one latent, and no encoder statistic or tap
//! ever reads a future frame. Long videos can therefore be processed
//! clip-by-clip with results identical to whole-video encoding.
//!
//! Stage order (the figure leaves it free; recorded here and in the
//! config): the input conv downsamples spatially, the two following
//! stages downsample space and time together. The decoder mirrors this
//! with causal nearest-neighbor upsampling.

pub mod conv;

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, gaussian, rng};
use crate::tensor::io::{load_tensors, save_tensors, DynTensor};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub use conv::causal_conv3d;
use conv::{conv3d_t, group_norm_t, upsample_spatial_t, upsample_temporal_t};

use rand::Rng;
use rand_distr::StandardNormal;

const NORM_EPS: f64 = 1e-6;
const LOGVAR_MIN: f64 = -30.0;
const LOGVAR_MAX: f64 = 20.0;

/// Pixel video in `[0, 1]` with the shape contract `T ≡ 1 (mod 4)` and
/// `H, W` multiples of 8, checked at ingestion.
#[derive(Debug, Clone)]
pub struct VideoTensor<T> {
    data: Tensor<T>,
}

impl<T: Scalar> VideoTensor<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::shape(format!(
                "video must be [T x H x W x 3], got {s:?}"
            )));
        }
        let (t, h, w) = (s[0], s[1], s[2]);
        if t % 4 != 1 {
            return Err(Error::shape(format!(
                "frame count {t} violates T ≡ 1 (mod 4)"
            )));
        }
        if h == 0 || h % 8 != 0 {
            return Err(Error::shape(format!("height {h} is not a multiple of 8")));
        }
        if w == 0 || w % 8 != 0 {
            return Err(Error::shape(format!("width {w} is not a multiple of 8")));
        }
        for &v in data.data() {
            if v < T::zero() || v > T::one() {
                return Err(Error::shape(format!(
                    "pixel value {v} outside [0, 1]"
                )));
            }
        }
        Ok(VideoTensor { data })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    /// Latent extents after 4×/8× compression.
    pub fn latent_shape(&self) -> [usize; 4] {
        [
            1 + (self.frames() - 1) / 4,
            self.height() / 8,
            self.width() / 8,
            16,
        ]
    }
}

/// Architecture hyperparameters of the autoencoder.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VaeConfig {
    /// Channel widths after the input conv and the two joint
    /// space-time downsampling stages.
    pub channels: (usize, usize, usize),
    /// Frame-wise group-norm groups (statistics never mix time steps).
    pub groups: usize,
    pub latent_channels: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            channels: (8, 16, 32),
            groups: 4,
            latent_channels: 16,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let (c0, c1, c2) = self.channels;
        for c in [c0, c1, c2] {
            if c == 0 || c % self.groups != 0 {
                return Err(Error::Config(format!(
                    "channel width {c} must be a positive multiple of groups {}",
                    self.groups
                )));
            }
        }
        if self.latent_channels != 16 {
            return Err(Error::Config(format!(
                "latent_channels must be 16, got {}",
                self.latent_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvWeights<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> ConvWeights<T> {
    fn seeded(kt: usize, k: usize, cin: usize, cout: usize, seed: u64) -> Self {
        let fan_in = (kt * k * k * cin) as f64;
        ConvWeights {
            w: gaussian::<T>(&[kt, k, k, cin, cout], seed)
                .scale(T::from_f64((2.0 / fan_in).sqrt())),
            b: Tensor::zeros(&[cout]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResWeights<T> {
    pub gn1_g: Tensor<T>,
    pub gn1_b: Tensor<T>,
    pub conv1: ConvWeights<T>,
    pub gn2_g: Tensor<T>,
    pub gn2_b: Tensor<T>,
    pub conv2: ConvWeights<T>,
}

impl<T: Scalar> ResWeights<T> {
    fn seeded(c: usize, seed: u64) -> Self {
        ResWeights {
            gn1_g: Tensor::filled(&[c], T::one()),
            gn1_b: Tensor::zeros(&[c]),
            conv1: ConvWeights::seeded(3, 3, c, c, derive_seed(seed, "conv1")),
            gn2_g: Tensor::filled(&[c], T::one()),
            gn2_b: Tensor::zeros(&[c]),
            conv2: ConvWeights::seeded(3, 3, c, c, derive_seed(seed, "conv2")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoderWeights<T> {
    pub conv_in: ConvWeights<T>,
    pub res0: ResWeights<T>,
    pub stage1: ConvWeights<T>,
    pub res1: ResWeights<T>,
    pub stage2: ConvWeights<T>,
    pub res2: ResWeights<T>,
    pub stage3: Option<ConvWeights<T>>,
    pub norm_g: Tensor<T>,
    pub norm_b: Tensor<T>,
    pub conv_out: ConvWeights<T>,
}

#[derive(Debug, Clone)]
pub struct VaeWeights<T> {
    pub enc: CoderWeights<T>,
    pub dec: CoderWeights<T>,
}

impl<T: Scalar> VaeWeights<T> {
    pub fn seeded(config: &VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (c0, c1, c2) = config.channels;
        let lc = config.latent_channels;
        let s = |label: &str| derive_seed(seed, label);
        let enc = CoderWeights {
            conv_in: ConvWeights::seeded(3, 3, 3, c0, s("e.in")),
            res0: ResWeights::seeded(c0, s("e.res0")),
            stage1: ConvWeights::seeded(3, 3, c0, c1, s("e.down1")),
            res1: ResWeights::seeded(c1, s("e.res1")),
            stage2: ConvWeights::seeded(3, 3, c1, c2, s("e.down2")),
            res2: ResWeights::seeded(c2, s("e.res2")),
            stage3: None,
            norm_g: Tensor::filled(&[c2], T::one()),
            norm_b: Tensor::zeros(&[c2]),
            conv_out: ConvWeights::seeded(3, 3, c2, 2 * lc, s("e.out")),
        };
        let dec = CoderWeights {
            conv_in: ConvWeights::seeded(3, 3, lc, c2, s("d.in")),
            res0: ResWeights::seeded(c2, s("d.res0")),
            stage1: ConvWeights::seeded(3, 3, c2, c1, s("d.up1")),
            res1: ResWeights::seeded(c1, s("d.res1")),
            stage2: ConvWeights::seeded(3, 3, c1, c0, s("d.up2")),
            res2: ResWeights::seeded(c0, s("d.res2")),
            stage3: Some(ConvWeights::seeded(3, 3, c0, c0, s("d.up3"))),
            norm_g: Tensor::filled(&[c0], T::one()),
            norm_b: Tensor::zeros(&[c0]),
            conv_out: ConvWeights::seeded(3, 3, c0, 3, s("d.out")),
        };
        Ok(VaeWeights { enc, dec })
    }

    pub fn for_each_param(&self, f: &mut impl FnMut(&str, &Tensor<T>)) {
        for (side, cw) in [("enc", &self.enc), ("dec", &self.dec)] {
            let conv = |f: &mut dyn FnMut(&str, &Tensor<T>), name: &str, c: &ConvWeights<T>| {
                f(&format!("{side}.{name}.w"), &c.w);
                f(&format!("{side}.{name}.b"), &c.b);
            };
            let res = |f: &mut dyn FnMut(&str, &Tensor<T>), name: &str, r: &ResWeights<T>| {
                f(&format!("{side}.{name}.gn1.g"), &r.gn1_g);
                f(&format!("{side}.{name}.gn1.b"), &r.gn1_b);
                f(&format!("{side}.{name}.conv1.w"), &r.conv1.w);
                f(&format!("{side}.{name}.conv1.b"), &r.conv1.b);
                f(&format!("{side}.{name}.gn2.g"), &r.gn2_g);
                f(&format!("{side}.{name}.gn2.b"), &r.gn2_b);
                f(&format!("{side}.{name}.conv2.w"), &r.conv2.w);
                f(&format!("{side}.{name}.conv2.b"), &r.conv2.b);
            };
            conv(f, "conv_in", &cw.conv_in);
            res(f, "res0", &cw.res0);
            conv(f, "stage1", &cw.stage1);
            res(f, "res1", &cw.res1);
            conv(f, "stage2", &cw.stage2);
            res(f, "res2", &cw.res2);
            if let Some(s3) = &cw.stage3 {
                conv(f, "stage3", s3);
            }
            f(&format!("{side}.norm.g"), &cw.norm_g);
            f(&format!("{side}.norm.b"), &cw.norm_b);
            conv(f, "conv_out", &cw.conv_out);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        for (side, cw) in [("enc", &mut self.enc), ("dec", &mut self.dec)] {
            let conv =
                |f: &mut dyn FnMut(&str, &mut Tensor<T>), name: &str, c: &mut ConvWeights<T>| {
                    f(&format!("{side}.{name}.w"), &mut c.w);
                    f(&format!("{side}.{name}.b"), &mut c.b);
                };
            let res =
                |f: &mut dyn FnMut(&str, &mut Tensor<T>), name: &str, r: &mut ResWeights<T>| {
                    f(&format!("{side}.{name}.gn1.g"), &mut r.gn1_g);
                    f(&format!("{side}.{name}.gn1.b"), &mut r.gn1_b);
                    f(&format!("{side}.{name}.conv1.w"), &mut r.conv1.w);
                    f(&format!("{side}.{name}.conv1.b"), &mut r.conv1.b);
                    f(&format!("{side}.{name}.gn2.g"), &mut r.gn2_g);
                    f(&format!("{side}.{name}.gn2.b"), &mut r.gn2_b);
                    f(&format!("{side}.{name}.conv2.w"), &mut r.conv2.w);
                    f(&format!("{side}.{name}.conv2.b"), &mut r.conv2.b);
                };
            conv(f, "conv_in", &mut cw.conv_in);
            res(f, "res0", &mut cw.res0);
            conv(f, "stage1", &mut cw.stage1);
            res(f, "res1", &mut cw.res1);
            conv(f, "stage2", &mut cw.stage2);
            res(f, "res2", &mut cw.res2);
            if let Some(s3) = &mut cw.stage3 {
                conv(f, "stage3", s3);
            }
            f(&format!("{side}.norm.g"), &mut cw.norm_g);
            f(&format!("{side}.norm.b"), &mut cw.norm_b);
            conv(f, "conv_out", &mut cw.conv_out);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.numel());
        n
    }
}

// ---- taped vars ---------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ResVars {
    pub gn1_g: Var,
    pub gn1_b: Var,
    pub conv1: ConvVars,
    pub gn2_g: Var,
    pub gn2_b: Var,
    pub conv2: ConvVars,
}

#[derive(Debug, Clone)]
pub struct CoderVars {
    pub conv_in: ConvVars,
    pub res0: ResVars,
    pub stage1: ConvVars,
    pub res1: ResVars,
    pub stage2: ConvVars,
    pub res2: ResVars,
    pub stage3: Option<ConvVars>,
    pub norm_g: Var,
    pub norm_b: Var,
    pub conv_out: ConvVars,
}

#[derive(Debug, Clone)]
pub struct VaeVars {
    pub enc: CoderVars,
    pub dec: CoderVars,
}

impl VaeVars {
    /// Leaf every parameter in `for_each_param` order.
    pub fn leaf<T: Scalar>(tape: &mut Tape<T>, w: &VaeWeights<T>) -> (Self, Vec<Var>) {
        let mut flat = Vec::new();
        let lv = |tape: &mut Tape<T>, t: &Tensor<T>, flat: &mut Vec<Var>| {
            let v = tape.leaf(t.clone());
            flat.push(v);
            v
        };
        let coder = |tape: &mut Tape<T>, cw: &CoderWeights<T>, flat: &mut Vec<Var>| {
            let conv = |tape: &mut Tape<T>, c: &ConvWeights<T>, flat: &mut Vec<Var>| ConvVars {
                w: lv(tape, &c.w, flat),
                b: lv(tape, &c.b, flat),
            };
            let res = |tape: &mut Tape<T>, r: &ResWeights<T>, flat: &mut Vec<Var>| ResVars {
                gn1_g: lv(tape, &r.gn1_g, flat),
                gn1_b: lv(tape, &r.gn1_b, flat),
                conv1: ConvVars {
                    w: lv(tape, &r.conv1.w, flat),
                    b: lv(tape, &r.conv1.b, flat),
                },
                gn2_g: lv(tape, &r.gn2_g, flat),
                gn2_b: lv(tape, &r.gn2_b, flat),
                conv2: ConvVars {
                    w: lv(tape, &r.conv2.w, flat),
                    b: lv(tape, &r.conv2.b, flat),
                },
            };
            CoderVars {
                conv_in: conv(tape, &cw.conv_in, flat),
                res0: res(tape, &cw.res0, flat),
                stage1: conv(tape, &cw.stage1, flat),
                res1: res(tape, &cw.res1, flat),
                stage2: conv(tape, &cw.stage2, flat),
                res2: res(tape, &cw.res2, flat),
                stage3: cw.stage3.as_ref().map(|s| conv(tape, s, flat)),
                norm_g: lv(tape, &cw.norm_g, flat),
                norm_b: lv(tape, &cw.norm_b, flat),
                conv_out: conv(tape, &cw.conv_out, flat),
            }
        };
        let enc = coder(tape, &w.enc, &mut flat);
        let dec = coder(tape, &w.dec, &mut flat);
        (VaeVars { enc, dec }, flat)
    }

    /// Rebuild the var structure from a flat slice laid out in
    /// `for_each_param` order (as produced by [`VaeVars::leaf`]).
    pub fn from_flat(vars: &[Var]) -> Self {
        let mut cur = Cursor { vars, idx: 0 };
        let enc = cur.coder(false);
        let dec = cur.coder(true);
        debug_assert_eq!(cur.idx, vars.len());
        VaeVars { enc, dec }
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    idx: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.idx];
        self.idx += 1;
        v
    }

    fn conv(&mut self) -> ConvVars {
        ConvVars {
            w: self.next(),
            b: self.next(),
        }
    }

    fn res(&mut self) -> ResVars {
        ResVars {
            gn1_g: self.next(),
            gn1_b: self.next(),
            conv1: self.conv(),
            gn2_g: self.next(),
            gn2_b: self.next(),
            conv2: self.conv(),
        }
    }

    fn coder(&mut self, has_stage3: bool) -> CoderVars {
        CoderVars {
            conv_in: self.conv(),
            res0: self.res(),
            stage1: self.conv(),
            res1: self.res(),
            stage2: self.conv(),
            res2: self.res(),
            stage3: has_stage3.then(|| self.conv()),
            norm_g: self.next(),
            norm_b: self.next(),
            conv_out: self.conv(),
        }
    }
}

/// Per-channel affine on a `[T,H,W,C]` activation.
fn affine_channels<T: Scalar>(tape: &mut Tape<T>, x: Var, g: Var, b: Var) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let c = *shape.last().unwrap();
    let rows: usize = shape.iter().product::<usize>() / c;
    let flat = tape.reshape(x, &[rows, c]);
    let scaled = tape.mul_rowvec(flat, g);
    let shifted = tape.add_rowvec(scaled, b);
    tape.reshape(shifted, &shape)
}

fn res_block_t<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    r: &ResVars,
    groups: usize,
) -> Result<Var> {
    let eps = T::from_f64(NORM_EPS);
    let h = group_norm_t(tape, x, groups, eps)?;
    let h = affine_channels(tape, h, r.gn1_g, r.gn1_b);
    let h = tape.silu(h);
    let h = conv3d_t(tape, h, r.conv1.w, r.conv1.b, (1, 1, 1))?;
    let h = group_norm_t(tape, h, groups, eps)?;
    let h = affine_channels(tape, h, r.gn2_g, r.gn2_b);
    let h = tape.silu(h);
    let h = conv3d_t(tape, h, r.conv2.w, r.conv2.b, (1, 1, 1))?;
    Ok(tape.add(x, h))
}

/// Encoder on a tape: distribution parameters `(mean, logvar)`.
pub fn encode_t<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &CoderVars,
    config: &VaeConfig,
    video: Var,
) -> Result<(Var, Var)> {
    let g = config.groups;
    let eps = T::from_f64(NORM_EPS);
    let x = conv3d_t(tape, video, enc.conv_in.w, enc.conv_in.b, (1, 2, 2))?;
    let x = res_block_t(tape, x, &enc.res0, g)?;
    let x = conv3d_t(tape, x, enc.stage1.w, enc.stage1.b, (2, 2, 2))?;
    let x = res_block_t(tape, x, &enc.res1, g)?;
    let x = conv3d_t(tape, x, enc.stage2.w, enc.stage2.b, (2, 2, 2))?;
    let x = res_block_t(tape, x, &enc.res2, g)?;
    let x = group_norm_t(tape, x, g, eps)?;
    let x = affine_channels(tape, x, enc.norm_g, enc.norm_b);
    let x = tape.silu(x);
    let x = conv3d_t(tape, x, enc.conv_out.w, enc.conv_out.b, (1, 1, 1))?;

    let shape = tape.value(x).shape().to_vec();
    let lc = config.latent_channels;
    let rows: usize = shape.iter().take(3).product();
    let flat = tape.reshape(x, &[rows, 2 * lc]);
    let mean = tape.slice_cols(flat, 0, lc);
    let logvar = tape.slice_cols(flat, lc, 2 * lc);
    let latent_shape = [shape[0], shape[1], shape[2], lc];
    Ok((
        tape.reshape(mean, &latent_shape),
        tape.reshape(logvar, &latent_shape),
    ))
}

/// Decoder on a tape; output is the raw (unclamped) reconstruction.
pub fn decode_t<T: Scalar>(
    tape: &mut Tape<T>,
    dec: &CoderVars,
    config: &VaeConfig,
    latent: Var,
) -> Result<Var> {
    let g = config.groups;
    let eps = T::from_f64(NORM_EPS);
    let x = conv3d_t(tape, latent, dec.conv_in.w, dec.conv_in.b, (1, 1, 1))?;
    let x = res_block_t(tape, x, &dec.res0, g)?;
    let x = upsample_temporal_t(tape, x);
    let x = upsample_spatial_t(tape, x);
    let x = conv3d_t(tape, x, dec.stage1.w, dec.stage1.b, (1, 1, 1))?;
    let x = res_block_t(tape, x, &dec.res1, g)?;
    let x = upsample_temporal_t(tape, x);
    let x = upsample_spatial_t(tape, x);
    let x = conv3d_t(tape, x, dec.stage2.w, dec.stage2.b, (1, 1, 1))?;
    let x = res_block_t(tape, x, &dec.res2, g)?;
    let x = upsample_spatial_t(tape, x);
    let stage3 = dec.stage3.as_ref().expect("decoder has a stage3 conv");
    let x = conv3d_t(tape, x, stage3.w, stage3.b, (1, 1, 1))?;
    let x = group_norm_t(tape, x, g, eps)?;
    let x = affine_channels(tape, x, dec.norm_g, dec.norm_b);
    let x = tape.silu(x);
    conv3d_t(tape, x, dec.conv_out.w, dec.conv_out.b, (1, 1, 1))
}

/// Encode a video into distribution parameters.
pub fn encode<T: Scalar>(
    video: &VideoTensor<T>,
    config: &VaeConfig,
    weights: &VaeWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let (vars, _) = VaeVars::leaf(&mut tape, weights);
    let v = tape.leaf(video.tensor().clone());
    let (mean, logvar) = encode_t(&mut tape, &vars.enc, config, v)?;
    Ok((tape.value(mean).clone(), tape.value(logvar).clone()))
}

fn check_latent<T: Scalar>(latent: &Tensor<T>) -> Result<()> {
    if latent.rank() != 4 || latent.shape()[3] != 16 {
        return Err(Error::shape(format!(
            "latent must be [T' x H' x W' x 16], got {:?}",
            latent.shape()
        )));
    }
    Ok(())
}

/// Decode a latent into a `[0, 1]`-clamped video.
pub fn decode<T: Scalar>(
    latent: &Tensor<T>,
    config: &VaeConfig,
    weights: &VaeWeights<T>,
) -> Result<VideoTensor<T>> {
    check_latent(latent)?;
    let mut tape = Tape::new();
    let (vars, _) = VaeVars::leaf(&mut tape, weights);
    let l = tape.leaf(latent.clone());
    let out = decode_t(&mut tape, &vars.dec, config, l)?;
    let clamped = tape
        .value(out)
        .map(|v| v.max(T::zero()).min(T::one()));
    VideoTensor::new(clamped)
}

/// Reparameterized sample `mean + exp(logvar/2) * eps` with seeded noise;
/// logvar is clamped to [-30, 20].
pub fn sample_latent<T: Scalar>(
    mean: &Tensor<T>,
    logvar: &Tensor<T>,
    seed: u64,
) -> Result<Tensor<T>> {
    if mean.shape() != logvar.shape() {
        return Err(Error::dim(format!(
            "sample_latent: shapes {:?} and {:?} differ",
            mean.shape(),
            logvar.shape()
        )));
    }
    let mut r = rng(seed);
    let mut out = mean.clone();
    for (o, &lv) in out.data_mut().iter_mut().zip(logvar.data()) {
        let lv = lv.to_f64().clamp(LOGVAR_MIN, LOGVAR_MAX);
        let std = (lv / 2.0).exp();
        let eps: f64 = r.sample(StandardNormal);
        *o = *o + T::from_f64(std * eps);
    }
    Ok(out)
}

/// `L1(recon, target) + beta * KL(N(mean, exp(logvar)) || N(0, 1))`, the
/// KL averaged per latent element.
pub fn vae_loss<T: Scalar>(
    recon: &Tensor<T>,
    target: &Tensor<T>,
    mean: &Tensor<T>,
    logvar: &Tensor<T>,
    beta: T,
) -> Result<T> {
    if recon.shape() != target.shape() {
        return Err(Error::dim(format!(
            "vae_loss: recon {:?} vs target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    if mean.shape() != logvar.shape() {
        return Err(Error::dim("vae_loss: mean/logvar shapes differ"));
    }
    let n = T::from_f64(recon.numel() as f64);
    let mut l1 = T::zero();
    for (&a, &b) in recon.data().iter().zip(target.data()) {
        l1 += (a - b).abs();
    }
    l1 /= n;
    let m = T::from_f64(mean.numel() as f64);
    let half = T::from_f64(0.5);
    let mut kl = T::zero();
    for (&mu, &lv) in mean.data().iter().zip(logvar.data()) {
        kl += half * (mu * mu + lv.exp() - T::one() - lv);
    }
    kl /= m;
    Ok(l1 + beta * kl)
}

/// Taped [`vae_loss`].
pub fn vae_loss_t<T: Scalar>(
    tape: &mut Tape<T>,
    recon: Var,
    target: Var,
    mean: Var,
    logvar: Var,
    beta: T,
) -> Var {
    let l1 = tape.l1(recon, target);
    let mu2 = tape.mul(mean, mean);
    let ev = tape.exp(logvar);
    let s = tape.add(mu2, ev);
    let s = tape.sub(s, logvar);
    let s = tape.add_scalar(s, -T::one());
    let s = tape.scale(s, T::from_f64(0.5));
    let kl = tape.mean_all(s);
    let kl = tape.scale(kl, beta);
    tape.add(l1, kl)
}

// ---- checkpointing ---------------------------------------------------------------

pub fn save_vae_checkpoint<T: Scalar>(
    dir: &Path,
    stem: &str,
    config: &VaeConfig,
    weights: &VaeWeights<T>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut named: Vec<(String, Tensor<T>)> = Vec::new();
    weights.for_each_param(&mut |n, t| named.push((n.to_string(), t.clone())));
    let entries: Vec<(&str, &Tensor<T>)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
    save_tensors(dir.join(format!("{stem}.svt")), &entries)?;
    let json = serde_json::to_string_pretty(config).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

pub fn load_vae_checkpoint<T: Scalar>(dir: &Path, stem: &str) -> Result<(VaeConfig, VaeWeights<T>)> {
    let json = std::fs::read_to_string(dir.join(format!("{stem}.json")))?;
    let config: VaeConfig = serde_json::from_str(&json).map_err(|e| Error::Parse(e.to_string()))?;
    config.validate()?;
    let mut weights = VaeWeights::<T>::seeded(&config, 0)?;
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
                        "vae tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )))
                }
                Err(e) => err = Some(e),
            },
            None => err = Some(Error::Parse(format!("vae checkpoint missing {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if !map.is_empty() {
        return Err(Error::Parse(format!(
            "vae checkpoint has {} unexpected tensors",
            map.len()
        )));
    }
    Ok((config, weights))
}

// ---- video directories (PPM frames + JSON sidecar) -----------------------------------

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct VideoSidecar {
    frames: usize,
    height: usize,
    width: usize,
    fps: f64,
}

/// Write a video as `frame_%05d.ppm` (binary P6) plus `video.json`.
pub fn write_video_dir<T: Scalar>(dir: &Path, video: &VideoTensor<T>, fps: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (t, h, w) = (video.frames(), video.height(), video.width());
    let data = video.tensor().data();
    for f in 0..t {
        let mut bytes = Vec::with_capacity(32 + h * w * 3);
        bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
        let frame = &data[f * h * w * 3..(f + 1) * h * w * 3];
        for &v in frame {
            bytes.push((v.to_f64() * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        std::fs::write(dir.join(format!("frame_{f:05}.ppm")), bytes)?;
    }
    let sidecar = VideoSidecar {
        frames: t,
        height: h,
        width: w,
        fps,
    };
    std::fs::write(
        dir.join("video.json"),
        serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    Ok(())
}

fn parse_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(&bytes[start..pos]);
    }
    if fields.len() < 4 || fields[0] != b"P6" {
        return Err(bad("not a binary P6 file"));
    }
    let dim = |i: usize| -> Result<usize> {
        std::str::from_utf8(fields[i])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header field"))
    };
    let (w, h, maxval) = (dim(1)?, dim(2)?, dim(3)?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel payload"));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

/// Read a video directory written by [`write_video_dir`].
pub fn read_video_dir<T: Scalar>(dir: &Path) -> Result<(VideoTensor<T>, f64)> {
    let sidecar: VideoSidecar = serde_json::from_str(
        &std::fs::read_to_string(dir.join("video.json"))?,
    )
    .map_err(|e| Error::Parse(format!("video.json: {e}")))?;
    let (t, h, w) = (sidecar.frames, sidecar.height, sidecar.width);
    let mut data = Vec::with_capacity(t * h * w * 3);
    for f in 0..t {
        let path = dir.join(format!("frame_{f:05}.ppm"));
        let bytes = std::fs::read(&path)?;
        let (pw, ph, pixels) = parse_ppm(&bytes, &path)?;
        if (pw, ph) != (w, h) {
            return Err(Error::shape(format!(
                "frame {f} is {pw}x{ph}, sidecar says {w}x{h}"
            )));
        }
        data.extend(pixels.into_iter().map(|b| T::from_f64(b as f64 / 255.0)));
    }
    let video = VideoTensor::new(Tensor::new(vec![t, h, w, 3], data)?)?;
    Ok((video, sidecar.fps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, uniform};
    use crate::tensor::gradcheck::grad_check;
    use tempfile::tempdir;

    fn video(t: usize, h: usize, w: usize, seed: u64) -> VideoTensor<f32> {
        VideoTensor::new(uniform(&[t, h, w, 3], 0.0, 1.0, seed)).unwrap()
    }

    fn small_setup() -> (VaeConfig, VaeWeights<f32>) {
        let config = VaeConfig::default();
        let weights = VaeWeights::seeded(&config, 7).unwrap();
        (config, weights)
    }

    #[test]
    fn video_tensor_invariants() {
        assert!(VideoTensor::new(uniform::<f32>(&[4, 32, 32, 3], 0.0, 1.0, 1)).is_err());
        assert!(VideoTensor::new(uniform::<f32>(&[5, 30, 32, 3], 0.0, 1.0, 1)).is_err());
        assert!(VideoTensor::new(uniform::<f32>(&[5, 32, 32, 2], 0.0, 1.0, 1)).is_err());
        let out_of_range = Tensor::filled(&[1, 8, 8, 3], 1.5f32);
        assert!(VideoTensor::new(out_of_range).is_err());
        let err = VideoTensor::new(uniform::<f32>(&[6, 32, 32, 3], 0.0, 1.0, 1))
            .unwrap_err()
            .to_string();
        assert!(err.contains("mod 4"), "{err}");
    }

    #[test]
    fn encode_shape_map() {
        let (config, weights) = small_setup();
        for (t, h, w) in [(5usize, 32usize, 32usize), (1, 32, 32), (9, 16, 16)] {
            let v = video(t, h, w, t as u64);
            let (mean, logvar) = encode(&v, &config, &weights).unwrap();
            let want = [1 + (t - 1) / 4, h / 8, w / 8, 16];
            assert_eq!(mean.shape(), &want);
            assert_eq!(logvar.shape(), &want);
        }
    }

    #[test]
    fn decode_shape_inverts_encode() {
        let (config, weights) = small_setup();
        for (t, h, w) in [(5usize, 16usize, 16usize), (1, 16, 16)] {
            let v = video(t, h, w, 90 + t as u64);
            let (mean, _) = encode(&v, &config, &weights).unwrap();
            let out = decode(&mean, &config, &weights).unwrap();
            assert_eq!(out.tensor().shape(), v.tensor().shape());
        }
        // wrong channel count
        let bad: Tensor<f32> = Tensor::zeros(&[2, 4, 4, 8]);
        assert!(decode(&bad, &config, &weights).is_err());
    }

    #[test]
    fn prefix_causality() {
        let (config, weights) = small_setup();
        // 9-frame clip extended by 4 future frames: first 3 latents agree
        let long = video(13, 16, 16, 42);
        let short_data = Tensor::new(
            vec![9, 16, 16, 3],
            long.tensor().data()[..9 * 16 * 16 * 3].to_vec(),
        )
        .unwrap();
        let short = VideoTensor::new(short_data).unwrap();
        let (mean_long, _) = encode(&long, &config, &weights).unwrap();
        let (mean_short, _) = encode(&short, &config, &weights).unwrap();
        assert_eq!(mean_long.shape(), &[4, 2, 2, 16]);
        assert_eq!(mean_short.shape(), &[3, 2, 2, 16]);
        let prefix = 3 * 2 * 2 * 16;
        for i in 0..prefix {
            let d = (mean_long.data()[i] - mean_short.data()[i]).abs();
            assert!(d < 1e-5, "latent {i} differs by {d}");
        }
    }

    #[test]
    fn perturbing_a_frame_never_touches_earlier_latents() {
        let (config, weights) = small_setup();
        let v = video(9, 16, 16, 50);
        let (base, _) = encode(&v, &config, &weights).unwrap();
        for j in [1usize, 4, 8] {
            let mut t = v.tensor().clone();
            let off = j * 16 * 16 * 3;
            t.data_mut()[off] = (t.data()[off] + 0.31).min(1.0);
            let perturbed = VideoTensor::new(t).unwrap();
            let (m, _) = encode(&perturbed, &config, &weights).unwrap();
            // frame j affects latents ceil(j/4) and later only
            let safe_latents = j.div_ceil(4);
            let frame_elems = 2 * 2 * 16;
            assert_eq!(
                &m.data()[..safe_latents * frame_elems],
                &base.data()[..safe_latents * frame_elems],
                "perturbing frame {j} leaked backwards"
            );
            assert_ne!(m.data(), base.data());
        }
    }

    #[test]
    fn sample_latent_behaviour() {
        let mean: Tensor<f64> = gaussian(&[1, 2, 2, 16], 1);
        let tiny = Tensor::filled(&[1, 2, 2, 16], -1e9f64);
        let s = sample_latent(&mean, &tiny, 3).unwrap();
        assert!(s.max_abs_diff(&mean) < 1e-6);
        assert_eq!(
            sample_latent(&mean, &tiny, 9).unwrap(),
            sample_latent(&mean, &tiny, 9).unwrap()
        );

        // empirical variance over 1e4 draws within 5% of exp(logvar)
        let n = 10_000usize;
        let mean0: Tensor<f64> = Tensor::zeros(&[n / 16, 1, 1, 16]);
        let logvar = Tensor::filled(&[n / 16, 1, 1, 16], (0.25f64).ln());
        let s = sample_latent(&mean0, &logvar, 5).unwrap();
        let var = s.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var - 0.25).abs() < 0.05 * 0.25, "var {var}");
    }

    #[test]
    fn vae_loss_examples() {
        let z: Tensor<f64> = Tensor::zeros(&[2, 2]);
        assert_eq!(vae_loss(&z, &z, &z, &z, 1.0).unwrap(), 0.0);

        let recon = Tensor::filled(&[4, 4], 0.6f64);
        let target = Tensor::filled(&[4, 4], 0.5f64);
        let loss = vae_loss(&recon, &target, &z, &z, 0.0).unwrap();
        assert!((loss - 0.1).abs() < 1e-12);

        // KL closed form: mean 1, logvar 0 -> 0.5 per element
        let ones: Tensor<f64> = Tensor::filled(&[3, 3], 1.0);
        let zeros: Tensor<f64> = Tensor::zeros(&[3, 3]);
        let loss = vae_loss(&ones, &ones, &ones, &zeros, 1.0).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn full_vae_gradients_match_finite_differences() {
        // micro config keeps the finite-difference sweep fast
        let config = VaeConfig {
            channels: (4, 4, 4),
            groups: 2,
            latent_channels: 16,
        };
        let weights = VaeWeights::<f64>::seeded(&config, 3).unwrap();
        let clip = uniform::<f64>(&[5, 8, 8, 3], 0.0, 1.0, 4);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        weights.for_each_param(&mut |n, t| {
            names.push(n.to_string());
            tensors.push(t.clone());
        });
        let params: Vec<(&str, Tensor<f64>)> = names
            .iter()
            .map(|n| n.as_str())
            .zip(tensors.iter().cloned())
            .collect();
        let beta = 0.05;
        let report = grad_check(
            |tape, vars| {
                let vv = VaeVars::from_flat(vars);
                let x = tape.leaf(clip.clone());
                let (mean, logvar) = encode_t(tape, &vv.enc, &config, x)?;
                let recon = decode_t(tape, &vv.dec, &config, mean)?;
                let target = tape.leaf(clip.clone());
                Ok(vae_loss_t(tape, recon, target, mean, logvar, beta))
            },
            &params,
            1e-5,
            40,
            99,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let (config, weights) = small_setup();
        save_vae_checkpoint(dir.path(), "vae", &config, &weights).unwrap();
        let (config2, weights2) = load_vae_checkpoint::<f32>(dir.path(), "vae").unwrap();
        assert_eq!(config, config2);
        let mut a = Vec::new();
        weights.for_each_param(&mut |_, t| a.push(t.clone()));
        let mut i = 0;
        weights2.for_each_param(&mut |_, t| {
            assert_eq!(*t, a[i]);
            i += 1;
        });
    }

    #[test]
    fn video_dir_round_trip() {
        let dir = tempdir().unwrap();
        let v = video(5, 16, 16, 77);
        write_video_dir(dir.path(), &v, 12.0).unwrap();
        assert!(dir.path().join("frame_00004.ppm").exists());
        assert!(dir.path().join("video.json").exists());
        let (back, fps) = read_video_dir::<f32>(dir.path()).unwrap();
        assert_eq!(fps, 12.0);
        assert_eq!(back.tensor().shape(), v.tensor().shape());
        // quantization error is at most half a level
        assert!(back.tensor().max_abs_diff(v.tensor()) <= 0.5 / 255.0 + 1e-6);
        // and a second round trip is exact
        let dir2 = tempdir().unwrap();
        write_video_dir(dir2.path(), &back, 12.0).unwrap();
        let (again, _) = read_video_dir::<f32>(dir2.path()).unwrap();
        assert_eq!(again.tensor(), back.tensor());
    }

}
