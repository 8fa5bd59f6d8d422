//! Segmentor, generator and discriminator.
//!
//! All three networks are plain functions over a [`NetParams`] bundle, so
//! training code owns the only mutable state (the [`candle_core::Var`]s).
//! Batched entry points take `(B, C, H, W)` tensors; the single-example
//! wrappers take rasters.

mod conv;
mod layers;

use candle_core::{DType, Device, Tensor, D};
use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskops::{interpolation_matrix, BBox, BinaryMask, RgbImage, BLUE, RED};

use layers::{conv2d, halved, leaky_relu, linear, Init, RELU_GAIN};
pub use layers::{sigmoid, ParamGroup};

/// Additive bias that removes a feature cell from a pooling bin.
const OUTSIDE_BIN: f32 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Dropout on the innermost decoder levels, active only while sampling.
    Dropout,
    /// An extra Gaussian input plane (zeros when noise is disabled).
    NoiseChannel,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub input_size: usize,
    pub roi_grid: usize,
    pub mask_size: usize,
    pub paint_size: usize,
    pub backbone_width: usize,
    /// Stride-2 stages; 0 selects a single 1x1 convolution.
    pub backbone_depth: usize,
    /// Residual blocks per stage.
    pub backbone_blocks: usize,
    pub generator_width: usize,
    /// Stride-2 encoder levels.
    pub generator_depth: usize,
    pub generator_skips: bool,
    pub discriminator_width: usize,
    /// Convolutions, the last one unstrided.
    pub discriminator_depth: usize,
    pub noise_mode: NoiseMode,
    pub dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            roi_grid: 14,
            mask_size: 32,
            paint_size: 64,
            backbone_width: 8,
            backbone_depth: 2,
            backbone_blocks: 1,
            generator_width: 8,
            generator_depth: 4,
            generator_skips: true,
            discriminator_width: 8,
            discriminator_depth: 4,
            noise_mode: NoiseMode::Dropout,
            dropout: 0.5,
        }
    }
}

impl NetConfig {
    /// Full-size resolutions.
    pub fn full_scale() -> Self {
        Self {
            input_size: 500,
            mask_size: 58,
            paint_size: 256,
            backbone_width: 64,
            backbone_depth: 4,
            backbone_blocks: 2,
            generator_width: 64,
            generator_depth: 8,
            discriminator_width: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("input_size", self.input_size),
            ("roi_grid", self.roi_grid),
            ("mask_size", self.mask_size),
            ("paint_size", self.paint_size),
            ("backbone_width", self.backbone_width),
            ("generator_width", self.generator_width),
            ("discriminator_width", self.discriminator_width),
        ] {
            if v == 0 {
                return bad(format!("net.{name} must be positive"));
            }
        }
        if self.generator_depth == 0 || self.generator_depth > 16 {
            return bad("net.generator_depth must be in 1..=16".into());
        }
        if !self.paint_size.is_multiple_of(1 << self.generator_depth) {
            return bad(format!(
                "net.paint_size {} is not divisible by 2^{}",
                self.paint_size, self.generator_depth
            ));
        }
        if self.discriminator_depth < 2 || self.discriminator_depth > 16 {
            return bad("net.discriminator_depth must be in 2..=16".into());
        }
        if !self
            .paint_size
            .is_multiple_of(1 << (self.discriminator_depth - 1))
        {
            return bad(format!(
                "net.paint_size {} is not divisible by 2^{}",
                self.paint_size,
                self.discriminator_depth - 1
            ));
        }
        if self.backbone_depth > 8 {
            return bad("net.backbone_depth must be at most 8".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("net.dropout {} is outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Side of the single-channel backbone map.
    pub fn feature_size(&self) -> usize {
        (0..self.backbone_depth).fold(self.input_size, |n, _| halved(n))
    }

    /// Side of the discriminator score grid.
    pub fn score_size(&self) -> usize {
        self.paint_size >> (self.discriminator_depth - 1)
    }

    fn backbone_channels(&self, stage: usize) -> usize {
        self.backbone_width << stage.min(3)
    }

    /// Channels of the trunk features the head reads from.
    pub fn trunk_channels(&self) -> usize {
        if self.backbone_depth == 0 {
            4
        } else {
            self.backbone_channels(self.backbone_depth - 1)
        }
    }

    fn generator_channels(&self, level: usize) -> usize {
        self.generator_width << level.min(3)
    }

    fn generator_in_channels(&self) -> usize {
        match self.noise_mode {
            NoiseMode::NoiseChannel => 4,
            _ => 3,
        }
    }
}

/// Trainable state of all three networks.
#[derive(Clone, Debug)]
pub struct NetParams {
    pub segmentor: ParamGroup,
    pub generator: ParamGroup,
    pub discriminator: ParamGroup,
}

impl NetParams {
    pub fn groups(&self) -> [(&'static str, &ParamGroup); 3] {
        [
            ("segmentor", &self.segmentor),
            ("generator", &self.generator),
            ("discriminator", &self.discriminator),
        ]
    }

    pub fn all_finite(&self) -> Result<bool> {
        for (_, g) in self.groups() {
            if !g.all_finite()? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Deep copy with fresh variables.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = |g: &ParamGroup| -> Result<ParamGroup> {
            let mut out = ParamGroup::new();
            for (k, v) in g.iter() {
                out.insert(k.clone(), v.as_tensor().copy()?)?;
            }
            Ok(out)
        };
        Ok(Self {
            segmentor: copy(&self.segmentor)?,
            generator: copy(&self.generator)?,
            discriminator: copy(&self.discriminator)?,
        })
    }
}

pub fn init_params<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Result<NetParams> {
    cfg.validate()?;

    let mut seg = Init::new(&mut *rng);
    if cfg.backbone_depth == 0 {
        seg.conv("head", 4, 1, 1, 1.0)?;
    } else {
        for s in 0..cfg.backbone_depth {
            let cin = if s == 0 {
                4
            } else {
                cfg.backbone_channels(s - 1)
            };
            let c = cfg.backbone_channels(s);
            seg.conv(&format!("stage{s}.down"), cin, c, 3, RELU_GAIN)?;
            for b in 0..cfg.backbone_blocks {
                seg.conv(&format!("stage{s}.block{b}.conv1"), c, c, 3, RELU_GAIN)?;
                seg.conv(&format!("stage{s}.block{b}.conv2"), c, c, 3, 0.5)?;
            }
        }
        seg.conv("head", cfg.trunk_channels(), 1, 1, 1.0)?;
    }
    let g2 = cfg.roi_grid * cfg.roi_grid;
    seg.linear(
        "fc",
        g2,
        cfg.mask_size * cfg.mask_size,
        0.1 / (g2 as f64).sqrt(),
    )?;
    let segmentor = seg.group;

    let mut gen = Init::new(&mut *rng);
    gen.conv(
        "enc0",
        cfg.generator_in_channels(),
        cfg.generator_channels(0),
        3,
        RELU_GAIN,
    )?;
    for i in 1..=cfg.generator_depth {
        gen.conv(
            &format!("enc{i}"),
            cfg.generator_channels(i - 1),
            cfg.generator_channels(i),
            3,
            RELU_GAIN,
        )?;
    }
    let skip = if cfg.generator_skips { 2 } else { 1 };
    for i in (1..=cfg.generator_depth).rev() {
        let cin = if i == cfg.generator_depth {
            cfg.generator_channels(i)
        } else {
            skip * cfg.generator_channels(i)
        };
        gen.conv(
            &format!("dec{i}"),
            cin,
            cfg.generator_channels(i - 1),
            3,
            RELU_GAIN,
        )?;
    }
    gen.conv("out", skip * cfg.generator_channels(0), 3, 3, 0.1)?;
    let generator = gen.group;

    let mut dis = Init::new(&mut *rng);
    let mut cin = 6;
    for k in 0..cfg.discriminator_depth - 1 {
        let c = cfg.discriminator_width << k.min(3);
        dis.conv(&format!("conv{k}"), cin, c, 4, RELU_GAIN)?;
        cin = c;
    }
    dis.conv(
        &format!("conv{}", cfg.discriminator_depth - 1),
        cin,
        1,
        3,
        0.05,
    )?;
    let discriminator = dis.group;

    Ok(NetParams {
        segmentor,
        generator,
        discriminator,
    })
}

/// Parameter shapes per group, in [`NetParams::groups`] order.
pub fn param_shapes(cfg: &NetConfig) -> Result<[BTreeMap<String, Vec<usize>>; 3]> {
    let p = init_params(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    let shapes = |g: &ParamGroup| {
        g.iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect()
    };
    Ok([
        shapes(&p.segmentor),
        shapes(&p.generator),
        shapes(&p.discriminator),
    ])
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: 0,
            what: what.to_string(),
        })
    }
}

fn expect_dims(t: &Tensor, want: &[usize], what: &str) -> Result<()> {
    if t.dims() != want {
        return Err(Error::Mismatch(format!(
            "{what} has shape {:?}, expected {want:?}",
            t.dims()
        )));
    }
    Ok(())
}

/// Backbone features `(B, trunk_channels, F, F)` of a `(B, 4, S, S)` input.
pub fn backbone_forward(params: &NetParams, cfg: &NetConfig, input: &Tensor) -> Result<Tensor> {
    let p = &params.segmentor;
    if cfg.backbone_depth == 0 {
        return Ok(input.clone());
    }
    let mut h = input.clone();
    for s in 0..cfg.backbone_depth {
        h = conv2d(&h, p, &format!("stage{s}.down"), 2, 1)?.relu()?;
        for b in 0..cfg.backbone_blocks {
            let r = conv2d(&h, p, &format!("stage{s}.block{b}.conv1"), 1, 1)?.relu()?;
            let r = conv2d(&r, p, &format!("stage{s}.block{b}.conv2"), 1, 1)?;
            h = (h + r)?.relu()?;
        }
    }
    Ok(h)
}

/// Bin bounds of an adaptive split of `len` cells into `g` bins; every
/// bin holds at least one cell.
fn bins(len: usize, g: usize) -> Vec<(usize, usize)> {
    (0..g)
        .map(|j| ((j * len) / g, ((j + 1) * len).div_ceil(g)))
        .collect()
}

/// Max-pools the `(B, 1, F, F)` map over each box into `(B, g*g)`.
pub fn roi_max_pool(map: &Tensor, boxes: &[BBox], grid: usize) -> Result<Tensor> {
    let (b, c, fh, fw) = map.dims4()?;
    if c != 1 || boxes.len() != b {
        return Err(Error::Mismatch(format!(
            "roi pooling expects (B,1,H,W) with B boxes, got {:?} and {} boxes",
            map.dims(),
            boxes.len()
        )));
    }
    let cells = fh * fw;
    let mut bias = vec![OUTSIDE_BIN; b * grid * grid * cells];
    for (n, bx) in boxes.iter().enumerate() {
        let bx = bx.clip(fw, fh).ok_or(Error::EmptyCrop(*bx, fw, fh))?;
        let ys = bins(bx.height(), grid);
        let xs = bins(bx.width(), grid);
        for (i, &(y0, y1)) in ys.iter().enumerate() {
            for (j, &(x0, x1)) in xs.iter().enumerate() {
                let base = ((n * grid + i) * grid + j) * cells;
                for y in bx.y0 + y0..bx.y0 + y1 {
                    let row = base + y * fw;
                    bias[row + bx.x0 + x0..row + bx.x0 + x1].fill(0.0);
                }
            }
        }
    }
    let bias =
        Tensor::from_vec(bias, (b, grid * grid, cells), map.device())?.to_dtype(map.dtype())?;
    let flat = map.reshape((b, 1, cells))?;
    Ok(flat.broadcast_add(&bias)?.max(D::Minus1)?)
}

/// `(P, m)` bilinear resampling matrix; a constant, never trained.
pub fn upsample_matrix(cfg: &NetConfig, dtype: DType) -> Result<Tensor> {
    let m = interpolation_matrix(cfg.mask_size, cfg.paint_size);
    Ok(Tensor::from_vec(m, (cfg.paint_size, cfg.mask_size), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Bilinear resize of `(B, m, m)` grids to `(B, P, P)`.
pub fn upsample_masks(cfg: &NetConfig, o: &Tensor) -> Result<Tensor> {
    let a = upsample_matrix(cfg, o.dtype())?;
    Ok(a.broadcast_matmul(o)?.broadcast_matmul(&a.t()?)?)
}

#[derive(Clone, Debug)]
pub struct SegmentorBatch {
    /// `(B, m, m)` post-sigmoid mask.
    pub o: Tensor,
    /// `(B, P, P)` bilinear upsample of `o`.
    pub upsampled: Tensor,
}

/// `input` is `(B, 4, S, S)` (RGB then SV); boxes are in input pixels.
pub fn segmentor_forward_batch(
    params: &NetParams,
    cfg: &NetConfig,
    input: &Tensor,
    boxes: &[BBox],
) -> Result<SegmentorBatch> {
    let b = input.dim(0)?;
    expect_dims(
        input,
        &[b, 4, cfg.input_size, cfg.input_size],
        "segmentor input",
    )?;
    for bx in boxes {
        if bx.x1 > cfg.input_size || bx.y1 > cfg.input_size || bx.area() == 0 {
            return Err(Error::EmptyCrop(*bx, cfg.input_size, cfg.input_size));
        }
    }
    let trunk = backbone_forward(params, cfg, input)?;
    let map = conv2d(&trunk, &params.segmentor, "head", 1, 0)?;
    let f = cfg.feature_size();
    let fboxes: Vec<BBox> = boxes
        .iter()
        .map(|bx| bx.rescale((cfg.input_size, cfg.input_size), (f, f)))
        .collect();
    let pooled = roi_max_pool(&map, &fboxes, cfg.roi_grid)?;
    let logits = linear(&pooled, &params.segmentor, "fc")?;
    ensure_finite(&logits, "segmentor activations")?;
    let m = cfg.mask_size;
    let o = sigmoid(&logits)?.reshape((b, m, m))?;
    let upsampled = upsample_masks(cfg, &o)?;
    Ok(SegmentorBatch { o, upsampled })
}

#[derive(Clone, Debug)]
pub struct SegmentorOutput {
    pub o: BinaryMask,
    pub upsampled: BinaryMask,
}

fn mask_from_tensor(t: &Tensor) -> Result<BinaryMask> {
    let (h, w) = t.dims2()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    BinaryMask::new(w, h, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

pub fn image_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = img.dims();
    Ok(Tensor::from_vec(img.to_chw(), (3, h, w), &Device::Cpu)?)
}

pub fn mask_tensor(m: &BinaryMask) -> Result<Tensor> {
    let (w, h) = m.dims();
    Ok(Tensor::from_vec(m.data().to_vec(), (h, w), &Device::Cpu)?)
}

pub fn image_from_tensor(t: &Tensor) -> Result<RgbImage> {
    let (_, h, w) = t.dims3()?;
    let planar = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    RgbImage::from_chw(w, h, &planar)
}

/// `(4, S, S)` segmentor input of one example.
pub fn segmentor_input(image: &RgbImage, sv: &BinaryMask) -> Result<Tensor> {
    if image.dims() != sv.dims() {
        return Err(Error::ShapeMismatch {
            expected: image.dims(),
            actual: sv.dims(),
        });
    }
    Ok(Tensor::cat(
        &[image_tensor(image)?, mask_tensor(sv)?.unsqueeze(0)?],
        0,
    )?)
}

pub fn segmentor_forward(
    params: &NetParams,
    cfg: &NetConfig,
    image: &RgbImage,
    sv: &BinaryMask,
    bbox: BBox,
) -> Result<SegmentorOutput> {
    let s = cfg.input_size;
    if image.dims() != (s, s) {
        return Err(Error::ShapeMismatch {
            expected: (s, s),
            actual: image.dims(),
        });
    }
    let input = segmentor_input(image, sv)?.unsqueeze(0)?;
    let out = segmentor_forward_batch(params, cfg, &input, &[bbox])?;
    Ok(SegmentorOutput {
        o: mask_from_tensor(&out.o.squeeze(0)?)?,
        upsampled: mask_from_tensor(&out.upsampled.squeeze(0)?)?,
    })
}

/// Tensor form of the generator-input composition on `(B, 3, P, P)` images
/// and `(B, P, P)` masks. With `straight_through`, the forward value uses
/// `O >= 0.5` while gradients flow to the soft `O` unchanged.
pub fn compose_batch(
    image: &Tensor,
    o: &Tensor,
    v: &Tensor,
    straight_through: bool,
) -> Result<Tensor> {
    let o = if straight_through {
        let hard = o.ge(0.5)?.to_dtype(o.dtype())?;
        (hard + (o - o.detach())?)?
    } else {
        o.clone()
    };
    let o = o.unsqueeze(1)?;
    let v = v.unsqueeze(1)?;
    let hidden = v.affine(-1.0, 1.0)?;
    let red = (&o * &hidden)?;
    let blue = (o.affine(-1.0, 1.0)? * &hidden)?;
    let color = |rgb: [f32; 3]| -> Result<Tensor> {
        Ok(
            Tensor::from_vec(rgb.to_vec(), (1, 3, 1, 1), image.device())?
                .to_dtype(image.dtype())?,
        )
    };
    let m = image.broadcast_mul(&v)?;
    let m = (m + red.broadcast_mul(&color(RED)?)?)?;
    Ok((m + blue.broadcast_mul(&color(BLUE)?)?)?)
}

/// Source of the generator's stochasticity; `None` gives the deterministic
/// inference path.
pub type NoiseSource<'a> = Option<&'a mut dyn RngCore>;

fn dropout(x: &Tensor, rate: f64, rng: &mut dyn RngCore) -> Result<Tensor> {
    let keep = 1.0 - rate;
    let scale = (1.0 / keep) as f32;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        })
        .collect();
    let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// `(B, 3, P, P)` composed input to `(B, 3, P, P)` paint in `[0, 1]`.
pub fn generator_forward_batch(
    params: &NetParams,
    cfg: &NetConfig,
    m_input: &Tensor,
    mut noise: NoiseSource<'_>,
) -> Result<Tensor> {
    let p = &params.generator;
    let b = m_input.dim(0)?;
    let size = cfg.paint_size;
    expect_dims(m_input, &[b, 3, size, size], "generator input")?;
    let x = if cfg.noise_mode == NoiseMode::NoiseChannel {
        let plane = match noise.as_deref_mut() {
            Some(rng) => {
                let z: Vec<f32> = (0..b * size * size)
                    .map(|_| StandardNormal.sample(&mut *rng))
                    .collect();
                Tensor::from_vec(z, (b, 1, size, size), m_input.device())?
                    .to_dtype(m_input.dtype())?
            }
            None => Tensor::zeros((b, 1, size, size), m_input.dtype(), m_input.device())?,
        };
        Tensor::cat(&[m_input, &plane], 1)?
    } else {
        m_input.clone()
    };

    let depth = cfg.generator_depth;
    let mut h = leaky_relu(&conv2d(&x, p, "enc0", 1, 1)?)?;
    let mut skips = vec![h.clone()];
    for i in 1..=depth {
        h = leaky_relu(&conv2d(&h, p, &format!("enc{i}"), 2, 1)?)?;
        if i < depth {
            skips.push(h.clone());
        }
    }
    for i in (1..=depth).rev() {
        // convolve at the coarse scale, then upsample: 4x fewer MACs
        h = conv2d(&h, p, &format!("dec{i}"), 1, 1)?.relu()?;
        let (_, _, hh, ww) = h.dims4()?;
        h = h.upsample_nearest2d(hh * 2, ww * 2)?;
        if cfg.noise_mode == NoiseMode::Dropout && i + 3 > depth && cfg.dropout > 0.0 {
            if let Some(rng) = noise.as_deref_mut() {
                h = dropout(&h, cfg.dropout, rng)?;
            }
        }
        if cfg.generator_skips {
            h = Tensor::cat(&[&h, &skips[i - 1]], 1)?;
        }
    }
    let out = conv2d(&h, p, "out", 1, 1)?;
    ensure_finite(&out, "generator activations")?;
    Ok(sigmoid(&out)?)
}

pub fn generator_forward(
    params: &NetParams,
    cfg: &NetConfig,
    m_input: &RgbImage,
    noise: NoiseSource<'_>,
) -> Result<RgbImage> {
    let s = cfg.paint_size;
    if m_input.dims() != (s, s) {
        return Err(Error::ShapeMismatch {
            expected: (s, s),
            actual: m_input.dims(),
        });
    }
    let x = image_tensor(m_input)?.unsqueeze(0)?;
    let y = generator_forward_batch(params, cfg, &x, noise)?;
    image_from_tensor(&y.squeeze(0)?)
}

/// Scores `(B, K, K)` for conditioning and judged images `(B, 3, P, P)`.
pub fn discriminator_forward_batch(
    params: &NetParams,
    cfg: &NetConfig,
    cond: &Tensor,
    judged: &Tensor,
) -> Result<Tensor> {
    let b = cond.dim(0)?;
    let s = cfg.paint_size;
    expect_dims(cond, &[b, 3, s, s], "discriminator condition")?;
    expect_dims(judged, &[b, 3, s, s], "judged image")?;
    let p = &params.discriminator;
    let mut h = Tensor::cat(&[cond, judged], 1)?;
    for k in 0..cfg.discriminator_depth - 1 {
        h = leaky_relu(&conv2d(&h, p, &format!("conv{k}"), 2, 1)?)?;
    }
    let h = conv2d(&h, p, &format!("conv{}", cfg.discriminator_depth - 1), 1, 1)?;
    ensure_finite(&h, "discriminator activations")?;
    Ok(sigmoid(&h)?.squeeze(1)?)
}

/// Row-major `K x K` realness scores.
pub fn discriminator_forward(
    params: &NetParams,
    cfg: &NetConfig,
    cond: &RgbImage,
    judged: &RgbImage,
) -> Result<Vec<f32>> {
    if cond.dims() != judged.dims() {
        return Err(Error::ShapeMismatch {
            expected: cond.dims(),
            actual: judged.dims(),
        });
    }
    let c = image_tensor(cond)?.unsqueeze(0)?;
    let j = image_tensor(judged)?.unsqueeze(0)?;
    Ok(discriminator_forward_batch(params, cfg, &c, &j)?
        .flatten_all()?
        .to_vec1::<f32>()?)
}

#[cfg(test)]
mod tests;
