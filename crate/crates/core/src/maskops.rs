//! Mask and image algebra shared by the data, model and evaluation paths.
//!
//! Rasters are stored row-major with `f32` samples in `[0, 1]`. Masks are
//! single channel; after bilinear resampling they may hold fractional
//! values, and [`binarize`] turns them back into hard `{0, 1}` masks.
//!
//! Bilinear resampling follows the half-pixel-center convention
//! (`align_corners = false`): output sample `o` of an axis of length
//! `out` reads source coordinate `(o + 0.5) * in / out - 0.5`, clamped to
//! `[0, in - 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold used wherever a soft mask has to become a hard one.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Common access to single- and multi-channel rasters.
pub trait Raster: Sized {
    const CHANNELS: usize;

    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn samples(&self) -> &[f32];
    fn from_samples(width: usize, height: usize, samples: Vec<f32>) -> Result<Self>;

    fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
}

fn check_samples(width: usize, height: usize, channels: usize, samples: &[f32]) -> Result<()> {
    if samples.len() != width * height * channels {
        return Err(Error::InvalidValue(format!(
            "expected {} samples for a {width}x{height}x{channels} raster, got {}",
            width * height * channels,
            samples.len()
        )));
    }
    if let Some(v) = samples.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidValue(format!("sample {v} outside [0, 1]")));
    }
    Ok(())
}

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: a,
            actual: b,
        });
    }
    Ok(())
}

/// Per-pixel object membership.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_samples(width, height, 1, &data)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self::filled(width, height, 1.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(
            (0.0..=1.0).contains(&value),
            "mask value {value} outside [0, 1]"
        );
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Builds a hard mask from a per-pixel predicate.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(if f(x, y) { 1.0 } else { 0.0 });
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_bools(width: usize, height: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidValue(format!(
                "expected {} pixels, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        assert!(
            (0.0..=1.0).contains(&value),
            "mask value {value} outside [0, 1]"
        );
        self.data[y * self.width + x] = value;
    }

    /// True when every value is exactly 0 or 1.
    pub fn is_hard(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Membership of each pixel after thresholding at [`DEFAULT_THRESHOLD`].
    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.data.iter().map(|&v| v >= DEFAULT_THRESHOLD)
    }

    /// Number of pixels at or above [`DEFAULT_THRESHOLD`].
    pub fn count(&self) -> usize {
        self.bits().filter(|&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Tight half-open box around the pixels at or above the threshold.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, on) in self.bits().enumerate() {
            if on {
                let (x, y) = (i % self.width, i / self.width);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
        (x0 < x1).then_some(BBox { x0, y0, x1, y1 })
    }

    fn zip_hard(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        same_dims(self.dims(), other.dims())?;
        let data = self
            .bits()
            .zip(other.bits())
            .map(|(a, b)| if f(a, b) { 1.0 } else { 0.0 })
            .collect();
        Ok(Self {
            width: self.width,
            height: self.height,
            data,
        })
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip_hard(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip_hard(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.zip_hard(other, |a, b| a && !b)
    }

    pub fn not(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.bits().map(|b| if b { 0.0 } else { 1.0 }).collect(),
        }
    }
}

impl Raster for BinaryMask {
    const CHANNELS: usize = 1;

    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn samples(&self) -> &[f32] {
        &self.data
    }

    fn from_samples(width: usize, height: usize, samples: Vec<f32>) -> Result<Self> {
        Self::new(width, height, samples)
    }
}

/// Three-channel image, interleaved `[r, g, b]` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

pub const RED: [f32; 3] = [1.0, 0.0, 0.0];
pub const BLUE: [f32; 3] = [0.0, 0.0, 1.0];

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_samples(width, height, 3, &data)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
        let data = std::iter::repeat_n(rgb, width * height).flatten().collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
                data.extend_from_slice(&px);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// 8-bit interleaved RGB to `k / 255` samples.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::InvalidValue(format!(
                "expected {} bytes, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, height, width]` layout for tensor conversion.
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        out
    }

    /// Inverse of [`RgbImage::to_chw`]; values are clamped into `[0, 1]`.
    pub fn from_chw(width: usize, height: usize, planar: &[f32]) -> Result<Self> {
        let n = width * height;
        if planar.len() != 3 * n {
            return Err(Error::InvalidValue(format!(
                "expected {} planar samples, got {}",
                3 * n,
                planar.len()
            )));
        }
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[i * 3 + c] = planar[c * n + i].clamp(0.0, 1.0);
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

impl Raster for RgbImage {
    const CHANNELS: usize = 3;

    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn samples(&self) -> &[f32] {
        &self.data
    }

    fn from_samples(width: usize, height: usize, samples: Vec<f32>) -> Result<Self> {
        Self::new(width, height, samples)
    }
}

/// Half-open pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", try_from = "[usize; 4]")]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::DegenerateBox(b));
        }
        Ok(b)
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    /// Intersection with `[0, width) x [0, height)`, `None` when empty.
    pub fn clip(&self, width: usize, height: usize) -> Option<BBox> {
        let b = BBox {
            x0: self.x0,
            y0: self.y0,
            x1: self.x1.min(width),
            y1: self.y1.min(height),
        };
        (b.x0 < b.x1 && b.y0 < b.y1).then_some(b)
    }

    /// Maps the box between raster resolutions, rounding outward edges to
    /// the nearest pixel and keeping at least one pixel per axis.
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> BBox {
        let sx = to.0 as f64 / from.0 as f64;
        let sy = to.1 as f64 / from.1 as f64;
        let x0 = ((self.x0 as f64 * sx).floor() as usize).min(to.0 - 1);
        let y0 = ((self.y0 as f64 * sy).floor() as usize).min(to.1 - 1);
        let x1 = ((self.x1 as f64 * sx).ceil() as usize).clamp(x0 + 1, to.0);
        let y1 = ((self.y1 as f64 * sy).ceil() as usize).clamp(y0 + 1, to.1);
        BBox { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl TryFrom<[usize; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [usize; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

/// `sf ∧ ¬sv` for hard masks. Fails when `sv` is not contained in `sf`.
pub fn invisible_mask(sf: &BinaryMask, sv: &BinaryMask) -> Result<BinaryMask> {
    same_dims(sf.dims(), sv.dims())?;
    let count = sf.bits().zip(sv.bits()).filter(|&(f, v)| v && !f).count();
    if count > 0 {
        return Err(Error::NotSubset { count });
    }
    sf.and_not(sv)
}

/// Intersection over union after thresholding both masks.
///
/// Two empty masks agree perfectly and score 1.0; an empty mask against a
/// nonempty one scores 0.0.
pub fn iou(a: &BinaryMask, b: &BinaryMask, threshold: f32) -> Result<f64> {
    same_dims(a.dims(), b.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&va, &vb) in a.data.iter().zip(&b.data) {
        let (ia, ib) = (va >= threshold, vb >= threshold);
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Generator input: copies `i` on the visible region, paints the claimed
/// invisible region (`o ∧ ¬v`) red and everything else blue.
///
/// Both masks are thresholded at [`DEFAULT_THRESHOLD`] first, so each pixel
/// falls in exactly one of the three regions even when `v ⊄ o`.
pub fn compose_generator_input(i: &RgbImage, o: &BinaryMask, v: &BinaryMask) -> Result<RgbImage> {
    same_dims(i.dims(), o.dims())?;
    same_dims(i.dims(), v.dims())?;
    let mut data = Vec::with_capacity(i.data.len());
    for (k, (on, vis)) in o.bits().zip(v.bits()).enumerate() {
        let px = if vis {
            [i.data[3 * k], i.data[3 * k + 1], i.data[3 * k + 2]]
        } else if on {
            RED
        } else {
            BLUE
        };
        data.extend_from_slice(&px);
    }
    Ok(RgbImage {
        width: i.width,
        height: i.height,
        data,
    })
}

/// Grows each side of `bbox` by an independent ratio drawn uniformly from
/// `[lo, hi]` of the box extent along that axis, then clips to `bounds`.
pub fn expand_bbox<R: Rng + ?Sized>(
    bbox: BBox,
    lo: f64,
    hi: f64,
    rng: &mut R,
    bounds: (usize, usize),
) -> Result<BBox> {
    if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
        return Err(Error::InvalidValue(format!("expansion range [{lo}, {hi}]")));
    }
    if bbox.area() == 0 {
        return Err(Error::DegenerateBox(bbox));
    }
    let mut side = |extent: usize| -> i64 {
        let u: f64 = rng.random();
        ((lo + u * (hi - lo)) * extent as f64).round() as i64
    };
    let (w, h) = (bbox.width(), bbox.height());
    let left = side(w);
    let top = side(h);
    let right = side(w);
    let bottom = side(h);
    let x0 = (bbox.x0 as i64 - left).max(0) as usize;
    let y0 = (bbox.y0 as i64 - top).max(0) as usize;
    let x1 = ((bbox.x1 as i64 + right) as usize).min(bounds.0);
    let y1 = ((bbox.y1 as i64 + bottom) as usize).min(bounds.1);
    BBox::new(x0, y0, x1, y1).map_err(|_| Error::DegenerateBox(bbox))
}

/// One output sample of a bilinear resampling axis: the two source taps and
/// the weight of the second one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            Tap {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

/// Dense `out_len x in_len` row-major matrix of the resampling axis, so a
/// 2-D resize is `A_y · X · A_xᵀ`.
pub fn interpolation_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    for (o, t) in bilinear_taps(in_len, out_len).into_iter().enumerate() {
        m[o * in_len + t.i0] += 1.0 - t.frac;
        m[o * in_len + t.i1] += t.frac;
    }
    m
}

/// Bilinear resample of `bbox` (clipped to the raster) to `size = (h, w)`.
pub fn crop_resize<R: Raster>(x: &R, bbox: BBox, size: (usize, usize)) -> Result<R> {
    let (out_h, out_w) = size;
    let crop = bbox
        .clip(x.width(), x.height())
        .filter(|_| out_h > 0 && out_w > 0)
        .ok_or(Error::EmptyCrop(bbox, x.width(), x.height()))?;
    let ch = R::CHANNELS;
    let src = x.samples();
    let row = x.width() * ch;
    let ty = bilinear_taps(crop.height(), out_h);
    let tx = bilinear_taps(crop.width(), out_w);
    let mut out = Vec::with_capacity(out_h * out_w * ch);
    for t_y in &ty {
        let r0 = (crop.y0 + t_y.i0) * row;
        let r1 = (crop.y0 + t_y.i1) * row;
        for t_x in &tx {
            let c0 = (crop.x0 + t_x.i0) * ch;
            let c1 = (crop.x0 + t_x.i1) * ch;
            for c in 0..ch {
                let top =
                    src[r0 + c0 + c] as f64 * (1.0 - t_x.frac) + src[r0 + c1 + c] as f64 * t_x.frac;
                let bot =
                    src[r1 + c0 + c] as f64 * (1.0 - t_x.frac) + src[r1 + c1 + c] as f64 * t_x.frac;
                let v = top * (1.0 - t_y.frac) + bot * t_y.frac;
                out.push((v as f32).clamp(0.0, 1.0));
            }
        }
    }
    R::from_samples(out_w, out_h, out)
}

/// Resamples `mask` onto `bbox` of an otherwise empty `canvas = (w, h)`
/// raster; the inverse placement of [`crop_resize`].
pub fn paste_mask(mask: &BinaryMask, bbox: BBox, canvas: (usize, usize)) -> Result<BinaryMask> {
    let b = bbox
        .clip(canvas.0, canvas.1)
        .ok_or(Error::EmptyCrop(bbox, canvas.0, canvas.1))?;
    let patch = crop_resize(
        mask,
        BBox::full(mask.width, mask.height),
        (b.height(), b.width()),
    )?;
    let mut out = BinaryMask::zeros(canvas.0, canvas.1);
    for y in 0..b.height() {
        let dst = (b.y0 + y) * canvas.0 + b.x0;
        out.data[dst..dst + b.width()]
            .copy_from_slice(&patch.data[y * b.width()..(y + 1) * b.width()]);
    }
    Ok(out)
}

/// Hard mask with value 1 wherever the input is `>= threshold`.
pub fn binarize(m: &BinaryMask, threshold: f32) -> BinaryMask {
    BinaryMask {
        width: m.width,
        height: m.height,
        data: m
            .data
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> BinaryMask {
        BinaryMask::from_fn(w, h, |_, _| rng.random_bool(p))
    }

    #[test]
    fn invisible_of_full_minus_left_half_is_right_half() {
        let sf = BinaryMask::ones(4, 4);
        let sv = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        let si = invisible_mask(&sf, &sv).unwrap();
        assert_eq!(si, BinaryMask::from_fn(4, 4, |x, _| x >= 2));
    }

    #[test]
    fn invisible_of_unoccluded_object_is_empty() {
        let sf = BinaryMask::from_fn(6, 5, |x, y| x + y < 5);
        assert_eq!(invisible_mask(&sf, &sf).unwrap(), BinaryMask::zeros(6, 5));
    }

    #[test]
    fn invisible_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sf = random_mask(&mut rng, 16, 16, 0.6);
        let r = random_mask(&mut rng, 16, 16, 0.5);
        let sv = sf.and(&r).unwrap();
        let si = invisible_mask(&sf, &sv).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let expected = sf.get(x, y) == 1.0 && sv.get(x, y) == 0.0;
                assert_eq!(si.get(x, y) == 1.0, expected);
            }
        }
    }

    #[test]
    fn invisible_rejects_visible_outside_full() {
        let sf = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        let sv = BinaryMask::from_fn(4, 4, |x, y| x < 3 && y == 0);
        match invisible_mask(&sf, &sv) {
            Err(Error::NotSubset { count }) => assert_eq!(count, 1),
            other => panic!("expected NotSubset, got {other:?}"),
        }
        assert!(matches!(
            invisible_mask(&sf, &BinaryMask::zeros(3, 4)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn iou_hand_counts() {
        let a = BinaryMask::from_fn(8, 8, |x, y| x < 4 && y < 4);
        let b = BinaryMask::from_fn(8, 8, |x, y| x < 2 && y < 2);
        assert_eq!(iou(&a, &b, 0.5).unwrap(), 0.25);
        assert_eq!(iou(&a, &a, 0.5).unwrap(), 1.0);
        let c = BinaryMask::from_fn(8, 8, |x, y| x >= 4 && y >= 4);
        assert_eq!(iou(&a, &c, 0.5).unwrap(), 0.0);
        let e = BinaryMask::zeros(8, 8);
        assert_eq!(iou(&e, &e, 0.5).unwrap(), 1.0);
        assert_eq!(iou(&e, &a, 0.5).unwrap(), 0.0);
        assert!(iou(&a, &BinaryMask::zeros(8, 7), 0.5).is_err());
    }

    #[test]
    fn compose_special_cases() {
        let img = RgbImage::from_fn(5, 4, |x, y| [x as f32 / 5.0, y as f32 / 4.0, 0.25]);
        let ones = BinaryMask::ones(5, 4);
        let zeros = BinaryMask::zeros(5, 4);
        assert_eq!(compose_generator_input(&img, &ones, &ones).unwrap(), img);
        assert_eq!(
            compose_generator_input(&img, &ones, &zeros).unwrap(),
            RgbImage::filled(5, 4, RED)
        );
        assert_eq!(
            compose_generator_input(&img, &zeros, &zeros).unwrap(),
            RgbImage::filled(5, 4, BLUE)
        );
        // Visible pixels win even where the predicted mask misses them.
        assert_eq!(compose_generator_input(&img, &zeros, &ones).unwrap(), img);
    }

    #[test]
    fn expand_bbox_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = BBox::new(10, 10, 20, 20).unwrap();
        assert_eq!(expand_bbox(b, 0.0, 0.0, &mut rng, (100, 100)).unwrap(), b);
        assert_eq!(
            expand_bbox(b, 0.1, 0.1, &mut rng, (100, 100)).unwrap(),
            BBox::new(9, 9, 21, 21).unwrap()
        );
        let edge = BBox::new(0, 0, 10, 100).unwrap();
        let e = expand_bbox(edge, 0.3, 0.3, &mut rng, (100, 100)).unwrap();
        assert_eq!(e, BBox::new(0, 0, 13, 100).unwrap());
        assert!(expand_bbox(b, 0.3, 0.1, &mut rng, (100, 100)).is_err());
        let degenerate = BBox {
            x0: 5,
            y0: 5,
            x1: 5,
            y1: 9,
        };
        assert!(matches!(
            expand_bbox(degenerate, 0.1, 0.3, &mut rng, (100, 100)),
            Err(Error::DegenerateBox(_))
        ));
    }

    #[test]
    fn crop_resize_constant_and_soft_edges() {
        let img = RgbImage::filled(20, 10, [0.2, 0.4, 0.6]);
        let out = crop_resize(&img, BBox::new(3, 2, 17, 9).unwrap(), (13, 7)).unwrap();
        assert_eq!(out.dims(), (7, 13));
        assert!(out.data().chunks(3).all(|p| {
            (p[0] - 0.2).abs() < 1e-6 && (p[1] - 0.4).abs() < 1e-6 && (p[2] - 0.6).abs() < 1e-6
        }));

        let m = BinaryMask::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let up = crop_resize(&m, BBox::full(2, 2), (4, 4)).unwrap();
        assert!(up.data().iter().any(|&v| v > 0.0 && v < 1.0));
        assert!(up.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Half-pixel centers: the corner sample replicates the corner pixel.
        assert_eq!(up.get(0, 0), 1.0);
        assert_eq!(up.get(1, 1), 0.5625);

        assert!(matches!(
            crop_resize(&m, BBox::new(5, 5, 9, 9).unwrap(), (4, 4)),
            Err(Error::EmptyCrop(..))
        ));
    }

    #[test]
    fn disk_survives_down_then_up_sampling() {
        let disk = BinaryMask::from_fn(96, 96, |x, y| {
            let (dx, dy) = (x as f64 - 47.5, y as f64 - 47.5);
            dx * dx + dy * dy <= 30.0 * 30.0
        });
        let small = crop_resize(&disk, BBox::full(96, 96), (24, 24)).unwrap();
        let back = crop_resize(&small, BBox::full(24, 24), (96, 96)).unwrap();
        let score = iou(&disk, &binarize(&back, 0.5), 0.5).unwrap();
        assert!(score > 0.9, "round-trip iou {score}");
    }

    #[test]
    fn interpolation_matrix_rows_sum_to_one_and_match_crop_resize() {
        let m = interpolation_matrix(7, 16);
        for row in m.chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = BinaryMask::new(7, 7, (0..49).map(|_| rng.random::<f32>()).collect()).unwrap();
        let fast = crop_resize(&src, BBox::full(7, 7), (16, 16)).unwrap();
        for oy in 0..16 {
            for ox in 0..16 {
                let mut v = 0.0;
                for iy in 0..7 {
                    for ix in 0..7 {
                        v += m[oy * 7 + iy] * m[ox * 7 + ix] * src.get(ix, iy) as f64;
                    }
                }
                assert!((v as f32 - fast.get(ox, oy)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn paste_mask_places_patch_inside_box() {
        let patch = BinaryMask::ones(4, 4);
        let b = BBox::new(2, 3, 6, 9).unwrap();
        let out = paste_mask(&patch, b, (10, 12)).unwrap();
        assert_eq!(out.bbox(), Some(b));
        assert_eq!(out.count(), b.area());
    }

    #[test]
    fn binarize_boundary_and_idempotence() {
        let m = BinaryMask::filled(3, 3, 0.6);
        assert_eq!(binarize(&m, 0.5), BinaryMask::ones(3, 3));
        let m = BinaryMask::filled(3, 3, 0.5);
        assert_eq!(binarize(&m, 0.5), BinaryMask::ones(3, 3));
    }

    #[test]
    fn bbox_rescale_keeps_pixels() {
        let b = BBox::new(10, 20, 30, 21).unwrap();
        assert_eq!(b.rescale((128, 128), (128, 128)), b);
        let r = b.rescale((128, 128), (32, 32));
        assert_eq!(r, BBox::new(2, 5, 8, 6).unwrap());
        assert!(BBox::new(0, 0, 0, 1).is_err());
    }

    fn mask_strategy(w: usize, h: usize) -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(0.0f32..=1.0, w * h)
            .prop_map(move |d| BinaryMask::new(w, h, d).unwrap())
    }

    proptest! {
        #[test]
        fn invisible_partitions_full(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 256)) {
            let sf = BinaryMask::from_bools(16, 16, &bits.iter().map(|b| b.0).collect::<Vec<_>>()).unwrap();
            let r = BinaryMask::from_bools(16, 16, &bits.iter().map(|b| b.1).collect::<Vec<_>>()).unwrap();
            let sv = sf.and(&r).unwrap();
            let si = invisible_mask(&sf, &sv).unwrap();
            prop_assert_eq!(si.or(&sv).unwrap(), sf);
            prop_assert!(si.and(&sv).unwrap().is_empty());
        }

        #[test]
        fn iou_symmetric_and_bounded(a in mask_strategy(9, 7), b in mask_strategy(9, 7)) {
            let ab = iou(&a, &b, 0.5).unwrap();
            let ba = iou(&b, &a, 0.5).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            let equal = binarize(&a, 0.5) == binarize(&b, 0.5);
            prop_assert_eq!(ab == 1.0, equal);
            let disjoint = a.and(&b).unwrap().is_empty() && !(a.is_empty() && b.is_empty());
            prop_assert_eq!(ab == 0.0, disjoint);
        }

        #[test]
        fn compose_partitions_pixels(o in mask_strategy(8, 8), v in mask_strategy(8, 8), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Keep image pixels away from pure red/blue so regions are distinguishable.
            let img = RgbImage::from_fn(8, 8, |_, _| [0.3, rng.random_range(0.1..0.9), 0.4]);
            let out = compose_generator_input(&img, &o, &v).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    let (ob, vb) = (o.get(x, y) >= 0.5, v.get(x, y) >= 0.5);
                    let px = out.get(x, y);
                    let regions = [px == img.get(x, y), px == RED, px == BLUE];
                    prop_assert_eq!(regions.iter().filter(|&&r| r).count(), 1);
                    prop_assert_eq!(regions[0], vb);
                    prop_assert_eq!(regions[1], ob && !vb);
                }
            }
        }

        #[test]
        fn expand_bbox_contains_original(x0 in 0usize..60, y0 in 0usize..60, w in 1usize..40, h in 1usize..40,
                                          lo in 0.0f64..0.5, span in 0.0f64..0.5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = BBox::new(x0, y0, x0 + w, y0 + h).unwrap();
            let e = expand_bbox(b, lo, lo + span, &mut rng, (64, 64)).unwrap();
            prop_assert!(e.x1 <= 64 && e.y1 <= 64);
            if let Some(clipped) = b.clip(64, 64) {
                prop_assert!(e.contains_box(&clipped));
            }
            let same = expand_bbox(b, 0.0, 0.0, &mut rng, (64, 64)).unwrap();
            prop_assert_eq!(Some(same), b.clip(64, 64));
        }

        #[test]
        fn binarize_idempotent_and_monotone(m in mask_strategy(6, 6), t1 in 0.01f32..0.99, t2 in 0.01f32..0.99) {
            let b = binarize(&m, t1);
            prop_assert_eq!(binarize(&b, t1), b.clone());
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let strict = binarize(&m, hi);
            let loose = binarize(&m, lo);
            prop_assert!(strict.and_not(&loose).unwrap().is_empty());
        }
    }
}
