//! Deterministic prediction for evaluation and the `infer` command.
//!
//! The region of interest is the visible box grown by a fixed ratio on
//! every side, the generator runs without noise, and the composite keeps
//! input pixels everywhere except the claimed invisible region.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maskops::{binarize, crop_resize, paste_mask, BBox, BinaryMask, RgbImage};
use crate::netarch::{
    compose_batch, generator_forward_batch, image_from_tensor, segmentor_forward_batch, NetConfig,
    NetParams,
};
use crate::trainer::expanded_box;

/// Per-side box growth at inference, the midpoint of the training range.
pub const EVAL_EXPANSION: f64 = 0.2;

/// Objects per forward pass.
const CHUNK: usize = 8;

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Region of interest in canvas pixels.
    pub canvas_box: BBox,
    /// Soft mask at `mask_size`.
    pub o: BinaryMask,
    /// Hard full-object mask in the canvas frame.
    pub sf: BinaryMask,
    /// Patch-frame crops at `paint_size`.
    pub patch_image: RgbImage,
    pub patch_visible: BinaryMask,
    pub patch_sf: BinaryMask,
    /// Raw generator output.
    pub painted: RgbImage,
    /// `patch_image` with `painted` substituted on `patch_sf ∧ ¬patch_visible`.
    pub composite: RgbImage,
}

impl Prediction {
    /// Claimed invisible region in the canvas frame.
    pub fn invisible(&self, sv: &BinaryMask) -> Result<BinaryMask> {
        self.sf.and_not(sv)
    }

    /// `image` with the claimed invisible region filled from `painted`,
    /// sampled nearest-neighbor from the patch frame.
    pub fn paint_into(&self, image: &RgbImage, sv: &BinaryMask) -> Result<RgbImage> {
        let hidden = self.invisible(sv)?;
        if hidden.dims() != image.dims() {
            return Err(Error::ShapeMismatch {
                expected: image.dims(),
                actual: hidden.dims(),
            });
        }
        let b = self.canvas_box;
        let (p, _) = self.painted.dims();
        let to_patch = |v: usize, lo: usize, len: usize| {
            (((v - lo) as f64 + 0.5) * p as f64 / len as f64)
                .floor()
                .min((p - 1) as f64) as usize
        };
        let (w, h) = image.dims();
        Ok(RgbImage::from_fn(w, h, |x, y| {
            let inside = x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
            if inside && hidden.get(x, y) >= 0.5 {
                self.painted
                    .get(to_patch(x, b.x0, b.width()), to_patch(y, b.y0, b.height()))
            } else {
                image.get(x, y)
            }
        }))
    }
}

pub struct Predictor<'a> {
    pub params: &'a NetParams,
    pub net: &'a NetConfig,
    pub threshold: f32,
    pub expansion: f64,
}

struct Prepared {
    canvas_box: BBox,
    input: Vec<f32>,
    input_box: BBox,
    patch_image: RgbImage,
    patch_visible: BinaryMask,
}

impl<'a> Predictor<'a> {
    pub fn new(params: &'a NetParams, net: &'a NetConfig, threshold: f32) -> Self {
        Self {
            params,
            net,
            threshold,
            expansion: EVAL_EXPANSION,
        }
    }

    fn prepare(&self, image: &RgbImage, sv: &BinaryMask) -> Result<Prepared> {
        if image.dims() != sv.dims() {
            return Err(Error::ShapeMismatch {
                expected: image.dims(),
                actual: sv.dims(),
            });
        }
        let sv = binarize(sv, self.threshold);
        // lo == hi never consumes randomness
        let mut unused = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let canvas_box = expanded_box(&sv, (self.expansion, self.expansion), &mut unused)?;
        let dims = image.dims();
        let s = self.net.input_size;
        let full = BBox::full(dims.0, dims.1);
        let mut input = crop_resize(image, full, (s, s))?.to_chw();
        input.extend_from_slice(crop_resize(&sv, full, (s, s))?.data());
        let p = (self.net.paint_size, self.net.paint_size);
        Ok(Prepared {
            canvas_box,
            input,
            input_box: canvas_box.rescale(dims, (s, s)),
            patch_image: crop_resize(image, canvas_box, p)?,
            patch_visible: binarize(&crop_resize(&sv, canvas_box, p)?, self.threshold),
        })
    }

    pub fn predict(&self, image: &RgbImage, sv: &BinaryMask) -> Result<Prediction> {
        let mut out = self.predict_many(&[(image, sv)])?;
        Ok(out.pop().expect("one prediction per query"))
    }

    /// Predictions for `(image, visible mask)` pairs in canvas frames.
    pub fn predict_many(&self, queries: &[(&RgbImage, &BinaryMask)]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(CHUNK) {
            let prepared = chunk
                .iter()
                .map(|(i, v)| self.prepare(i, v))
                .collect::<Result<Vec<_>>>()?;
            let b = prepared.len();
            let (s, m, p) = (self.net.input_size, self.net.mask_size, self.net.paint_size);
            let input = Tensor::from_vec(
                prepared
                    .iter()
                    .flat_map(|q| q.input.iter().copied())
                    .collect::<Vec<_>>(),
                (b, 4, s, s),
                &candle_core::Device::Cpu,
            )?;
            let boxes: Vec<BBox> = prepared.iter().map(|q| q.input_box).collect();
            let seg = segmentor_forward_batch(self.params, self.net, &input, &boxes)?;
            let o_all = seg.o.flatten_all()?.to_vec1::<f32>()?;
            let up_all = seg.upsampled.flatten_all()?.to_vec1::<f32>()?;

            let mut patch_sf = Vec::with_capacity(b);
            for k in 0..b {
                let up = BinaryMask::new(p, p, clamp01(&up_all[k * p * p..(k + 1) * p * p]))?;
                patch_sf.push(binarize(&up, self.threshold));
            }
            let images = stack_images(prepared.iter().map(|q| &q.patch_image), p)?;
            let visible = stack_masks(prepared.iter().map(|q| &q.patch_visible), p)?;
            let claimed = stack_masks(patch_sf.iter(), p)?;
            let gen_in = compose_batch(&images, &claimed, &visible, false)?;
            let painted = generator_forward_batch(self.params, self.net, &gen_in, None)?;

            for (k, (q, (query, sf_patch))) in prepared
                .into_iter()
                .zip(chunk.iter().zip(patch_sf))
                .enumerate()
            {
                let o = BinaryMask::new(m, m, clamp01(&o_all[k * m * m..(k + 1) * m * m]))?;
                let sf = binarize(
                    &paste_mask(&o, q.canvas_box, query.0.dims())?,
                    self.threshold,
                );
                let painted = image_from_tensor(&painted.get(k)?)?;
                let composite = RgbImage::from_fn(p, p, |x, y| {
                    if sf_patch.get(x, y) >= 0.5 && q.patch_visible.get(x, y) < 0.5 {
                        painted.get(x, y)
                    } else {
                        q.patch_image.get(x, y)
                    }
                });
                out.push(Prediction {
                    canvas_box: q.canvas_box,
                    o,
                    sf,
                    patch_image: q.patch_image,
                    patch_visible: q.patch_visible,
                    patch_sf: sf_patch,
                    painted,
                    composite,
                });
            }
        }
        Ok(out)
    }
}

fn clamp01(v: &[f32]) -> Vec<f32> {
    v.iter().map(|x| x.clamp(0.0, 1.0)).collect()
}

fn stack_images<'b>(it: impl Iterator<Item = &'b RgbImage>, p: usize) -> Result<Tensor> {
    let data: Vec<f32> = it.flat_map(|i| i.to_chw()).collect();
    let b = data.len() / (3 * p * p);
    Ok(Tensor::from_vec(
        data,
        (b, 3, p, p),
        &candle_core::Device::Cpu,
    )?)
}

fn stack_masks<'b>(it: impl Iterator<Item = &'b BinaryMask>, p: usize) -> Result<Tensor> {
    let data: Vec<f32> = it.flat_map(|m| m.data().iter().copied()).collect();
    let b = data.len() / (p * p);
    Ok(Tensor::from_vec(
        data,
        (b, p, p),
        &candle_core::Device::Cpu,
    )?)
}
