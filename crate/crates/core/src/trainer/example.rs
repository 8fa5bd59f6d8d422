use candle_core::{Device, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::maskops::{
    binarize, crop_resize, expand_bbox, BBox, BinaryMask, RgbImage, DEFAULT_THRESHOLD,
};
use crate::netarch::NetConfig;
use crate::scenegen::Sample;

/// One object instance in network-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    /// Whole image and visible mask at `input_size`.
    pub image: RgbImage,
    pub sv: BinaryMask,
    /// Expanded box in input pixels.
    pub input_box: BBox,
    /// Expanded box in canvas pixels.
    pub canvas_box: BBox,
    /// Soft full-object mask at `mask_size`.
    pub gt_full: BinaryMask,
    /// Hard, disjoint loss regions at `mask_size`.
    pub sv_region: BinaryMask,
    pub si_region: BinaryMask,
    /// Crops at `paint_size`.
    pub paint_image: RgbImage,
    pub paint_visible: BinaryMask,
    pub paint_target: RgbImage,
    /// Hard full-object mask at `paint_size`, for masked L1.
    pub paint_full: BinaryMask,
}

/// Expanded visible box in canvas pixels. `lo == hi` makes the draw
/// deterministic.
pub fn expanded_box<R: Rng + ?Sized>(
    sv: &BinaryMask,
    range: (f64, f64),
    rng: &mut R,
) -> Result<BBox> {
    let tight = sv
        .bbox()
        .ok_or_else(|| Error::InvalidValue("visible mask is empty".into()))?;
    expand_bbox(tight, range.0, range.1, rng, sv.dims())
}

/// Builds the example of `sample` around `canvas_box`.
pub fn example_for_box(
    sample: &Sample,
    net: &NetConfig,
    canvas_box: BBox,
) -> Result<TrainingExample> {
    let dims = sample.image.dims();
    let s = net.input_size;
    let (image, sv) = if dims == (s, s) {
        (sample.image.clone(), sample.sv.clone())
    } else {
        let full = BBox::full(dims.0, dims.1);
        (
            crop_resize(&sample.image, full, (s, s))?,
            crop_resize(&sample.sv, full, (s, s))?,
        )
    };
    let input_box = canvas_box.rescale(dims, (s, s));
    let m = (net.mask_size, net.mask_size);
    let p = (net.paint_size, net.paint_size);
    let sv_region = binarize(&crop_resize(&sample.sv, canvas_box, m)?, DEFAULT_THRESHOLD);
    let si_region = binarize(&crop_resize(&sample.si, canvas_box, m)?, DEFAULT_THRESHOLD)
        .and_not(&sv_region)?;
    Ok(TrainingExample {
        image,
        sv,
        input_box,
        canvas_box,
        gt_full: crop_resize(&sample.sf, canvas_box, m)?,
        sv_region,
        si_region,
        paint_image: crop_resize(&sample.image, canvas_box, p)?,
        paint_visible: binarize(&crop_resize(&sample.sv, canvas_box, p)?, DEFAULT_THRESHOLD),
        paint_target: crop_resize(&sample.appearance, canvas_box, p)?,
        paint_full: binarize(&crop_resize(&sample.sf, canvas_box, p)?, DEFAULT_THRESHOLD),
    })
}

pub fn training_example<R: Rng + ?Sized>(
    sample: &Sample,
    net: &NetConfig,
    expand: (f64, f64),
    rng: &mut R,
) -> Result<TrainingExample> {
    let bx = expanded_box(&sample.sv, expand, rng)?;
    example_for_box(sample, net, bx)
}

/// Stacked tensors of a batch of examples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(B, 4, S, S)`
    pub input: Tensor,
    pub boxes: Vec<BBox>,
    /// `(B, m, m)`
    pub gt_full: Tensor,
    pub sv_region: Tensor,
    pub si_region: Tensor,
    /// `(B, 3, P, P)`
    pub paint_image: Tensor,
    /// `(B, P, P)`
    pub paint_visible: Tensor,
    /// `(B, 3, P, P)`
    pub paint_target: Tensor,
    /// `(B, P, P)`
    pub paint_full: Tensor,
}

fn stack(parts: Vec<Vec<f32>>, shape: &[usize]) -> Result<Tensor> {
    let mut dims = vec![parts.len()];
    dims.extend_from_slice(shape);
    Ok(Tensor::from_vec(parts.concat(), dims, &Device::Cpu)?)
}

impl Batch {
    pub fn new(examples: &[TrainingExample], net: &NetConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset("empty batch".into()));
        }
        let s = net.input_size;
        let m = net.mask_size;
        let p = net.paint_size;
        let masks = |f: &dyn Fn(&TrainingExample) -> &BinaryMask| {
            examples.iter().map(|e| f(e).data().to_vec()).collect()
        };
        let images = |f: &dyn Fn(&TrainingExample) -> &RgbImage| {
            examples.iter().map(|e| f(e).to_chw()).collect()
        };
        let input = examples
            .iter()
            .map(|e| {
                let mut v = e.image.to_chw();
                v.extend_from_slice(e.sv.data());
                v
            })
            .collect();
        Ok(Self {
            input: stack(input, &[4, s, s])?,
            boxes: examples.iter().map(|e| e.input_box).collect(),
            gt_full: stack(masks(&|e| &e.gt_full), &[m, m])?,
            sv_region: stack(masks(&|e| &e.sv_region), &[m, m])?,
            si_region: stack(masks(&|e| &e.si_region), &[m, m])?,
            paint_image: stack(images(&|e| &e.paint_image), &[3, p, p])?,
            paint_visible: stack(masks(&|e| &e.paint_visible), &[p, p])?,
            paint_target: stack(images(&|e| &e.paint_target), &[3, p, p])?,
            paint_full: stack(masks(&|e| &e.paint_full), &[p, p])?,
        })
    }
}
