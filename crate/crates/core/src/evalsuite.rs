//! Segmentation and painting metrics, and the nearest-neighbor baseline.
//!
//! Per-object IoUs, all after binarizing at the evaluation threshold:
//!
//! - union: `IoU(pred, SF)`
//! - visible: `IoU(pred, SV)` over pixels with `SI = 0` only
//! - invisible: `IoU(pred ∧ ¬SV, SI)`, defined for occluded objects only
//!
//! Report means are plain averages of the per-object records; the
//! invisible mean runs over occluded objects.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{Prediction, Predictor};
use crate::maskops::{binarize, crop_resize, iou, BBox, BinaryMask, RgbImage};
use crate::netarch::{backbone_forward, NetConfig, NetParams};
use crate::rasterio::{hstack, mask_to_rgb, save_rgb, vstack};
use crate::scenegen::Sample;

/// Ground-truth masks of one object in the evaluation frame.
#[derive(Clone, Copy, Debug)]
pub struct Truth<'a> {
    pub sv: &'a BinaryMask,
    pub si: &'a BinaryMask,
    pub sf: &'a BinaryMask,
}

impl<'a> From<&'a Sample> for Truth<'a> {
    fn from(s: &'a Sample) -> Self {
        Self {
            sv: &s.sv,
            si: &s.si,
            sf: &s.sf,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectIoU {
    /// Caller-chosen object key, e.g. the manifest sample index.
    pub id: usize,
    pub union: f64,
    pub visible: f64,
    /// `None` for unoccluded objects.
    pub invisible: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub iou_union: f64,
    pub iou_visible: f64,
    pub iou_invisible: f64,
    pub count: usize,
    pub occluded: usize,
    pub objects: Vec<ObjectIoU>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl IoUReport {
    pub fn from_records(objects: Vec<ObjectIoU>) -> Self {
        Self {
            iou_union: mean(objects.iter().map(|o| o.union)),
            iou_visible: mean(objects.iter().map(|o| o.visible)),
            iou_invisible: mean(objects.iter().filter_map(|o| o.invisible)),
            count: objects.len(),
            occluded: objects.iter().filter(|o| o.invisible.is_some()).count(),
            objects,
        }
    }
}

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: a,
            actual: b,
        })
    }
}

pub fn object_iou(
    id: usize,
    pred: &BinaryMask,
    gt: Truth<'_>,
    threshold: f32,
) -> Result<ObjectIoU> {
    for d in [gt.sv.dims(), gt.si.dims(), gt.sf.dims()] {
        same_dims(pred.dims(), d)?;
    }
    let pred = binarize(pred, threshold);
    let sv = binarize(gt.sv, threshold);
    let si = binarize(gt.si, threshold);
    let sf = binarize(gt.sf, threshold);
    let keep = si.not();
    let visible = iou(&pred.and(&keep)?, &sv.and(&keep)?, 0.5)?;
    let invisible = if si.is_empty() {
        None
    } else {
        Some(iou(&pred.and_not(&sv)?, &si, 0.5)?)
    };
    Ok(ObjectIoU {
        id,
        union: iou(&pred, &sf, 0.5)?,
        visible,
        invisible,
    })
}

/// IoU report of predicted full masks against aligned ground truth; ids
/// are positions.
pub fn eval_segmentation(
    preds: &[BinaryMask],
    gts: &[Truth<'_>],
    threshold: f32,
) -> Result<IoUReport> {
    if preds.len() != gts.len() {
        return Err(Error::Mismatch(format!(
            "{} predictions for {} ground-truth objects",
            preds.len(),
            gts.len()
        )));
    }
    let records = preds
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (p, g))| object_iou(i, p, *g, threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(IoUReport::from_records(records))
}

/// Mean absolute and mean squared difference over pixels and channels.
pub fn eval_painting(pred: &RgbImage, gt: &RgbImage) -> Result<(f64, f64)> {
    same_dims(pred.dims(), gt.dims())?;
    let n = pred.data().len().max(1) as f64;
    let (l1, l2) = pred
        .data()
        .iter()
        .zip(gt.data())
        .fold((0.0, 0.0), |(a, b), (&p, &g)| {
            let d = f64::from(p) - f64::from(g);
            (a + d.abs(), b + d * d)
        });
    Ok((l1 / n, l2 / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPaint {
    pub id: usize,
    pub l1: f64,
    pub l2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaintReport {
    pub l1: f64,
    pub l2: f64,
    pub count: usize,
    pub objects: Vec<ObjectPaint>,
}

impl PaintReport {
    pub fn from_records(objects: Vec<ObjectPaint>) -> Self {
        Self {
            l1: mean(objects.iter().map(|o| o.l1)),
            l2: mean(objects.iter().map(|o| o.l2)),
            count: objects.len(),
            objects,
        }
    }
}

/// Ground-truth painting target: the unoccluded appearance over `bx`.
pub fn paint_target(sample: &Sample, bx: BBox, net: &NetConfig) -> Result<RgbImage> {
    crop_resize(&sample.appearance, bx, (net.paint_size, net.paint_size))
}

/// Model outputs and both reports for `samples`, keyed by `ids`.
pub struct ModelEval {
    pub predictions: Vec<Prediction>,
    pub segmentation: IoUReport,
    pub painting: PaintReport,
}

pub fn evaluate_model(
    predictor: &Predictor<'_>,
    samples: &[Sample],
    ids: &[usize],
) -> Result<ModelEval> {
    if samples.len() != ids.len() {
        return Err(Error::Mismatch("one id per sample required".into()));
    }
    let queries: Vec<_> = samples.iter().map(|s| (&s.image, &s.sv)).collect();
    let predictions = predictor.predict_many(&queries)?;
    let mut seg = Vec::with_capacity(samples.len());
    let mut paint = Vec::with_capacity(samples.len());
    for ((s, p), &id) in samples.iter().zip(&predictions).zip(ids) {
        seg.push(object_iou(id, &p.sf, s.into(), predictor.threshold)?);
        let (l1, l2) = eval_painting(&p.painted, &paint_target(s, p.canvas_box, predictor.net)?)?;
        paint.push(ObjectPaint { id, l1, l2 });
    }
    Ok(ModelEval {
        predictions,
        segmentation: IoUReport::from_records(seg),
        painting: PaintReport::from_records(paint),
    })
}

/// Index of the row nearest to `query` in squared L2; ties go to the
/// lowest index.
pub fn nearest(features: &[Vec<f32>], query: &[f32]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, f) in features.iter().enumerate() {
        if f.len() != query.len() {
            return Err(Error::Mismatch(format!(
                "feature length {} against query length {}",
                f.len(),
                query.len()
            )));
        }
        let d: f64 = f
            .iter()
            .zip(query)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.ok_or_else(|| Error::EmptyDataset("nearest-neighbor index is empty".into()))
}

/// Retrieval baseline: the training object whose image and mask features
/// are closest supplies its own full appearance as the painting.
///
/// Image features come from the frozen segmentor trunk applied to the
/// object's region with an empty mask channel; the mask part is the
/// visible mask resampled to the trunk's resolution.
pub struct NnBaseline<'a> {
    params: &'a NetParams,
    net: &'a NetConfig,
    expansion: f64,
    features: Vec<Vec<f32>>,
    targets: Vec<RgbImage>,
}

impl<'a> NnBaseline<'a> {
    /// `expansion` grows each visible box as at inference.
    pub fn build(
        params: &'a NetParams,
        net: &'a NetConfig,
        train: &[Sample],
        expansion: f64,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset(
                "nearest-neighbor baseline needs training samples".into(),
            ));
        }
        let mut me = Self {
            params,
            net,
            expansion,
            features: Vec::new(),
            targets: Vec::new(),
        };
        for chunk in train.chunks(8) {
            me.features.extend(me.features_of(chunk)?);
            for s in chunk {
                me.targets.push(paint_target(s, me.region(s)?, net)?);
            }
        }
        Ok(me)
    }

    fn region(&self, s: &Sample) -> Result<BBox> {
        let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        crate::trainer::expanded_box(&s.sv, (self.expansion, self.expansion), &mut unused)
    }

    pub fn features_of(&self, samples: &[Sample]) -> Result<Vec<Vec<f32>>> {
        let s = self.net.input_size;
        let f = self.net.feature_size();
        let mut input = Vec::with_capacity(samples.len() * 4 * s * s);
        let mut masks = Vec::with_capacity(samples.len());
        for smp in samples {
            let bx = self.region(smp)?;
            input.extend(crop_resize(&smp.image, bx, (s, s))?.to_chw());
            input.extend(std::iter::repeat_n(0.0, s * s));
            masks.push(crop_resize(&smp.sv, bx, (f, f))?);
        }
        let x = Tensor::from_vec(input, (samples.len(), 4, s, s), &candle_core::Device::Cpu)?;
        let trunk = backbone_forward(self.params, self.net, &x)?.flatten_from(1)?;
        let rows = trunk.to_vec2::<f32>()?;
        Ok(rows
            .into_iter()
            .zip(masks)
            .map(|(mut r, m)| {
                r.extend_from_slice(m.data());
                r
            })
            .collect())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Position of the retrieved training sample and its distance.
    pub fn retrieve(&self, query: &Sample) -> Result<(usize, f64)> {
        let q = self.features_of(std::slice::from_ref(query))?;
        nearest(&self.features, &q[0])
    }

    /// Retrieved painting for `query`.
    pub fn paint(&self, query: &Sample) -> Result<&RgbImage> {
        Ok(&self.targets[self.retrieve(query)?.0])
    }
}

/// One row per object: input patch, GT full mask, predicted full mask,
/// GT appearance, painted composite.
pub fn write_grid(path: &Path, rows: &[(&Sample, &Prediction)], net: &NetConfig) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let p = (net.paint_size, net.paint_size);
    let mut out = Vec::with_capacity(rows.len());
    for (s, pred) in rows {
        let gt_sf = binarize(&crop_resize(&s.sf, pred.canvas_box, p)?, 0.5);
        let target = paint_target(s, pred.canvas_box, net)?;
        out.push(hstack(&[
            &pred.patch_image,
            &mask_to_rgb(&gt_sf),
            &mask_to_rgb(&pred.patch_sf),
            &target,
            &pred.composite,
        ])?);
    }
    save_rgb(path, &vstack(&out)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
