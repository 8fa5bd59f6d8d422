//! Region BCE, segmentation, adversarial, L1 and joint objectives.
//!
//! Tensor functions work on batches in any float dtype and are what the
//! trainer differentiates; the raster functions are thin f64 wrappers.
//! Every batch loss is the mean of per-example losses.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskops::{BinaryMask, RgbImage};

/// Clamp applied to probabilities inside logarithms.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub bg: f64,
    pub sv: f64,
    pub si: f64,
    pub l1: f64,
    /// Scale of the painting objective inside the joint loss.
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bg: 1.0,
            sv: 5.0,
            si: 3.0,
            l1: 100.0,
            adv: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bg", self.bg),
            ("sv", self.sv),
            ("si", self.si),
            ("l1", self.l1),
            ("adv", self.adv),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} = {v} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar values of every term; `gan_d` is reported but not part of `total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bg_bce: f64,
    pub sv_bce: f64,
    pub si_bce: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub l1: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn segm(&self, w: &LossWeights) -> f64 {
        w.bg * self.bg_bce + w.sv * self.sv_bce + w.si * self.si_bce
    }

    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        w.adv * (self.gan_g + w.l1 * self.l1) + self.segm(w)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.bg_bce,
            self.sv_bce,
            self.si_bce,
            self.gan_g,
            self.gan_d,
            self.l1,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Per-example region BCE, shape `(B,)`. Examples whose region is
/// empty contribute exactly 0.
pub fn bce_region_per_example(g: &Tensor, o: &Tensor, region: &Tensor) -> Result<Tensor> {
    if g.dims() != o.dims() || g.dims() != region.dims() {
        return Err(Error::Mismatch(format!(
            "bce shapes differ: {:?} {:?} {:?}",
            g.dims(),
            o.dims(),
            region.dims()
        )));
    }
    let o = o.clamp(EPS, 1.0 - EPS)?;
    let ll = ((g * o.log()?)? + (g.affine(-1.0, 1.0)? * o.affine(-1.0, 1.0)?.log()?)?)?;
    let s = (ll * region)?.flatten_from(1)?.sum(1)?;
    let n = region.flatten_from(1)?.sum(1)?.maximum(1.0)?;
    Ok((s / n)?.neg()?)
}

pub fn bce_region_batch(g: &Tensor, o: &Tensor, region: &Tensor) -> Result<Tensor> {
    Ok(bce_region_per_example(g, o, region)?.mean_all()?)
}

/// The three weighted-BCE terms of a batch, each a scalar tensor.
#[derive(Clone, Debug)]
pub struct SegmTerms {
    pub bg: Tensor,
    pub sv: Tensor,
    pub si: Tensor,
}

impl SegmTerms {
    pub fn weighted(&self, w: &LossWeights) -> Result<Tensor> {
        Ok(((self.bg.affine(w.bg, 0.0)? + self.sv.affine(w.sv, 0.0)?)?
            + self.si.affine(w.si, 0.0)?)?)
    }
}

/// `sv` and `si` must be hard and disjoint; the background region is their
/// joint complement.
pub fn segm_terms(g: &Tensor, o: &Tensor, sv: &Tensor, si: &Tensor) -> Result<SegmTerms> {
    let overlap = scalar(&(sv * si)?.sum_all()?)?;
    if overlap > 0.0 {
        return Err(Error::RegionOverlap {
            count: overlap.round() as usize,
        });
    }
    let bg = (sv + si)?.affine(-1.0, 1.0)?;
    Ok(SegmTerms {
        bg: bce_region_batch(g, o, &bg)?,
        sv: bce_region_batch(g, o, sv)?,
        si: bce_region_batch(g, o, si)?,
    })
}

/// Discriminator loss on `(B, K, K)` score grids.
pub fn gan_d_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    let real = d_real.clamp(EPS, 1.0 - EPS)?.log()?.mean_all()?;
    let fake = d_fake
        .clamp(EPS, 1.0 - EPS)?
        .affine(-1.0, 1.0)?
        .log()?
        .mean_all()?;
    Ok((real + fake)?.neg()?)
}

/// Generator adversarial term: `-mean log D(fake)`, or the saturating
/// `mean log(1 - D(fake))` when requested.
pub fn gan_g_loss(d_fake: &Tensor, saturating: bool) -> Result<Tensor> {
    let d = d_fake.clamp(EPS, 1.0 - EPS)?;
    if saturating {
        Ok(d.affine(-1.0, 1.0)?.log()?.mean_all()?)
    } else {
        Ok(d.log()?.mean_all()?.neg()?)
    }
}

/// Mean absolute error of `(B, 3, H, W)` images, over `(B, H, W)` regions
/// when given.
pub fn l1_batch(pred: &Tensor, gt: &Tensor, region: Option<&Tensor>) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::Mismatch(format!(
            "l1 shapes differ: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let diff = (pred - gt)?.abs()?;
    match region {
        None => Ok(diff.mean_all()?),
        Some(r) => {
            let c = pred.dim(1)? as f64;
            let s = diff
                .broadcast_mul(&r.unsqueeze(1)?)?
                .flatten_from(1)?
                .sum(1)?;
            let n = r.flatten_from(1)?.sum(1)?.affine(c, 0.0)?.maximum(1.0)?;
            Ok((s / n)?.mean_all()?)
        }
    }
}

/// Joint objective `adv * (gan_g + l1_weight * l1) + segm`.
pub fn full_loss(
    segm: &SegmTerms,
    gan_g: Option<&Tensor>,
    l1: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    let paint = match gan_g {
        Some(g) => (g + l1.affine(w.l1, 0.0)?)?,
        None => l1.affine(w.l1, 0.0)?,
    };
    Ok((paint.affine(w.adv, 0.0)? + segm.weighted(w)?)?)
}

fn mask_t(m: &BinaryMask) -> Result<Tensor> {
    let (w, h) = m.dims();
    let v: Vec<f64> = m.data().iter().map(|&x| x as f64).collect();
    Ok(Tensor::from_vec(v, (1, h, w), &Device::Cpu)?)
}

fn image_t(m: &RgbImage) -> Result<Tensor> {
    let (w, h) = m.dims();
    let v: Vec<f64> = m.to_chw().into_iter().map(|x| x as f64).collect();
    Ok(Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu)?)
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

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionBce {
    pub value: f64,
    /// The region had no pixels and `value` is the defined 0.
    pub empty: bool,
}

pub fn bce_region(g: &BinaryMask, o: &BinaryMask, region: &BinaryMask) -> Result<RegionBce> {
    same_dims(g.dims(), o.dims())?;
    same_dims(g.dims(), region.dims())?;
    let value = scalar(&bce_region_batch(
        &mask_t(g)?,
        &mask_t(o)?,
        &mask_t(region)?,
    )?)?;
    Ok(RegionBce {
        value,
        empty: region.count() == 0,
    })
}

pub fn segm_loss(
    g_sf: &BinaryMask,
    o: &BinaryMask,
    sv: &BinaryMask,
    si: &BinaryMask,
    w: &LossWeights,
) -> Result<(f64, LossBreakdown)> {
    for m in [o, sv, si] {
        same_dims(g_sf.dims(), m.dims())?;
    }
    let t = segm_terms(&mask_t(g_sf)?, &mask_t(o)?, &mask_t(sv)?, &mask_t(si)?)?;
    let mut b = LossBreakdown {
        bg_bce: scalar(&t.bg)?,
        sv_bce: scalar(&t.sv)?,
        si_bce: scalar(&t.si)?,
        ..Default::default()
    };
    b.total = b.segm(w);
    Ok((b.total, b))
}

/// `(gan_g, gan_d)` for flat score lists.
pub fn gan_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::InvalidValue("empty score list".into()));
    }
    let real = Tensor::from_slice(d_real, d_real.len(), &Device::Cpu)?;
    let fake = Tensor::from_slice(d_fake, d_fake.len(), &Device::Cpu)?;
    Ok((
        scalar(&gan_g_loss(&fake, false)?)?,
        scalar(&gan_d_loss(&real, &fake)?)?,
    ))
}

pub fn l1_paint(pred: &RgbImage, gt: &RgbImage, region: Option<&BinaryMask>) -> Result<f64> {
    same_dims(pred.dims(), gt.dims())?;
    let r = match region {
        Some(r) => {
            same_dims(pred.dims(), r.dims())?;
            Some(mask_t(r)?)
        }
        None => None,
    };
    scalar(&l1_batch(&image_t(pred)?, &image_t(gt)?, r.as_ref())?)
}

/// Joint total from already computed parts; `gan_d` is carried along.
pub fn full_loss_value(parts: LossBreakdown, w: &LossWeights) -> (f64, LossBreakdown) {
    let total = parts.recompute_total(w);
    (total, LossBreakdown { total, ..parts })
}
