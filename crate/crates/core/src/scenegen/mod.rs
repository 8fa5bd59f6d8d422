//! Procedural layered scenes with exact occlusion ground truth.
//!
//! A scene is a stack of opaque sprites painted back to front over a
//! gradient background. Ground-truth masks for a sprite come from
//! rendering it alone over the background and comparing that render with
//! the full composite: pixels of the sprite's silhouette that agree are
//! visible, the rest of the silhouette is invisible. Sprite colors are
//! drawn without replacement from a fixed palette, so an occluder can never
//! reproduce the occludee's color at a pixel and the comparison is exact.

mod dataset;
mod sprite;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{
    build_dataset, load_sample, DatasetConfig, DatasetManifest, SampleRecord, SceneRecord, Split,
    MANIFEST_FILE, MANIFEST_VERSION,
};
pub use sprite::{Background, Pose, Rgb8, Shape, ShapeKind, Sprite, Texture, TextureKind};

use crate::error::{Error, Result};
use crate::maskops::{BBox, BinaryMask, RgbImage};

/// Minimum visible pixels for an object to be annotated.
pub const MIN_VISIBLE_PIXELS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// `[width, height]` in pixels.
    pub canvas: [usize; 2],
    /// Inclusive range of sprites per scene.
    pub sprite_count: [usize; 2],
    /// Inclusive range of sprite scale (pixels per local unit, roughly the
    /// sprite radius).
    pub scale: [f64; 2],
    /// Every sprite silhouette has at least this many pixels.
    pub min_area: usize,
    /// Probability that a scene is resampled until it has at least one
    /// overlapping sprite pair.
    pub occlusion_target: f64,
    pub shapes: Vec<ShapeKind>,
    pub textures: Vec<TextureKind>,
    /// Exact pixel comparison when zero; otherwise the largest per-channel
    /// difference (in 8-bit steps) still treated as "the same pixel".
    pub equality_tolerance: u8,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            canvas: [128, 128],
            sprite_count: [3, 6],
            scale: [14.0, 30.0],
            min_area: 80,
            occlusion_target: 0.9,
            shapes: vec![
                ShapeKind::Rectangle,
                ShapeKind::Ellipse,
                ShapeKind::ConvexPolygon,
            ],
            textures: vec![
                TextureKind::Solid,
                TextureKind::Stripes,
                TextureKind::Checker,
            ],
            equality_tolerance: 0,
            max_attempts: 1000,
        }
    }
}

const PALETTE_LEVELS: [u8; 6] = [0, 51, 102, 153, 204, 255];

fn palette() -> Vec<Rgb8> {
    let mut p = Vec::with_capacity(216);
    for r in PALETTE_LEVELS {
        for g in PALETTE_LEVELS {
            for b in PALETTE_LEVELS {
                p.push([r, g, b]);
            }
        }
    }
    p
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.canvas;
        let [n0, n1] = self.sprite_count;
        let [s0, s1] = self.scale;
        if w == 0 || h == 0 {
            return Err(Error::Config("canvas must be nonempty".into()));
        }
        if n0 > n1 {
            return Err(Error::Config(format!(
                "sprite_count range [{n0}, {n1}] is inverted"
            )));
        }
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::Config(format!(
                "scale range [{s0}, {s1}] is invalid"
            )));
        }
        if 2.0 * s0 > w.min(h) as f64 {
            return Err(Error::Config(format!(
                "sprites of scale {s0} do not fit a {w}x{h} canvas"
            )));
        }
        if self.min_area as f64 > std::f64::consts::PI * s1 * s1 {
            return Err(Error::Config(format!(
                "min_area {} exceeds the largest sprite area",
                self.min_area
            )));
        }
        if 2 * n1 > palette().len() {
            return Err(Error::Config(format!(
                "{n1} sprites exhaust the color palette"
            )));
        }
        if self.shapes.is_empty() || self.textures.is_empty() {
            return Err(Error::Config("shapes and textures must be nonempty".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_target) {
            return Err(Error::Config("occlusion_target must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Sprites ordered front to back (`sprites[k].depth_rank == k`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayeredScene {
    pub width: usize,
    pub height: usize,
    pub background: Background,
    pub sprites: Vec<Sprite>,
}

/// One annotated object of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Composite render of the whole scene.
    pub image: RgbImage,
    /// The object rendered alone over the background; the painting target.
    pub appearance: RgbImage,
    pub object_id: usize,
    pub depth_rank: usize,
    pub sv: BinaryMask,
    pub si: BinaryMask,
    pub sf: BinaryMask,
    /// Tight box of `sf`.
    pub bbox: BBox,
    /// Sprites in front of this one whose silhouettes overlap it.
    pub occluders: Vec<usize>,
}

impl Sample {
    pub fn is_occluded(&self) -> bool {
        !self.si.is_empty()
    }

    /// Checks `sv ∧ si = ∅`, `sv ∨ si = sf` and the visibility floor.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let overlap = self.sv.and(&self.si).map_err(|e| e.to_string())?.count();
        if overlap > 0 {
            return Err(format!("sv and si overlap at {overlap} pixel(s)"));
        }
        if self.sv.or(&self.si).map_err(|e| e.to_string())? != self.sf {
            return Err("sv ∪ si differs from sf".into());
        }
        if self.sv.count() < MIN_VISIBLE_PIXELS {
            return Err(format!("only {} visible pixel(s)", self.sv.count()));
        }
        Ok(())
    }
}

fn take_colors(colors: &mut Vec<Rgb8>, two: bool) -> (Rgb8, Rgb8) {
    let a = colors.pop().expect("palette sized in validate");
    let b = if two {
        colors.pop().expect("palette sized in validate")
    } else {
        a
    };
    (a, b)
}

fn random_shape<R: Rng + ?Sized>(kind: ShapeKind, rng: &mut R) -> Shape {
    match kind {
        ShapeKind::Rectangle => Shape::Rectangle {
            half_w: 1.0,
            half_h: rng.random_range(0.45..=1.0),
        },
        ShapeKind::Ellipse => Shape::Ellipse {
            rx: 1.0,
            ry: rng.random_range(0.45..=1.0),
        },
        ShapeKind::ConvexPolygon => {
            // Vertices on the unit circle are always in convex position.
            let n = rng.random_range(3..=7);
            let mut angles: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            angles.sort_by(f64::total_cmp);
            Shape::ConvexPolygon {
                vertices: angles.iter().map(|a| [a.cos(), a.sin()]).collect(),
            }
        }
    }
}

fn random_texture<R: Rng + ?Sized>(
    kind: TextureKind,
    colors: &mut Vec<Rgb8>,
    rng: &mut R,
) -> Texture {
    match kind {
        TextureKind::Solid => Texture::Solid {
            color: take_colors(colors, false).0,
        },
        TextureKind::Stripes => {
            let (a, b) = take_colors(colors, true);
            Texture::Stripes {
                a,
                b,
                period: rng.random_range(3.0..=8.0),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            }
        }
        TextureKind::Checker => {
            let (a, b) = take_colors(colors, true);
            Texture::Checker {
                a,
                b,
                cell: rng.random_range(3.0..=8.0),
            }
        }
    }
}

fn random_background<R: Rng + ?Sized>(rng: &mut R) -> Background {
    let mut muted = || -> Rgb8 {
        let base: i32 = rng.random_range(100..=156);
        let mut c = [0u8; 3];
        for v in &mut c {
            *v = (base + rng.random_range(-12..=12)).clamp(0, 255) as u8;
        }
        c
    };
    Background {
        top: muted(),
        bottom: muted(),
    }
}

fn try_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<LayeredScene> {
    let [w, h] = cfg.canvas;
    let count = rng.random_range(cfg.sprite_count[0]..=cfg.sprite_count[1]);
    let mut colors = palette();
    colors.shuffle(rng);
    let background = random_background(rng);
    let mut sprites = Vec::with_capacity(count);
    for depth_rank in 0..count {
        let shape_kind = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
        let texture_kind = cfg.textures[rng.random_range(0..cfg.textures.len())];
        let texture = random_texture(texture_kind, &mut colors, rng);
        let mut placed = None;
        for _ in 0..cfg.max_attempts {
            let shape = random_shape(shape_kind, rng);
            let mut scale = rng.random_range(cfg.scale[0]..=cfg.scale[1]);
            let reach = shape.bounding_radius();
            // Keep the whole silhouette on the canvas.
            scale = scale.min((w.min(h) as f64 / 2.0 - 1.0) / reach);
            let margin = reach * scale;
            let pose = Pose {
                cx: rng.random_range(margin..=(w as f64 - margin).max(margin)),
                cy: rng.random_range(margin..=(h as f64 - margin).max(margin)),
                scale,
                rotation: rng.random_range(0.0..std::f64::consts::PI),
            };
            let s = Sprite {
                shape,
                texture: texture.clone(),
                pose,
                depth_rank,
            };
            if s.silhouette(w, h).iter().filter(|&&b| b).count() >= cfg.min_area {
                placed = Some(s);
                break;
            }
        }
        sprites.push(placed.ok_or_else(|| {
            Error::Config(format!(
                "could not place a sprite with area >= {} in {} attempts",
                cfg.min_area, cfg.max_attempts
            ))
        })?);
    }
    Ok(LayeredScene {
        width: w,
        height: h,
        background,
        sprites,
    })
}

/// Draws a scene; deterministic for a fixed generator state.
pub fn generate_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<LayeredScene> {
    cfg.validate()?;
    let want_overlap = cfg.sprite_count[1] >= 2 && rng.random_bool(cfg.occlusion_target);
    for _ in 0..cfg.max_attempts {
        let scene = try_scene(cfg, rng)?;
        if !want_overlap || !scene.overlap_pairs().is_empty() {
            return Ok(scene);
        }
    }
    Err(Error::Config(format!(
        "no scene with an occlusion pair after {} attempts",
        cfg.max_attempts
    )))
}

impl LayeredScene {
    fn background_pixels(&self) -> Vec<Rgb8> {
        let mut px = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            let c = self.background.color_at(y, self.height);
            px.extend(std::iter::repeat_n(c, self.width));
        }
        px
    }

    fn paint(&self, px: &mut [Rgb8], sprite: &Sprite) {
        let (x0, y0, x1, y1) = sprite.extent(self.width, self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                if sprite.covers(x, y) {
                    px[y * self.width + x] = sprite.color_at(x, y);
                }
            }
        }
    }

    /// Painter's algorithm, back to front.
    pub fn render_pixels(&self) -> Vec<Rgb8> {
        let mut px = self.background_pixels();
        for s in self.sprites.iter().rev() {
            self.paint(&mut px, s);
        }
        px
    }

    /// The scene with every sprite except `index` removed.
    pub fn render_alone_pixels(&self, index: usize) -> Vec<Rgb8> {
        let mut px = self.background_pixels();
        self.paint(&mut px, &self.sprites[index]);
        px
    }

    pub fn render(&self) -> RgbImage {
        to_image(self.width, self.height, &self.render_pixels())
    }

    pub fn render_alone(&self, index: usize) -> RgbImage {
        to_image(self.width, self.height, &self.render_alone_pixels(index))
    }

    /// Visible pixels of sprite `index` by direct depth test: covered by the
    /// sprite and by no sprite of smaller rank.
    pub fn zorder_visibility(&self, index: usize) -> Vec<bool> {
        let (w, h) = (self.width, self.height);
        let mut vis = self.sprites[index].silhouette(w, h);
        for front in &self.sprites[..index] {
            for (v, f) in vis.iter_mut().zip(front.silhouette(w, h)) {
                *v &= !f;
            }
        }
        vis
    }

    /// Pairs `(q, p)` with `q` in front of `p` and overlapping silhouettes.
    pub fn overlap_pairs(&self) -> Vec<(usize, usize)> {
        let sils: Vec<_> = self
            .sprites
            .iter()
            .map(|s| s.silhouette(self.width, self.height))
            .collect();
        let mut out = Vec::new();
        for q in 0..sils.len() {
            for p in q + 1..sils.len() {
                if sils[q].iter().zip(&sils[p]).any(|(&a, &b)| a && b) {
                    out.push((q, p));
                }
            }
        }
        out
    }
}

fn to_image(width: usize, height: usize, px: &[Rgb8]) -> RgbImage {
    let bytes: Vec<u8> = px.iter().flatten().copied().collect();
    RgbImage::from_rgb8(width, height, &bytes).expect("pixel count matches canvas")
}

fn same_pixel(a: Rgb8, b: Rgb8, tolerance: u8) -> bool {
    a.iter().zip(&b).all(|(&x, &y)| x.abs_diff(y) <= tolerance)
}

/// Ground-truth samples for every sprite with at least
/// [`MIN_VISIBLE_PIXELS`] visible pixels, using exact pixel equality.
pub fn derive_masks(scene: &LayeredScene) -> Vec<Sample> {
    derive_masks_with_tolerance(scene, 0)
}

/// [`derive_masks`] with a per-channel equality tolerance for lossy inputs.
pub fn derive_masks_with_tolerance(scene: &LayeredScene, tolerance: u8) -> Vec<Sample> {
    let (w, h) = (scene.width, scene.height);
    let composite = scene.render_pixels();
    let image = to_image(w, h, &composite);
    let sils: Vec<_> = scene.sprites.iter().map(|s| s.silhouette(w, h)).collect();
    let mut samples = Vec::new();
    for (k, sprite) in scene.sprites.iter().enumerate() {
        let alone = scene.render_alone_pixels(k);
        let sf_bits = &sils[k];
        let sv_bits: Vec<bool> = sf_bits
            .iter()
            .zip(alone.iter().zip(&composite))
            .map(|(&f, (&a, &c))| f && same_pixel(a, c, tolerance))
            .collect();
        let visible = sv_bits.iter().filter(|&&b| b).count();
        if visible < MIN_VISIBLE_PIXELS {
            continue;
        }
        let si_bits: Vec<bool> = sf_bits
            .iter()
            .zip(&sv_bits)
            .map(|(&f, &v)| f && !v)
            .collect();
        let sf = BinaryMask::from_bools(w, h, sf_bits).expect("canvas sized");
        let occluders = (0..k)
            .filter(|&q| sils[q].iter().zip(sf_bits).any(|(&a, &b)| a && b))
            .collect();
        samples.push(Sample {
            image: image.clone(),
            appearance: to_image(w, h, &alone),
            object_id: k,
            depth_rank: sprite.depth_rank,
            sv: BinaryMask::from_bools(w, h, &sv_bits).expect("canvas sized"),
            si: BinaryMask::from_bools(w, h, &si_bits).expect("canvas sized"),
            bbox: sf
                .bbox()
                .expect("visible pixels imply a nonempty silhouette"),
            sf,
            occluders,
        });
    }
    samples
}
