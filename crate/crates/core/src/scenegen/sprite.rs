use serde::{Deserialize, Serialize};

pub type Rgb8 = [u8; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    ConvexPolygon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Solid,
    Stripes,
    Checker,
}

/// Outline in sprite-local units; the pose scale maps one unit to pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Rectangle {
        half_w: f64,
        half_h: f64,
    },
    Ellipse {
        rx: f64,
        ry: f64,
    },
    /// Counter-clockwise vertices of a convex polygon.
    ConvexPolygon {
        vertices: Vec<[f64; 2]>,
    },
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Rectangle { .. } => ShapeKind::Rectangle,
            Shape::Ellipse { .. } => ShapeKind::Ellipse,
            Shape::ConvexPolygon { .. } => ShapeKind::ConvexPolygon,
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Shape::Rectangle { half_w, half_h } => u.abs() <= *half_w && v.abs() <= *half_h,
            Shape::Ellipse { rx, ry } => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
            Shape::ConvexPolygon { vertices } => {
                let n = vertices.len();
                (0..n).all(|i| {
                    let [ax, ay] = vertices[i];
                    let [bx, by] = vertices[(i + 1) % n];
                    (bx - ax) * (v - ay) - (by - ay) * (u - ax) >= 0.0
                })
            }
        }
    }

    /// Radius of the smallest origin-centered disk holding the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Rectangle { half_w, half_h } => half_w.hypot(*half_h),
            Shape::Ellipse { rx, ry } => rx.max(*ry),
            Shape::ConvexPolygon { vertices } => vertices
                .iter()
                .map(|[x, y]| x.hypot(*y))
                .fold(0.0, f64::max),
        }
    }
}

/// Surface pattern, evaluated in pixel units of the unrotated sprite frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Solid {
        color: Rgb8,
    },
    Stripes {
        a: Rgb8,
        b: Rgb8,
        period: f64,
        angle: f64,
    },
    Checker {
        a: Rgb8,
        b: Rgb8,
        cell: f64,
    },
}

impl Texture {
    pub fn kind(&self) -> TextureKind {
        match self {
            Texture::Solid { .. } => TextureKind::Solid,
            Texture::Stripes { .. } => TextureKind::Stripes,
            Texture::Checker { .. } => TextureKind::Checker,
        }
    }

    pub fn colors(&self) -> Vec<Rgb8> {
        match self {
            Texture::Solid { color } => vec![*color],
            Texture::Stripes { a, b, .. } | Texture::Checker { a, b, .. } => vec![*a, *b],
        }
    }

    fn color_at(&self, u: f64, v: f64) -> Rgb8 {
        match self {
            Texture::Solid { color } => *color,
            Texture::Stripes {
                a,
                b,
                period,
                angle,
            } => {
                let t = (u * angle.cos() + v * angle.sin()) / period;
                if (t.floor() as i64).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Checker { a, b, cell } => {
                let k = (u / cell).floor() as i64 + (v / cell).floor() as i64;
                if k.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub cx: f64,
    pub cy: f64,
    /// Pixels per local unit.
    pub scale: f64,
    /// Radians, counter-clockwise in image coordinates.
    pub rotation: f64,
}

/// An opaque layer of a [`super::LayeredScene`]; rank 0 is frontmost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: Shape,
    pub texture: Texture,
    pub pose: Pose,
    pub depth_rank: usize,
}

impl Sprite {
    /// Pixel-unit coordinates of the pixel center `(x, y)` in the sprite's
    /// unrotated frame.
    fn local(&self, x: usize, y: usize) -> (f64, f64) {
        let dx = x as f64 + 0.5 - self.pose.cx;
        let dy = y as f64 + 0.5 - self.pose.cy;
        let (s, c) = self.pose.rotation.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (u, v) = self.local(x, y);
        self.shape
            .contains(u / self.pose.scale, v / self.pose.scale)
    }

    pub fn color_at(&self, x: usize, y: usize) -> Rgb8 {
        let (u, v) = self.local(x, y);
        self.texture.color_at(u, v)
    }

    /// Conservative pixel-space bounds of the silhouette.
    pub fn extent(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let r = self.shape.bounding_radius() * self.pose.scale + 1.0;
        let clampx = |v: f64| v.clamp(0.0, width as f64) as usize;
        let clampy = |v: f64| v.clamp(0.0, height as f64) as usize;
        (
            clampx((self.pose.cx - r).floor()),
            clampy((self.pose.cy - r).floor()),
            clampx((self.pose.cx + r).ceil()),
            clampy((self.pose.cy + r).ceil()),
        )
    }

    pub fn silhouette(&self, width: usize, height: usize) -> Vec<bool> {
        let mut out = vec![false; width * height];
        let (x0, y0, x1, y1) = self.extent(width, height);
        for y in y0..y1 {
            for x in x0..x1 {
                out[y * width + x] = self.covers(x, y);
            }
        }
        out
    }
}

/// Vertical two-color gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Background {
    pub top: Rgb8,
    pub bottom: Rgb8,
}

impl Background {
    pub fn color_at(&self, y: usize, height: usize) -> Rgb8 {
        let t = if height > 1 {
            y as f64 / (height - 1) as f64
        } else {
            0.0
        };
        std::array::from_fn(|c| {
            (self.top[c] as f64 * (1.0 - t) + self.bottom[c] as f64 * t).round() as u8
        })
    }
}
