use serde::{Deserialize, Serialize};

use super::fdi::FdiCode;
use crate::error::{Error, Result};

/// A pixel-space vertex, serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Axis-aligned box `(x, y, w, h)` in pixels, `(x, y)` the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    /// Tight bounding rectangle of a point set; `None` when empty.
    pub fn enclosing(points: &[Point]) -> Option<BBox> {
        let first = points.first()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for p in &points[1..] {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        Some(BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x.max(other.x)).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y.max(other.y)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Restricts the box to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = self.x2().clamp(0.0, width);
        let y1 = self.y2().clamp(0.0, height);
        BBox::new(x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0))
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox::new(self.x * sx, self.y * sy, self.w * sx, self.h * sy)
    }
}

/// One annotated tooth instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToothAnnotation {
    pub image_id: String,
    pub fdi: FdiCode,
    pub polygon: Vec<Point>,
    pub bbox: BBox,
}

impl ToothAnnotation {
    /// Builds an annotation whose box is the tight rectangle of `polygon`.
    pub fn from_polygon(image_id: impl Into<String>, fdi: FdiCode, polygon: Vec<Point>) -> Result<Self> {
        let bbox = BBox::enclosing(&polygon)
            .ok_or_else(|| Error::Dataset(format!("tooth {fdi}: empty polygon")))?;
        let ann = ToothAnnotation {
            image_id: image_id.into(),
            fdi,
            polygon,
            bbox,
        };
        ann.validate()?;
        Ok(ann)
    }

    /// Checks vertex count, finiteness, simplicity, and that the box is tight
    /// around the vertices (within half a pixel, to absorb integer exports).
    pub fn validate(&self) -> Result<()> {
        let ctx = || format!("image {} tooth {}", self.image_id, self.fdi);
        if self.polygon.len() < 3 {
            return Err(Error::Dataset(format!("{}: polygon has {} vertices", ctx(), self.polygon.len())));
        }
        if !self.polygon.iter().all(|p| p.x.is_finite() && p.y.is_finite()) || !self.bbox.is_finite() {
            return Err(Error::Dataset(format!("{}: non-finite coordinates", ctx())));
        }
        if self.bbox.w < 0.0 || self.bbox.h < 0.0 {
            return Err(Error::Dataset(format!("{}: negative box size", ctx())));
        }
        let tight = BBox::enclosing(&self.polygon).unwrap();
        let slack = 0.5 + 1e-9;
        let loose = (tight.x - self.bbox.x).abs() > slack
            || (tight.y - self.bbox.y).abs() > slack
            || (tight.x2() - self.bbox.x2()).abs() > slack
            || (tight.y2() - self.bbox.y2()).abs() > slack;
        if loose {
            return Err(Error::Dataset(format!(
                "{}: bbox {:?} does not tightly enclose polygon {:?}",
                ctx(),
                self.bbox,
                tight
            )));
        }
        if !is_simple(&self.polygon) {
            return Err(Error::Dataset(format!("{}: self-intersecting polygon", ctx())));
        }
        Ok(())
    }
}

/// True when no two non-adjacent edges of the closed polygon intersect.
pub(crate) fn is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 4 {
        return true;
    }
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        for j in (i + 1)..n {
            // adjacent edges share a vertex
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0)) && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0)) {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// A single detector output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub fdi: FdiCode,
    pub bbox: BBox,
    pub confidence: f64,
}

/// All detections for one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    pub entries: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(image_id: impl Into<String>) -> Self {
        DetectionSet {
            image_id: image_id.into(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for d in &self.entries {
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(Error::Dataset(format!(
                    "image {}: confidence {} outside [0, 1]",
                    self.image_id, d.confidence
                )));
            }
            if !d.bbox.is_finite() || d.bbox.w < 0.0 || d.bbox.h < 0.0 {
                return Err(Error::Dataset(format!("image {}: invalid box {:?}", self.image_id, d.bbox)));
            }
        }
        Ok(())
    }

    /// Clips every box to the image rectangle.
    pub fn clipped(&self, width: f64, height: f64) -> DetectionSet {
        DetectionSet {
            image_id: self.image_id.clone(),
            entries: self
                .entries
                .iter()
                .map(|d| Detection {
                    bbox: d.bbox.clip(width, height),
                    ..*d
                })
                .collect(),
        }
    }
}
