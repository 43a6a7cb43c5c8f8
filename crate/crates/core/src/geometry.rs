//! Corner-form boxes, overlap measures and anchor grids.
//!
//! Everything downstream speaks [`BoxXYXY`]. Center/size form only appears
//! inside [`encode`] and [`decode`].

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in corner form, in pixel coordinates.
///
/// Serialized as `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoxXYXY {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BoxXYXY> for [f64; 4] {
    fn from(b: BoxXYXY) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoxXYXY {
    /// Builds a box without checking the corner ordering.
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn try_new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self::new(x1, y1, x2, y2);
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::MalformedBox(format!("{:?}", <[f64; 4]>::from(*self))))
        }
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// Smallest box containing both.
    pub fn enclosing(&self, other: &Self) -> Self {
        Self::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }

    pub fn contains(&self, other: &Self) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

/// Intersection over union. Zero when the union has zero area.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Generalized IoU: `iou - |C \ (A u B)| / |C|` with `C` the enclosing box.
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let overlap = if union > 0.0 { inter / union } else { 0.0 };
    let hull = a.enclosing(b).area();
    if hull > 0.0 {
        overlap - (hull - union) / hull
    } else {
        overlap
    }
}

/// One pyramid level: a `width x height` grid of square anchors with side
/// `stride * scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridLevel {
    pub stride: f64,
    pub scale: f64,
    #[serde(rename = "w")]
    pub width: usize,
    #[serde(rename = "h")]
    pub height: usize,
}

impl GridLevel {
    pub fn anchor_side(&self) -> f64 {
        self.stride * self.scale
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub levels: Vec<GridLevel>,
}

impl AnchorGrid {
    /// Feature pyramid covering a `image_w x image_h` image, one level per stride.
    pub fn pyramid(image_w: f64, image_h: f64, strides: &[f64], scale: f64) -> Self {
        let levels = strides
            .iter()
            .map(|&stride| GridLevel {
                stride,
                scale,
                width: (image_w / stride).ceil().max(0.0) as usize,
                height: (image_h / stride).ceil().max(0.0) as usize,
            })
            .collect();
        Self { levels }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_anchors(&self) -> usize {
        self.levels.iter().map(GridLevel::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, level) in self.levels.iter().enumerate() {
            if !(level.stride.is_finite() && level.stride > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "level {i}: stride must be positive, got {}",
                    level.stride
                )));
            }
            if !(level.scale.is_finite() && level.scale > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "level {i}: anchor scale must be positive, got {}",
                    level.scale
                )));
            }
        }
        for (i, pair) in self.levels.windows(2).enumerate() {
            if pair[1].stride <= pair[0].stride {
                return Err(Error::InvalidConfig(format!(
                    "level strides must be strictly increasing ({} then {} at level {})",
                    pair[0].stride,
                    pair[1].stride,
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Anchors for every level, row-major within a level, centered at
/// `((x + 0.5) * stride, (y + 0.5) * stride)`.
pub fn build_anchors(grid: &AnchorGrid) -> Vec<Vec<BoxXYXY>> {
    grid.levels
        .iter()
        .map(|level| {
            let side = level.anchor_side();
            let mut boxes = Vec::with_capacity(level.len());
            for y in 0..level.height {
                for x in 0..level.width {
                    let cx = (x as f64 + 0.5) * level.stride;
                    let cy = (y as f64 + 0.5) * level.stride;
                    boxes.push(BoxXYXY::from_center(cx, cy, side, side));
                }
            }
            boxes
        })
        .collect()
}

/// All anchors of a grid, flattened level by level, with the level of each.
#[derive(Clone, Debug, Default)]
pub struct AnchorSet {
    pub boxes: Vec<BoxXYXY>,
    pub levels: Vec<usize>,
    ranges: Vec<Range<usize>>,
}

impl AnchorSet {
    pub fn from_grid(grid: &AnchorGrid) -> Self {
        let mut set = AnchorSet::default();
        for (level, boxes) in build_anchors(grid).into_iter().enumerate() {
            let start = set.boxes.len();
            set.levels.extend(std::iter::repeat_n(level, boxes.len()));
            set.boxes.extend(boxes);
            set.ranges.push(start..set.boxes.len());
        }
        set
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_levels(&self) -> usize {
        self.ranges.len()
    }

    /// Flat index range of the anchors on `level`.
    pub fn level_range(&self, level: usize) -> Range<usize> {
        self.ranges[level].clone()
    }
}

/// Center/log-size regression offsets of a box relative to an anchor.
///
/// Serialized as `[dx, dy, dw, dh]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl From<[f64; 4]> for BoxDeltas {
    fn from([dx, dy, dw, dh]: [f64; 4]) -> Self {
        Self { dx, dy, dw, dh }
    }
}

impl From<BoxDeltas> for [f64; 4] {
    fn from(d: BoxDeltas) -> Self {
        [d.dx, d.dy, d.dw, d.dh]
    }
}

/// Log-size deltas are saturated at this magnitude when decoding.
pub const DELTA_CLAMP: f64 = 4.0;

fn require_positive_area(b: &BoxXYXY, what: &str) -> Result<()> {
    if b.is_valid() && b.width() > 0.0 && b.height() > 0.0 {
        Ok(())
    } else {
        Err(Error::MalformedBox(format!(
            "{what} must have positive area, got {:?}",
            <[f64; 4]>::from(*b)
        )))
    }
}

pub fn encode(anchor: &BoxXYXY, gt: &BoxXYXY) -> Result<BoxDeltas> {
    require_positive_area(anchor, "anchor")?;
    require_positive_area(gt, "target box")?;
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(BoxDeltas {
        dx: (gcx - acx) / aw,
        dy: (gcy - acy) / ah,
        dw: (gt.width() / aw).ln(),
        dh: (gt.height() / ah).ln(),
    })
}

pub fn decode(anchor: &BoxXYXY, d: &BoxDeltas) -> Result<BoxXYXY> {
    require_positive_area(anchor, "anchor")?;
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + d.dx * aw;
    let cy = acy + d.dy * ah;
    let w = aw * d.dw.clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let h = ah * d.dh.clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    Ok(BoxXYXY::from_center(cx, cy, w, h))
}
