//! Axis-aligned boxes: IoU, anchor grids, offset encoding/decoding, and
//! greedy NMS.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keeps decoded log-size offsets sane: exp is clamped at ln(1000/16),
/// matching the usual bounding-box transform clip.
pub const BOX_XFORM_CLIP: f64 = 4.135166556742356;

/// Smallest box side allowed before IoU computations.
pub const MIN_BOX_SIDE: f64 = 1e-3;

/// Corner-parameterized box: x_min, y_min, x_max, y_max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Box2D> {
        let b = Box2D {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        if ![self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Box2D {
        Box2D {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn clip(&self, w: f64, h: f64) -> Box2D {
        Box2D {
            x_min: self.x_min.clamp(0.0, w),
            y_min: self.y_min.clamp(0.0, h),
            x_max: self.x_max.clamp(0.0, w),
            y_max: self.y_max.clamp(0.0, h),
        }
    }

    pub fn scaled(&self, factor: f64) -> Box2D {
        Box2D {
            x_min: self.x_min * factor,
            y_min: self.y_min * factor,
            x_max: self.x_max * factor,
            y_max: self.y_max * factor,
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Offsets of a target box relative to an anchor: (dx, dy) scaled by anchor
/// size, (dw, dh) logarithmic.
pub fn encode_offsets(anchor: &Box2D, target: &Box2D) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    [
        (tcx - acx) / anchor.width(),
        (tcy - acy) / anchor.height(),
        (target.width() / anchor.width()).ln(),
        (target.height() / anchor.height()).ln(),
    ]
}

/// Inverse of `encode_offsets`, with log sizes clipped to BOX_XFORM_CLIP.
pub fn decode_offsets(anchor: &Box2D, offsets: &[f64; 4]) -> Box2D {
    let (acx, acy) = anchor.center();
    let cx = acx + offsets[0] * anchor.width();
    let cy = acy + offsets[1] * anchor.height();
    let w = anchor.width() * offsets[2].min(BOX_XFORM_CLIP).exp();
    let h = anchor.height() * offsets[3].min(BOX_XFORM_CLIP).exp();
    Box2D::from_center(cx, cy, w.max(MIN_BOX_SIDE), h.max(MIN_BOX_SIDE))
}

/// Anchors of one feature level, laid out `[A, H, W]` to match the head
/// output channel order. Anchor (a, i, j) is a square of side `sizes[a]`
/// centered on cell (i, j) in image coordinates.
#[derive(Debug, Clone)]
pub struct LevelAnchors {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub sizes: Vec<f64>,
    boxes: Vec<Box2D>,
}

impl LevelAnchors {
    pub fn new(stride: usize, h: usize, w: usize, sizes: &[f64]) -> LevelAnchors {
        let mut boxes = Vec::with_capacity(sizes.len() * h * w);
        for &side in sizes {
            for i in 0..h {
                for j in 0..w {
                    let cx = (j as f64 + 0.5) * stride as f64;
                    let cy = (i as f64 + 0.5) * stride as f64;
                    boxes.push(Box2D::from_center(cx, cy, side, side));
                }
            }
        }
        LevelAnchors {
            stride,
            h,
            w,
            sizes: sizes.to_vec(),
            boxes,
        }
    }

    pub fn per_cell(&self) -> usize {
        self.sizes.len()
    }

    pub fn boxes(&self) -> &[Box2D] {
        &self.boxes
    }

    pub fn get(&self, a: usize, i: usize, j: usize) -> &Box2D {
        &self.boxes[(a * self.h + i) * self.w + j]
    }

    /// Anchor centers and sizes as `[A, H, W]` tensors (cx, cy, w, h).
    pub fn center_tensors(&self) -> (Tensor, Tensor, Tensor, Tensor) {
        let shape = vec![self.per_cell(), self.h, self.w];
        let n = self.boxes.len();
        let mut cx = Vec::with_capacity(n);
        let mut cy = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        let mut h = Vec::with_capacity(n);
        for b in &self.boxes {
            let (x, y) = b.center();
            cx.push(x);
            cy.push(y);
            w.push(b.width());
            h.push(b.height());
        }
        (
            Tensor::from_vec(shape.clone(), cx).unwrap(),
            Tensor::from_vec(shape.clone(), cy).unwrap(),
            Tensor::from_vec(shape.clone(), w).unwrap(),
            Tensor::from_vec(shape, h).unwrap(),
        )
    }
}

/// Anchors for every FPN level.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub levels: Vec<LevelAnchors>,
}

impl AnchorGrid {
    pub fn total(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }
}

/// Greedy non-maximum suppression over `(index, score)` candidates sorted
/// internally by descending score with index as the tie-breaker. Returns the
/// surviving candidate indices in pick order.
pub fn nms(boxes: &[Box2D], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order {
            if !suppressed[j] && j != i && iou(&boxes[i], &boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}
