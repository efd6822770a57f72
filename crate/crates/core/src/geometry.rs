//! Axis-aligned box arithmetic and the polar displacement codec.
//!
//! Boxes are stored in center form `(cx, cy, w, h)` with real-valued pixel
//! coordinates. The image grid is addressed as `(u, v)` where `u` is the row
//! (the `y` axis, in `[0, H)`) and `v` is the column (the `x` axis, in
//! `[0, W)`). Pixel `(u, v)` sits at the point `x = v, y = u`.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box size must be positive and finite, got w={w}, h={h}")]
    DegenerateSize { w: f64, h: f64 },
    #[error("box center must be finite, got ({cx}, {cy})")]
    NonFiniteCenter { cx: f64, cy: f64 },
}

/// Center-form axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::NonFiniteCenter { cx, cy });
        }
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(GeometryError::DegenerateSize { w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Builds a box from corners `x0 < x1`, `y0 < y1`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// `[cx, cy, w, h]`
    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x0, y0, x1, y1)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Same box with width and height raised to at least `min_size`.
    pub fn clamp_min_size(&self, min_size: f64) -> Self {
        Self {
            cx: self.cx,
            cy: self.cy,
            w: self.w.max(min_size),
            h: self.h.max(min_size),
        }
    }

    /// Euclidean distance between the two box centers.
    pub fn center_distance(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x >= x0 && x < x1 && y >= y0 && y < y1
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Area from the corner extents, so that a box intersected with itself
/// gives back exactly its own area.
fn corner_area(b: &BBox) -> f64 {
    let (x0, y0, x1, y1) = b.corners();
    (x1 - x0) * (y1 - y0)
}

/// `(intersection, union, hull)` areas.
fn overlap_areas(a: &BBox, b: &BBox) -> (f64, f64, f64) {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    let inter = iw * ih;
    (inter, corner_area(a) + corner_area(b) - inter, hull)
}

/// Intersection over union; `0` for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union, _) = overlap_areas(a, b);
    inter / union
}

/// Generalized IoU: `IoU - (|C| - |A ∪ B|) / |C|` with `C` the smallest
/// enclosing box. Lies in `(-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union, hull) = overlap_areas(a, b);
    // rounding can leave the hull a hair below the union
    inter / union - ((hull - union) / hull).max(0.0)
}

/// GIoU together with its gradient with respect to `a`'s `[cx, cy, w, h]`.
///
/// The gradient is exact wherever GIoU is differentiable; on the measure-zero
/// set where edges coincide a one-sided derivative is returned.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();

    // Intersection extents and which of `a`'s edges bound them.
    let ix0_a = ax0 >= bx0;
    let ix1_a = ax1 <= bx1;
    let iy0_a = ay0 >= by0;
    let iy1_a = ay1 <= by1;
    let iw_raw = ax1.min(bx1) - ax0.max(bx0);
    let ih_raw = ay1.min(by1) - ay0.max(by0);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;

    let hx0_a = ax0 <= bx0;
    let hx1_a = ax1 >= bx1;
    let hy0_a = ay0 <= by0;
    let hy1_a = ay1 >= by1;
    let hw = ax1.max(bx1) - ax0.min(bx0);
    let hh = ay1.max(by1) - ay0.min(by0);
    let hull = hw * hh;

    let union = corner_area(a) + corner_area(b) - inter;
    let value = inter / union - ((hull - union) / hull).max(0.0);

    // d/d(edge) for edges x0, x1, y0, y1 of `a`.
    let flag = |c: bool| if c { 1.0 } else { 0.0 };
    let iw_pos = flag(iw_raw > 0.0 && ih_raw > 0.0);
    let d_iw = [-flag(ix0_a) * iw_pos, flag(ix1_a) * iw_pos, 0.0, 0.0];
    let d_ih = [0.0, 0.0, -flag(iy0_a) * iw_pos, flag(iy1_a) * iw_pos];
    let d_hw = [-flag(hx0_a), flag(hx1_a), 0.0, 0.0];
    let d_hh = [0.0, 0.0, -flag(hy0_a), flag(hy1_a)];
    let (aw, ah) = (a.w(), a.h());
    let d_area = [-ah, ah, -aw, aw];

    // value = I/U - 1 + U/C
    let mut d_edges = [0.0; 4];
    for k in 0..4 {
        let d_inter = d_iw[k] * ih + iw * d_ih[k];
        let d_union = d_area[k] - d_inter;
        let d_hull = d_hw[k] * hh + hw * d_hh[k];
        d_edges[k] = (d_inter * union - inter * d_union) / (union * union)
            + (d_union * hull - union * d_hull) / (hull * hull);
    }
    // edges: x0 = cx - w/2, x1 = cx + w/2, y0 = cy - h/2, y1 = cy + h/2
    let grad = [
        d_edges[0] + d_edges[1],
        d_edges[2] + d_edges[3],
        0.5 * (d_edges[1] - d_edges[0]),
        0.5 * (d_edges[3] - d_edges[2]),
    ];
    (value, grad)
}

/// Displacement from a pixel to a box center in polar form.
///
/// The first coordinate moves by `r·sin θ` and the second by `r·cos θ`.
/// With `(u, v)` pixel addressing that means the row offset is `r·sin θ` and
/// the column offset is `r·cos θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarOffset {
    pub r: f64,
    pub theta: f64,
}

impl PolarOffset {
    /// Encodes the displacement `to - from`; zero displacement maps to
    /// `r = 0, θ = 0`.
    pub fn encode(from: (f64, f64), to: (f64, f64)) -> Self {
        let d0 = to.0 - from.0;
        let d1 = to.1 - from.1;
        let r = d0.hypot(d1);
        if r == 0.0 {
            return Self { r: 0.0, theta: 0.0 };
        }
        Self {
            r,
            theta: wrap_angle(d0.atan2(d1)),
        }
    }

    /// Applies the displacement to `from`.
    pub fn decode(&self, from: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (from.0 + self.r * s, from.1 + self.r * c)
    }
}

/// Maps an angle to `[0, 2π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    // rem_euclid can return TAU itself for tiny negative inputs.
    if t >= TAU {
        0.0
    } else {
        t
    }
}
