//! Relational box fields and pixel-wise weighted voting.
//!
//! A [`RelationalBoxField`] assigns every pixel of an `H × W` grid a predicted
//! box (polar offset to the box center, width, height) and a confidence.
//! Voting over an [`AreaMask`] bins each pixel's prediction, weights it by its
//! confidence and independently takes the best center cell, width bin and
//! height bin.

use crate::geometry::{BBox, PolarOffset};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("pixel ({u}, {v}) outside {height}x{width} grid")]
    OutOfGrid {
        u: usize,
        v: usize,
        height: usize,
        width: usize,
    },
    #[error("pixel ({u}, {v}) has out-of-range {channel} = {value}")]
    OutOfRange {
        u: usize,
        v: usize,
        channel: &'static str,
        value: f64,
    },
    #[error("channel length {got} does not match grid size {expected}")]
    ChannelLength { expected: usize, got: usize },
    #[error("grid must be non-empty")]
    EmptyGrid,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoteError {
    #[error("voting area is empty")]
    EmptyArea,
    #[error("every vote fell off the grid or carried zero confidence")]
    AllVotesDiscarded,
    #[error("area grid {area:?} does not match field grid {field:?}")]
    GridMismatch {
        area: (usize, usize),
        field: (usize, usize),
    },
}

/// One pixel's prediction: polar offset to the related box center, its
/// height and width, and a confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPrediction {
    pub r: f64,
    pub theta: f64,
    pub h: f64,
    pub w: f64,
    pub c: f64,
}

impl PixelPrediction {
    /// Prediction at pixel `(u, v)` pointing at `target`.
    pub fn pointing_at(u: usize, v: usize, target: &BBox, c: f64) -> Self {
        let p = PolarOffset::encode((u as f64, v as f64), (target.cy(), target.cx()));
        Self {
            r: p.r,
            theta: p.theta,
            h: target.h(),
            w: target.w(),
            c,
        }
    }
}

/// Dense per-pixel box predictions over an `height × width` grid, stored as
/// five row-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalBoxField {
    height: usize,
    width: usize,
    pub(crate) r: Vec<f64>,
    pub(crate) theta: Vec<f64>,
    pub(crate) h: Vec<f64>,
    pub(crate) w: Vec<f64>,
    pub(crate) c: Vec<f64>,
}

impl RelationalBoxField {
    /// Field with zero confidence and unit-size, zero-offset predictions.
    pub fn new(height: usize, width: usize) -> Result<Self, FieldError> {
        if height == 0 || width == 0 {
            return Err(FieldError::EmptyGrid);
        }
        let n = height * width;
        Ok(Self {
            height,
            width,
            r: vec![0.0; n],
            theta: vec![0.0; n],
            h: vec![1.0; n],
            w: vec![1.0; n],
            c: vec![0.0; n],
        })
    }

    /// Builds a field from planes in `(r, θ, h, w, c)` order, validating
    /// every record.
    pub fn from_planes(
        height: usize,
        width: usize,
        planes: [Vec<f64>; 5],
    ) -> Result<Self, FieldError> {
        if height == 0 || width == 0 {
            return Err(FieldError::EmptyGrid);
        }
        let n = height * width;
        for p in &planes {
            if p.len() != n {
                return Err(FieldError::ChannelLength {
                    expected: n,
                    got: p.len(),
                });
            }
        }
        let [r, theta, h, w, c] = planes;
        let field = Self {
            height,
            width,
            r,
            theta,
            h,
            w,
            c,
        };
        field.validate()?;
        Ok(field)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        u * self.width + v
    }

    pub fn get(&self, u: usize, v: usize) -> PixelPrediction {
        let i = self.index(u, v);
        PixelPrediction {
            r: self.r[i],
            theta: self.theta[i],
            h: self.h[i],
            w: self.w[i],
            c: self.c[i],
        }
    }

    pub fn set(&mut self, u: usize, v: usize, p: PixelPrediction) -> Result<(), FieldError> {
        if u >= self.height || v >= self.width {
            return Err(FieldError::OutOfGrid {
                u,
                v,
                height: self.height,
                width: self.width,
            });
        }
        self.check_record(u, v, &p)?;
        let i = self.index(u, v);
        self.r[i] = p.r;
        self.theta[i] = p.theta;
        self.h[i] = p.h;
        self.w[i] = p.w;
        self.c[i] = p.c;
        Ok(())
    }

    pub fn confidence(&self) -> &[f64] {
        &self.c
    }

    /// Overwrites one confidence value, clamped into `[0, 1]`.
    pub fn set_confidence(&mut self, u: usize, v: usize, c: f64) {
        let i = self.index(u, v);
        self.c[i] = c.clamp(0.0, 1.0);
    }

    /// Planes in `(r, θ, h, w, c)` order.
    pub fn planes(&self) -> [&[f64]; 5] {
        [&self.r, &self.theta, &self.h, &self.w, &self.c]
    }

    /// Predicted box center of pixel `(u, v)` as `(row, col)`.
    #[inline]
    pub fn predicted_center(&self, u: usize, v: usize) -> (f64, f64) {
        let i = self.index(u, v);
        let (s, c) = self.theta[i].sin_cos();
        (u as f64 + self.r[i] * s, v as f64 + self.r[i] * c)
    }

    /// The box predicted by pixel `(u, v)`.
    pub fn predicted_box(&self, u: usize, v: usize) -> BBox {
        let i = self.index(u, v);
        let (row, col) = self.predicted_center(u, v);
        BBox::new(col, row, self.w[i], self.h[i]).expect("field invariants guarantee a valid box")
    }

    fn check_record(&self, u: usize, v: usize, p: &PixelPrediction) -> Result<(), FieldError> {
        let bad = |channel, value| Err(FieldError::OutOfRange { u, v, channel, value });
        if !(p.r.is_finite() && p.r >= 0.0) {
            return bad("r", p.r);
        }
        if !p.theta.is_finite() {
            return bad("theta", p.theta);
        }
        if !(p.w > 0.0 && p.w <= self.width as f64) {
            return bad("w", p.w);
        }
        if !(p.h > 0.0 && p.h <= self.height as f64) {
            return bad("h", p.h);
        }
        if !(0.0..=1.0).contains(&p.c) {
            return bad("c", p.c);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        for u in 0..self.height {
            for v in 0..self.width {
                self.check_record(u, v, &self.get(u, v))?;
            }
        }
        Ok(())
    }
}

/// A set of grid pixels, kept sorted in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AreaMask {
    height: usize,
    width: usize,
    pixels: Vec<(usize, usize)>,
}

impl AreaMask {
    pub fn from_pixels(
        height: usize,
        width: usize,
        pixels: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, FieldError> {
        let mut px: Vec<(usize, usize)> = pixels.into_iter().collect();
        if let Some(&(u, v)) = px.iter().find(|(u, v)| *u >= height || *v >= width) {
            return Err(FieldError::OutOfGrid {
                u,
                v,
                height,
                width,
            });
        }
        px.sort_unstable();
        px.dedup();
        Ok(Self {
            height,
            width,
            pixels: px,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: Vec::new(),
        }
    }

    /// All pixels with rows in `rows` and columns in `cols`, clipped to the grid.
    pub fn rect(
        height: usize,
        width: usize,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Self {
        let rows = rows.start.min(height)..rows.end.min(height);
        let cols = cols.start.min(width)..cols.end.min(width);
        let pixels = rows
            .flat_map(|u| cols.clone().map(move |v| (u, v)))
            .collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    /// Pixels whose centers lie inside `b` (half-open on the far edges).
    /// Along an axis where the box is thinner than one pixel, the nearest
    /// pixel row or column is used instead.
    pub fn from_box(b: &BBox, height: usize, width: usize) -> Self {
        let (x0, y0, x1, y1) = b.corners();
        let rows = axis_range(y0, y1, b.cy(), height);
        let cols = axis_range(x0, x1, b.cx(), width);
        Self::rect(height, width, rows, cols)
    }

    /// Pixels covered by no box, i.e. the complement of the union of
    /// rasterized `boxes`.
    pub fn complement_of_boxes(boxes: &[BBox], height: usize, width: usize) -> Self {
        let mut covered = vec![false; height * width];
        for b in boxes {
            for &(u, v) in Self::from_box(b, height, width).pixels() {
                covered[u * width + v] = true;
            }
        }
        let pixels = (0..height)
            .flat_map(|u| (0..width).map(move |v| (u, v)))
            .filter(|&(u, v)| !covered[u * width + v])
            .collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        self.pixels.binary_search(&(u, v)).is_ok()
    }

    /// Mean pixel position as `(row, col)`.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        if self.pixels.is_empty() {
            return None;
        }
        let n = self.pixels.len() as f64;
        let (su, sv) = self
            .pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(u, v)| (a + u as f64, b + v as f64));
        Some((su / n, sv / n))
    }
}

fn axis_range(lo: f64, hi: f64, center: f64, n: usize) -> std::ops::Range<usize> {
    let start = lo.ceil();
    let end = hi.ceil();
    if end > start {
        let s = start.max(0.0).min(n as f64) as usize;
        let e = end.max(0.0).min(n as f64) as usize;
        return s..e;
    }
    let c = center.round_ties_even();
    if c >= 0.0 && c < n as f64 {
        let c = c as usize;
        c..c + 1
    } else {
        0..0
    }
}

/// Restricts every area to the pixels covered by exactly one input area.
/// Order is preserved and results may be empty.
pub fn clip_areas(areas: &[AreaMask]) -> Vec<AreaMask> {
    let mut coverage: HashMap<(usize, usize), u32> = HashMap::new();
    for a in areas {
        for &p in &a.pixels {
            *coverage.entry(p).or_default() += 1;
        }
    }
    areas
        .iter()
        .map(|a| AreaMask {
            height: a.height,
            width: a.width,
            pixels: a
                .pixels
                .iter()
                .copied()
                .filter(|p| coverage[p] == 1)
                .collect(),
        })
        .collect()
}

/// Confidence-weighted vote histograms for one area.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteScores {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width` center scores.
    pub center: Vec<f64>,
    /// `width_scores[k]` is the score of width `k + 1`.
    pub width_scores: Vec<f64>,
    /// `height_scores[k]` is the score of height `k + 1`.
    pub height_scores: Vec<f64>,
}

impl VoteScores {
    pub fn center_at(&self, u: usize, v: usize) -> f64 {
        self.center[u * self.width + v]
    }

    /// Index of the maximum; the first one wins ties.
    fn argmax(scores: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &s) in scores.iter().enumerate() {
            if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Independent argmaxes as a box, or `None` if any histogram is empty.
    pub fn best_box(&self) -> Option<BBox> {
        let ci = Self::argmax(&self.center)?;
        let wi = Self::argmax(&self.width_scores)?;
        let hi = Self::argmax(&self.height_scores)?;
        let (u, v) = (ci / self.width, ci % self.width);
        Some(BBox::new(v as f64, u as f64, (wi + 1) as f64, (hi + 1) as f64).unwrap())
    }
}

/// Bin of a predicted size, or `None` when it rounds outside `[1, max]`.
#[inline]
pub(crate) fn size_bin(size: f64, max: usize) -> Option<usize> {
    let s = size.round_ties_even();
    if s >= 1.0 && s <= max as f64 {
        Some(s as usize - 1)
    } else {
        None
    }
}

/// Center cell of a predicted center, or `None` when it rounds off the grid.
#[inline]
pub(crate) fn center_bin(row: f64, col: f64, height: usize, width: usize) -> Option<usize> {
    let u = row.round_ties_even();
    let v = col.round_ties_even();
    if u >= 0.0 && v >= 0.0 && u < height as f64 && v < width as f64 {
        Some(u as usize * width + v as usize)
    } else {
        None
    }
}

fn check_grid(field: &RelationalBoxField, area: &AreaMask) -> Result<(), VoteError> {
    if field.grid() != area.grid() {
        return Err(VoteError::GridMismatch {
            area: area.grid(),
            field: field.grid(),
        });
    }
    if area.is_empty() {
        return Err(VoteError::EmptyArea);
    }
    Ok(())
}

/// Accumulates every area pixel's confidence into the center, width and
/// height histograms. Off-grid and out-of-range votes are dropped.
pub fn accumulate_scores(field: &RelationalBoxField, area: &AreaMask) -> VoteScores {
    let (height, width) = field.grid();
    let mut scores = VoteScores {
        height,
        width,
        center: vec![0.0; height * width],
        width_scores: vec![0.0; width],
        height_scores: vec![0.0; height],
    };
    for &(u, v) in area.pixels() {
        let i = field.index(u, v);
        let c = field.c[i];
        let (row, col) = field.predicted_center(u, v);
        if let Some(b) = center_bin(row, col, height, width) {
            scores.center[b] += c;
        }
        if let Some(b) = size_bin(field.w[i], width) {
            scores.width_scores[b] += c;
        }
        if let Some(b) = size_bin(field.h[i], height) {
            scores.height_scores[b] += c;
        }
    }
    scores
}

/// Weighted vote over `area`. Ties go to the lowest row then column, the
/// smallest width and the smallest height.
pub fn vote(field: &RelationalBoxField, area: &AreaMask) -> Result<BBox, VoteError> {
    check_grid(field, area)?;
    accumulate_scores(field, area)
        .best_box()
        .ok_or(VoteError::AllVotesDiscarded)
}

/// Confidence-weighted mean of the decoded per-pixel boxes; falls back to the
/// unweighted mean when the area carries no confidence.
pub fn aggregate_average(field: &RelationalBoxField, area: &AreaMask) -> Result<BBox, VoteError> {
    check_grid(field, area)?;
    let total: f64 = area.pixels().iter().map(|&(u, v)| field.c[field.index(u, v)]).sum();
    let uniform = total <= 0.0;
    let norm = if uniform { area.len() as f64 } else { total };
    let mut acc = [0.0; 4];
    for &(u, v) in area.pixels() {
        let weight = if uniform { 1.0 } else { field.c[field.index(u, v)] };
        let b = field.predicted_box(u, v).to_array();
        for k in 0..4 {
            acc[k] += weight * b[k];
        }
    }
    let [cx, cy, w, h] = acc.map(|a| a / norm);
    Ok(BBox::new(cx, cy, w, h).expect("mean of valid boxes is valid"))
}

/// Decoded prediction of the area pixel nearest the area centroid.
pub fn aggregate_center(field: &RelationalBoxField, area: &AreaMask) -> Result<BBox, VoteError> {
    check_grid(field, area)?;
    let (cu, cv) = area.centroid().expect("area checked non-empty");
    let mut best = area.pixels()[0];
    let mut best_d = f64::INFINITY;
    for &(u, v) in area.pixels() {
        let d = (u as f64 - cu).powi(2) + (v as f64 - cv).powi(2);
        if d < best_d {
            best_d = d;
            best = (u, v);
        }
    }
    Ok(field.predicted_box(best.0, best.1))
}

/// Strategy for turning an area of dense predictions into one box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Vote,
    Average,
    Center,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Vote, Aggregation::Average, Aggregation::Center];

    pub fn aggregate(self, field: &RelationalBoxField, area: &AreaMask) -> Result<BBox, VoteError> {
        match self {
            Aggregation::Vote => vote(field, area),
            Aggregation::Average => aggregate_average(field, area),
            Aggregation::Center => aggregate_center(field, area),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Vote => "vote",
            Aggregation::Average => "average",
            Aggregation::Center => "center",
        })
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vote" => Ok(Aggregation::Vote),
            "average" => Ok(Aggregation::Average),
            "center" => Ok(Aggregation::Center),
            other => Err(format!("unknown aggregation `{other}`")),
        }
    }
}

pub const FIELD_MAGIC: [u8; 4] = *b"RBFD";
pub const FIELD_VERSION: u32 = 1;

/// Writes the binary field dump: `magic, version, H, W` as little-endian
/// `u32`s followed by the `(r, θ, h, w, c)` planes as row-major `f32`.
pub fn write_field<W: Write>(field: &RelationalBoxField, out: W) -> std::io::Result<()> {
    crate::planes::write_planes(
        out,
        FIELD_MAGIC,
        FIELD_VERSION,
        field.height,
        field.width,
        None,
        &field.planes(),
    )
}

#[derive(Debug, Error)]
pub enum FieldIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Format(#[from] crate::planes::PlanesError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

pub fn read_field<R: Read>(input: R) -> Result<RelationalBoxField, FieldIoError> {
    let (height, width, planes) = crate::planes::read_planes(input, FIELD_MAGIC, FIELD_VERSION, Some(5))?;
    let mut it = planes.into_iter();
    let mut next = || it.next().unwrap();
    let planes = [next(), next(), next(), next(), next()];
    Ok(RelationalBoxField::from_planes(height, width, planes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    /// Field where each listed pixel points at `(row, col)` with the given
    /// width, height and confidence.
    fn field_with(
        height: usize,
        width: usize,
        votes: &[((usize, usize), (f64, f64), f64, f64, f64)],
    ) -> RelationalBoxField {
        let mut f = RelationalBoxField::new(height, width).unwrap();
        for &((u, v), (row, col), w, h, c) in votes {
            let p = PolarOffset::encode((u as f64, v as f64), (row, col));
            f.set(u, v, PixelPrediction { r: p.r, theta: p.theta, h, w, c }).unwrap();
        }
        f
    }

    /// Scores every candidate center, width and height by summing the
    /// confidences of the pixels whose rounded prediction equals it.
    fn brute_force_vote(field: &RelationalBoxField, area: &AreaMask) -> Option<BBox> {
        let (height, width) = field.grid();
        let mut best_center: Option<((usize, usize), f64)> = None;
        for cu in 0..height {
            for cv in 0..width {
                let mut s = 0.0;
                for &(u, v) in area.pixels() {
                    let p = field.get(u, v);
                    let row = (u as f64 + p.r * p.theta.sin()).round_ties_even();
                    let col = (v as f64 + p.r * p.theta.cos()).round_ties_even();
                    if row == cu as f64 && col == cv as f64 {
                        s += p.c;
                    }
                }
                if s > 0.0 && best_center.is_none_or(|(_, b)| s > b) {
                    best_center = Some(((cu, cv), s));
                }
            }
        }
        let best_size = |max: usize, pick: &dyn Fn(&PixelPrediction) -> f64| {
            let mut best: Option<(usize, f64)> = None;
            for cand in 1..=max {
                let mut s = 0.0;
                for &(u, v) in area.pixels() {
                    let p = field.get(u, v);
                    if pick(&p).round_ties_even() == cand as f64 {
                        s += p.c;
                    }
                }
                if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
                    best = Some((cand, s));
                }
            }
            best.map(|(c, _)| c)
        };
        let ((u, v), _) = best_center?;
        let w = best_size(width, &|p| p.w)?;
        let h = best_size(height, &|p| p.h)?;
        Some(bx(v as f64, u as f64, w as f64, h as f64))
    }

    fn random_field(rng: &mut ChaCha8Rng, height: usize, width: usize) -> RelationalBoxField {
        let mut f = RelationalBoxField::new(height, width).unwrap();
        // a handful of candidate boxes so that votes collide
        let targets: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(-2.0..height as f64 + 1.0),
                    rng.random_range(-2.0..width as f64 + 1.0),
                    rng.random_range(0.3..width as f64),
                    rng.random_range(0.3..height as f64),
                )
            })
            .collect();
        for u in 0..height {
            for v in 0..width {
                let (row, col, w, h) = targets[rng.random_range(0..targets.len())];
                let jitter = if rng.random_bool(0.3) { rng.random_range(-1.5..1.5) } else { 0.0 };
                let p = PolarOffset::encode((u as f64, v as f64), (row + jitter, col));
                let c = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0..5) as f64 / 4.0 };
                f.set(u, v, PixelPrediction { r: p.r, theta: p.theta, h, w, c }).unwrap();
            }
        }
        f
    }

    fn random_area(rng: &mut ChaCha8Rng, height: usize, width: usize) -> AreaMask {
        let u0 = rng.random_range(0..height);
        let v0 = rng.random_range(0..width);
        let u1 = rng.random_range(u0 + 1..=height);
        let v1 = rng.random_range(v0 + 1..=width);
        AreaMask::rect(height, width, u0..u1, v0..v1)
    }

    #[test]
    fn clip_fixtures() {
        let a = AreaMask::rect(8, 8, 0..4, 3..4);
        let b = AreaMask::rect(8, 8, 2..6, 3..4);
        let clipped = clip_areas(&[a.clone(), b.clone()]);
        assert_eq!(clipped[0].pixels(), &[(0, 3), (1, 3)]);
        assert_eq!(clipped[1].pixels(), &[(4, 3), (5, 3)]);

        let c = AreaMask::rect(8, 8, 6..8, 0..2);
        assert_eq!(clip_areas(&[a.clone(), c.clone()]), vec![a.clone(), c]);
        assert_eq!(clip_areas(std::slice::from_ref(&a)), vec![a.clone()]);
        let dup = clip_areas(&[a.clone(), a]);
        assert!(dup.iter().all(AreaMask::is_empty));
    }

    #[test]
    fn three_pixel_fixture() {
        let f = field_with(
            16,
            16,
            &[
                ((0, 0), (5.0, 5.0), 10.0, 7.0, 0.9),
                ((0, 1), (5.0, 5.0), 12.0, 7.0, 0.8),
                ((0, 2), (9.0, 9.0), 10.0, 7.0, 1.0),
            ],
        );
        let area = AreaMask::rect(16, 16, 0..1, 0..3);
        let s = accumulate_scores(&f, &area);
        assert!((s.center_at(5, 5) - 1.7).abs() < 1e-12);
        assert_eq!(s.center_at(9, 9), 1.0);
        let total: f64 = s.center.iter().sum();
        assert!(total <= 2.7 + 1e-12);

        let b = vote(&f, &area).unwrap();
        assert_eq!(b.to_array(), [5.0, 5.0, 10.0, 7.0]);
        assert_eq!(brute_force_vote(&f, &area), Some(b));
    }

    #[test]
    fn zero_confidence_scores_are_zero_and_vote_fails() {
        let f = RelationalBoxField::new(8, 8).unwrap();
        let area = AreaMask::rect(8, 8, 0..8, 0..8);
        let s = accumulate_scores(&f, &area);
        assert!(s.center.iter().chain(&s.width_scores).chain(&s.height_scores).all(|&x| x == 0.0));
        assert_eq!(vote(&f, &area), Err(VoteError::AllVotesDiscarded));
    }

    #[test]
    fn self_vote() {
        let mut f = RelationalBoxField::new(8, 8).unwrap();
        f.set(3, 4, PixelPrediction { r: 0.0, theta: 0.0, h: 2.0, w: 3.0, c: 0.6 }).unwrap();
        let s = accumulate_scores(&f, &AreaMask::rect(8, 8, 3..4, 4..5));
        assert_eq!(s.center_at(3, 4), 0.6);
    }

    #[test]
    fn off_grid_votes_are_dropped() {
        let f = field_with(8, 8, &[((0, 0), (-3.0, 2.0), 2.0, 2.0, 1.0)]);
        assert_eq!(vote(&f, &AreaMask::rect(8, 8, 0..1, 0..1)), Err(VoteError::AllVotesDiscarded));
        assert_eq!(vote(&f, &AreaMask::empty(8, 8)), Err(VoteError::EmptyArea));
        assert!(matches!(
            vote(&f, &AreaMask::rect(4, 4, 0..1, 0..1)),
            Err(VoteError::GridMismatch { .. })
        ));
    }

    #[test]
    fn unanimous_field_agrees_across_aggregators() {
        let target = bx(9.0, 6.0, 5.0, 4.0);
        let mut f = RelationalBoxField::new(16, 16).unwrap();
        let area = AreaMask::rect(16, 16, 2..7, 1..6);
        for &(u, v) in area.pixels() {
            f.set(u, v, PixelPrediction::pointing_at(u, v, &target, 0.7)).unwrap();
        }
        for agg in Aggregation::ALL {
            let b = agg.aggregate(&f, &area).unwrap();
            for (x, y) in b.to_array().iter().zip(target.to_array()) {
                assert!((x - y).abs() < 1e-9, "{agg}: {b:?}");
            }
        }
        let single = AreaMask::rect(16, 16, 3..4, 3..4);
        let expect = f.predicted_box(3, 3);
        for agg in Aggregation::ALL {
            let b = agg.aggregate(&f, &single).unwrap();
            for (x, y) in b.to_array().iter().zip(expect.to_array()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn majority_mass_wins() {
        let good = bx(4.0, 4.0, 6.0, 6.0);
        let far = bx(13.0, 12.0, 3.0, 2.0);
        let area = AreaMask::rect(16, 16, 0..2, 0..5);
        let mut f = RelationalBoxField::new(16, 16).unwrap();
        for (k, &(u, v)) in area.pixels().iter().enumerate() {
            let t = if k < 6 { &good } else { &far };
            f.set(u, v, PixelPrediction::pointing_at(u, v, t, 1.0)).unwrap();
        }
        assert_eq!(vote(&f, &area).unwrap(), good);
    }

    #[test]
    fn two_equal_clusters() {
        let a = bx(4.0, 4.0, 6.0, 6.0);
        let b = bx(12.0, 10.0, 4.0, 2.0);
        let area = AreaMask::rect(16, 16, 0..2, 0..4);
        let mut f = RelationalBoxField::new(16, 16).unwrap();
        for (k, &(u, v)) in area.pixels().iter().enumerate() {
            let t = if k % 2 == 0 { &a } else { &b };
            f.set(u, v, PixelPrediction::pointing_at(u, v, t, 0.5)).unwrap();
        }
        let avg = aggregate_average(&f, &area).unwrap();
        for (x, y) in avg.to_array().iter().zip([8.0, 7.0, 5.0, 4.0]) {
            assert!((x - y).abs() < 1e-9);
        }
        // center: row 4 < row 10; width 4 < 6; height 2 < 6
        assert_eq!(vote(&f, &area).unwrap(), bx(4.0, 4.0, 4.0, 2.0));
    }

    #[test]
    fn center_aggregator_picks_pixel_nearest_centroid() {
        let area = AreaMask::rect(16, 16, 0..3, 0..3);
        let mut f = RelationalBoxField::new(16, 16).unwrap();
        let t_mid = bx(10.0, 10.0, 3.0, 3.0);
        let t_other = bx(2.0, 2.0, 5.0, 5.0);
        for &(u, v) in area.pixels() {
            let t = if (u, v) == (1, 1) { &t_mid } else { &t_other };
            f.set(u, v, PixelPrediction::pointing_at(u, v, t, 1.0)).unwrap();
        }
        let b = aggregate_center(&f, &area).unwrap();
        assert!((b.cx() - 10.0).abs() < 1e-9 && (b.cy() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn rasterize_box_pixels() {
        let b = bx(5.0, 3.0, 4.0, 2.0); // x in [3,7), y in [2,4)
        let a = AreaMask::from_box(&b, 16, 16);
        assert_eq!(a.len(), 8);
        assert!(a.contains(2, 3) && a.contains(3, 6) && !a.contains(4, 3));
        let thin = bx(5.2, 3.4, 0.1, 0.1);
        assert_eq!(AreaMask::from_box(&thin, 16, 16).pixels(), &[(3, 5)]);
        let outside = bx(-10.0, 3.0, 2.0, 2.0);
        assert!(AreaMask::from_box(&outside, 16, 16).is_empty());
        let clipped = bx(0.0, 0.0, 4.0, 4.0);
        assert_eq!(AreaMask::from_box(&clipped, 16, 16).len(), 4);
    }

    #[test]
    fn field_rejects_out_of_range() {
        let mut f = RelationalBoxField::new(4, 4).unwrap();
        let ok = PixelPrediction { r: 1.0, theta: 0.0, h: 4.0, w: 4.0, c: 1.0 };
        assert!(f.set(0, 0, ok).is_ok());
        assert!(f.set(0, 0, PixelPrediction { w: 4.5, ..ok }).is_err());
        assert!(f.set(0, 0, PixelPrediction { h: 0.0, ..ok }).is_err());
        assert!(f.set(0, 0, PixelPrediction { c: 1.2, ..ok }).is_err());
        assert!(f.set(0, 0, PixelPrediction { r: -0.1, ..ok }).is_err());
        assert!(f.set(4, 0, ok).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_field(&mut rng, 6, 9);
        let mut buf = Vec::new();
        write_field(&f, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"RBFD");
        assert_eq!(buf.len(), 16 + 5 * 6 * 9 * 4);
        let g = read_field(buf.as_slice()).unwrap();
        assert_eq!(g.grid(), (6, 9));
        for (p, q) in f.planes().iter().zip(g.planes()) {
            for (a, b) in p.iter().zip(q) {
                assert_eq!(*a as f32 as f64, *b);
            }
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_field(bad.as_slice()).is_err());
        assert!(read_field(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn vote_matches_brute_force_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let h = rng.random_range(1..=16);
            let w = rng.random_range(1..=16);
            let f = random_field(&mut rng, h, w);
            let area = random_area(&mut rng, h, w);
            assert_eq!(vote(&f, &area).ok(), brute_force_vote(&f, &area));
        }
    }

    proptest! {
        #[test]
        fn vote_is_order_and_scale_invariant(seed in 0u64..10_000, k in 0i32..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_field(&mut rng, 12, 12);
            let area = random_area(&mut rng, 12, 12);
            let base = vote(&f, &area);

            let mut shuffled: Vec<_> = area.pixels().to_vec();
            shuffled.reverse();
            let rot = seed as usize % shuffled.len().max(1);
            shuffled.rotate_left(rot);
            let permuted = AreaMask::from_pixels(12, 12, shuffled).unwrap();
            prop_assert_eq!(&vote(&f, &permuted), &base);

            // power-of-two scaling keeps every partial sum exact
            let scale = 0.5f64.powi(k);
            let mut g = f.clone();
            for x in g.c.iter_mut() {
                *x *= scale;
            }
            prop_assert_eq!(vote(&g, &area), base);
        }

        #[test]
        fn scores_are_bounded_by_area_mass(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_field(&mut rng, 10, 7);
            let area = random_area(&mut rng, 10, 7);
            let s = accumulate_scores(&f, &area);
            let mass: f64 = area.pixels().iter().map(|&(u, v)| f.get(u, v).c).sum();
            prop_assert!(s.center.iter().all(|&x| x >= 0.0));
            prop_assert!(s.center.iter().sum::<f64>() <= mass + 1e-9);
            prop_assert!(s.width_scores.iter().sum::<f64>() <= mass + 1e-9);
            prop_assert!(s.height_scores.iter().sum::<f64>() <= mass + 1e-9);
        }

        #[test]
        fn minority_corruption_never_flips_unanimous_vote(seed in 0u64..10_000, bad_frac in 0.0..0.49f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let good = bx(
                rng.random_range(0..16) as f64,
                rng.random_range(0..16) as f64,
                rng.random_range(1..16) as f64,
                rng.random_range(1..16) as f64,
            );
            let bad = bx(
                rng.random_range(0..16) as f64,
                rng.random_range(0..16) as f64,
                rng.random_range(1..16) as f64,
                rng.random_range(1..16) as f64,
            );
            let area = random_area(&mut rng, 16, 16);
            let n = area.len();
            let mut f = RelationalBoxField::new(16, 16).unwrap();
            let conf: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = conf.iter().sum();
            let mut bad_mass = 0.0;
            for (k, &(u, v)) in area.pixels().iter().enumerate() {
                let corrupt = bad_mass + conf[k] < bad_frac * total && rng.random_bool(0.7);
                if corrupt {
                    bad_mass += conf[k];
                }
                let t = if corrupt { &bad } else { &good };
                f.set(u, v, PixelPrediction::pointing_at(u, v, t, conf[k])).unwrap();
            }
            prop_assert!(bad_mass < 0.5 * total);
            prop_assert_eq!(vote(&f, &area).unwrap(), good);
        }
    }
}
