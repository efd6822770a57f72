//! Synthetic hand/object scenes, ground-truth field rasterization, noise
//! injection, pseudo-labels and dataset persistence.
//!
//! Feature channel layout (indices into [`FeatureMap`] channels):
//!
//! | index | content |
//! |-------|---------|
//! | 0 | any-hand membership |
//! | 1 | membership in a hand holding an object |
//! | 2 | object membership |
//! | 3 | fingertip part of a holding hand |
//! | 4..9 | hand cue: `sin θ, cos θ, softplus⁻¹(r/D), logit(w/W), logit(h/H)` toward the held object |
//! | 9..14 | object cue: the same encoding toward the pixel's own object |
//! | 14, 15 | signed `(dy, dx) / D` to the nearest hand center |
//! | 16, 17 | signed `(dy, dx) / D` to the nearest object center |
//! | 18.. | Gaussian noise |
//!
//! Fingertip pixels (the fraction of a holding hand nearest the object)
//! carry the exact hand cue. The remaining wrist pixels point at the object
//! box displaced by a per-hand offset proportional to the hand-object
//! distance, so an unweighted vote over the whole hand is biased for distant
//! objects while the fingertip subset is not.

use crate::boxfield::{AreaMask, PixelPrediction, RelationalBoxField};
use crate::geometry::{BBox, PolarOffset};
use crate::mdp::FieldSource;
use crate::model::{FeatureMap, FieldChannel, ModelError, PredictorConfig, PredictorParams, FieldPair};
use crate::planes::{read_planes, write_planes, PlanesError};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const CH_HAND: usize = 0;
pub const CH_CONTACT: usize = 1;
pub const CH_OBJECT: usize = 2;
pub const CH_FINGER: usize = 3;
pub const CH_HAND_CUE: usize = 4;
pub const CH_OBJECT_CUE: usize = 9;
pub const CH_HAND_OFFSET: usize = 14;
pub const CH_OBJECT_OFFSET: usize = 16;
pub const CH_NOISE: usize = 18;

/// Smallest `r / D` written into a cue channel; keeps `softplus⁻¹` finite.
const MIN_CUE_RADIUS: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene spec infeasible: {0}")]
    SpecInfeasible(String),
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("invalid noise spec: {0}")]
    InvalidNoise(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Planes(#[from] PlanesError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset format version {0} is not supported")]
    FormatVersion(u32),
}

/// Where a held object is placed relative to its hand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementMode {
    /// Object touching or overlapping the hand (third-person footage).
    Near,
    /// Object several hand-widths away (egocentric footage).
    Far,
    /// Each hand draws far placement with the given probability.
    Mixed { far_probability: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_hands: usize,
    pub max_hands: usize,
    /// Probability that a hand holds an object.
    pub link_probability: f64,
    pub mode: PlacementMode,
    pub hand_size: (f64, f64),
    pub object_size: (f64, f64),
    /// Hand-center to object-center distance range in near mode, in pixels.
    pub near_distance: (f64, f64),
    pub far_distance: (f64, f64),
    /// Fraction of a holding hand's pixels marked as fingertips.
    pub finger_fraction: f64,
    /// Wrist offset as a fraction of the hand-object distance.
    pub wrist_bias: f64,
    pub noise_channels: usize,
    pub feature_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            min_hands: 1,
            max_hands: 3,
            link_probability: 0.8,
            mode: PlacementMode::Near,
            hand_size: (5.0, 9.0),
            object_size: (4.0, 9.0),
            near_distance: (2.0, 6.0),
            far_distance: (11.0, 16.0),
            finger_fraction: 0.4,
            wrist_bias: 0.35,
            noise_channels: 14,
            feature_noise: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn near() -> Self {
        Self::default()
    }

    pub fn far() -> Self {
        Self {
            mode: PlacementMode::Far,
            ..Self::default()
        }
    }

    pub fn feature_channels(&self) -> usize {
        CH_NOISE + self.noise_channels
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        PredictorConfig {
            feature_channels: self.feature_channels(),
            ..PredictorConfig::default()
        }
    }

    fn check(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::SpecInfeasible(m.to_string()));
        if self.height < 16 || self.width < 16 {
            return bad("grid must be at least 16x16");
        }
        if self.min_hands == 0 || self.min_hands > self.max_hands {
            return bad("hand count range must satisfy 1 <= min <= max");
        }
        let ranges = [self.hand_size, self.object_size, self.near_distance, self.far_distance];
        if ranges.iter().any(|&(a, b)| !(a.is_finite() && b.is_finite() && a <= b && a >= 0.0)) {
            return bad("ranges must be finite, non-negative and ordered");
        }
        if self.hand_size.0 < 1.0 || self.object_size.0 < 1.0 {
            return bad("box sizes must be at least one pixel");
        }
        let max_side = self.hand_size.1.max(self.object_size.1);
        if max_side >= self.height.min(self.width) as f64 {
            return bad("boxes larger than the grid");
        }
        let probs = [self.link_probability, self.finger_fraction];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if let PlacementMode::Mixed { far_probability } = self.mode {
            if !(0.0..=1.0).contains(&far_probability) {
                return bad("far probability must lie in [0, 1]");
            }
        }
        if !(self.wrist_bias.is_finite() && self.wrist_bias >= 0.0) {
            return bad("wrist bias must be non-negative");
        }
        if !(self.feature_noise.is_finite() && self.feature_noise >= 0.0) {
            return bad("feature noise must be non-negative");
        }
        Ok(())
    }
}

/// One synthetic image: boxes, links and the rendered feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub seed: u64,
    pub feature: FeatureMap,
    pub hands: Vec<BBox>,
    pub objects: Vec<BBox>,
    /// `links[i]` is the object held by hand `i`, if any.
    pub links: Vec<Option<usize>>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.feature.height()
    }

    pub fn width(&self) -> usize {
        self.feature.width()
    }

    pub fn linked_object(&self, hand: usize) -> Option<&BBox> {
        self.links.get(hand).copied().flatten().map(|o| &self.objects[o])
    }

    /// Checks link indices and that every box lies within the frame expanded
    /// by 10% on each side.
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.links.len() != self.hands.len() {
            return Err(SceneError::Invalid("one link entry per hand required".into()));
        }
        if let Some(o) = self.links.iter().flatten().find(|&&o| o >= self.objects.len()) {
            return Err(SceneError::Invalid(format!("link to missing object {o}")));
        }
        let (h, w) = (self.height() as f64, self.width() as f64);
        for b in self.hands.iter().chain(&self.objects) {
            let (x0, y0, x1, y1) = b.corners();
            if x0 < -0.1 * w || y0 < -0.1 * h || x1 > 1.1 * w || y1 > 1.1 * h {
                return Err(SceneError::Invalid(format!("box {b:?} outside the expanded frame")));
            }
        }
        Ok(())
    }

    /// Center distance between each holding hand and its object.
    pub fn link_distances(&self) -> Vec<f64> {
        self.hands
            .iter()
            .zip(&self.links)
            .filter_map(|(h, l)| l.map(|o| h.center_distance(&self.objects[o])))
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn gap(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let dx = (bx0 - ax1).max(ax0 - bx1);
    let dy = (by0 - ay1).max(ay0 - by1);
    dx.max(dy)
}

fn inside_frame(b: &BBox, height: usize, width: usize) -> bool {
    let (x0, y0, x1, y1) = b.corners();
    x0 >= 0.0 && y0 >= 0.0 && x1 <= width as f64 && y1 <= height as f64
}

fn snap(x: f64) -> f64 {
    x as f32 as f64
}

fn random_box(rng: &mut ChaCha8Rng, spec: &SceneSpec, size: (f64, f64)) -> BBox {
    let w = snap(uniform(rng, size));
    let h = snap(uniform(rng, size));
    let cx = snap(uniform(rng, (w / 2.0, spec.width as f64 - w / 2.0)));
    let cy = snap(uniform(rng, (h / 2.0, spec.height as f64 - h / 2.0)));
    BBox::new(cx, cy, w, h).unwrap()
}

struct Layout {
    hands: Vec<BBox>,
    objects: Vec<BBox>,
    links: Vec<Option<usize>>,
    /// Wrist target offset `(dx, dy)` per hand.
    wrist_offsets: Vec<(f64, f64)>,
}

fn place(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Option<Layout> {
    const TRIES: usize = 200;
    let n_hands = rng.random_range(spec.min_hands..=spec.max_hands);
    let mut hands: Vec<BBox> = Vec::new();
    for _ in 0..n_hands {
        let placed = (0..TRIES).find_map(|_| {
            let b = random_box(rng, spec, spec.hand_size);
            hands.iter().all(|o| gap(&b, o) >= 1.0).then_some(b)
        })?;
        hands.push(placed);
    }
    let mut objects: Vec<BBox> = Vec::new();
    let mut links = Vec::with_capacity(n_hands);
    let mut wrist_offsets = Vec::with_capacity(n_hands);
    for hand in &hands {
        if !rng.random_bool(spec.link_probability) {
            links.push(None);
            wrist_offsets.push((0.0, 0.0));
            continue;
        }
        let far = match spec.mode {
            PlacementMode::Near => false,
            PlacementMode::Far => true,
            PlacementMode::Mixed { far_probability } => rng.random_bool(far_probability),
        };
        let dist = if far { spec.far_distance } else { spec.near_distance };
        let obj = (0..TRIES).find_map(|_| {
            let w = snap(uniform(rng, spec.object_size));
            let h = snap(uniform(rng, spec.object_size));
            let d = uniform(rng, dist);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let cx = snap(hand.cx() + d * phi.cos());
            let cy = snap(hand.cy() + d * phi.sin());
            let b = BBox::new(cx, cy, w, h).ok()?;
            (inside_frame(&b, spec.height, spec.width) && objects.iter().all(|o| gap(&b, o) >= 2.0)).then_some(b)
        })?;
        let d = hand.center_distance(&obj);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        wrist_offsets.push((spec.wrist_bias * d * phi.cos(), spec.wrist_bias * d * phi.sin()));
        links.push(Some(objects.len()));
        objects.push(obj);
    }
    Some(Layout {
        hands,
        objects,
        links,
        wrist_offsets,
    })
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Cue encoding of a prediction from `(u, v)` toward `target`.
fn cue(u: usize, v: usize, target: &BBox, height: usize, width: usize) -> [f64; 5] {
    let diag = (height as f64).hypot(width as f64);
    let p = PolarOffset::encode((u as f64, v as f64), (target.cy(), target.cx()));
    let (s, c) = p.theta.sin_cos();
    let w = (target.w() / width as f64).clamp(1e-6, 1.0 - 1e-6);
    let h = (target.h() / height as f64).clamp(1e-6, 1.0 - 1e-6);
    [
        s,
        c,
        softplus_inv((p.r / diag).max(MIN_CUE_RADIUS)),
        logit(w),
        logit(h),
    ]
}

/// Index of the box in `candidates` (by index into `boxes`) with center
/// nearest to pixel `(u, v)`; ties go to the lowest index.
fn nearest(candidates: &[usize], boxes: &[BBox], u: usize, v: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &i in candidates {
        let b = &boxes[i];
        let d = (b.cy() - u as f64).hypot(b.cx() - v as f64);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Pixels of each hand marked as fingertips: the `finger_fraction` of its
/// area with the largest projection toward the held object.
fn finger_sets(hands: &[BBox], objects: &[BBox], links: &[Option<usize>], areas: &[AreaMask], fraction: f64) -> Vec<Vec<(usize, usize)>> {
    hands
        .iter()
        .zip(links)
        .zip(areas)
        .map(|((hand, link), area)| {
            let Some(o) = link else { return Vec::new() };
            let obj = &objects[*o];
            let (dy, dx) = (obj.cy() - hand.cy(), obj.cx() - hand.cx());
            let mut px: Vec<(f64, (usize, usize))> = area
                .pixels()
                .iter()
                .map(|&(u, v)| ((u as f64 - hand.cy()) * dy + (v as f64 - hand.cx()) * dx, (u, v)))
                .collect();
            px.sort_by(|a, b| b.0.total_cmp(&a.0));
            let k = (fraction * px.len() as f64).ceil() as usize;
            let mut set: Vec<_> = px.into_iter().take(k).map(|(_, p)| p).collect();
            set.sort_unstable();
            set
        })
        .collect()
}

fn render(spec: &SceneSpec, layout: &Layout, rng: &mut ChaCha8Rng) -> FeatureMap {
    let (height, width) = (spec.height, spec.width);
    let diag = (height as f64).hypot(width as f64);
    let hand_areas: Vec<AreaMask> = layout.hands.iter().map(|b| AreaMask::from_box(b, height, width)).collect();
    let obj_areas: Vec<AreaMask> = layout.objects.iter().map(|b| AreaMask::from_box(b, height, width)).collect();
    let fingers = finger_sets(&layout.hands, &layout.objects, &layout.links, &hand_areas, spec.finger_fraction);
    let mut feature = FeatureMap::zeros(height, width, spec.feature_channels());
    let noise = Normal::new(0.0, spec.feature_noise.max(f64::MIN_POSITIVE)).unwrap();
    let all_hands: Vec<usize> = (0..layout.hands.len()).collect();
    let all_objects: Vec<usize> = (0..layout.objects.len()).collect();
    for u in 0..height {
        for v in 0..width {
            let in_hands: Vec<usize> = (0..layout.hands.len()).filter(|&i| hand_areas[i].contains(u, v)).collect();
            let holding: Vec<usize> = in_hands.iter().copied().filter(|&i| layout.links[i].is_some()).collect();
            let in_objects: Vec<usize> = (0..layout.objects.len()).filter(|&i| obj_areas[i].contains(u, v)).collect();
            let px = feature.pixel_mut(u, v);
            if !in_hands.is_empty() {
                px[CH_HAND] = 1.0;
            }
            if let Some(hi) = nearest(&holding, &layout.hands, u, v) {
                px[CH_CONTACT] = 1.0;
                let obj = &layout.objects[layout.links[hi].unwrap()];
                let target = if fingers[hi].binary_search(&(u, v)).is_ok() {
                    px[CH_FINGER] = 1.0;
                    *obj
                } else {
                    let (dx, dy) = layout.wrist_offsets[hi];
                    BBox::new(obj.cx() + dx, obj.cy() + dy, obj.w(), obj.h()).unwrap()
                };
                px[CH_HAND_CUE..CH_HAND_CUE + 5].copy_from_slice(&cue(u, v, &target, height, width));
            }
            if let Some(oi) = nearest(&in_objects, &layout.objects, u, v) {
                px[CH_OBJECT] = 1.0;
                px[CH_OBJECT_CUE..CH_OBJECT_CUE + 5].copy_from_slice(&cue(u, v, &layout.objects[oi], height, width));
            }
            if let Some(hi) = nearest(&all_hands, &layout.hands, u, v) {
                let b = &layout.hands[hi];
                px[CH_HAND_OFFSET] = (b.cy() - u as f64) / diag;
                px[CH_HAND_OFFSET + 1] = (b.cx() - v as f64) / diag;
            }
            if let Some(oi) = nearest(&all_objects, &layout.objects, u, v) {
                let b = &layout.objects[oi];
                px[CH_OBJECT_OFFSET] = (b.cy() - u as f64) / diag;
                px[CH_OBJECT_OFFSET + 1] = (b.cx() - v as f64) / diag;
            }
            for x in &mut px[CH_NOISE..] {
                *x = if spec.feature_noise > 0.0 { noise.sample(rng) } else { 0.0 };
            }
            for x in px.iter_mut() {
                *x = snap(*x);
            }
        }
    }
    feature
}

/// Generates one scene; identical `(seed, spec)` give identical scenes.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene, SceneError> {
    spec.check()?;
    const RESTARTS: usize = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..RESTARTS {
        if let Some(layout) = place(&mut rng, spec) {
            let feature = render(spec, &layout, &mut rng);
            return Ok(Scene {
                id: 0,
                seed,
                feature,
                hands: layout.hands,
                objects: layout.objects,
                links: layout.links,
            });
        }
    }
    Err(SceneError::SpecInfeasible(format!(
        "could not place boxes after {RESTARTS} attempts"
    )))
}

/// Exact hand-to-object and object refinement fields of a scene.
///
/// Pixels of a holding hand point at its object with confidence 1; object
/// pixels point at their own box with confidence 1; everything else has
/// confidence 0. Pixels shared by several areas take the target of the
/// nearest box center.
pub fn rasterize_ground_truth(scene: &Scene) -> FieldPair {
    let (height, width) = (scene.height(), scene.width());
    let mut ho = RelationalBoxField::new(height, width).unwrap();
    let mut oo = RelationalBoxField::new(height, width).unwrap();
    let hand_areas: Vec<AreaMask> = scene.hands.iter().map(|b| AreaMask::from_box(b, height, width)).collect();
    let obj_areas: Vec<AreaMask> = scene.objects.iter().map(|b| AreaMask::from_box(b, height, width)).collect();
    for u in 0..height {
        for v in 0..width {
            let holding: Vec<usize> = (0..scene.hands.len())
                .filter(|&i| scene.links[i].is_some() && hand_areas[i].contains(u, v))
                .collect();
            if let Some(hi) = nearest(&holding, &scene.hands, u, v) {
                let obj = scene.linked_object(hi).unwrap();
                ho.set(u, v, PixelPrediction::pointing_at(u, v, obj, 1.0)).expect("targets inside grid");
            }
            let in_obj: Vec<usize> = (0..scene.objects.len()).filter(|&i| obj_areas[i].contains(u, v)).collect();
            if let Some(oi) = nearest(&in_obj, &scene.objects, u, v) {
                oo.set(u, v, PixelPrediction::pointing_at(u, v, &scene.objects[oi], 1.0))
                    .expect("targets inside grid");
            }
        }
    }
    FieldPair { ho, oo }
}

/// Reproducible corruption applied to a pair of fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Probability that a pixel's confidence is set to zero.
    pub confidence_dropout: f64,
    /// Fraction of positive-confidence pixels whose box is displaced.
    pub corruption_fraction: f64,
    /// Displacement scale relative to the box size.
    pub corruption_magnitude: f64,
    /// Standard deviation of additive feature noise.
    pub feature_sigma: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        for (name, x) in [
            ("confidence_dropout", self.confidence_dropout),
            ("corruption_fraction", self.corruption_fraction),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return Err(SceneError::InvalidNoise(format!("{name} = {x} outside [0, 1]")));
            }
        }
        for (name, x) in [
            ("corruption_magnitude", self.corruption_magnitude),
            ("feature_sigma", self.feature_sigma),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(SceneError::InvalidNoise(format!("{name} = {x} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.confidence_dropout == 0.0 && self.corruption_fraction == 0.0 && self.feature_sigma == 0.0
    }
}

fn corrupt_field(field: &RelationalBoxField, spec: &NoiseSpec, rng: &mut ChaCha8Rng) -> RelationalBoxField {
    let mut out = field.clone();
    let (height, width) = field.grid();
    if spec.confidence_dropout > 0.0 {
        for u in 0..height {
            for v in 0..width {
                if rng.random_bool(spec.confidence_dropout) {
                    out.set_confidence(u, v, 0.0);
                }
            }
        }
    }
    if spec.corruption_fraction > 0.0 {
        let active: Vec<(usize, usize)> = (0..height)
            .flat_map(|u| (0..width).map(move |v| (u, v)))
            .filter(|&(u, v)| out.get(u, v).c > 0.0)
            .collect();
        let k = (spec.corruption_fraction * active.len() as f64).round() as usize;
        let mut chosen: Vec<usize> = sample(rng, active.len(), k).into_vec();
        chosen.sort_unstable();
        let m = spec.corruption_magnitude;
        for i in chosen {
            let (u, v) = active[i];
            let b = out.predicted_box(u, v);
            let jitter = |rng: &mut ChaCha8Rng| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
            let cx = b.cx() + jitter(rng) * b.w();
            let cy = b.cy() + jitter(rng) * b.h();
            let w = (b.w() * (1.0 + 0.5 * jitter(rng))).clamp(0.5, width as f64);
            let h = (b.h() * (1.0 + 0.5 * jitter(rng))).clamp(0.5, height as f64);
            let target = BBox::new(cx, cy, w, h).unwrap();
            let c = out.get(u, v).c;
            out.set(u, v, PixelPrediction::pointing_at(u, v, &target, c)).unwrap();
        }
    }
    out
}

/// Applies confidence dropout and box corruption to both fields. The same
/// seed always yields the same corruption.
pub fn inject_noise(fields: &FieldPair, spec: &NoiseSpec, seed: u64) -> Result<FieldPair, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ho = corrupt_field(&fields.ho, spec, &mut rng);
    rng.set_stream(1);
    let oo = corrupt_field(&fields.oo, spec, &mut rng);
    Ok(FieldPair { ho, oo })
}

/// Adds Gaussian noise of standard deviation `sigma` to every feature value.
pub fn perturb_features(feature: &FeatureMap, sigma: f64, seed: u64) -> FeatureMap {
    let mut out = feature.clone();
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sigma).unwrap();
        for x in out.data_mut() {
            *x = snap(*x + n.sample(&mut rng));
        }
    }
    out
}

/// Links each hand to the object with the nearest center; ties go to the
/// lowest object index.
pub fn pseudo_label(hands: &[BBox], objects: &[BBox]) -> Vec<Option<usize>> {
    hands
        .iter()
        .map(|h| {
            let mut best: Option<(usize, f64)> = None;
            for (i, o) in objects.iter().enumerate() {
                let d = h.center_distance(o);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            best.map(|(i, _)| i)
        })
        .collect()
}

/// Field source built from rasterized ground truth, optionally corrupted.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthFields {
    pub noise: Option<NoiseSpec>,
    pub seed: u64,
}

impl FieldSource for GroundTruthFields {
    fn fields(&self, scene: &Scene) -> Result<FieldPair, ModelError> {
        let exact = rasterize_ground_truth(scene);
        match &self.noise {
            Some(spec) if !spec.is_identity() => {
                let seed = self.seed ^ scene.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
                inject_noise(&exact, spec, seed).map_err(|e| ModelError::ShapeMismatch(e.to_string()))
            }
            _ => Ok(exact),
        }
    }
}

/// Predictor whose heads copy the scene cue channels directly: the hand
/// cue drives the hand-to-object field and the object cue the refinement
/// field, with confidences saturated on the contact and object indicators.
pub fn cue_reader(spec: &SceneSpec) -> PredictorParams {
    let mut p = PredictorParams::zeros(spec.predictor_config()).expect("valid config");
    let cues = [
        FieldChannel::SinTheta,
        FieldChannel::CosTheta,
        FieldChannel::Radius,
        FieldChannel::Width,
        FieldChannel::Height,
    ];
    for (oo, base, indicator) in [(false, CH_HAND_CUE, CH_CONTACT), (true, CH_OBJECT_CUE, CH_OBJECT)] {
        for (k, ch) in cues.iter().enumerate() {
            let head = p.head_index(oo, *ch);
            *p.head_weight_mut(head, base + k) = 1.0;
        }
        let conf = p.head_index(oo, FieldChannel::Confidence);
        *p.head_weight_mut(conf, indicator) = 20.0;
        *p.head_bias_mut(conf) = -10.0;
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub seed: u64,
    pub spec: SceneSpec,
    pub scenes: Vec<Scene>,
    pub splits: Vec<Split>,
}

/// Seed of scene `index` within a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

impl SceneDataset {
    pub fn generate(seed: u64, spec: &SceneSpec, count: usize, fractions: SplitFractions) -> Result<Self, SceneError> {
        if count == 0 {
            return Err(SceneError::SpecInfeasible("dataset must contain at least one scene".into()));
        }
        if !(fractions.train >= 0.0 && fractions.val >= 0.0 && fractions.train + fractions.val <= 1.0) {
            return Err(SceneError::SpecInfeasible("split fractions must be non-negative and sum to at most 1".into()));
        }
        let scenes = (0..count)
            .into_par_iter()
            .map(|i| {
                generate_scene(scene_seed(seed, i), spec).map(|mut s| {
                    s.id = i;
                    s
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut order: Vec<usize> = (0..count).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..count).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let n_train = (fractions.train * count as f64).round() as usize;
        let n_val = ((fractions.val * count as f64).round() as usize).min(count - n_train);
        let mut splits = vec![Split::Test; count];
        for (rank, &i) in order.iter().enumerate() {
            splits[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        Ok(Self {
            seed,
            spec: spec.clone(),
            scenes,
            splits,
        })
    }

    pub fn split(&self, which: Split) -> Vec<&Scene> {
        self.scenes
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(sc, _)| sc)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const FEATURE_MAGIC: [u8; 4] = *b"RBFT";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    format_version: u32,
    seed: u64,
    count: usize,
    spec: SceneSpec,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    id: usize,
    seed: u64,
    split: Split,
    height: usize,
    width: usize,
    hands: Vec<BBox>,
    objects: Vec<BBox>,
    links: Vec<Option<usize>>,
    feature: String,
}

pub fn feature_file_name(id: usize) -> String {
    format!("scene_{id:05}.feat")
}

pub fn write_feature<W: Write>(feature: &FeatureMap, out: W) -> std::io::Result<()> {
    let planes: Vec<Vec<f64>> = (0..feature.channels()).map(|k| feature.plane(k)).collect();
    let refs: Vec<&[f64]> = planes.iter().map(|p| p.as_slice()).collect();
    write_planes(out, FEATURE_MAGIC, FEATURE_VERSION, feature.height(), feature.width(), Some(feature.channels()), &refs)
}

pub fn read_feature<R: std::io::Read>(input: R) -> Result<FeatureMap, SceneError> {
    let (h, w, planes) = read_planes(input, FEATURE_MAGIC, FEATURE_VERSION, None)?;
    Ok(FeatureMap::from_planes(h, w, &planes)?)
}

impl SceneDataset {
    /// Writes `dataset.json`, `scenes.jsonl` and one feature sidecar per
    /// scene into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), SceneError> {
        std::fs::create_dir_all(dir)?;
        let meta = DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            seed: self.seed,
            count: self.scenes.len(),
            spec: self.spec.clone(),
        };
        let mut f = BufWriter::new(File::create(dir.join("dataset.json"))?);
        serde_json::to_writer_pretty(&mut f, &meta)?;
        f.write_all(b"\n")?;
        f.flush()?;
        let mut lines = BufWriter::new(File::create(dir.join("scenes.jsonl"))?);
        for (scene, split) in self.scenes.iter().zip(&self.splits) {
            let name = feature_file_name(scene.id);
            let rec = SceneRecord {
                id: scene.id,
                seed: scene.seed,
                split: *split,
                height: scene.height(),
                width: scene.width(),
                hands: scene.hands.clone(),
                objects: scene.objects.clone(),
                links: scene.links.clone(),
                feature: name.clone(),
            };
            serde_json::to_writer(&mut lines, &rec)?;
            lines.write_all(b"\n")?;
            let mut out = BufWriter::new(File::create(dir.join(&name))?);
            write_feature(&scene.feature, &mut out)?;
            out.flush()?;
        }
        lines.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SceneError> {
        let meta: DatasetMeta = serde_json::from_reader(BufReader::new(File::open(dir.join("dataset.json"))?))?;
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(SceneError::FormatVersion(meta.format_version));
        }
        let mut scenes = Vec::with_capacity(meta.count);
        let mut splits = Vec::with_capacity(meta.count);
        for line in BufReader::new(File::open(dir.join("scenes.jsonl"))?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SceneRecord = serde_json::from_str(&line)?;
            if rec.feature.contains(['/', '\\']) {
                return Err(SceneError::Invalid(format!("feature path {:?} escapes the dataset", rec.feature)));
            }
            let feature = read_feature(BufReader::new(File::open(dir.join(&rec.feature))?))?;
            if (feature.height(), feature.width()) != (rec.height, rec.width) {
                return Err(SceneError::Invalid(format!("scene {} feature size mismatch", rec.id)));
            }
            let scene = Scene {
                id: rec.id,
                seed: rec.seed,
                feature,
                hands: rec.hands,
                objects: rec.objects,
                links: rec.links,
            };
            scene.validate()?;
            scenes.push(scene);
            splits.push(rec.split);
        }
        if scenes.len() != meta.count {
            return Err(SceneError::Invalid(format!(
                "dataset.json lists {} scenes, scenes.jsonl has {}",
                meta.count,
                scenes.len()
            )));
        }
        Ok(Self {
            seed: meta.seed,
            spec: meta.spec,
            scenes,
            splits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxfield::vote;

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::default();
        let a = generate_scene(42, &spec).unwrap();
        let b = generate_scene(42, &spec).unwrap();
        assert_eq!(a, b);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        write_feature(&a.feature, &mut ba).unwrap();
        write_feature(&b.feature, &mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_ne!(a, generate_scene(43, &spec).unwrap());
    }

    #[test]
    fn zero_link_probability_gives_no_contact() {
        let spec = SceneSpec {
            link_probability: 0.0,
            ..SceneSpec::default()
        };
        for seed in 0..20 {
            let s = generate_scene(seed, &spec).unwrap();
            assert!(s.links.iter().all(Option::is_none));
            assert!(s.objects.is_empty());
            let gt = rasterize_ground_truth(&s);
            assert!(gt.ho.confidence().iter().all(|&c| c == 0.0));
        }
    }

    #[test]
    fn generated_scenes_respect_layout_rules() {
        for spec in [SceneSpec::near(), SceneSpec::far()] {
            for seed in 0..100 {
                let s = generate_scene(seed, &spec).unwrap();
                s.validate().unwrap();
                assert!((1..=3).contains(&s.hands.len()));
                assert!(s.objects.len() <= 3);
                for (i, a) in s.hands.iter().enumerate() {
                    for b in &s.hands[i + 1..] {
                        assert!(gap(a, b) >= 1.0);
                    }
                }
                for (i, a) in s.objects.iter().enumerate() {
                    for b in &s.objects[i + 1..] {
                        assert!(gap(a, b) >= 2.0);
                    }
                }
                assert!(s.feature.data().iter().all(|&x| x == x as f32 as f64));
            }
        }
    }

    #[test]
    fn near_mode_objects_are_closer_than_far_mode() {
        let mean = |spec: &SceneSpec| {
            let d: Vec<f64> = (0..1000).flat_map(|i| generate_scene(i, spec).unwrap().link_distances()).collect();
            d.iter().sum::<f64>() / d.len() as f64
        };
        assert!(mean(&SceneSpec::near()) < mean(&SceneSpec::far()));
    }

    #[test]
    fn undersized_spec_is_infeasible() {
        let spec = SceneSpec {
            height: 12,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(0, &spec), Err(SceneError::SpecInfeasible(_))));
        let crowded = SceneSpec {
            min_hands: 2,
            max_hands: 2,
            hand_size: (20.0, 21.0),
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(0, &crowded), Err(SceneError::SpecInfeasible(_))));
    }

    #[test]
    fn rasterize_then_vote_recovers_linked_objects() {
        for spec in [SceneSpec::near(), SceneSpec::far()] {
            for seed in 0..200 {
                let s = generate_scene(seed, &spec).unwrap();
                let gt = rasterize_ground_truth(&s);
                for (i, hand) in s.hands.iter().enumerate() {
                    let area = AreaMask::from_box(hand, s.height(), s.width());
                    match s.linked_object(i) {
                        Some(obj) => {
                            let got = vote(&gt.ho, &area).unwrap();
                            for (a, b) in got.to_array().iter().zip(obj.to_array()) {
                                assert!((a - b).abs() <= 0.5, "seed {seed}: {got:?} vs {obj:?}");
                            }
                        }
                        None => {
                            for &(u, v) in area.pixels() {
                                assert_eq!(gt.ho.get(u, v).c, 0.0);
                            }
                        }
                    }
                }
                for obj in &s.objects {
                    let area = AreaMask::from_box(obj, s.height(), s.width());
                    let got = vote(&gt.oo, &area).unwrap();
                    for (a, b) in got.to_array().iter().zip(obj.to_array()) {
                        assert!((a - b).abs() <= 0.5);
                    }
                }
            }
        }
    }

    #[test]
    fn background_has_zero_confidence() {
        let s = generate_scene(7, &SceneSpec::default()).unwrap();
        let gt = rasterize_ground_truth(&s);
        let mut boxes = s.hands.clone();
        boxes.extend(&s.objects);
        let bg = AreaMask::complement_of_boxes(&boxes, s.height(), s.width());
        assert!(!bg.is_empty());
        for &(u, v) in bg.pixels() {
            assert_eq!(gt.ho.get(u, v).c, 0.0);
            assert_eq!(gt.oo.get(u, v).c, 0.0);
        }
    }

    #[test]
    fn cue_reader_reproduces_fingertip_targets() {
        let spec = SceneSpec::near();
        let reader = cue_reader(&spec);
        let s = generate_scene(3, &spec).unwrap();
        let out = reader.forward(&s.feature).unwrap();
        for (i, hand) in s.hands.iter().enumerate() {
            let Some(obj) = s.linked_object(i) else { continue };
            for &(u, v) in AreaMask::from_box(hand, s.height(), s.width()).pixels() {
                if s.feature.pixel(u, v)[CH_FINGER] == 1.0 {
                    let b = out.ho.predicted_box(u, v);
                    for (a, t) in b.to_array().iter().zip(obj.to_array()) {
                        assert!((a - t).abs() < 1e-3, "{b:?} vs {obj:?}");
                    }
                    assert!(out.ho.get(u, v).c > 0.999);
                }
            }
        }
    }

    #[test]
    fn wrist_pixels_are_biased_for_far_objects() {
        let spec = SceneSpec::far();
        let reader = cue_reader(&spec);
        let mut biased = 0;
        for seed in 0..20 {
            let s = generate_scene(seed, &spec).unwrap();
            let out = reader.forward(&s.feature).unwrap();
            for (i, hand) in s.hands.iter().enumerate() {
                let Some(obj) = s.linked_object(i) else { continue };
                let area = AreaMask::from_box(hand, s.height(), s.width());
                if crate::geometry::iou(&vote(&out.ho, &area).unwrap(), obj) < 0.5 {
                    biased += 1;
                }
            }
        }
        assert!(biased > 0);
    }

    #[test]
    fn noise_is_reproducible_and_identity_at_zero() {
        let spec = SceneSpec {
            link_probability: 1.0,
            ..SceneSpec::default()
        };
        let s = generate_scene(11, &spec).unwrap();
        let gt = rasterize_ground_truth(&s);
        assert_eq!(inject_noise(&gt, &NoiseSpec::default(), 5).unwrap(), gt);
        let spec = NoiseSpec {
            confidence_dropout: 0.1,
            corruption_fraction: 0.4,
            corruption_magnitude: 1.0,
            feature_sigma: 0.0,
        };
        let a = inject_noise(&gt, &spec, 5).unwrap();
        assert_eq!(a, inject_noise(&gt, &spec, 5).unwrap());
        assert_ne!(a, inject_noise(&gt, &spec, 6).unwrap());
        assert!(NoiseSpec {
            confidence_dropout: 1.5,
            ..spec
        }
        .validate()
        .is_err());
    }

    #[test]
    fn corruption_hits_the_requested_fraction() {
        let s = generate_scene(2, &SceneSpec::default()).unwrap();
        let gt = rasterize_ground_truth(&s);
        let spec = NoiseSpec {
            corruption_fraction: 0.4,
            corruption_magnitude: 1.0,
            ..Default::default()
        };
        let noisy = inject_noise(&gt, &spec, 1).unwrap();
        let active: Vec<_> = (0..32)
            .flat_map(|u| (0..32).map(move |v| (u, v)))
            .filter(|&(u, v)| gt.oo.get(u, v).c > 0.0)
            .collect();
        let changed = active.iter().filter(|&&(u, v)| noisy.oo.get(u, v) != gt.oo.get(u, v)).count();
        assert_eq!(changed, (0.4 * active.len() as f64).round() as usize);
    }

    #[test]
    fn minority_corruption_leaves_the_vote_unchanged() {
        // single hand: corrupted pixels scatter, the unanimous 60% still wins
        let spec = SceneSpec {
            min_hands: 1,
            max_hands: 1,
            link_probability: 1.0,
            ..SceneSpec::default()
        };
        let noise = NoiseSpec {
            corruption_fraction: 0.4,
            corruption_magnitude: 1.0,
            ..Default::default()
        };
        for seed in 0..30 {
            let s = generate_scene(seed, &spec).unwrap();
            let gt = rasterize_ground_truth(&s);
            let noisy = inject_noise(&gt, &noise, seed).unwrap();
            let area = AreaMask::from_box(&s.hands[0], 32, 32);
            assert_eq!(vote(&noisy.ho, &area).unwrap(), vote(&gt.ho, &area).unwrap());
        }
    }

    #[test]
    fn pseudo_label_fixtures() {
        let b = |cx, cy| BBox::new(cx, cy, 2.0, 2.0).unwrap();
        assert_eq!(pseudo_label(&[b(0.0, 0.0)], &[b(3.0, 3.0)]), vec![Some(0)]);
        assert_eq!(pseudo_label(&[b(0.0, 0.0)], &[b(10.0, 0.0), b(5.0, 0.0)]), vec![Some(1)]);
        assert_eq!(pseudo_label(&[b(0.0, 0.0)], &[]), vec![None]);
        // equidistant: lowest index wins
        assert_eq!(pseudo_label(&[b(0.0, 0.0)], &[b(5.0, 0.0), b(-5.0, 0.0)]), vec![Some(0)]);
    }

    #[test]
    fn dataset_round_trip_and_disjoint_splits() {
        let dir = tempfile::tempdir().unwrap();
        let ds = SceneDataset::generate(9, &SceneSpec::default(), 20, SplitFractions::default()).unwrap();
        assert_eq!(ds.split(Split::Train).len(), 16);
        assert_eq!(ds.split(Split::Val).len(), 2);
        assert_eq!(ds.split(Split::Test).len(), 2);
        ds.save(dir.path()).unwrap();
        let back = SceneDataset::load(dir.path()).unwrap();
        assert_eq!(back.seed, ds.seed);
        assert_eq!(back.spec, ds.spec);
        assert_eq!(back.splits, ds.splits);
        for (a, b) in back.scenes.iter().zip(&ds.scenes) {
            assert_eq!((a.id, a.seed), (b.id, b.seed));
            assert_eq!(a.hands, b.hands);
            assert_eq!(a.objects, b.objects);
            assert_eq!(a.links, b.links);
            assert!(a.feature == b.feature, "feature of scene {} differs", a.id);
        }
        let again = SceneDataset::generate(9, &SceneSpec::default(), 20, SplitFractions::default()).unwrap();
        assert_eq!(again, ds);
    }
}
