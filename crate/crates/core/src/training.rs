//! Area-clipped field losses, the imitation and fine-tuning objectives, a
//! differentiable soft vote, and the optimization loops.

use crate::boxfield::{center_bin, clip_areas, size_bin, AreaMask, PixelPrediction, RelationalBoxField, VoteError};
use crate::geometry::{giou_with_grad, BBox};
use crate::mdp::{is_terminate, MdpAction, DEFAULT_TERMINATE_THRESHOLD};
use crate::model::{FieldGrads, FieldPair, FieldPairGrads, ModelError, PredictorParams};
use crate::scenes::Scene;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("no hand in the training set holds an object")]
    NoLinkedHands,
    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
        }
    }
}

/// A supervised pixel set. Pixels of an area with a target are trained to
/// point at it with confidence 1; pixels of an area without one get
/// confidence 0 and no localization loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedArea {
    pub mask: AreaMask,
    pub target: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    /// Localization part of `total`.
    pub loc: f64,
    /// Confidence part of `total`.
    pub conf: f64,
    /// Mean per-pixel loss of each area after clipping; `None` for areas
    /// clipped to nothing.
    pub area_means: Vec<Option<f64>>,
    pub total: f64,
    /// Every area was clipped to nothing; the loss is 0.
    pub all_empty: bool,
}

fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    let a = x.abs();
    if a < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (a - 0.5 * beta, x.signum())
    }
}

const CONF_EPS: f64 = 1e-12;

/// Focal loss of confidence `c` against a binary target, and its derivative
/// with respect to `c`.
fn focal(c: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let y = if target { 1.0 } else { 0.0 };
    if c == y {
        return (0.0, 0.0);
    }
    let c = c.clamp(CONF_EPS, 1.0 - CONF_EPS);
    if target {
        let q = 1.0 - c;
        let l = -alpha * q.powf(gamma) * c.ln();
        let d = alpha * (gamma * q.powf(gamma - 1.0) * c.ln() - q.powf(gamma) / c);
        (l, d)
    } else {
        let l = -(1.0 - alpha) * c.powf(gamma) * (1.0 - c).ln();
        let d = -(1.0 - alpha) * (gamma * c.powf(gamma - 1.0) * (1.0 - c).ln() - c.powf(gamma) / (1.0 - c));
        (l, d)
    }
}

/// Localization loss of one pixel and its gradient `(r, θ, h, w)`.
fn pixel_loc(p: &PixelPrediction, t: &PixelPrediction, dims: (f64, f64, f64), beta: f64) -> (f64, [f64; 4]) {
    let (height, width, diag) = dims;
    let (ps, pc) = p.theta.sin_cos();
    let (ts, tc) = t.theta.sin_cos();
    let (lr, gr) = smooth_l1((p.r - t.r) / diag, beta);
    let (ls, gs) = smooth_l1(ps - ts, beta);
    let (lc, gc) = smooth_l1(pc - tc, beta);
    let (lh, gh) = smooth_l1((p.h - t.h) / height, beta);
    let (lw, gw) = smooth_l1((p.w - t.w) / width, beta);
    (
        lr + ls + lc + lh + lw,
        [gr / diag, gs * pc - gc * ps, gh / height, gw / width],
    )
}

/// Loss of one field over supervised areas, with its gradient with respect
/// to the field outputs.
///
/// Areas are first clipped so that only pixels covered by exactly one area
/// remain. Each surviving area contributes the mean of its per-pixel losses
/// and the total is the mean over surviving areas, so a small area weighs as
/// much as a large one.
pub fn field_loss_with_grad(pred: &RelationalBoxField, areas: &[SupervisedArea], cfg: &LossConfig) -> (LossBreakdown, FieldGrads) {
    let (height, width) = pred.grid();
    let mut grads = FieldGrads::zeros(height * width);
    let masks: Vec<AreaMask> = areas.iter().map(|a| a.mask.clone()).collect();
    let clipped = clip_areas(&masks);
    let live = clipped.iter().filter(|m| !m.is_empty()).count();
    let mut out = LossBreakdown {
        area_means: vec![None; areas.len()],
        ..Default::default()
    };
    if live == 0 {
        if !areas.is_empty() {
            log::warn!("all {} supervised areas clipped to nothing", areas.len());
        }
        out.all_empty = true;
        return (out, grads);
    }
    let dims = (height as f64, width as f64, (height as f64).hypot(width as f64));
    for (i, (mask, area)) in clipped.iter().zip(areas).enumerate() {
        if mask.is_empty() {
            continue;
        }
        let k = mask.len() as f64;
        let scale = 1.0 / (k * live as f64);
        let (mut loc_sum, mut conf_sum) = (0.0, 0.0);
        for &(u, v) in mask.pixels() {
            let idx = pred.index(u, v);
            let p = pred.get(u, v);
            let (lc, dc) = focal(p.c, area.target.is_some(), cfg.focal_alpha, cfg.focal_gamma);
            conf_sum += lc;
            grads.c[idx] += dc * scale;
            if let Some(t) = &area.target {
                let tp = PixelPrediction::pointing_at(u, v, t, 1.0);
                let (l, g) = pixel_loc(&p, &tp, dims, cfg.smooth_l1_beta);
                loc_sum += l;
                grads.r[idx] += g[0] * scale;
                grads.theta[idx] += g[1] * scale;
                grads.h[idx] += g[2] * scale;
                grads.w[idx] += g[3] * scale;
            }
        }
        out.area_means[i] = Some((loc_sum + conf_sum) / k);
        out.loc += loc_sum / k / live as f64;
        out.conf += conf_sum / k / live as f64;
    }
    out.total = out.loc + out.conf;
    (out, grads)
}

pub fn field_loss(pred: &RelationalBoxField, areas: &[SupervisedArea], cfg: &LossConfig) -> LossBreakdown {
    field_loss_with_grad(pred, areas, cfg).0
}

/// Hand areas (targeting the held object, if any) plus the background
/// outside every hand, supervised to zero confidence.
pub fn hand_areas(scene: &Scene) -> Vec<SupervisedArea> {
    let (h, w) = (scene.height(), scene.width());
    let mut areas: Vec<SupervisedArea> = scene
        .hands
        .iter()
        .enumerate()
        .map(|(i, b)| SupervisedArea {
            mask: AreaMask::from_box(b, h, w),
            target: scene.linked_object(i).copied(),
        })
        .collect();
    areas.push(SupervisedArea {
        mask: AreaMask::complement_of_boxes(&scene.hands, h, w),
        target: None,
    });
    areas
}

/// Object areas, each targeting itself, plus the background outside every
/// object.
pub fn object_areas(scene: &Scene) -> Vec<SupervisedArea> {
    let (h, w) = (scene.height(), scene.width());
    let mut areas: Vec<SupervisedArea> = scene
        .objects
        .iter()
        .map(|b| SupervisedArea {
            mask: AreaMask::from_box(b, h, w),
            target: Some(*b),
        })
        .collect();
    areas.push(SupervisedArea {
        mask: AreaMask::complement_of_boxes(&scene.objects, h, w),
        target: None,
    });
    areas
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct IlBreakdown {
    pub ho: LossBreakdown,
    pub oo: LossBreakdown,
    pub total: f64,
}

/// Imitation objective: hand-to-object field loss over the hand areas plus
/// refinement field loss over the object areas.
pub fn il_loss_with_grad(fields: &FieldPair, scene: &Scene, cfg: &LossConfig) -> (IlBreakdown, FieldPairGrads) {
    let (ho, gho) = field_loss_with_grad(&fields.ho, &hand_areas(scene), cfg);
    let (oo, goo) = field_loss_with_grad(&fields.oo, &object_areas(scene), cfg);
    let total = ho.total + oo.total;
    (IlBreakdown { ho, oo, total }, FieldPairGrads { ho: gho, oo: goo })
}

pub fn il_loss(fields: &FieldPair, scene: &Scene, cfg: &LossConfig) -> IlBreakdown {
    il_loss_with_grad(fields, scene, cfg).0
}

/// Softmax-weighted expectation over one histogram, with the sensitivity of
/// the result to each bin score.
struct SoftHistogram {
    value: Vec<f64>,
    /// `sens[k][j]`: derivative of output component `j` with respect to the
    /// score of bin `k`.
    sens: Vec<Vec<f64>>,
}

fn soft_histogram(scores: &[f64], coords: impl Fn(usize) -> Vec<f64>, dims: usize, temperature: f64) -> Option<SoftHistogram> {
    let smax = scores.iter().cloned().fold(0.0, f64::max);
    if smax <= 0.0 {
        return None;
    }
    let e: Vec<f64> = scores
        .iter()
        .map(|&s| if s > 0.0 { ((s - smax) / temperature).exp() } else { 0.0 })
        .collect();
    let z: f64 = scores.iter().zip(&e).map(|(s, e)| s * e).sum();
    let mut value = vec![0.0; dims];
    for (k, (&s, &ek)) in scores.iter().zip(&e).enumerate() {
        if s > 0.0 {
            for (o, x) in value.iter_mut().zip(coords(k)) {
                *o += s * ek / z * x;
            }
        }
    }
    let sens = scores
        .iter()
        .zip(&e)
        .enumerate()
        .map(|(k, (&s, &ek))| {
            if s > 0.0 {
                let f = ek * (1.0 + s / temperature) / z;
                coords(k).iter().zip(&value).map(|(x, o)| (x - o) * f).collect()
            } else {
                vec![0.0; dims]
            }
        })
        .collect();
    Some(SoftHistogram { value, sens })
}

/// Differentiable relaxation of [`crate::boxfield::vote`].
///
/// Each histogram bin `k` with score `S_k` gets weight proportional to
/// `S_k · exp(S_k / τ)`; the box is the weighted mean of the bin positions.
/// As `τ → 0` this tends to the hard vote when the argmax is unique; as
/// `τ → ∞` it tends to the score-weighted mean of the bins. Gradients flow
/// through the confidences only: bin membership is piecewise constant in
/// the geometric outputs.
pub struct SoftVote {
    pub bbox: BBox,
    area: AreaMask,
    /// Per area pixel: `(center bin, width bin, height bin)`.
    bins: Vec<(Option<usize>, Option<usize>, Option<usize>)>,
    center: SoftHistogram,
    widths: SoftHistogram,
    heights: SoftHistogram,
    grid: (usize, usize),
}

impl SoftVote {
    pub fn new(field: &RelationalBoxField, area: &AreaMask, temperature: f64) -> Result<Self, VoteError> {
        let (height, width) = field.grid();
        if area.grid() != field.grid() {
            return Err(VoteError::GridMismatch {
                area: area.grid(),
                field: field.grid(),
            });
        }
        if area.is_empty() {
            return Err(VoteError::EmptyArea);
        }
        let mut cs = vec![0.0; height * width];
        let mut ws = vec![0.0; width];
        let mut hs = vec![0.0; height];
        let mut bins = Vec::with_capacity(area.len());
        let [_, _, hp, wp, cp] = field.planes();
        for &(u, v) in area.pixels() {
            let i = field.index(u, v);
            let (row, col) = field.predicted_center(u, v);
            let b = (
                center_bin(row, col, height, width),
                size_bin(wp[i], width),
                size_bin(hp[i], height),
            );
            let c = cp[i];
            if let Some(k) = b.0 {
                cs[k] += c;
            }
            if let Some(k) = b.1 {
                ws[k] += c;
            }
            if let Some(k) = b.2 {
                hs[k] += c;
            }
            bins.push(b);
        }
        let center = soft_histogram(&cs, |k| vec![(k % width) as f64, (k / width) as f64], 2, temperature)
            .ok_or(VoteError::AllVotesDiscarded)?;
        let widths = soft_histogram(&ws, |k| vec![(k + 1) as f64], 1, temperature).ok_or(VoteError::AllVotesDiscarded)?;
        let heights = soft_histogram(&hs, |k| vec![(k + 1) as f64], 1, temperature).ok_or(VoteError::AllVotesDiscarded)?;
        let bbox = BBox::new(center.value[0], center.value[1], widths.value[0], heights.value[0])
            .expect("weighted mean of valid bins");
        Ok(Self {
            bbox,
            area: area.clone(),
            bins,
            center,
            widths,
            heights,
            grid: (height, width),
        })
    }

    /// Adds `upstream · d bbox / d c` to `grad_c` (one entry per grid pixel),
    /// where `upstream` is the gradient with respect to `(cx, cy, w, h)`.
    pub fn backprop(&self, upstream: [f64; 4], grad_c: &mut [f64]) {
        let width = self.grid.1;
        for (&(u, v), b) in self.area.pixels().iter().zip(&self.bins) {
            let mut g = 0.0;
            if let Some(k) = b.0 {
                g += upstream[0] * self.center.sens[k][0] + upstream[1] * self.center.sens[k][1];
            }
            if let Some(k) = b.1 {
                g += upstream[2] * self.widths.sens[k][0];
            }
            if let Some(k) = b.2 {
                g += upstream[3] * self.heights.sens[k][0];
            }
            grad_c[u * width + v] += g;
        }
    }

    fn fingerprint<H: Hasher>(&self, state: &mut H) {
        self.area.pixels().hash(state);
        self.bins.hash(state);
    }
}

pub fn soft_vote(field: &RelationalBoxField, area: &AreaMask, temperature: f64) -> Result<BBox, VoteError> {
    SoftVote::new(field, area, temperature).map(|s| s.bbox)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlObjective {
    /// Number of soft-vote steps.
    pub horizon: usize,
    pub discount: f64,
    pub temperature: f64,
    pub terminate_threshold: f64,
}

impl Default for RlObjective {
    fn default() -> Self {
        Self {
            horizon: 5,
            discount: 1.0,
            temperature: 2.0,
            terminate_threshold: DEFAULT_TERMINATE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RlBreakdown {
    pub aux_ho: f64,
    pub aux_oo: f64,
    /// Localization and confidence parts of the two auxiliary terms.
    pub aux_loc: f64,
    pub aux_conf: f64,
    /// `Σ_t γ^t (1 − GIoU_t)`.
    pub reward_term: f64,
    pub total: f64,
    /// GIoU of each soft-vote estimate.
    pub gious: Vec<f64>,
    pub terminated: bool,
    /// Hash of every discrete choice made during the rollout (areas, bin
    /// assignments, step count). Equal fingerprints mean the loss is smooth
    /// between the two parameter settings.
    pub fingerprint: u64,
}

/// Fine-tuning objective for one hand with a known object: auxiliary field
/// losses on the hand and object areas plus the discounted `1 − GIoU` of a
/// soft-vote rollout of up to `horizon` steps. The rollout stops before a
/// terminate action, which contributes no term.
pub fn rl_loss_with_grad(
    fields: &FieldPair,
    hand: &BBox,
    ground_truth: &BBox,
    objective: &RlObjective,
    cfg: &LossConfig,
) -> Result<(RlBreakdown, FieldPairGrads), VoteError> {
    let (height, width) = fields.ho.grid();
    let hand_area = SupervisedArea {
        mask: AreaMask::from_box(hand, height, width),
        target: Some(*ground_truth),
    };
    let obj_area = SupervisedArea {
        mask: AreaMask::from_box(ground_truth, height, width),
        target: Some(*ground_truth),
    };
    let (aux_ho, mut gho) = field_loss_with_grad(&fields.ho, &[hand_area], cfg);
    let (aux_oo, mut goo) = field_loss_with_grad(&fields.oo, &[obj_area], cfg);
    let mut out = RlBreakdown {
        aux_ho: aux_ho.total,
        aux_oo: aux_oo.total,
        aux_loc: aux_ho.loc + aux_oo.loc,
        aux_conf: aux_ho.conf + aux_oo.conf,
        ..Default::default()
    };
    let mut hasher = DefaultHasher::new();
    let mut base = *hand;
    let mut weight = 1.0;
    for t in 0..objective.horizon {
        let field = if t == 0 { &fields.ho } else { &fields.oo };
        let area = AreaMask::from_box(&base, height, width);
        let sv = match SoftVote::new(field, &area, objective.temperature) {
            Ok(sv) => sv,
            Err(e) if t == 0 => return Err(e),
            Err(_) => break,
        };
        sv.fingerprint(&mut hasher);
        let next = sv.bbox;
        if t > 0 && is_terminate(&base, &MdpAction::between(&base, &next), objective.terminate_threshold) {
            out.terminated = true;
            break;
        }
        let (g, dg) = giou_with_grad(&next, ground_truth);
        out.gious.push(g);
        out.reward_term += weight * (1.0 - g);
        let upstream = dg.map(|d| -weight * d);
        let target = if t == 0 { &mut gho.c } else { &mut goo.c };
        sv.backprop(upstream, target);
        weight *= objective.discount;
        base = next;
    }
    out.gious.len().hash(&mut hasher);
    out.terminated.hash(&mut hasher);
    out.fingerprint = hasher.finish();
    out.total = out.aux_ho + out.aux_oo + out.reward_term;
    Ok((out, FieldPairGrads { ho: gho, oo: goo }))
}

pub fn rl_loss(
    fields: &FieldPair,
    hand: &BBox,
    ground_truth: &BBox,
    objective: &RlObjective,
    cfg: &LossConfig,
) -> Result<RlBreakdown, VoteError> {
    rl_loss_with_grad(fields, hand, ground_truth, objective, cfg).map(|r| r.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Fractions of `steps` after which the learning rate is multiplied by
    /// `decay`.
    pub milestones: Vec<f64>,
    pub decay: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::il_default()
    }
}

impl StageConfig {
    fn il_default() -> Self {
        Self {
            batch_size: 28,
            learning_rate: 1e-2,
            steps: 2000,
            milestones: vec![0.3, 0.6, 0.9],
            decay: 0.1,
        }
    }

    fn rl_default() -> Self {
        Self {
            batch_size: 48,
            learning_rate: 1e-3,
            steps: 500,
            milestones: vec![0.3, 0.6, 0.9],
            decay: 0.1,
        }
    }

    /// Learning rate in effect at `step`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| step >= (m * self.steps as f64).round() as usize)
            .count();
        self.learning_rate * self.decay.powi(passed as i32)
    }

    fn check(&self, name: &str) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config(format!("{name}.batch_size must be positive")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::Config(format!("{name}.learning_rate must be non-negative")));
        }
        if !(self.decay.is_finite() && self.decay > 0.0) {
            return Err(TrainError::Config(format!("{name}.decay must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlStageConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub milestones: Vec<f64>,
    pub decay: f64,
    pub horizon: usize,
    pub discount: f64,
    /// Soft-vote temperature.
    pub temperature: f64,
    pub terminate_threshold: f64,
    /// Update only the per-pixel heads, keeping the attention block fixed.
    pub freeze_extractor: bool,
}

impl Default for RlStageConfig {
    fn default() -> Self {
        let stage = StageConfig::rl_default();
        let objective = RlObjective::default();
        Self {
            batch_size: stage.batch_size,
            learning_rate: stage.learning_rate,
            steps: stage.steps,
            milestones: stage.milestones,
            decay: stage.decay,
            horizon: objective.horizon,
            discount: objective.discount,
            temperature: objective.temperature,
            terminate_threshold: objective.terminate_threshold,
            freeze_extractor: true,
        }
    }
}

impl RlStageConfig {
    pub fn stage(&self) -> StageConfig {
        StageConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            steps: self.steps,
            milestones: self.milestones.clone(),
            decay: self.decay,
        }
    }

    pub fn objective(&self) -> RlObjective {
        RlObjective {
            horizon: self.horizon,
            discount: self.discount,
            temperature: self.temperature,
            terminate_threshold: self.terminate_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct TrainConfig {
    pub seed: u64,
    pub il: StageConfig,
    pub rl: RlStageConfig,
    pub loss: LossConfig,
}


impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loc: f64,
    pub conf: f64,
    pub reward_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Samples dropped because the policy could not vote.
    pub skipped: usize,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(std::io::Error::other)?;
        }
        w.flush()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

struct SampleResult {
    loc: f64,
    conf: f64,
    reward_term: f64,
    total: f64,
    grad: Vec<f64>,
}

/// Runs `steps` optimizer steps; `sample` returns the loss and gradient of
/// one training item (or `None` to skip it).
fn optimize<F>(
    stage: &StageConfig,
    mut params: PredictorParams,
    n_items: usize,
    seed: u64,
    stream: u64,
    frozen_from: Option<usize>,
    sample: F,
) -> Result<(PredictorParams, TrainLog), TrainError>
where
    F: Fn(&PredictorParams, usize) -> Result<Option<SampleResult>, TrainError> + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut adam = Adam::new(params.len());
    let mut log = TrainLog::default();
    for step in 0..stage.steps {
        let batch: Vec<usize> = (0..stage.batch_size).map(|_| rng.random_range(0..n_items)).collect();
        let results: Vec<Option<SampleResult>> = batch
            .par_iter()
            .map(|&i| sample(&params, i))
            .collect::<Result<_, _>>()?;
        let mut grad = vec![0.0; params.len()];
        let mut row = LogRow {
            step,
            loc: 0.0,
            conf: 0.0,
            reward_term: 0.0,
            total: 0.0,
        };
        let mut used = 0usize;
        for r in results.iter() {
            let Some(r) = r else {
                log.skipped += 1;
                continue;
            };
            used += 1;
            row.loc += r.loc;
            row.conf += r.conf;
            row.reward_term += r.reward_term;
            row.total += r.total;
            for (g, x) in grad.iter_mut().zip(&r.grad) {
                *g += x;
            }
        }
        if used == 0 {
            continue;
        }
        let n = used as f64;
        row.loc /= n;
        row.conf /= n;
        row.reward_term /= n;
        row.total /= n;
        if !row.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss { batch: step });
        }
        for g in &mut grad {
            *g /= n;
        }
        if let Some(start) = frozen_from {
            grad[start..].fill(0.0);
        }
        adam.step(&mut params.values, &grad, stage.learning_rate_at(step));
        log.rows.push(row);
    }
    params.snap_to_f32();
    Ok((params, log))
}

/// Imitation learning on every scene in `scenes`.
pub fn train_il(config: &TrainConfig, scenes: &[&Scene], params: PredictorParams) -> Result<(PredictorParams, TrainLog), TrainError> {
    config.il.check("il")?;
    if scenes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let loss = config.loss;
    optimize(&config.il, params, scenes.len(), config.seed, 0, None, |p, i| {
        let scene = scenes[i];
        let (fields, tape) = p.forward_tape(&scene.feature)?;
        let (b, g) = il_loss_with_grad(&fields, scene, &loss);
        Ok(Some(SampleResult {
            loc: b.ho.loc + b.oo.loc,
            conf: b.ho.conf + b.oo.conf,
            reward_term: 0.0,
            total: b.total,
            grad: p.backward(&tape, &g)?,
        }))
    })
}

/// Fine-tuning on every hand that holds an object in `scenes`.
pub fn train_rl(config: &TrainConfig, scenes: &[&Scene], params: PredictorParams) -> Result<(PredictorParams, TrainLog), TrainError> {
    let stage = config.rl.stage();
    stage.check("rl")?;
    if !(config.rl.temperature > 0.0) {
        return Err(TrainError::Config("rl.temperature must be positive".into()));
    }
    if scenes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let items: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.hands.len()).filter(|&h| s.links[h].is_some()).map(move |h| (si, h)))
        .collect();
    if items.is_empty() {
        return Err(TrainError::NoLinkedHands);
    }
    let frozen = config.rl.freeze_extractor.then(|| params.offsets().attention_start);
    let loss = config.loss;
    let objective = config.rl.objective();
    optimize(&stage, params, items.len(), config.seed, 1, frozen, |p, i| {
        let (si, hi) = items[i];
        let scene = scenes[si];
        let (fields, tape) = p.forward_tape(&scene.feature)?;
        let gt = scene.linked_object(hi).expect("item has a link");
        match rl_loss_with_grad(&fields, &scene.hands[hi], gt, &objective, &loss) {
            Ok((b, g)) => Ok(Some(SampleResult {
                loc: b.aux_loc,
                conf: b.aux_conf,
                reward_term: b.reward_term,
                total: b.total,
                grad: p.backward(&tape, &g)?,
            })),
            Err(_) => Ok(None),
        }
    })
}
