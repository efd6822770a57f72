//! Tuple and plain average precision, confidence fusion, the nearest-object
//! baseline, and the evaluation and ablation harnesses.

use crate::boxfield::{AreaMask, Aggregation, RelationalBoxField, VoteError};
use crate::geometry::{giou, iou, BBox};
use crate::mdp::{rollout_fields, FieldSource, Horizon, RolloutConfig};
use crate::model::ModelError;
use crate::scenes::{pseudo_label, Scene};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// One predicted (hand, object) tuple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene: usize,
    pub hand: BBox,
    /// `None` means the hand is predicted to hold nothing.
    pub object: Option<BBox>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TupleTruth {
    pub scene: usize,
    pub hand: BBox,
    pub object: Option<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOutcome {
    /// Hand-object tuple with fused confidence.
    Contact,
    /// Hand reported without an object.
    NoContact,
    /// Object evidence too weak; no tuple is reported.
    Suppressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fusion {
    pub confidence: f64,
    pub outcome: FusionOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionThresholds {
    pub t_contact: f64,
    pub t_obj: f64,
}

impl Default for FusionThresholds {
    fn default() -> Self {
        Self {
            t_contact: 0.1,
            t_obj: 0.2,
        }
    }
}

/// Fusion rule on the mean hand-to-object confidence `s_contact` and mean
/// refinement confidence `s_obj`.
pub fn fuse_scores(s_contact: f64, s_obj: Option<f64>, thresholds: &FusionThresholds) -> Fusion {
    if s_contact < thresholds.t_contact {
        return Fusion {
            confidence: 1.0 - s_contact,
            outcome: FusionOutcome::NoContact,
        };
    }
    match s_obj {
        Some(s) if s >= thresholds.t_obj => Fusion {
            confidence: s_contact * s,
            outcome: FusionOutcome::Contact,
        },
        Some(s) => Fusion {
            confidence: s_contact * s,
            outcome: FusionOutcome::Suppressed,
        },
        None => Fusion {
            confidence: 1.0 - s_contact,
            outcome: FusionOutcome::NoContact,
        },
    }
}

fn mean_confidence(field: &RelationalBoxField, b: &BBox) -> Result<f64, VoteError> {
    let (h, w) = field.grid();
    let area = AreaMask::from_box(b, h, w);
    if area.is_empty() {
        return Err(VoteError::EmptyArea);
    }
    let c = field.confidence();
    Ok(area.pixels().iter().map(|&(u, v)| c[u * w + v]).sum::<f64>() / area.len() as f64)
}

/// Mean confidences of `ho` over the hand and `oo` over the estimate, fused.
/// Without an estimate the hand is reported as holding nothing.
pub fn fuse_confidence(
    ho: &RelationalBoxField,
    hand: &BBox,
    oo: &RelationalBoxField,
    estimate: Option<&BBox>,
    thresholds: &FusionThresholds,
) -> Result<Fusion, VoteError> {
    let s_contact = mean_confidence(ho, hand)?;
    let s_obj = match estimate {
        Some(e) if s_contact >= thresholds.t_contact => Some(mean_confidence(oo, e)?),
        _ => None,
    };
    Ok(fuse_scores(s_contact, s_obj, thresholds))
}

/// Detections in descending confidence; equal confidences keep input order.
fn ranked<T>(items: &[T], conf: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| conf(&items[b]).total_cmp(&conf(&items[a])).then(a.cmp(&b)));
    order
}

/// Precision-recall points `(recall, precision)` after each ranked detection.
pub fn pr_curve(hits: &[bool], n_truth: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    hits.iter()
        .enumerate()
        .map(|(i, &h)| {
            tp += h as usize;
            (tp as f64 / n_truth as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// All-points interpolated average precision of a ranked hit list: the
/// precision at each hit, raised to the best precision at any later rank,
/// averaged over all `n_truth` truths.
pub fn average_precision(hits: &[bool], n_truth: usize) -> f64 {
    if n_truth == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            tp += h as usize;
            tp as f64 / (i + 1) as f64
        })
        .collect();
    let mut best = 0.0f64;
    let mut sum = 0.0;
    for i in (0..hits.len()).rev() {
        best = best.max(precision[i]);
        if hits[i] {
            sum += best;
        }
    }
    sum / n_truth as f64
}

fn tuple_hits(detections: &[Detection], truths: &[TupleTruth], threshold: f64) -> Vec<bool> {
    let mut matched = vec![false; truths.len()];
    ranked(detections, |d| d.confidence)
        .into_iter()
        .map(|di| {
            let d = &detections[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in truths.iter().enumerate() {
                if matched[gi] || g.scene != d.scene {
                    continue;
                }
                let hand_iou = iou(&d.hand, &g.hand);
                let object_ok = match (&d.object, &g.object) {
                    (None, None) => true,
                    (Some(a), Some(b)) => iou(a, b) >= threshold,
                    _ => false,
                };
                if hand_iou >= threshold && object_ok && best.is_none_or(|(_, b)| hand_iou > b) {
                    best = Some((gi, hand_iou));
                }
            }
            match best {
                Some((gi, _)) => {
                    matched[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Average precision of (hand, object) tuples. A detection is a true
/// positive when it matches an unmatched ground-truth tuple of the same
/// scene with hand IoU ≥ `threshold` and either object IoU ≥ `threshold`
/// or both objects absent. Detections are matched greedily in descending
/// confidence, each to the qualifying tuple with the highest hand IoU.
/// Returns 0 when there is no ground truth.
pub fn tuple_ap(detections: &[Detection], truths: &[TupleTruth], threshold: f64) -> f64 {
    average_precision(&tuple_hits(detections, truths, threshold), truths.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectDetection {
    pub scene: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

/// Standard single-class average precision over object boxes.
pub fn plain_ap(detections: &[ObjectDetection], truths: &[(usize, BBox)], threshold: f64) -> f64 {
    let mut matched = vec![false; truths.len()];
    let hits: Vec<bool> = ranked(detections, |d| d.confidence)
        .into_iter()
        .map(|di| {
            let d = &detections[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, (scene, g)) in truths.iter().enumerate() {
                if matched[gi] || *scene != d.scene {
                    continue;
                }
                let o = iou(&d.bbox, g);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            best.map(|(gi, _)| matched[gi] = true).is_some()
        })
        .collect();
    average_precision(&hits, truths.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

/// Links every hand to the object with the nearest center. Confidence is the
/// product of the hand and object scores.
pub fn simple_baseline(scene: usize, hands: &[ScoredBox], objects: &[ScoredBox]) -> Vec<Detection> {
    let hb: Vec<BBox> = hands.iter().map(|h| h.bbox).collect();
    let ob: Vec<BBox> = objects.iter().map(|o| o.bbox).collect();
    pseudo_label(&hb, &ob)
        .into_iter()
        .zip(hands)
        .map(|(link, h)| Detection {
            scene,
            hand: h.bbox,
            object: link.map(|o| ob[o]),
            confidence: h.score * link.map_or(1.0, |o| objects[o].score),
        })
        .collect()
}

/// Ground-truth tuples of a set of scenes.
pub fn truths_of(scenes: &[&Scene]) -> Vec<TupleTruth> {
    scenes
        .iter()
        .flat_map(|s| {
            s.hands.iter().enumerate().map(|(i, h)| TupleTruth {
                scene: s.id,
                hand: *h,
                object: s.linked_object(i).copied(),
            })
        })
        .collect()
}

pub const AP_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ap25: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `(threshold, [(recall, precision)])` for each AP threshold.
    pub pr_curves: Vec<(f64, Vec<(f64, f64)>)>,
    /// Mean GIoU between the final estimate and the held object over hands
    /// that hold one; a missing estimate counts as −1.
    pub mean_giou: f64,
    pub mean_length: f64,
    pub max_length: usize,
    pub episodes: usize,
    pub failures: usize,
    pub truncated: usize,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HandOutcome {
    pub scene: usize,
    pub hand: usize,
    pub length: usize,
    pub final_estimate: Option<BBox>,
    pub final_giou: Option<f64>,
    pub failed: bool,
    pub truncated: bool,
    pub detection: Option<Detection>,
}

/// Rolls out every hand of `scene` and fuses the result into a detection.
pub fn evaluate_scene(
    scene: &Scene,
    source: &dyn FieldSource,
    rollout: &RolloutConfig,
    thresholds: &FusionThresholds,
) -> Result<Vec<HandOutcome>, ModelError> {
    let fields = source.fields(scene)?;
    Ok(scene
        .hands
        .iter()
        .enumerate()
        .map(|(i, hand)| {
            let gt = scene.linked_object(i);
            let ep = rollout_fields(&fields, hand, rollout, gt);
            let estimate = ep.final_estimate;
            let detection = fuse_confidence(&fields.ho, hand, &fields.oo, estimate.as_ref(), thresholds)
                .ok()
                .and_then(|f| match f.outcome {
                    FusionOutcome::Suppressed => None,
                    FusionOutcome::NoContact => Some(Detection {
                        scene: scene.id,
                        hand: *hand,
                        object: None,
                        confidence: f.confidence,
                    }),
                    FusionOutcome::Contact => Some(Detection {
                        scene: scene.id,
                        hand: *hand,
                        object: estimate,
                        confidence: f.confidence,
                    }),
                });
            HandOutcome {
                scene: scene.id,
                hand: i,
                length: ep.len(),
                final_estimate: estimate,
                final_giou: gt.map(|g| estimate.map_or(-1.0, |e| giou(&e, g))),
                failed: ep.failure.is_some(),
                truncated: ep.truncated,
                detection,
            }
        })
        .collect())
}

/// Evaluates every hand of every scene; scenes run in parallel and results
/// are reduced in scene order.
pub fn evaluate(
    scenes: &[&Scene],
    source: &dyn FieldSource,
    rollout: &RolloutConfig,
    thresholds: &FusionThresholds,
) -> Result<EvalReport, ModelError> {
    let outcomes: Vec<HandOutcome> = scenes
        .par_iter()
        .map(|s| evaluate_scene(s, source, rollout, thresholds))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(report_from(&outcomes, &truths_of(scenes)))
}

pub fn report_from(outcomes: &[HandOutcome], truths: &[TupleTruth]) -> EvalReport {
    let detections: Vec<Detection> = outcomes.iter().filter_map(|o| o.detection).collect();
    let gious: Vec<f64> = outcomes.iter().filter_map(|o| o.final_giou).collect();
    let mut pr_curves = Vec::new();
    let mut aps = [0.0; 3];
    for (k, &t) in AP_THRESHOLDS.iter().enumerate() {
        let hits = tuple_hits(&detections, truths, t);
        let curve = if truths.is_empty() {
            Vec::new()
        } else {
            pr_curve(&hits, truths.len())
        };
        aps[k] = average_precision(&hits, truths.len());
        pr_curves.push((t, curve));
    }
    let n = outcomes.len().max(1) as f64;
    EvalReport {
        ap25: aps[0],
        ap50: aps[1],
        ap75: aps[2],
        pr_curves,
        mean_giou: if gious.is_empty() {
            0.0
        } else {
            gious.iter().sum::<f64>() / gious.len() as f64
        },
        mean_length: outcomes.iter().map(|o| o.length as f64).sum::<f64>() / n,
        max_length: outcomes.iter().map(|o| o.length).max().unwrap_or(0),
        episodes: outcomes.len(),
        failures: outcomes.iter().filter(|o| o.failed).count(),
        truncated: outcomes.iter().filter(|o| o.truncated).count(),
        detections,
    }
}

/// One predictor configuration in an ablation.
pub struct AblationVariant<'a> {
    pub attention: bool,
    pub rl: bool,
    pub source: &'a dyn FieldSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dataset: String,
    pub aggregation: Aggregation,
    pub attention: bool,
    pub rl: bool,
    pub horizon: String,
    pub ap75: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub mean_giou: f64,
    pub mean_length: f64,
}

/// Evaluates every variant × aggregation × horizon on the same scenes.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run(
    dataset: &str,
    scenes: &[&Scene],
    variants: &[AblationVariant<'_>],
    aggregations: &[Aggregation],
    horizons: &[Horizon],
    terminate_threshold: f64,
    thresholds: &FusionThresholds,
) -> Result<Vec<AblationRow>, ModelError> {
    let mut rows = Vec::new();
    for v in variants {
        for &aggregation in aggregations {
            for &horizon in horizons {
                let cfg = RolloutConfig {
                    horizon,
                    terminate_threshold,
                    aggregation,
                    ..RolloutConfig::default()
                };
                let r = evaluate(scenes, v.source, &cfg, thresholds)?;
                rows.push(AblationRow {
                    dataset: dataset.to_string(),
                    aggregation,
                    attention: v.attention,
                    rl: v.rl,
                    horizon: horizon.to_string(),
                    ap75: r.ap75,
                    ap50: r.ap50,
                    ap25: r.ap25,
                    mean_giou: r.mean_giou,
                    mean_length: r.mean_length,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(std::io::Error::other)?;
    }
    w.flush()
}
