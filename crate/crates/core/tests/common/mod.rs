//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rbf_core::model::{AttentionConfig, FieldChannel, PredictorConfig};
use rbf_core::scenes::{cue_reader, generate_scene, PlacementMode, Scene, SceneSpec};
use rbf_core::training::{il_loss, il_loss_with_grad, rl_loss, rl_loss_with_grad, LossConfig, RlObjective};
use rbf_core::PredictorParams;

/// 16×16 scenes with few channels, cheap enough for finite differences.
pub fn small_spec(mode: PlacementMode) -> SceneSpec {
    SceneSpec {
        height: 16,
        width: 16,
        min_hands: 1,
        max_hands: 2,
        link_probability: 0.8,
        mode,
        hand_size: (3.0, 5.0),
        object_size: (3.0, 5.0),
        near_distance: (2.0, 4.0),
        far_distance: (6.0, 9.0),
        noise_channels: 2,
        ..SceneSpec::default()
    }
}

/// A predictor with non-trivial head weights so every output term is live.
pub fn random_predictor(spec: &SceneSpec, attention: bool, seed: u64) -> PredictorParams {
    let config = PredictorConfig {
        attention: attention.then_some(AttentionConfig {
            stride: 4,
            heads: 2,
            hidden: 8,
        }),
        ..spec.predictor_config()
    };
    let mut p = PredictorParams::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let n = Normal::new(0.0, 0.15).unwrap();
    let end = p.offsets().head_biases;
    for x in &mut p.values[..end] {
        *x += n.sample(&mut rng);
    }
    p
}

/// A perturbed cue reader: votes land on the grid and confidences sit away
/// from saturation, so the soft-vote rollout has live gradients.
pub fn near_solution_predictor(spec: &SceneSpec, attention: bool, seed: u64) -> PredictorParams {
    let cue = cue_reader(spec);
    let mut p = random_predictor(spec, attention, seed);
    let end = p.offsets().attention_start;
    p.values[..end].copy_from_slice(&cue.values[..end]);
    for oo in [false, true] {
        let head = p.head_index(oo, FieldChannel::Confidence);
        for f in 0..spec.feature_channels() {
            *p.head_weight_mut(head, f) *= 0.3;
        }
        *p.head_bias_mut(head) *= 0.3;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let n = Normal::new(0.0, 0.05).unwrap();
    for x in &mut p.values[..end] {
        *x += n.sample(&mut rng);
    }
    p
}

/// Parameter indices to probe: `count` drawn uniformly plus the first and
/// last parameter.
pub fn probe_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..count).map(|_| rng.random_range(0..n)).collect();
    idx.push(0);
    idx.push(n - 1);
    idx.sort_unstable();
    idx.dedup();
    idx
}

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    /// `‖analytic − numeric‖ / max(‖numeric‖, 1e-8)` over the probed indices.
    pub relative_error: f64,
    pub probed: usize,
    /// Probes skipped because a discrete rollout choice changed.
    pub skipped: usize,
}

fn relative(pairs: &[(f64, f64)]) -> f64 {
    let diff: f64 = pairs.iter().map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = pairs.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-8)
}

/// Central differences of the imitation loss with respect to parameters.
pub fn il_fd(p: &PredictorParams, scene: &Scene, indices: &[usize], eps: f64) -> FdReport {
    let cfg = LossConfig::default();
    let (fields, tape) = p.forward_tape(&scene.feature).unwrap();
    let (_, g) = il_loss_with_grad(&fields, scene, &cfg);
    let analytic = p.backward(&tape, &g).unwrap();
    let eval = |q: &PredictorParams| il_loss(&q.forward(&scene.feature).unwrap(), scene, &cfg).total;
    let pairs: Vec<(f64, f64)> = indices
        .iter()
        .map(|&i| {
            let mut hi = p.clone();
            hi.values[i] += eps;
            let mut lo = p.clone();
            lo.values[i] -= eps;
            (analytic[i], (eval(&hi) - eval(&lo)) / (2.0 * eps))
        })
        .collect();
    FdReport {
        relative_error: relative(&pairs),
        probed: pairs.len(),
        skipped: 0,
    }
}

/// Central differences of the fine-tuning objective for one hand. Returns
/// `None` when the hand cannot vote at all.
pub fn rl_fd(p: &PredictorParams, scene: &Scene, hand: usize, indices: &[usize], eps: f64) -> Option<FdReport> {
    let cfg = LossConfig::default();
    let objective = RlObjective::default();
    let gt = scene.linked_object(hand)?;
    let h = &scene.hands[hand];
    let (fields, tape) = p.forward_tape(&scene.feature).unwrap();
    let (base, g) = rl_loss_with_grad(&fields, h, gt, &objective, &cfg).ok()?;
    let analytic = p.backward(&tape, &g).unwrap();
    let eval = |q: &PredictorParams| rl_loss(&q.forward(&scene.feature).unwrap(), h, gt, &objective, &cfg).ok();
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for &i in indices {
        let mut hi = p.clone();
        hi.values[i] += eps;
        let mut lo = p.clone();
        lo.values[i] -= eps;
        match (eval(&hi), eval(&lo)) {
            (Some(a), Some(b)) if a.fingerprint == base.fingerprint && b.fingerprint == base.fingerprint => {
                pairs.push((analytic[i], (a.total - b.total) / (2.0 * eps)));
            }
            _ => skipped += 1,
        }
    }
    Some(FdReport {
        relative_error: relative(&pairs),
        probed: pairs.len(),
        skipped,
    })
}

/// Scene with at least one hand holding an object.
pub fn linked_scene(spec: &SceneSpec, mut seed: u64) -> Scene {
    loop {
        let s = generate_scene(seed, spec).unwrap();
        if s.links.iter().any(|l| l.is_some()) {
            return s;
        }
        seed = seed.wrapping_add(0x1000);
    }
}
