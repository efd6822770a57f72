mod common;

use common::*;
use rbf_core::scenes::{generate_scene, PlacementMode, SceneSpec};
use rbf_core::training::{il_loss, train_il, train_rl, LossConfig, StageConfig, TrainConfig, TrainError};
use rbf_core::PredictorParams;

#[test]
fn il_gradient_matches_central_differences() {
    for seed in 0..6 {
        let spec = small_spec(PlacementMode::Near);
        let scene = generate_scene(seed, &spec).unwrap();
        let p = random_predictor(&spec, seed % 2 == 1, seed);
        let r = il_fd(&p, &scene, &probe_indices(p.len(), 40, seed), 1e-4);
        assert!(r.relative_error < 1e-3, "seed {seed}: {r:?}");
    }
}

#[test]
fn rl_gradient_matches_central_differences() {
    let mut checked = 0;
    for seed in 0..8 {
        let spec = small_spec(PlacementMode::Mixed { far_probability: 0.5 });
        let scene = linked_scene(&spec, seed);
        let hand = scene.links.iter().position(|l| l.is_some()).unwrap();
        let p = near_solution_predictor(&spec, seed % 2 == 0, seed);
        if let Some(r) = rl_fd(&p, &scene, hand, &probe_indices(p.len(), 40, seed), 1e-4) {
            assert!(r.relative_error < 1e-3, "seed {seed}: {r:?}");
            assert!(r.probed > 20, "seed {seed}: {r:?}");
            checked += 1;
        }
    }
    assert!(checked >= 4);
}

fn single_scene_config(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        il: StageConfig {
            batch_size: 1,
            learning_rate: lr,
            steps,
            ..StageConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_a_single_scene() {
    let spec = small_spec(PlacementMode::Near);
    let scene = generate_scene(3, &spec).unwrap();
    let p0 = PredictorParams::init(spec.predictor_config(), 0).unwrap();
    let before = il_loss(&p0.forward(&scene.feature).unwrap(), &scene, &LossConfig::default()).total;
    let (p, log) = train_il(&single_scene_config(500, 1e-2), &[&scene], p0).unwrap();
    let after = il_loss(&p.forward(&scene.feature).unwrap(), &scene, &LossConfig::default()).total;
    assert!(after < 0.01, "loss {before} -> {after}");
    assert_eq!(log.rows.len(), 500);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let spec = small_spec(PlacementMode::Near);
    let scene = generate_scene(5, &spec).unwrap();
    let mut p0 = PredictorParams::init(spec.predictor_config(), 1).unwrap();
    p0.snap_to_f32();
    let (p, _) = train_il(&single_scene_config(20, 0.0), &[&scene], p0.clone()).unwrap();
    assert_eq!(p.values, p0.values);
}

#[test]
fn training_is_deterministic() {
    let spec = small_spec(PlacementMode::Mixed { far_probability: 0.5 });
    let scenes: Vec<_> = (0..12).map(|s| linked_scene(&spec, s)).collect();
    let refs: Vec<_> = scenes.iter().collect();
    let mut cfg = TrainConfig::default();
    cfg.il.steps = 30;
    cfg.il.batch_size = 8;
    cfg.rl.steps = 10;
    cfg.rl.batch_size = 8;
    let run = || {
        let p0 = PredictorParams::init(spec.predictor_config(), 2).unwrap();
        let (p, a) = train_il(&cfg, &refs, p0).unwrap();
        let (q, b) = train_rl(&cfg, &refs, p).unwrap();
        (q.to_bytes(), a, b)
    };
    let (x, a1, b1) = run();
    let (y, a2, b2) = run();
    assert_eq!(x, y);
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
}

#[test]
fn rl_requires_linked_hands() {
    let spec = SceneSpec {
        link_probability: 0.0,
        ..small_spec(PlacementMode::Near)
    };
    let scene = generate_scene(0, &spec).unwrap();
    let p = PredictorParams::init(spec.predictor_config(), 0).unwrap();
    assert!(matches!(
        train_rl(&TrainConfig::default(), &[&scene], p),
        Err(TrainError::NoLinkedHands)
    ));
}

/// Imitation loss recomputed pixel by pixel from the scene boxes, without
/// the area or clipping helpers.
fn straight_line_il(fields: &rbf_core::FieldPair, scene: &rbf_core::scenes::Scene) -> f64 {
    let (hh, ww) = (scene.height(), scene.width());
    let (hf, wf) = (hh as f64, ww as f64);
    let diag = hf.hypot(wf);
    let sl1 = |x: f64| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
    let focal = |c: f64, y: bool| {
        let c = c.clamp(1e-12, 1.0 - 1e-12);
        if y {
            -0.25 * (1.0 - c).powi(2) * c.ln()
        } else {
            -0.75 * c * c * (1.0 - c).ln()
        }
    };
    let inside = |b: &rbf_core::BBox, u: usize, v: usize| {
        let (x0, y0, x1, y1) = b.corners();
        x0 <= v as f64 && (v as f64) < x1 && y0 <= u as f64 && (u as f64) < y1
    };
    let one_field = |field: &rbf_core::RelationalBoxField, boxes: &[rbf_core::BBox], targets: &[Option<rbf_core::BBox>]| {
        // slot boxes.len() is the background
        let mut sums = vec![0.0; boxes.len() + 1];
        let mut counts = vec![0usize; boxes.len() + 1];
        for u in 0..hh {
            for v in 0..ww {
                let covering: Vec<usize> = (0..boxes.len()).filter(|&i| inside(&boxes[i], u, v)).collect();
                let (slot, target) = match covering.as_slice() {
                    [] => (boxes.len(), None),
                    [i] => (*i, targets[*i]),
                    _ => continue,
                };
                let p = field.get(u, v);
                let mut l = focal(p.c, target.is_some());
                if let Some(t) = target {
                    let (dy, dx) = (t.cy() - u as f64, t.cx() - v as f64);
                    let r = dy.hypot(dx);
                    let (ts, tc) = if r == 0.0 { (0.0, 1.0) } else { (dy / r, dx / r) };
                    l += sl1((p.r - r) / diag) + sl1(p.theta.sin() - ts) + sl1(p.theta.cos() - tc);
                    l += sl1((p.h - t.h()) / hf) + sl1((p.w - t.w()) / wf);
                }
                sums[slot] += l;
                counts[slot] += 1;
            }
        }
        let means: Vec<f64> = sums.iter().zip(&counts).filter(|(_, &n)| n > 0).map(|(s, &n)| s / n as f64).collect();
        if means.is_empty() {
            0.0
        } else {
            means.iter().sum::<f64>() / means.len() as f64
        }
    };
    let hand_targets: Vec<_> = (0..scene.hands.len()).map(|i| scene.linked_object(i).copied()).collect();
    let obj_targets: Vec<_> = scene.objects.iter().map(|o| Some(*o)).collect();
    one_field(&fields.ho, &scene.hands, &hand_targets) + one_field(&fields.oo, &scene.objects, &obj_targets)
}

#[test]
fn il_loss_matches_straight_line_reimplementation() {
    for seed in 0..10 {
        let spec = SceneSpec::near();
        let scene = generate_scene(100 + seed, &spec).unwrap();
        let p = random_predictor(&spec, false, seed);
        let fields = p.forward(&scene.feature).unwrap();
        let a = il_loss(&fields, &scene, &LossConfig::default()).total;
        let b = straight_line_il(&fields, &scene);
        assert!((a - b).abs() < 1e-9, "seed {seed}: {a} vs {b}");
    }
}
