//! Sequential localization of a hand's active object: state, action,
//! termination rule, dynamics, voting policy, GIoU reward and rollout.

use crate::boxfield::{AreaMask, Aggregation, RelationalBoxField, VoteError};
use crate::geometry::{giou, BBox};
use crate::model::{FieldPair, ModelError, PredictorParams};
use crate::scenes::Scene;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Anything that can produce the two relational fields for a scene.
pub trait FieldSource: Sync {
    fn fields(&self, scene: &Scene) -> Result<FieldPair, ModelError>;
}

impl FieldSource for PredictorParams {
    fn fields(&self, scene: &Scene) -> Result<FieldPair, ModelError> {
        self.forward(&scene.feature)
    }
}

impl FieldSource for FieldPair {
    fn fields(&self, _scene: &Scene) -> Result<FieldPair, ModelError> {
        Ok(self.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpState {
    /// Current object estimate; arbitrary at `t = 0`.
    pub estimate: BBox,
    pub hand: BBox,
    pub t: usize,
}

impl MdpState {
    /// Initial state; the estimate starts at the hand box and is ignored by
    /// the first step.
    pub fn initial(hand: BBox) -> Self {
        Self {
            estimate: hand,
            hand,
            t: 0,
        }
    }

    /// Box the next action is relative to: the hand at `t = 0`, the current
    /// estimate afterwards.
    pub fn base(&self) -> &BBox {
        if self.t == 0 {
            &self.hand
        } else {
            &self.estimate
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MdpAction {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl MdpAction {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        debug_assert!([dx, dy, dw, dh].iter().all(|x| x.is_finite()));
        Self { dx, dy, dw, dh }
    }

    /// Componentwise `target - base` over `(cx, cy, w, h)`.
    pub fn between(base: &BBox, target: &BBox) -> Self {
        Self::new(
            target.cx() - base.cx(),
            target.cy() - base.cy(),
            target.w() - base.w(),
            target.h() - base.h(),
        )
    }
}

/// True iff every component is small relative to the base box:
/// `|dx|/w`, `|dy|/h`, `|dw|/w`, `|dh|/h` all strictly below `threshold`.
pub fn is_terminate(base: &BBox, action: &MdpAction, threshold: f64) -> bool {
    let (w, h) = (base.w(), base.h());
    action.dx.abs() / w < threshold
        && action.dy.abs() / h < threshold
        && action.dw.abs() / w < threshold
        && action.dh.abs() / h < threshold
}

/// Applies `action` to the hand box at `t = 0` and to the estimate after,
/// clamping width and height to at least one pixel.
pub fn step(state: &MdpState, action: &MdpAction) -> MdpState {
    let base = state.base();
    let next = BBox::new(
        base.cx() + action.dx,
        base.cy() + action.dy,
        (base.w() + action.dw).max(1.0),
        (base.h() + action.dh).max(1.0),
    )
    .expect("finite action on a valid box");
    MdpState {
        estimate: next,
        hand: state.hand,
        t: state.t + 1,
    }
}

/// Field and voting area the policy uses in `state`.
pub fn policy_inputs<'a>(state: &MdpState, fields: &'a FieldPair) -> (&'a RelationalBoxField, AreaMask) {
    let field = if state.t == 0 { &fields.ho } else { &fields.oo };
    let (h, w) = field.grid();
    (field, AreaMask::from_box(state.base(), h, w))
}

/// Aggregates the hand-to-object field over the hand at `t = 0` and the
/// refinement field over the current estimate afterwards; the action is the
/// aggregated box minus the base box.
pub fn policy_act_with(state: &MdpState, fields: &FieldPair, aggregation: Aggregation) -> Result<MdpAction, VoteError> {
    let (field, area) = policy_inputs(state, fields);
    let target = aggregation.aggregate(field, &area)?;
    Ok(MdpAction::between(state.base(), &target))
}

pub fn policy_act(state: &MdpState, fields: &FieldPair) -> Result<MdpAction, VoteError> {
    policy_act_with(state, fields, Aggregation::Vote)
}

pub fn reward(next_estimate: &BBox, ground_truth: &BBox) -> f64 {
    giou(next_estimate, ground_truth)
}

/// Maximum number of trajectory entries. `Finite(1)` is the hand-conditioned
/// hypothesis alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Horizon {
    Finite(usize),
    Unbounded,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid horizon {0:?}: expected a non-negative integer or \"inf\"")]
pub struct HorizonParseError(String);

impl FromStr for Horizon {
    type Err = HorizonParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t == "∞" {
            return Ok(Horizon::Unbounded);
        }
        t.parse().map(Horizon::Finite).map_err(|_| HorizonParseError(s.to_string()))
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Finite(n) => write!(f, "{n}"),
            Horizon::Unbounded => f.write_str("inf"),
        }
    }
}

impl From<Horizon> for String {
    fn from(h: Horizon) -> Self {
        h.to_string()
    }
}

impl TryFrom<String> for Horizon {
    type Error = HorizonParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

pub const DEFAULT_TERMINATE_THRESHOLD: f64 = 0.05;
pub const DEFAULT_SAFETY_CAP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub horizon: Horizon,
    pub terminate_threshold: f64,
    pub aggregation: Aggregation,
    /// Step limit for an unbounded horizon.
    pub safety_cap: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            horizon: Horizon::Finite(5),
            terminate_threshold: DEFAULT_TERMINATE_THRESHOLD,
            aggregation: Aggregation::Vote,
            safety_cap: DEFAULT_SAFETY_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transition {
    pub state: MdpState,
    pub action: MdpAction,
    /// GIoU of the resulting estimate; `None` without ground truth.
    pub reward: Option<f64>,
    /// The action was a terminate action and was not applied.
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Episode {
    pub steps: Vec<Transition>,
    /// Last estimate produced, or `None` if the first step failed.
    pub final_estimate: Option<BBox>,
    pub terminated: bool,
    /// The unbounded-horizon safety cap stopped the episode.
    pub truncated: bool,
    /// Policy error that ended the episode early.
    #[serde(serialize_with = "serialize_failure")]
    pub failure: Option<VoteError>,
}

fn serialize_failure<S: serde::Serializer>(f: &Option<VoteError>, s: S) -> Result<S::Ok, S::Error> {
    match f {
        Some(e) => s.serialize_some(&e.to_string()),
        None => s.serialize_none(),
    }
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_reward(&self) -> Option<f64> {
        self.steps.last().and_then(|s| s.reward)
    }

    /// State after the last applied action.
    pub fn final_state(&self) -> Option<MdpState> {
        let last = self.steps.iter().rev().find(|s| !s.terminal)?;
        Some(step(&last.state, &last.action))
    }
}

/// Runs the policy on precomputed fields until a terminate action, the
/// horizon, or a policy error.
pub fn rollout_fields(fields: &FieldPair, hand: &BBox, config: &RolloutConfig, ground_truth: Option<&BBox>) -> Episode {
    let limit = match config.horizon {
        Horizon::Finite(n) => n,
        Horizon::Unbounded => config.safety_cap,
    };
    let mut state = MdpState::initial(*hand);
    let mut steps = Vec::new();
    let mut terminated = false;
    let mut failure = None;
    while steps.len() < limit {
        let action = match policy_act_with(&state, fields, config.aggregation) {
            Ok(a) => a,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        if state.t > 0 && is_terminate(&state.estimate, &action, config.terminate_threshold) {
            steps.push(Transition {
                state,
                action,
                reward: ground_truth.map(|g| reward(&state.estimate, g)),
                terminal: true,
            });
            terminated = true;
            break;
        }
        let next = step(&state, &action);
        steps.push(Transition {
            state,
            action,
            reward: ground_truth.map(|g| reward(&next.estimate, g)),
            terminal: false,
        });
        state = next;
    }
    let truncated = config.horizon == Horizon::Unbounded && !terminated && failure.is_none() && steps.len() >= limit;
    Episode {
        final_estimate: (state.t > 0).then_some(state.estimate),
        steps,
        terminated,
        truncated,
        failure,
    }
}

/// Computes the scene's fields with `source` and rolls out from `hand`.
pub fn rollout(
    scene: &Scene,
    hand: &BBox,
    source: &dyn FieldSource,
    config: &RolloutConfig,
    ground_truth: Option<&BBox>,
) -> Result<Episode, ModelError> {
    let fields = source.fields(scene)?;
    Ok(rollout_fields(&fields, hand, config, ground_truth))
}
