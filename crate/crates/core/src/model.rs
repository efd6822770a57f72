//! Differentiable predictor mapping a feature map to the hand-to-object and
//! object refinement box fields.
//!
//! Each field is produced by a stack of per-pixel linear heads (one scalar
//! output per model channel). An optional self-attention block runs on an
//! average-pooled coarse grid; its output is upsampled and added back to the
//! full-resolution features before the heads.
//!
//! Gradients are computed by hand-written reverse passes and checked against
//! central finite differences in the tests.

use crate::boxfield::RelationalBoxField;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid channel layout: {0}")]
    Layout(String),
    #[error("non-finite feature value at index {0}")]
    NonFinite(usize),
}

/// Image feature map stored channel-last (`[(u * W + v) * C + k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(ModelError::ShapeMismatch(format!(
                "{height}x{width}x{channels} feature map with {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = (u * self.width + v) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let i = (u * self.width + v) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Channel `k` as a row-major plane.
    pub fn plane(&self, k: usize) -> Vec<f64> {
        self.data.iter().skip(k).step_by(self.channels).copied().collect()
    }

    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self, ModelError> {
        let channels = planes.len();
        let n = height * width;
        if planes.iter().any(|p| p.len() != n) {
            return Err(ModelError::ShapeMismatch("plane length".into()));
        }
        let mut data = vec![0.0; n * channels];
        for (k, p) in planes.iter().enumerate() {
            for (i, &x) in p.iter().enumerate() {
                data[i * channels + k] = x;
            }
        }
        Self::new(height, width, channels, data)
    }
}

/// Semantic meaning of one model output channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldChannel {
    SinTheta,
    CosTheta,
    Radius,
    Width,
    Height,
    Confidence,
    /// Reserved; ignored by decoding.
    Spare,
}

impl FieldChannel {
    fn code(self) -> u8 {
        match self {
            FieldChannel::SinTheta => 0,
            FieldChannel::CosTheta => 1,
            FieldChannel::Radius => 2,
            FieldChannel::Width => 3,
            FieldChannel::Height => 4,
            FieldChannel::Confidence => 5,
            FieldChannel::Spare => 6,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => FieldChannel::SinTheta,
            1 => FieldChannel::CosTheta,
            2 => FieldChannel::Radius,
            3 => FieldChannel::Width,
            4 => FieldChannel::Height,
            5 => FieldChannel::Confidence,
            6 => FieldChannel::Spare,
            _ => return None,
        })
    }
}

/// Mapping from per-field model channels to field semantics. Every
/// non-spare semantic appears exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FieldChannel>", into = "Vec<FieldChannel>")]
pub struct ChannelLayout {
    channels: Vec<FieldChannel>,
    // index of sin, cos, r, w, h, c
    slots: [usize; 6],
}

impl ChannelLayout {
    pub fn new(channels: Vec<FieldChannel>) -> Result<Self, ModelError> {
        let mut slots = [usize::MAX; 6];
        for (i, ch) in channels.iter().enumerate() {
            let code = ch.code() as usize;
            if code == 6 {
                continue;
            }
            if slots[code] != usize::MAX {
                return Err(ModelError::Layout(format!("{ch:?} appears twice")));
            }
            slots[code] = i;
        }
        if let Some(missing) = slots.iter().position(|&s| s == usize::MAX) {
            return Err(ModelError::Layout(format!(
                "missing {:?}",
                FieldChannel::from_code(missing as u8).unwrap()
            )));
        }
        Ok(Self { channels, slots })
    }

    pub fn channels(&self) -> &[FieldChannel] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    fn slot(&self, ch: FieldChannel) -> usize {
        self.slots[ch.code() as usize]
    }
}

impl Default for ChannelLayout {
    /// `(sin θ, cos θ, r, w, h, c, spare)`: seven channels per field, fourteen
    /// heads in total.
    fn default() -> Self {
        use FieldChannel::*;
        Self::new(vec![SinTheta, CosTheta, Radius, Width, Height, Confidence, Spare]).unwrap()
    }
}

impl TryFrom<Vec<FieldChannel>> for ChannelLayout {
    type Error = ModelError;

    fn try_from(v: Vec<FieldChannel>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ChannelLayout> for Vec<FieldChannel> {
    fn from(l: ChannelLayout) -> Self {
        l.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Pooling factor from the full grid to the token grid.
    pub stride: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            stride: 8,
            heads: 8,
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub feature_channels: usize,
    pub layout: ChannelLayout,
    pub attention: Option<AttentionConfig>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            feature_channels: 32,
            layout: ChannelLayout::default(),
            attention: None,
        }
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamOffsets {
    pub head_weights: usize,
    pub head_biases: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub ln_gamma: usize,
    pub ln_beta: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub total: usize,
    /// Start of the attention block; parameters before it belong to the heads.
    pub attention_start: usize,
}

impl ParamOffsets {
    fn new(cfg: &PredictorConfig) -> Self {
        let c = cfg.feature_channels;
        let heads = 2 * cfg.layout.len();
        let head_weights = 0;
        let head_biases = heads * c;
        let attention_start = head_biases + heads;
        let (hidden, cc) = match cfg.attention {
            Some(a) => (a.hidden, c * c),
            None => (0, 0),
        };
        let ln_c = if cfg.attention.is_some() { c } else { 0 };
        let wq = attention_start;
        let wk = wq + cc;
        let wv = wk + cc;
        let ln_gamma = wv + cc;
        let ln_beta = ln_gamma + ln_c;
        let w1 = ln_beta + ln_c;
        let b1 = w1 + hidden * ln_c;
        let w2 = b1 + hidden;
        let b2 = w2 + hidden * ln_c;
        let total = b2 + ln_c;
        Self {
            head_weights,
            head_biases,
            wq,
            wk,
            wv,
            ln_gamma,
            ln_beta,
            w1,
            b1,
            w2,
            b2,
            total,
            attention_start,
        }
    }
}

/// Weights of the predictor, stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    config: PredictorConfig,
    offsets: ParamOffsets,
    pub values: Vec<f64>,
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPair {
    /// Hand-to-object field.
    pub ho: RelationalBoxField,
    /// Object refinement field.
    pub oo: RelationalBoxField,
}

/// Upstream gradient with respect to the decoded outputs of one field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads {
    pub r: Vec<f64>,
    pub theta: Vec<f64>,
    pub h: Vec<f64>,
    pub w: Vec<f64>,
    pub c: Vec<f64>,
}

impl FieldGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            r: vec![0.0; n],
            theta: vec![0.0; n],
            h: vec![0.0; n],
            w: vec![0.0; n],
            c: vec![0.0; n],
        }
    }

    pub fn add_assign(&mut self, other: &FieldGrads) {
        for (a, b) in [
            (&mut self.r, &other.r),
            (&mut self.theta, &other.theta),
            (&mut self.h, &other.h),
            (&mut self.w, &other.w),
            (&mut self.c, &other.c),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        [&self.r, &self.theta, &self.h, &self.w, &self.c]
            .iter()
            .all(|v| v.iter().all(|&x| x == 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldPairGrads {
    pub ho: FieldGrads,
    pub oo: FieldGrads,
}

impl FieldPairGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            ho: FieldGrads::zeros(n),
            oo: FieldGrads::zeros(n),
        }
    }

    pub fn add_assign(&mut self, other: &FieldPairGrads) {
        self.ho.add_assign(&other.ho);
        self.oo.add_assign(&other.oo);
    }
}

/// Output of the attention block plus the per-head attention weights.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub tokens: Vec<f64>,
    /// `weights[g][n * N + m]`: attention of query `n` to key `m` in head `g`.
    pub weights: Vec<Vec<f64>>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

const LN_EPS: f64 = 1e-5;

/// Record of one forward pass, consumed by [`PredictorParams::backward`].
pub struct Tape {
    height: usize,
    width: usize,
    cache: ForwardCache,
}

/// Everything the reverse pass needs from the forward pass.
struct ForwardCache {
    /// Full-resolution features seen by the heads (with attention added).
    features: Vec<f64>,
    /// Raw head outputs, `[p * heads + j]`.
    raw: Vec<f64>,
    attention: Option<AttentionCache>,
}

struct AttentionCache {
    tokens_in: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    weights: Vec<Vec<f64>>,
    normed: Vec<f64>,
    inv_std: Vec<f64>,
    ln_out: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    coarse: (usize, usize),
}

impl PredictorParams {
    /// Parameters drawn from a seeded normal initializer and rounded to `f32`.
    pub fn init(config: PredictorConfig, seed: u64) -> Result<Self, ModelError> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = p.config.feature_channels;
        let o = p.offsets;
        let head_std = Normal::new(0.0, 0.01).unwrap();
        for x in &mut p.values[o.head_weights..o.head_biases] {
            *x = head_std.sample(&mut rng);
        }
        if let Some(a) = p.config.attention {
            let proj = Normal::new(0.0, 1.0 / (c as f64).sqrt()).unwrap();
            for x in &mut p.values[o.wq..o.ln_gamma] {
                *x = proj.sample(&mut rng);
            }
            p.values[o.ln_gamma..o.ln_beta].fill(1.0);
            let l1 = Normal::new(0.0, (2.0 / c as f64).sqrt()).unwrap();
            for x in &mut p.values[o.w1..o.b1] {
                *x = l1.sample(&mut rng);
            }
            let l2 = Normal::new(0.0, 0.1 / (a.hidden as f64).sqrt()).unwrap();
            for x in &mut p.values[o.w2..o.b2] {
                *x = l2.sample(&mut rng);
            }
        }
        p.snap_to_f32();
        Ok(p)
    }

    pub fn zeros(config: PredictorConfig) -> Result<Self, ModelError> {
        if config.feature_channels == 0 {
            return Err(ModelError::ShapeMismatch("zero feature channels".into()));
        }
        if let Some(a) = config.attention {
            if a.stride == 0 || a.heads == 0 || a.hidden == 0 || !config.feature_channels.is_multiple_of(a.heads) {
                return Err(ModelError::ShapeMismatch(format!(
                    "attention {a:?} incompatible with {} channels",
                    config.feature_channels
                )));
            }
        }
        let offsets = ParamOffsets::new(&config);
        Ok(Self {
            values: vec![0.0; offsets.total],
            config,
            offsets,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn offsets(&self) -> ParamOffsets {
        self.offsets
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn heads(&self) -> usize {
        2 * self.config.layout.len()
    }

    /// Head index of `channel` for the hand-to-object (`oo = false`) or
    /// object refinement (`oo = true`) field.
    pub fn head_index(&self, oo: bool, channel: FieldChannel) -> usize {
        let base = if oo { self.config.layout.len() } else { 0 };
        base + self.config.layout.slot(channel)
    }

    pub fn head_weight_mut(&mut self, head: usize, feature: usize) -> &mut f64 {
        let c = self.config.feature_channels;
        &mut self.values[self.offsets.head_weights + head * c + feature]
    }

    pub fn head_bias_mut(&mut self, head: usize) -> &mut f64 {
        &mut self.values[self.offsets.head_biases + head]
    }

    /// Rounds every value to the nearest `f32` so the weight file round-trips
    /// exactly.
    pub fn snap_to_f32(&mut self) {
        for x in &mut self.values {
            *x = *x as f32 as f64;
        }
    }

    fn check_feature(&self, feature: &FeatureMap) -> Result<(), ModelError> {
        if feature.channels != self.config.feature_channels {
            return Err(ModelError::ShapeMismatch(format!(
                "feature map has {} channels, predictor expects {}",
                feature.channels, self.config.feature_channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, feature: &FeatureMap) -> Result<FieldPair, ModelError> {
        self.check_feature(feature)?;
        let cache = self.forward_cached(feature);
        Ok(self.decode(feature.height, feature.width, &cache.raw))
    }

    /// Reverse pass: gradient of `Σ upstream · outputs` with respect to every
    /// parameter.
    pub fn forward_with_grads(
        &self,
        feature: &FeatureMap,
        upstream: &FieldPairGrads,
    ) -> Result<Vec<f64>, ModelError> {
        self.check_feature(feature)?;
        let n = feature.height * feature.width;
        if upstream.ho.r.len() != n || upstream.oo.r.len() != n {
            return Err(ModelError::ShapeMismatch("upstream gradient size".into()));
        }
        let cache = self.forward_cached(feature);
        Ok(self.backward_impl(feature.height, feature.width, &cache, upstream))
    }

    /// Forward pass that keeps what [`PredictorParams::backward`] needs.
    pub fn forward_tape(&self, feature: &FeatureMap) -> Result<(FieldPair, Tape), ModelError> {
        self.check_feature(feature)?;
        let cache = self.forward_cached(feature);
        let fields = self.decode(feature.height, feature.width, &cache.raw);
        Ok((
            fields,
            Tape {
                height: feature.height,
                width: feature.width,
                cache,
            },
        ))
    }

    /// Gradient of `Σ upstream · outputs` with respect to every parameter,
    /// for the forward pass recorded in `tape`.
    pub fn backward(&self, tape: &Tape, upstream: &FieldPairGrads) -> Result<Vec<f64>, ModelError> {
        let n = tape.height * tape.width;
        if upstream.ho.r.len() != n || upstream.oo.r.len() != n {
            return Err(ModelError::ShapeMismatch("upstream gradient size".into()));
        }
        Ok(self.backward_impl(tape.height, tape.width, &tape.cache, upstream))
    }

    /// Standalone attention block on `tokens` (`N × C`, token-major).
    pub fn attention_forward(&self, tokens: &[f64]) -> Result<AttentionOutput, ModelError> {
        let c = self.config.feature_channels;
        if self.config.attention.is_none() {
            return Err(ModelError::ShapeMismatch("predictor has no attention block".into()));
        }
        if tokens.is_empty() || !tokens.len().is_multiple_of(c) {
            return Err(ModelError::ShapeMismatch(format!(
                "{} token values for {c} channels",
                tokens.len()
            )));
        }
        let cache = self.attention_cached(tokens.to_vec(), (tokens.len() / c, 1));
        let out = self.mlp_out(&cache);
        Ok(AttentionOutput {
            tokens: out,
            weights: cache.weights,
        })
    }

    fn coarse_grid(&self, height: usize, width: usize, stride: usize) -> (usize, usize) {
        (height.div_ceil(stride), width.div_ceil(stride))
    }

    fn pool(&self, feature: &FeatureMap, stride: usize) -> (Vec<f64>, (usize, usize)) {
        let c = feature.channels;
        let (ch, cw) = self.coarse_grid(feature.height, feature.width, stride);
        let mut tokens = vec![0.0; ch * cw * c];
        let mut counts = vec![0usize; ch * cw];
        for u in 0..feature.height {
            for v in 0..feature.width {
                let t = (u / stride) * cw + v / stride;
                counts[t] += 1;
                let px = feature.pixel(u, v);
                for (a, b) in tokens[t * c..(t + 1) * c].iter_mut().zip(px) {
                    *a += b;
                }
            }
        }
        for (t, &n) in counts.iter().enumerate() {
            for x in &mut tokens[t * c..(t + 1) * c] {
                *x /= n as f64;
            }
        }
        (tokens, (ch, cw))
    }

    fn attention_cached(&self, tokens_in: Vec<f64>, coarse: (usize, usize)) -> AttentionCache {
        let a = self.config.attention.expect("attention configured");
        let c = self.config.feature_channels;
        let o = self.offsets;
        let p = &self.values;
        let n = tokens_in.len() / c;
        let project = |w: usize| {
            let mut out = vec![0.0; n * c];
            for t in 0..n {
                let x = &tokens_in[t * c..(t + 1) * c];
                for i in 0..c {
                    let row = &p[w + i * c..w + (i + 1) * c];
                    out[t * c + i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            out
        };
        let q = project(o.wq);
        let k = project(o.wk);
        let v = project(o.wv);
        let d = c / a.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut mixed = vec![0.0; n * c];
        let mut weights = Vec::with_capacity(a.heads);
        for g in 0..a.heads {
            let cols = g * d..(g + 1) * d;
            let mut wgt = vec![0.0; n * n];
            for i in 0..n {
                let qi = &q[i * c + cols.start..i * c + cols.end];
                let row = &mut wgt[i * n..(i + 1) * n];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k[j * c + cols.start..j * c + cols.end];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
                for (j, &w) in row.iter().enumerate() {
                    for col in cols.clone() {
                        mixed[i * c + col] += w * v[j * c + col];
                    }
                }
            }
            weights.push(wgt);
        }
        // layer norm over channels
        let mut normed = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut ln_out = vec![0.0; n * c];
        for t in 0..n {
            let x = &mixed[t * c..(t + 1) * c];
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[t] = is;
            for i in 0..c {
                let nv = (x[i] - mean) * is;
                normed[t * c + i] = nv;
                ln_out[t * c + i] = p[o.ln_gamma + i] * nv + p[o.ln_beta + i];
            }
        }
        let hdim = a.hidden;
        let mut pre = vec![0.0; n * hdim];
        let mut act = vec![0.0; n * hdim];
        for t in 0..n {
            let x = &ln_out[t * c..(t + 1) * c];
            for j in 0..hdim {
                let row = &p[o.w1 + j * c..o.w1 + (j + 1) * c];
                let z = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + p[o.b1 + j];
                pre[t * hdim + j] = z;
                act[t * hdim + j] = z.max(0.0);
            }
        }
        AttentionCache {
            tokens_in,
            q,
            k,
            v,
            weights,
            normed,
            inv_std,
            ln_out,
            pre,
            act,
            coarse,
        }
    }

    fn mlp_out(&self, cache: &AttentionCache) -> Vec<f64> {
        let a = self.config.attention.unwrap();
        let c = self.config.feature_channels;
        let o = self.offsets;
        let p = &self.values;
        let n = cache.tokens_in.len() / c;
        let mut out = vec![0.0; n * c];
        for t in 0..n {
            let h = &cache.act[t * a.hidden..(t + 1) * a.hidden];
            for i in 0..c {
                let row = &p[o.w2 + i * a.hidden..o.w2 + (i + 1) * a.hidden];
                out[t * c + i] = row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() + p[o.b2 + i];
            }
        }
        out
    }

    fn forward_cached(&self, feature: &FeatureMap) -> ForwardCache {
        let c = feature.channels;
        let (features, attention) = match self.config.attention {
            None => (feature.data.clone(), None),
            Some(a) => {
                let (tokens, coarse) = self.pool(feature, a.stride);
                let cache = self.attention_cached(tokens, coarse);
                let out = self.mlp_out(&cache);
                let mut f = feature.data.clone();
                for u in 0..feature.height {
                    for v in 0..feature.width {
                        let t = (u / a.stride) * coarse.1 + v / a.stride;
                        let base = (u * feature.width + v) * c;
                        for i in 0..c {
                            f[base + i] += out[t * c + i];
                        }
                    }
                }
                (f, Some(cache))
            }
        };
        let heads = self.heads();
        let npx = feature.height * feature.width;
        let w = &self.values[self.offsets.head_weights..self.offsets.head_biases];
        let b = &self.values[self.offsets.head_biases..self.offsets.attention_start];
        let mut raw = vec![0.0; npx * heads];
        for p in 0..npx {
            let x = &features[p * c..(p + 1) * c];
            for j in 0..heads {
                let row = &w[j * c..(j + 1) * c];
                raw[p * heads + j] = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[j];
            }
        }
        ForwardCache {
            features,
            raw,
            attention,
        }
    }

    fn decode(&self, height: usize, width: usize, raw: &[f64]) -> FieldPair {
        let heads = self.heads();
        let field = |base: usize| {
            let layout = &self.config.layout;
            let idx = |ch| base + layout.slot(ch);
            let (is, ic, ir, iw, ih, iconf) = (
                idx(FieldChannel::SinTheta),
                idx(FieldChannel::CosTheta),
                idx(FieldChannel::Radius),
                idx(FieldChannel::Width),
                idx(FieldChannel::Height),
                idx(FieldChannel::Confidence),
            );
            let diag = (height as f64).hypot(width as f64);
            let npx = height * width;
            let mut planes: [Vec<f64>; 5] = std::array::from_fn(|_| Vec::with_capacity(npx));
            for p in 0..npx {
                let z = &raw[p * heads..(p + 1) * heads];
                planes[0].push(diag * softplus(z[ir]));
                let (s, k) = (z[is], z[ic]);
                let theta = if s == 0.0 && k == 0.0 {
                    0.0
                } else {
                    crate::geometry::wrap_angle(s.atan2(k))
                };
                planes[1].push(theta);
                planes[2].push((height as f64 * sigmoid(z[ih])).max(f64::MIN_POSITIVE));
                planes[3].push((width as f64 * sigmoid(z[iw])).max(f64::MIN_POSITIVE));
                planes[4].push(sigmoid(z[iconf]));
            }
            RelationalBoxField::from_planes(height, width, planes).expect("squashing keeps ranges")
        };
        FieldPair {
            ho: field(0),
            oo: field(self.config.layout.len()),
        }
    }

    fn backward_impl(&self, height: usize, width: usize, cache: &ForwardCache, upstream: &FieldPairGrads) -> Vec<f64> {
        let c = self.config.feature_channels;
        let heads = self.heads();
        let npx = height * width;
        let layout = &self.config.layout;
        let diag = (height as f64).hypot(width as f64);

        // d loss / d raw head output
        let mut draw = vec![0.0; npx * heads];
        for (base, g) in [(0, &upstream.ho), (layout.len(), &upstream.oo)] {
            let idx = |ch| base + layout.slot(ch);
            let (is, ic, ir, iw, ih, iconf) = (
                idx(FieldChannel::SinTheta),
                idx(FieldChannel::CosTheta),
                idx(FieldChannel::Radius),
                idx(FieldChannel::Width),
                idx(FieldChannel::Height),
                idx(FieldChannel::Confidence),
            );
            for p in 0..npx {
                let z = &cache.raw[p * heads..(p + 1) * heads];
                let d = &mut draw[p * heads..(p + 1) * heads];
                d[ir] += g.r[p] * diag * sigmoid(z[ir]);
                let (s, k) = (z[is], z[ic]);
                let n2 = s * s + k * k;
                if n2 > 0.0 {
                    d[is] += g.theta[p] * k / n2;
                    d[ic] -= g.theta[p] * s / n2;
                }
                let sh = sigmoid(z[ih]);
                if height as f64 * sh > f64::MIN_POSITIVE {
                    d[ih] += g.h[p] * height as f64 * sh * (1.0 - sh);
                }
                let sw = sigmoid(z[iw]);
                if width as f64 * sw > f64::MIN_POSITIVE {
                    d[iw] += g.w[p] * width as f64 * sw * (1.0 - sw);
                }
                let sc = sigmoid(z[iconf]);
                d[iconf] += g.c[p] * sc * (1.0 - sc);
            }
        }

        let o = self.offsets;
        let mut grad = vec![0.0; o.total];
        let mut dfeat = if self.config.attention.is_some() {
            vec![0.0; npx * c]
        } else {
            Vec::new()
        };
        let w = &self.values[o.head_weights..o.head_biases];
        {
            let (gw, rest) = grad.split_at_mut(o.head_biases);
            let gb = &mut rest[..heads];
            for p in 0..npx {
                let x = &cache.features[p * c..(p + 1) * c];
                let d = &draw[p * heads..(p + 1) * heads];
                for (j, &dj) in d.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    for (gwk, xk) in gw[j * c..(j + 1) * c].iter_mut().zip(x) {
                        *gwk += dj * xk;
                    }
                    if !dfeat.is_empty() {
                        let row = &w[j * c..(j + 1) * c];
                        for (df, wk) in dfeat[p * c..(p + 1) * c].iter_mut().zip(row) {
                            *df += dj * wk;
                        }
                    }
                }
            }
        }

        if let (Some(a), Some(ac)) = (self.config.attention, cache.attention.as_ref()) {
            let (_, cw) = ac.coarse;
            let ntok = ac.tokens_in.len() / c;
            let mut dout = vec![0.0; ntok * c];
            for u in 0..height {
                for v in 0..width {
                    let t = (u / a.stride) * cw + v / a.stride;
                    let p = u * width + v;
                    for i in 0..c {
                        dout[t * c + i] += dfeat[p * c + i];
                    }
                }
            }
            self.attention_backward(ac, &dout, &mut grad);
        }
        grad
    }

    fn attention_backward(&self, ac: &AttentionCache, dout: &[f64], grad: &mut [f64]) {
        let a = self.config.attention.unwrap();
        let c = self.config.feature_channels;
        let o = self.offsets;
        let p = &self.values;
        let n = ac.tokens_in.len() / c;
        let hd = a.hidden;

        // second MLP layer
        let mut dact = vec![0.0; n * hd];
        for t in 0..n {
            for i in 0..c {
                let g = dout[t * c + i];
                grad[o.b2 + i] += g;
                for j in 0..hd {
                    grad[o.w2 + i * hd + j] += g * ac.act[t * hd + j];
                    dact[t * hd + j] += g * p[o.w2 + i * hd + j];
                }
            }
        }
        // relu + first layer
        let mut dln = vec![0.0; n * c];
        for t in 0..n {
            for j in 0..hd {
                let g = if ac.pre[t * hd + j] > 0.0 { dact[t * hd + j] } else { 0.0 };
                if g == 0.0 {
                    continue;
                }
                grad[o.b1 + j] += g;
                for i in 0..c {
                    grad[o.w1 + j * c + i] += g * ac.ln_out[t * c + i];
                    dln[t * c + i] += g * p[o.w1 + j * c + i];
                }
            }
        }
        // layer norm
        let mut dmixed = vec![0.0; n * c];
        for t in 0..n {
            let mut dnorm = vec![0.0; c];
            for i in 0..c {
                let g = dln[t * c + i];
                grad[o.ln_gamma + i] += g * ac.normed[t * c + i];
                grad[o.ln_beta + i] += g;
                dnorm[i] = g * p[o.ln_gamma + i];
            }
            let mean_d = dnorm.iter().sum::<f64>() / c as f64;
            let mean_dx = dnorm
                .iter()
                .zip(&ac.normed[t * c..(t + 1) * c])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / c as f64;
            for i in 0..c {
                dmixed[t * c + i] = ac.inv_std[t] * (dnorm[i] - mean_d - ac.normed[t * c + i] * mean_dx);
            }
        }
        // attention heads
        let d = c / a.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = vec![0.0; n * c];
        let mut dk = vec![0.0; n * c];
        let mut dv = vec![0.0; n * c];
        for g in 0..a.heads {
            let cols = g * d..(g + 1) * d;
            let wgt = &ac.weights[g];
            for i in 0..n {
                // d weight[i, j]
                let mut dw = vec![0.0; n];
                for (j, dwj) in dw.iter_mut().enumerate() {
                    for col in cols.clone() {
                        *dwj += dmixed[i * c + col] * ac.v[j * c + col];
                        dv[j * c + col] += wgt[i * n + j] * dmixed[i * c + col];
                    }
                }
                let dot: f64 = (0..n).map(|j| wgt[i * n + j] * dw[j]).sum();
                for j in 0..n {
                    let ds = wgt[i * n + j] * (dw[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for col in cols.clone() {
                        dq[i * c + col] += ds * ac.k[j * c + col];
                        dk[j * c + col] += ds * ac.q[i * c + col];
                    }
                }
            }
        }
        for (off, dproj) in [(o.wq, &dq), (o.wk, &dk), (o.wv, &dv)] {
            for t in 0..n {
                let x = &ac.tokens_in[t * c..(t + 1) * c];
                for i in 0..c {
                    let g = dproj[t * c + i];
                    if g == 0.0 {
                        continue;
                    }
                    for k in 0..c {
                        grad[off + i * c + k] += g * x[k];
                    }
                }
            }
        }
    }
}

pub const WEIGHTS_MAGIC: [u8; 4] = *b"RBFW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported weight file version {0}")]
    Version(u32),
    #[error("checksum mismatch")]
    Checksum,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("parameter count {found} does not match header shape ({expected})")]
    Count { found: usize, expected: usize },
}

impl PredictorParams {
    /// Serializes to the versioned weight format:
    ///
    /// ```text
    /// magic "RBFW" | version u32 | C_feat u32 | layout_len u32 | layout codes u8*
    /// | attention flag u32 [| stride u32 | heads u32 | hidden u32]
    /// | param count u32 | params f32* | sha256 of all preceding bytes
    /// ```
    ///
    /// All integers and floats are little-endian. Values are stored as `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + self.values.len() * 4);
        buf.extend_from_slice(&WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.config.feature_channels as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.layout.len() as u32).to_le_bytes());
        buf.extend(self.config.layout.channels.iter().map(|c| c.code()));
        match self.config.attention {
            None => buf.extend_from_slice(&0u32.to_le_bytes()),
            Some(a) => {
                buf.extend_from_slice(&1u32.to_le_bytes());
                for x in [a.stride, a.heads, a.hidden] {
                    buf.extend_from_slice(&(x as u32).to_le_bytes());
                }
            }
        }
        buf.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for &x in &self.values {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        if bytes.len() < 32 + 4 {
            return Err(WeightsError::Io(std::io::ErrorKind::UnexpectedEof.into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(WeightsError::Checksum);
        }
        let mut r = body;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != WEIGHTS_MAGIC {
            return Err(WeightsError::BadMagic(magic));
        }
        let mut u32_le = || -> std::io::Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let version = u32_le()? as u32;
        if version != WEIGHTS_VERSION {
            return Err(WeightsError::Version(version));
        }
        let feature_channels = u32_le()?;
        let layout_len = u32_le()?;
        let mut codes = vec![0u8; layout_len];
        r.read_exact(&mut codes)?;
        let channels = codes
            .iter()
            .map(|&c| FieldChannel::from_code(c).ok_or_else(|| ModelError::Layout(format!("code {c}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let layout = ChannelLayout::new(channels)?;
        let mut u32_le = || -> std::io::Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let attention = match u32_le()? {
            0 => None,
            _ => Some(AttentionConfig {
                stride: u32_le()?,
                heads: u32_le()?,
                hidden: u32_le()?,
            }),
        };
        let count = u32_le()?;
        let mut params = Self::zeros(PredictorConfig {
            feature_channels,
            layout,
            attention,
        })?;
        if count != params.values.len() || r.len() != count * 4 {
            return Err(WeightsError::Count {
                found: count,
                expected: params.values.len(),
            });
        }
        for (x, b) in params.values.iter_mut().zip(r.chunks_exact(4)) {
            *x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
        Ok(params)
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<(), WeightsError> {
        out.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<Self, WeightsError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
