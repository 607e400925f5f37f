//! Style and content feature injection into the main denoising path.
//!
//! The style path's self-attention keys and values are recoloured to the
//! main path's channel statistics with AdaIN and used in place of the main
//! path's own keys and values. On top of that, attention of the main queries
//! over the raw style keys/values is AdaIN-aligned to the main output and
//! added with a step-dependent weight `λ_i`:
//!
//! ```text
//! K_mix = adain(K_s, K_t)      V_mix = adain(V_s, V_t)
//! A     = Attn(Q_t, K_mix, V_mix) + λ_i · adain(Attn(Q_t, K_s, V_s), Attn(Q_t, K_mix, V_mix))
//! ```
//!
//! `λ_i` follows a sigmoid over denoising progress, weak early and strong
//! late. Separately, ResBlock outputs on configured layers are replaced
//! verbatim by the content path's features captured at the same timestep.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, check_shapes, narrow, scaled_dot_product, widen};
use crate::backend::{AttentionCall, AttentionTransform, BackendDescriptor};
use crate::error::{Error, Result};
use crate::tensor::{FeatureGrid, Matrix};

/// Captured inputs and output of one self-attention layer, heads merged.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionFeatures {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub output: Matrix,
}

/// Attention features of several layers captured at one timestep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionPacket {
    timestep: Option<u32>,
    layers: BTreeMap<usize, AttentionFeatures>,
}

impl AttentionPacket {
    pub fn new(timestep: Option<u32>) -> Self {
        Self {
            timestep,
            layers: BTreeMap::new(),
        }
    }

    pub fn timestep(&self) -> Option<u32> {
        self.timestep
    }

    pub fn insert(&mut self, layer: usize, features: AttentionFeatures) {
        self.layers.insert(layer, features);
    }

    pub fn get(&self, layer: usize) -> Option<&AttentionFeatures> {
        self.layers.get(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = (usize, &AttentionFeatures)> {
        self.layers.iter().map(|(&l, f)| (l, f))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// ResBlock output features of several layers captured at one timestep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualPacket {
    timestep: Option<u32>,
    layers: BTreeMap<usize, FeatureGrid>,
}

impl ResidualPacket {
    pub fn new(timestep: Option<u32>) -> Self {
        Self {
            timestep,
            layers: BTreeMap::new(),
        }
    }

    pub fn timestep(&self) -> Option<u32> {
        self.timestep
    }

    pub fn insert(&mut self, layer: usize, hidden: FeatureGrid) {
        self.layers.insert(layer, hidden);
    }

    pub fn get(&self, layer: usize) -> Option<&FeatureGrid> {
        self.layers.get(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = (usize, &FeatureGrid)> {
        self.layers.iter().map(|(&l, f)| (l, f))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    /// ResBlock layers whose outputs come from the content path.
    pub resblock_layers: BTreeSet<usize>,
    /// Self-attention layers that receive style features.
    pub attention_layers: BTreeSet<usize>,
    pub lambda_max: f64,
    /// Sigmoid slope of the λ schedule.
    pub lambda_k: f64,
    /// Sigmoid midpoint of the λ schedule, as a fraction of progress.
    pub lambda_mid: f64,
    pub adain_epsilon: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            resblock_layers: (0..4).collect(),
            attention_layers: (0..8).collect(),
            lambda_max: 1.0,
            lambda_k: 10.0,
            lambda_mid: 0.5,
            adain_epsilon: 1e-5,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda_max must be finite and non-negative, got {}",
                self.lambda_max
            )));
        }
        if self.adain_epsilon.is_nan() || self.adain_epsilon <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "adain_epsilon must be positive, got {}",
                self.adain_epsilon
            )));
        }
        if !self.lambda_k.is_finite() || !self.lambda_mid.is_finite() {
            return Err(Error::InvalidConfig("lambda schedule parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn validate_for(&self, descriptor: &BackendDescriptor) -> Result<()> {
        self.validate()?;
        if let Some(&index) = self.resblock_layers.last() {
            if index >= descriptor.num_resblock_layers {
                return Err(Error::HookIndexOutOfRange {
                    kind: "resblock",
                    index,
                    count: descriptor.num_resblock_layers,
                });
            }
        }
        if let Some(&index) = self.attention_layers.last() {
            if index >= descriptor.num_attention_layers {
                return Err(Error::HookIndexOutOfRange {
                    kind: "attention",
                    index,
                    count: descriptor.num_attention_layers,
                });
            }
        }
        Ok(())
    }
}

/// Per-channel `(mean, population std)` across tokens, in f64.
pub fn channel_stats(m: &Matrix) -> Vec<(f64, f64)> {
    stats(&widen(m), m.cols())
}

fn stats(data: &[f64], channels: usize) -> Vec<(f64, f64)> {
    let n = (data.len() / channels) as f64;
    (0..channels)
        .map(|c| {
            let column = || data.iter().skip(c).step_by(channels);
            let mean = column().sum::<f64>() / n;
            let var = column().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// Adaptive instance normalisation: re-standardise each channel of `x` to
/// the mean and standard deviation of the same channel of `y`.
///
/// `out = σ(y)·(x − μ(x)) / (σ(x) + ε) + μ(y)`, statistics per channel over
/// tokens. `x` and `y` may have different token counts.
pub fn adain(x: &Matrix, y: &Matrix, epsilon: f64) -> Result<Matrix> {
    check_adain(x, y)?;
    let out = adain_f64(&widen(x), &widen(y), x.cols(), epsilon);
    Matrix::from_vec(x.rows(), x.cols(), narrow(&out))
}

fn check_adain(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.cols() != y.cols() {
        return Err(Error::ChannelMismatch {
            left: x.cols(),
            right: y.cols(),
        });
    }
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::ShapeMismatch("AdaIN needs at least one token".into()));
    }
    Ok(())
}

fn adain_f64(x: &[f64], y: &[f64], channels: usize, epsilon: f64) -> Vec<f64> {
    let sx = stats(x, channels);
    let sy = stats(y, channels);
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let ((mx, dx), (my, dy)) = (sx[i % channels], sy[i % channels]);
            dy * (v - mx) / (dx + epsilon) + my
        })
        .collect()
}

/// Style keys/values recoloured to the main path's statistics.
pub fn mix_kv(
    k_main: &Matrix,
    v_main: &Matrix,
    k_style: &Matrix,
    v_style: &Matrix,
    epsilon: f64,
) -> Result<(Matrix, Matrix)> {
    k_main
        .check_same_shape(k_style)
        .and_then(|_| v_main.check_same_shape(v_style))?;
    Ok((adain(k_style, k_main, epsilon)?, adain(v_style, v_main, epsilon)?))
}

/// Injection weight for denoising step `index` of `steps`:
/// `λ_max · sigmoid(k · (index / (steps − 1) − mid))`.
pub fn lambda_schedule(index: usize, steps: usize, config: &InjectionConfig) -> Result<f64> {
    if index >= steps {
        return Err(Error::IndexOutOfRange { index, len: steps });
    }
    let progress = if steps > 1 {
        index as f64 / (steps - 1) as f64
    } else {
        0.0
    };
    let z = config.lambda_k * (progress - config.lambda_mid);
    Ok(config.lambda_max / (1.0 + (-z).exp()))
}

/// Attention output of main-path layer `layer` with style injection.
///
/// Layers outside `config.attention_layers` get plain attention.
#[allow(clippy::too_many_arguments)]
pub fn inject_attention(
    layer: usize,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    style: &AttentionPacket,
    lambda: f64,
    heads: usize,
    config: &InjectionConfig,
) -> Result<Matrix> {
    if !config.attention_layers.contains(&layer) {
        return scaled_dot_product(q, k, v, heads);
    }
    let features = style.get(layer).ok_or(Error::MissingStylePacket {
        layer,
        timestep: style.timestep().unwrap_or_default(),
    })?;
    inject_with_features(q, k, v, features, lambda, heads, config.adain_epsilon)
}

/// The whole injection runs in f64 and is rounded once: the final AdaIN
/// divides by the spread of the styled attention, which can be small enough
/// to magnify intermediate f32 rounding well past 1e-6.
fn inject_with_features(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    style: &AttentionFeatures,
    lambda: f64,
    heads: usize,
    epsilon: f64,
) -> Result<Matrix> {
    k.check_same_shape(&style.k).and_then(|_| v.check_same_shape(&style.v))?;
    check_shapes(q, k, v, heads)?;
    check_adain(k, k)?;
    let c = q.cols();
    let (q, ks, vs) = (widen(q), widen(&style.k), widen(&style.v));
    let k_mix = adain_f64(&ks, &widen(k), c, epsilon);
    let v_mix = adain_f64(&vs, &widen(v), c, epsilon);
    let mut out = attend(&q, &k_mix, &v_mix, c, heads);
    if lambda != 0.0 && !q.is_empty() {
        let styled = attend(&q, &ks, &vs, c, heads);
        let aligned = adain_f64(&styled, &out, c, epsilon);
        out.iter_mut().zip(aligned).for_each(|(o, a)| *o += lambda * a);
    }
    Matrix::from_vec(q.len() / c.max(1), c, narrow(&out))
}

/// ResBlock output for `layer`: the content path's feature when `layer` is
/// selected, otherwise `main_hidden` unchanged.
pub fn replace_resblock(
    layer: usize,
    main_hidden: FeatureGrid,
    content: &ResidualPacket,
    layers: &BTreeSet<usize>,
) -> Result<FeatureGrid> {
    if !layers.contains(&layer) {
        return Ok(main_hidden);
    }
    let replacement = content.get(layer).ok_or(Error::MissingContentPacket(layer))?;
    main_hidden.check_same_shape(replacement)?;
    Ok(replacement.clone())
}

/// [`AttentionTransform`] that injects a style packet captured at the same
/// timestep.
pub struct StyleInjection {
    layers: BTreeSet<usize>,
    packet: Arc<AttentionPacket>,
    lambda: f64,
    epsilon: f64,
}

impl StyleInjection {
    pub fn new(config: &InjectionConfig, packet: Arc<AttentionPacket>, lambda: f64) -> Self {
        Self {
            layers: config.attention_layers.clone(),
            packet,
            lambda,
            epsilon: config.adain_epsilon,
        }
    }
}

impl AttentionTransform for StyleInjection {
    fn layers(&self) -> &BTreeSet<usize> {
        &self.layers
    }

    fn apply(&self, call: &AttentionCall<'_>) -> Result<Matrix> {
        if self.packet.timestep() != Some(call.timestep) {
            return Err(Error::TimestepMismatch {
                expected: Some(call.timestep),
                found: self.packet.timestep(),
            });
        }
        let features = self.packet.get(call.layer).ok_or(Error::MissingStylePacket {
            layer: call.layer,
            timestep: call.timestep,
        })?;
        inject_with_features(call.q, call.k, call.v, features, self.lambda, call.heads, self.epsilon)
    }
}
