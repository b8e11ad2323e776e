//! Batch-level augmentations. Each one updates features and targets together.
//!
//! Enabled augmentations run in a fixed order (frameshift, timemask, chswap,
//! mixup), each independently with probability `probability`. Parameters are
//! drawn per example.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::dsp::log_floor;
use crate::error::{Result, SeldError};
use crate::numeric::{rng_from_seed, SeldRng, Tensor};
use crate::spatial::ChannelTransform;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    FrameShift,
    TimeMask,
    #[serde(rename = "chswap")]
    ChannelSwap,
    MixUp,
}

impl AugmentKind {
    pub const ORDER: [AugmentKind; 4] =
        [AugmentKind::FrameShift, AugmentKind::TimeMask, AugmentKind::ChannelSwap, AugmentKind::MixUp];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: Vec<AugmentKind>,
    pub probability: f64,
    /// Longest time mask, in label frames.
    pub mask_max_len: usize,
    pub mixup_lambda: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: AugmentKind::ORDER.to_vec(),
            probability: 0.5,
            mask_max_len: 10,
            mixup_lambda: (0.5, 1.0),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { enabled: Vec::new(), ..Self::default() }
    }

    pub fn validate(&self, label_frames: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(SeldError::Config(format!("probability {} outside [0, 1]", self.probability)));
        }
        if self.mask_max_len > label_frames {
            return Err(SeldError::Config(format!(
                "mask_max_len {} exceeds {label_frames} label frames",
                self.mask_max_len
            )));
        }
        let (lo, hi) = self.mixup_lambda;
        if !(0.5 <= lo && lo < hi && hi <= 1.0) {
            return Err(SeldError::Config(format!("mixup_lambda ({lo}, {hi}] must lie in [0.5, 1]")));
        }
        Ok(())
    }
}

/// `(batch, feature frames, label frames, feature plane, target row)`.
fn geometry(features: &Tensor<f32>, targets: &Tensor<f32>) -> Result<(usize, usize, usize, usize, usize)> {
    let (fs, ts) = (features.shape(), targets.shape());
    if fs.len() != 4 || fs[1] != 7 || ts.len() != 3 || fs[0] != ts[0] || ts[1] == 0 || fs[2] % ts[1] != 0 {
        return Err(SeldError::dim("augment", fs, ts));
    }
    Ok((fs[0], fs[2], ts[1], fs[2] * fs[3], ts[2]))
}

fn roll(x: &mut [f32], rows: usize, shift: usize) {
    let w = x.len() / rows;
    x.rotate_right((shift % rows) * w);
}

/// Circularly delays example `b` by `shifts[b]` label frames (and the
/// matching number of feature frames).
pub fn frameshift(features: &mut Tensor<f32>, targets: &mut Tensor<f32>, shifts: &[usize]) -> Result<()> {
    let (b, tf, tl, plane, d) = geometry(features, targets)?;
    if shifts.len() != b {
        return Err(SeldError::dim("frameshift", &[shifts.len()], &[b]));
    }
    let ratio = tf / tl;
    for (i, &s) in shifts.iter().enumerate() {
        for ch in features.data_mut()[i * 7 * plane..(i + 1) * 7 * plane].chunks_mut(plane) {
            roll(ch, tf, s * ratio);
        }
        roll(&mut targets.data_mut()[i * tl * d..(i + 1) * tl * d], tl, s);
    }
    Ok(())
}

/// Silences label frames `[start, start + len)` of each example: log-mel to
/// the floor, intensity and targets to zero.
pub fn time_mask(features: &mut Tensor<f32>, targets: &mut Tensor<f32>, spans: &[(usize, usize)]) -> Result<()> {
    let (b, tf, tl, plane, d) = geometry(features, targets)?;
    if spans.len() != b {
        return Err(SeldError::dim("time_mask", &[spans.len()], &[b]));
    }
    let (ratio, bins) = (tf / tl, plane / tf);
    let floor = log_floor();
    for (i, &(start, len)) in spans.iter().enumerate() {
        if start + len > tl {
            return Err(SeldError::Input(format!("mask {start}+{len} exceeds {tl} frames")));
        }
        let (a, z) = (start * ratio * bins, (start + len) * ratio * bins);
        for (c, ch) in features.data_mut()[i * 7 * plane..(i + 1) * 7 * plane].chunks_mut(plane).enumerate() {
            ch[a..z].fill(if c < 4 { floor } else { 0.0 });
        }
        targets.data_mut()[i * tl * d + start * d..i * tl * d + (start + len) * d].fill(0.0);
    }
    Ok(())
}

pub fn channel_swap(
    features: &mut Tensor<f32>,
    targets: &mut Tensor<f32>,
    transforms: &[ChannelTransform],
) -> Result<()> {
    let (b, _, tl, plane, d) = geometry(features, targets)?;
    if transforms.len() != b {
        return Err(SeldError::dim("channel_swap", &[transforms.len()], &[b]));
    }
    for (i, t) in transforms.iter().enumerate() {
        t.apply_feature_block(&mut features.data_mut()[i * 7 * plane..(i + 1) * 7 * plane])?;
        t.apply_accdoa(&mut targets.data_mut()[i * tl * d..(i + 1) * tl * d]);
    }
    Ok(())
}

/// `x_i ← λ_i x_i + (1 − λ_i) x_{partner_i}` on all seven channels; targets
/// stay those of example `i`, which always has the larger ratio.
pub fn moderate_mixup(features: &mut Tensor<f32>, partners: &[usize], lambdas: &[f64]) -> Result<()> {
    let b = features.shape()[0];
    if partners.len() != b || lambdas.len() != b || partners.iter().any(|&p| p >= b) {
        return Err(SeldError::dim("moderate_mixup", &[partners.len(), lambdas.len()], &[b]));
    }
    let per = features.numel() / b;
    let src = features.data().to_vec();
    for (i, (&j, &lam)) in partners.iter().zip(lambdas).enumerate() {
        let (l, m) = (lam as f32, (1.0 - lam) as f32);
        let xj = &src[j * per..(j + 1) * per];
        for (o, &y) in features.data_mut()[i * per..(i + 1) * per].iter_mut().zip(xj) {
            *o = l * *o + m * y;
        }
    }
    Ok(())
}

/// Seeded augmentation pipeline.
pub struct Augmenter {
    config: AugmentConfig,
    rng: SeldRng,
}

impl Augmenter {
    pub fn new(config: AugmentConfig) -> Self {
        let rng = rng_from_seed(config.seed);
        Augmenter { config, rng }
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.config
    }

    pub fn rng(&self) -> &SeldRng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: SeldRng) {
        self.rng = rng;
    }

    /// Augments a batch in place and returns the augmentations applied.
    pub fn apply(&mut self, batch: &mut Batch) -> Result<Vec<AugmentKind>> {
        let b = batch.size();
        let tl = batch.targets.shape()[1];
        let mut applied = Vec::new();
        for kind in AugmentKind::ORDER {
            if !self.config.enabled.contains(&kind) || !self.rng.random_bool(self.config.probability) {
                continue;
            }
            let (f, t) = (&mut batch.features, &mut batch.targets);
            match kind {
                AugmentKind::FrameShift => {
                    let shifts: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..tl)).collect();
                    frameshift(f, t, &shifts)?;
                }
                AugmentKind::TimeMask => {
                    let max = self.config.mask_max_len.min(tl);
                    let spans: Vec<(usize, usize)> = (0..b)
                        .map(|_| {
                            let len = self.rng.random_range(0..=max);
                            (self.rng.random_range(0..=tl - len), len)
                        })
                        .collect();
                    time_mask(f, t, &spans)?;
                }
                AugmentKind::ChannelSwap => {
                    let ts: Vec<ChannelTransform> = (0..b)
                        .map(|_| ChannelTransform::from_id(self.rng.random_range(0..ChannelTransform::COUNT)))
                        .collect::<Result<_>>()?;
                    channel_swap(f, t, &ts)?;
                }
                AugmentKind::MixUp => {
                    let mut partners: Vec<usize> = (0..b).collect();
                    partners.shuffle(&mut self.rng);
                    let (lo, hi) = self.config.mixup_lambda;
                    // (lo, hi]
                    let lambdas: Vec<f64> = (0..b).map(|_| hi - self.rng.random_range(0.0..hi - lo)).collect();
                    moderate_mixup(f, &partners, &lambdas)?;
                }
            }
            applied.push(kind);
        }
        Ok(applied)
    }
}
