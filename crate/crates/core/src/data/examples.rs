//! Fixed-length training examples and mini-batches.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metadata::{EventFrame, LABEL_RATE};
use super::synth::Scene;
use crate::dsp::wav::SAMPLE_RATE;
use crate::dsp::{extract_with_bank, FeatureConfig, MelBank};
use crate::error::{Result, SeldError};
use crate::numeric::{SeldRng, Tensor};
use crate::targets::{encode_clip, TargetFormat};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub window_seconds: f64,
    pub hop_seconds: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { window_seconds: 5.0, hop_seconds: 5.0 }
    }
}

impl WindowConfig {
    pub fn label_frames(&self) -> usize {
        (self.window_seconds * LABEL_RATE as f64).round() as usize
    }

    pub fn hop_frames(&self) -> usize {
        (self.hop_seconds * LABEL_RATE as f64).round() as usize
    }
}

/// One window: features `[7, T, F]`, target `[label_frames, D]`, and the
/// window's events with frames relative to its start.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Tensor<f32>,
    pub target: Tensor<f32>,
    pub events: Vec<EventFrame>,
}

pub struct Window<'a> {
    pub wave: [&'a [f32]; 4],
    pub events: Vec<EventFrame>,
    pub start_frame: usize,
}

/// Cuts a scene into windows (tail shorter than a window is dropped).
pub fn windows<'a>(scene: &'a Scene, cfg: &WindowConfig) -> Result<Vec<Window<'a>>> {
    let (len, hop) = (cfg.label_frames(), cfg.hop_frames());
    if len == 0 || hop == 0 {
        return Err(SeldError::Config(format!("window {cfg:?} is empty")));
    }
    let spf = SAMPLE_RATE as usize / LABEL_RATE;
    let total = scene.wave[0].len() / spf;
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= total {
        let (a, b) = (start * spf, (start + len) * spf);
        let events = scene
            .events
            .iter()
            .filter(|e| (start..start + len).contains(&e.frame))
            .map(|e| EventFrame { frame: e.frame - start, ..*e })
            .collect();
        out.push(Window {
            wave: [&scene.wave[0][a..b], &scene.wave[1][a..b], &scene.wave[2][a..b], &scene.wave[3][a..b]],
            events,
            start_frame: start,
        });
        start += hop;
    }
    Ok(out)
}

pub fn window_examples(
    scene: &Scene,
    format: TargetFormat,
    features: &FeatureConfig,
    window: &WindowConfig,
) -> Result<Vec<Example>> {
    let bank = features.mel_bank()?;
    windows(scene, window)?
        .into_iter()
        .map(|w| example_from_window(&w, format, features, &bank, window.label_frames()))
        .collect()
}

fn example_from_window(
    w: &Window<'_>,
    format: TargetFormat,
    features: &FeatureConfig,
    bank: &MelBank,
    label_frames: usize,
) -> Result<Example> {
    let wave: Vec<Vec<f32>> = w.wave.iter().map(|c| c.to_vec()).collect();
    let clip = extract_with_bank(&wave, features, bank)?;
    Ok(Example {
        features: clip.data,
        target: encode_clip(&w.events, label_frames, format)?,
        events: w.events.clone(),
    })
}

/// Windows and featurizes many scenes in parallel; output order follows
/// input order regardless of thread count.
pub fn build_examples(
    scenes: &[Scene],
    format: TargetFormat,
    features: &FeatureConfig,
    window: &WindowConfig,
) -> Result<Vec<Example>> {
    let bank = features.mel_bank()?;
    let per_scene: Vec<Result<Vec<Example>>> = scenes
        .par_iter()
        .map(|s| {
            windows(s, window)?
                .iter()
                .map(|w| example_from_window(w, format, features, &bank, window.label_frames()))
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for r in per_scene {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 7, T, F]`
    pub features: Tensor<f32>,
    /// `[B, label_frames, D]`
    pub targets: Tensor<f32>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn from_examples(examples: &[Example], indices: &[usize]) -> Result<Batch> {
        let feats: Vec<Tensor<f32>> = indices.iter().map(|&i| examples[i].features.clone()).collect();
        let targets: Vec<Tensor<f32>> = indices.iter().map(|&i| examples[i].target.clone()).collect();
        Ok(Batch {
            features: Tensor::stack(&feats)?,
            targets: Tensor::stack(&targets)?,
            indices: indices.to_vec(),
        })
    }
}

/// Yields batches lazily; the final partial batch is kept.
pub struct Batches<'a> {
    examples: &'a [Example],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch::from_examples(self.examples, idx))
    }
}

/// Epoch order is a seeded shuffle when `rng` is given, input order otherwise.
pub fn make_batches<'a>(
    examples: &'a [Example],
    batch_size: usize,
    rng: Option<&mut SeldRng>,
) -> Result<Batches<'a>> {
    if examples.is_empty() {
        return Err(SeldError::Usage("no examples to batch".into()));
    }
    if batch_size == 0 {
        return Err(SeldError::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    Ok(Batches { examples, order, batch_size, pos: 0 })
}
