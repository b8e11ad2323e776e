//! Experiment configuration, the training loop, and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, AugmentKind, Augmenter};
use crate::data::{make_batches, synth_scene, window_examples, Batch, EventFrame, Example, Scene, SynthConfig, WindowConfig};
use crate::dsp::FeatureConfig;
use crate::error::{Result, SeldError};
use crate::metrics::{evaluate, MetricsConfig, SeldScores};
use crate::model::{init_params, run, Checkpoint, ForwardCtx, ModelConfig, ParamSet};
use crate::numeric::{adam_step, rng_from_seed, AdamConfig, AdamState, SeldRng, Tape, Tensor};
use crate::targets::{decode_clip, DEFAULT_THRESHOLD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_scenes: usize,
    pub seed: u64,
    pub synth: SynthConfig,
    pub window: WindowConfig,
    pub features: FeatureConfig,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_scenes: 40,
            seed: 0,
            synth: SynthConfig::default(),
            window: WindowConfig::default(),
            features: FeatureConfig::default(),
            val_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn scene_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }

    pub fn synth_scenes(&self) -> Result<Vec<Scene>> {
        (0..self.n_scenes)
            .map(|i| synth_scene(&mut rng_from_seed(self.scene_seed(i)), &self.synth))
            .collect()
    }

    /// Scene-level split: the last `val_fraction` of scenes (at least one
    /// when there are two or more) is held out.
    pub fn split<T>(&self, items: Vec<T>) -> (Vec<T>, Vec<T>) {
        let n = items.len();
        let mut n_val = (n as f64 * self.val_fraction).round() as usize;
        if n >= 2 && self.val_fraction > 0.0 {
            n_val = n_val.max(1);
        }
        let mut train = items;
        let val = train.split_off(n - n_val.min(n));
        (train, val)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<u64>,
    /// Validate and checkpoint every this many epochs.
    pub checkpoint_every: usize,
    pub threshold: f64,
    pub metrics: MetricsConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 500,
            batch_size: 128,
            adam: AdamConfig::default(),
            max_steps: None,
            checkpoint_every: 1,
            threshold: DEFAULT_THRESHOLD,
            metrics: MetricsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data_dir: PathBuf::from("data"), out_dir: PathBuf::from("runs/default") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            deterministic: true,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
            training: TrainingConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate(self.data.window.label_frames())?;
        if self.training.batch_size == 0 {
            return Err(SeldError::Config("batch_size must be positive".into()));
        }
        if self.model.out_frames() != self.data.window.label_frames() {
            return Err(SeldError::Config(format!(
                "model emits {} frames but windows hold {}",
                self.model.out_frames(),
                self.data.window.label_frames()
            )));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(SeldError::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogRecord {
    Step { step: u64, epoch: u64, loss: f64, augment: Vec<AugmentKind> },
    Epoch { epoch: u64, step: u64, train_loss: f64, val_loss: Option<f64>, val: Option<SeldScores> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scores: SeldScores,
    pub loss: f64,
    pub predictions: Vec<EventFrame>,
    pub references: Vec<EventFrame>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn of(rng: &SeldRng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    fn restore(&self) -> Result<SeldRng> {
        let mut rng = SeldRng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self.word_pos.parse().map_err(|e| SeldError::Input(format!("rng word_pos: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    epoch: u64,
    adam: AdamConfig,
    augment: AugmentConfig,
    rng: RngState,
    augment_rng: RngState,
}

/// Model, optimizer, and generator state for one training run.
pub struct Trainer {
    pub model: ModelConfig,
    pub params: ParamSet<f32>,
    pub optim: BTreeMap<String, AdamState<f32>>,
    pub step: u64,
    pub epoch: u64,
    pub adam: AdamConfig,
    rng: SeldRng,
    augmenter: Augmenter,
}

fn diag_norms(params: &ParamSet<f32>) -> String {
    let norms = params.grad_norms();
    let mut worst: Vec<(&String, &f64)> = norms.iter().collect();
    worst.sort_by(|a, b| b.1.total_cmp(a.1));
    worst.iter().take(5).map(|(k, v)| format!("{k}={v:.3e}")).collect::<Vec<_>>().join(", ")
}

impl Trainer {
    pub fn new(model: ModelConfig, adam: AdamConfig, augment: AugmentConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let params = init_params(&model, &mut rng)?;
        let optim = params.params.iter().map(|(k, p)| (k.clone(), AdamState::new(p.numel(), adam))).collect();
        Ok(Trainer { model, params, optim, step: 0, epoch: 0, adam, rng, augmenter: Augmenter::new(augment) })
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let augment = AugmentConfig { seed: cfg.augment.seed ^ cfg.seed, ..cfg.augment.clone() };
        Trainer::new(cfg.model.clone(), cfg.training.adam, augment, cfg.seed)
    }

    /// Augment → forward → loss → backward → Adam. Returns the loss and the
    /// augmentations applied.
    pub fn train_step(&mut self, mut batch: Batch) -> Result<(f64, Vec<AugmentKind>)> {
        let applied = self.augmenter.apply(&mut batch)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let x = tape.constant(batch.features);
        let t = tape.constant(batch.targets);
        let mut ctx = ForwardCtx::train(self.rng.clone());
        let y = run(&mut tape, x, &self.model, &bound, &mut self.params.buffers, &mut ctx)?;
        self.rng = ctx.rng;
        let loss = tape.target_loss(y, t, self.model.format)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(SeldError::NonFinite(format!(
                "loss {value} at step {} (lr {})",
                self.step + 1,
                self.adam.lr
            )));
        }
        tape.backward(loss)?;
        self.params.collect_grads(&tape, &bound);
        if self.params.params.values().any(|p| p.grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
            return Err(SeldError::NonFinite(format!(
                "gradient at step {} (lr {}); largest norms: {}",
                self.step + 1,
                self.adam.lr,
                diag_norms(&self.params)
            )));
        }
        for (k, p) in self.params.params.iter_mut() {
            let state = self.optim.get_mut(k).ok_or_else(|| SeldError::Config(format!("no optimizer state for {k}")))?;
            adam_step(p, state)?;
        }
        self.step += 1;
        Ok((value, applied))
    }

    /// Runs epochs until `epochs` or `max_steps`, validating and
    /// checkpointing every `checkpoint_every` epochs when `val` is non-empty.
    pub fn fit(
        &mut self,
        train: &[Example],
        val: &[Example],
        cfg: &TrainingConfig,
        checkpoint_dir: Option<&Path>,
        log: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<Option<SeldScores>> {
        let mut best: Option<SeldScores> = None;
        while (self.epoch as usize) < cfg.epochs && cfg.max_steps.is_none_or(|m| self.step < m) {
            let batches: Vec<Vec<usize>> = make_batches(train, cfg.batch_size, Some(&mut self.rng))?
                .map(|b| b.map(|b| b.indices))
                .collect::<Result<_>>()?;
            let mut total = 0.0;
            let mut count = 0;
            for idx in batches {
                if cfg.max_steps.is_some_and(|m| self.step >= m) {
                    break;
                }
                let (loss, augment) = self.train_step(Batch::from_examples(train, &idx)?)?;
                total += loss;
                count += 1;
                log(&LogRecord::Step { step: self.step, epoch: self.epoch, loss, augment })?;
            }
            self.epoch += 1;
            let every = cfg.checkpoint_every.max(1) as u64;
            let last_epoch = self.epoch as usize >= cfg.epochs || cfg.max_steps.is_some_and(|m| self.step >= m);
            let (mut val_loss, mut val_scores) = (None, None);
            if !val.is_empty() && (self.epoch.is_multiple_of(every) || last_epoch) {
                let report = self.evaluate(val, cfg.batch_size, cfg.threshold, &cfg.metrics)?;
                val_loss = Some(report.loss);
                val_scores = Some(report.scores);
                if best.is_none_or(|b| report.scores.seld_score < b.seld_score) {
                    best = Some(report.scores);
                    if let Some(dir) = checkpoint_dir {
                        self.checkpoint()?.save(&dir.join("best"))?;
                    }
                }
            }
            if let Some(dir) = checkpoint_dir {
                if self.epoch.is_multiple_of(every) || last_epoch {
                    self.checkpoint()?.save(&dir.join("last"))?;
                }
            }
            log(&LogRecord::Epoch {
                epoch: self.epoch,
                step: self.step,
                train_loss: if count > 0 { total / count as f64 } else { f64::NAN },
                val_loss,
                val: val_scores,
            })?;
        }
        Ok(best)
    }

    pub fn predict(&mut self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        crate::model::predict(&self.model, &mut self.params, features)
    }

    pub fn evaluate(
        &mut self,
        examples: &[Example],
        batch_size: usize,
        threshold: f64,
        metrics: &MetricsConfig,
    ) -> Result<EvalReport> {
        evaluate_model(&self.model, &mut self.params, examples, batch_size, threshold, metrics)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut aux = BTreeMap::new();
        for (k, s) in &self.optim {
            let shape = vec![s.m.len()];
            aux.insert(format!("adam.m.{k}"), Tensor::new(shape.clone(), s.m.clone())?);
            aux.insert(format!("adam.v.{k}"), Tensor::new(shape, s.v.clone())?);
        }
        let steps: BTreeMap<&String, u64> = self.optim.iter().map(|(k, s)| (k, s.step)).collect();
        let state = TrainerState {
            epoch: self.epoch,
            adam: self.adam,
            augment: self.augmenter.config().clone(),
            rng: RngState::of(&self.rng),
            augment_rng: RngState::of(self.augmenter.rng()),
        };
        Ok(Checkpoint {
            model: self.model.clone(),
            step: self.step,
            params: self.params.clone(),
            aux,
            extra: serde_json::json!({ "trainer": state, "adam_steps": steps }),
        })
    }

    /// Restores a run saved by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint) -> Result<Self> {
        let state: TrainerState = serde_json::from_value(ck.extra["trainer"].clone())?;
        let steps: BTreeMap<String, u64> = serde_json::from_value(ck.extra["adam_steps"].clone())?;
        let mut optim = BTreeMap::new();
        for (k, p) in &ck.params.params {
            let get = |kind: &str| {
                ck.aux
                    .get(&format!("adam.{kind}.{k}"))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| SeldError::Input(format!("checkpoint lacks adam.{kind}.{k}")))
            };
            let (m, v) = (get("m")?, get("v")?);
            if m.len() != p.numel() {
                return Err(SeldError::dim("resume", &[m.len()], p.shape()));
            }
            let step = steps.get(k).copied().unwrap_or(ck.step);
            optim.insert(k.clone(), AdamState { m, v, step, config: state.adam });
        }
        let mut augmenter = Augmenter::new(state.augment);
        augmenter.set_rng(state.augment_rng.restore()?);
        Ok(Trainer {
            model: ck.model,
            params: ck.params,
            optim,
            step: ck.step,
            epoch: state.epoch,
            adam: state.adam,
            rng: state.rng.restore()?,
            augmenter,
        })
    }
}

/// Predicts every example, decodes at `threshold`, and scores against the
/// examples' labels. Example `i` occupies frames `[i·L, (i+1)·L)` so that
/// segments never straddle two examples.
pub fn evaluate_model(
    model: &ModelConfig,
    params: &mut ParamSet<f32>,
    examples: &[Example],
    batch_size: usize,
    threshold: f64,
    metrics: &MetricsConfig,
) -> Result<EvalReport> {
    let mut predictions = Vec::new();
    let mut references = Vec::new();
    let mut loss_sum = 0.0;
    for batch in make_batches(examples, batch_size, None)? {
        let batch = batch?;
        let out = crate::model::predict(model, params, &batch.features)?;
        let mut tape: Tape<f32> = Tape::new();
        let (pv, tv) = (tape.constant(out.clone()), tape.constant(batch.targets.clone()));
        let l = tape.target_loss(pv, tv, model.format)?;
        loss_sum += tape.value(l).item() as f64 * batch.size() as f64;
        let frames = out.shape()[1];
        for (k, &i) in batch.indices.iter().enumerate() {
            let clip = Tensor::new(vec![frames, out.shape()[2]], out.unstack()[k].data().to_vec())?;
            let offset = i * frames;
            predictions.extend(decode_clip(&clip, model.format, threshold, offset)?);
            references.extend(examples[i].events.iter().map(|e| EventFrame { frame: e.frame + offset, ..*e }));
        }
    }
    Ok(EvalReport {
        scores: evaluate(&predictions, &references, metrics),
        loss: loss_sum / examples.len() as f64,
        predictions,
        references,
    })
}

/// Predicts a whole scene by tiling it with non-overlapping windows of
/// `window.window_seconds`; frames past the last full window are not
/// predicted. Returns events with scene-absolute frames and the number of
/// frames covered.
pub fn predict_scene(
    model: &ModelConfig,
    params: &mut ParamSet<f32>,
    scene: &Scene,
    features: &FeatureConfig,
    window: &WindowConfig,
    threshold: f64,
) -> Result<(Vec<EventFrame>, usize)> {
    let tiling = WindowConfig { hop_seconds: window.window_seconds, ..*window };
    let examples = window_examples(scene, model.format, features, &tiling)?;
    let len = tiling.label_frames();
    let mut events = Vec::new();
    for (w, ex) in examples.iter().enumerate() {
        let out = crate::model::predict(model, params, &Tensor::stack(std::slice::from_ref(&ex.features))?)?;
        let clip = out.reshape(vec![len, model.format.dim()])?;
        events.extend(decode_clip(&clip, model.format, threshold, w * len)?);
    }
    Ok((events, examples.len() * len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_examples;
    use crate::targets::TargetFormat;

    fn tiny_setup() -> (ExperimentConfig, Vec<Example>) {
        let mut cfg = ExperimentConfig {
            model: ModelConfig {
                format: TargetFormat::Single,
                m_channels: 8,
                n_heads: 2,
                n_dst_blocks: 1,
                head_hidden: 16,
                freq_pool: [4, 2, 1],
                ..ModelConfig::default()
            },
            ..ExperimentConfig::default()
        };
        cfg.training.batch_size = 2;
        cfg.training.epochs = 2;
        cfg.data.synth = SynthConfig { duration: 5.0, n_events: 1, classes: vec![0, 1], ..SynthConfig::default() };
        cfg.data.n_scenes = 5;
        let scenes = cfg.data.synth_scenes().unwrap();
        let ex = build_examples(&scenes, cfg.model.format, &cfg.data.features, &cfg.data.window).unwrap();
        (cfg, ex)
    }

    #[test]
    fn split_is_ninety_ten() {
        let d = DataConfig::default();
        let (a, b) = d.split((0..40).collect::<Vec<_>>());
        assert_eq!((a.len(), b.len()), (36, 4));
        let (a, b) = d.split(vec![1, 2]);
        assert_eq!((a, b), (vec![1], vec![2]));
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
        cfg.validate().unwrap();
        assert_eq!(cfg.training.batch_size, 128);
        assert_eq!(cfg.training.adam.lr, 1e-3);
    }

    #[test]
    fn fit_logs_and_checkpoints() {
        let (cfg, ex) = tiny_setup();
        let (train, val) = cfg.data.split(ex);
        let mut trainer = Trainer::from_config(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut lines = Vec::new();
        let best = trainer
            .fit(&train, &val, &cfg.training, Some(dir.path()), &mut |r| {
                lines.push(serde_json::to_string(r).unwrap());
                Ok(())
            })
            .unwrap();
        assert!(best.is_some());
        assert_eq!(trainer.epoch, 2);
        assert_eq!(lines.iter().filter(|l| l.starts_with("{\"event\":\"epoch\"")).count(), 2);
        assert!(dir.path().join("best/manifest.json").exists());
        assert!(dir.path().join("last/manifest.json").exists());
    }

    #[test]
    fn resume_reproduces_next_step() {
        let (cfg, ex) = tiny_setup();
        let mut a = Trainer::from_config(&cfg).unwrap();
        let b0 = Batch::from_examples(&ex, &[0, 1]).unwrap();
        a.train_step(b0.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        a.checkpoint().unwrap().save(dir.path()).unwrap();
        let mut b = Trainer::resume(Checkpoint::load(dir.path()).unwrap()).unwrap();
        let b1 = Batch::from_examples(&ex, &[2, 3]).unwrap();
        let la = a.train_step(b1.clone()).unwrap();
        let lb = b.train_step(b1).unwrap();
        assert_eq!(la.0.to_bits(), lb.0.to_bits());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn scene_prediction_tiles_windows() {
        let (cfg, _) = tiny_setup();
        let scene = synth_scene(&mut rng_from_seed(3), &cfg.data.synth).unwrap();
        let mut t = Trainer::from_config(&cfg).unwrap();
        let (events, covered) =
            predict_scene(&t.model, &mut t.params, &scene, &cfg.data.features, &cfg.data.window, 0.0).unwrap();
        assert_eq!(covered, 50);
        // threshold 0 keeps every class in every frame
        assert_eq!(events.len(), 50 * 13);
    }

    #[test]
    fn nan_input_aborts_with_diagnostic() {
        let (cfg, ex) = tiny_setup();
        let mut t = Trainer::from_config(&cfg).unwrap();
        let mut b = Batch::from_examples(&ex, &[0, 1]).unwrap();
        b.features.data_mut()[0] = f32::NAN;
        match t.train_step(b) {
            Err(SeldError::NonFinite(msg)) => assert!(msg.contains("step 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
