use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use seld_core::data::{build_examples, format_metadata, parse_metadata, Scene};
use seld_core::dsp::extract_with_bank;
use seld_core::dsp::wav::read_foa;
use seld_core::experiment::{predict_scene, ExperimentConfig, LogRecord, Trainer};
use seld_core::metrics::{evaluate_files, Averaging, MetricsConfig, SeldScores};
use seld_core::model::Checkpoint;
use seld_core::numeric::io::save_tensor;
use serde::Serialize;

use crate::config::write_manifest;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Sorted `*.wav` files in `dir`, or `dir` itself when it is a file.
fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "wav"))
        .collect();
    out.sort();
    Ok(out)
}

/// Every `stem.wav` with a matching `stem.csv`, in name order.
fn load_scenes(dir: &Path) -> Result<Vec<(String, Scene)>> {
    let mut scenes = Vec::new();
    for wav in wav_files(dir)? {
        let csv = wav.with_extension("csv");
        if !csv.exists() {
            log::warn!("skipping {}: no {}", wav.display(), csv.display());
            continue;
        }
        let scene = Scene::load(&wav, &csv).with_context(|| format!("loading scene {}", wav.display()))?;
        let stem = wav.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        scenes.push((stem, scene));
    }
    if scenes.is_empty() {
        bail!("no scenes (stem.wav + stem.csv) found in {}", dir.display());
    }
    Ok(scenes)
}

pub fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut seeds = Vec::new();
    for i in 0..cfg.data.n_scenes {
        let seed = cfg.data.scene_seed(i);
        let scene = seld_core::data::synth_scene(&mut seld_core::numeric::rng_from_seed(seed), &cfg.data.synth)?;
        let stem = format!("scene_{i:04}");
        scene.save(out, &stem).with_context(|| format!("writing {stem} to {}", out.display()))?;
        seeds.push(serde_json::json!({ "stem": stem, "seed": seed, "events": scene.events.len() }));
    }
    write_manifest(out, "synth", cfg, serde_json::json!({ "scenes": seeds }))?;
    log::info!("wrote {} scenes to {}", cfg.data.n_scenes, out.display());
    Ok(())
}

pub fn featurize(cfg: &ExperimentConfig, input: &Path, out: &Path) -> Result<()> {
    create_dir(out)?;
    let bank = cfg.data.features.mel_bank()?;
    let files = wav_files(input)?;
    if files.is_empty() {
        bail!("no .wav files in {}", input.display());
    }
    for wav in &files {
        let wave = read_foa(wav).with_context(|| format!("reading {}", wav.display()))?;
        let clip = extract_with_bank(&wave, &cfg.data.features, &bank)?;
        let stem = wav.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let bin = out.join(format!("{stem}.bin"));
        save_tensor(&clip.data, &bin).with_context(|| format!("writing {}", bin.display()))?;
        let sidecar = out.join(format!("{stem}.json"));
        std::fs::write(&sidecar, clip.sidecar_json() + "\n").with_context(|| format!("writing {}", sidecar.display()))?;
    }
    write_manifest(out, "featurize", cfg, serde_json::json!({ "files": files.len() }))?;
    log::info!("featurized {} files into {}", files.len(), out.display());
    Ok(())
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
}

pub fn train(cfg: &ExperimentConfig, args: &TrainArgs) -> Result<()> {
    cfg.validate()?;
    create_dir(&args.out)?;
    let scenes: Vec<Scene> = load_scenes(&args.data)?.into_iter().map(|(_, s)| s).collect();
    let (train_scenes, val_scenes) = cfg.data.split(scenes);
    let build = |s: &[Scene]| build_examples(s, cfg.model.format, &cfg.data.features, &cfg.data.window);
    let (train, val) = (build(&train_scenes)?, build(&val_scenes)?);
    if train.is_empty() {
        bail!("no training windows: scenes shorter than {} s?", cfg.data.window.window_seconds);
    }
    write_manifest(
        &args.out,
        "train",
        cfg,
        serde_json::json!({
            "train_scenes": train_scenes.len(), "val_scenes": val_scenes.len(),
            "train_examples": train.len(), "val_examples": val.len(),
            "resume": args.resume,
        }),
    )?;
    let mut trainer = match &args.resume {
        Some(dir) => Trainer::resume(Checkpoint::load(dir).with_context(|| format!("loading {}", dir.display()))?)?,
        None => Trainer::from_config(cfg)?,
    };
    log::info!("{} parameters, {} train / {} val examples", trainer.params.count(), train.len(), val.len());
    let log_path = args.out.join("log.jsonl");
    let mut log_file = BufWriter::new(
        File::options()
            .create(true)
            .append(args.resume.is_some())
            .write(true)
            .truncate(args.resume.is_none())
            .open(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))?,
    );
    let ckpt = args.out.join("checkpoints");
    let result = trainer.fit(&train, &val, &cfg.training, Some(&ckpt), &mut |r| {
        let line = serde_json::to_string(r)?;
        writeln!(log_file, "{line}").map_err(|e| seld_core::SeldError::io(&log_path, e))?;
        if matches!(r, LogRecord::Epoch { .. }) {
            println!("{line}");
        }
        Ok(())
    });
    log_file.flush()?;
    let best = result?;
    let eval_set = if val.is_empty() { &train } else { &val };
    let report = trainer.evaluate(eval_set, cfg.training.batch_size, cfg.training.threshold, &cfg.training.metrics)?;
    let scores = serde_json::json!({ "last": report.scores, "best": best, "loss": report.loss, "step": trainer.step });
    std::fs::write(args.out.join("scores.json"), serde_json::to_string_pretty(&scores)? + "\n")?;
    println!("{}", serde_json::to_string(&scores)?);
    Ok(())
}

#[derive(Serialize)]
pub struct ScoreReport {
    pub averaging: Averaging,
    pub scores: SeldScores,
    pub micro: SeldScores,
    pub macro_: SeldScores,
}

fn report(files: &[(Vec<seld_core::data::EventFrame>, Vec<seld_core::data::EventFrame>)], metrics: &MetricsConfig) -> ScoreReport {
    let micro = evaluate_files(files, &MetricsConfig { averaging: Averaging::Micro, ..*metrics });
    let macro_ = evaluate_files(files, &MetricsConfig { averaging: Averaging::Macro, ..*metrics });
    let scores = if metrics.averaging == Averaging::Micro { micro } else { macro_ };
    ScoreReport { averaging: metrics.averaging, scores, micro, macro_ }
}

fn json(report: &ScoreReport) -> Result<String> {
    let mut value = serde_json::to_value(report)?;
    if let Some(obj) = value.as_object_mut() {
        if let Some(m) = obj.remove("macro_") {
            obj.insert("macro".into(), m);
        }
    }
    Ok(serde_json::to_string(&value)?)
}

pub fn table(report: &ScoreReport) -> String {
    let mut s = format!("{:<8} {:>7} {:>7} {:>8} {:>7} {:>7}\n", "", "ER", "F", "LE", "LR", "SELD");
    for (name, r) in [("micro", &report.micro), ("macro", &report.macro_)] {
        s += &format!(
            "{:<8} {:>7.4} {:>6.2}% {:>7.2}° {:>6.2}% {:>7.4}\n",
            name,
            r.er,
            100.0 * r.f,
            r.le,
            100.0 * r.lr,
            r.seld_score
        );
    }
    s
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub threshold: Option<f64>,
}

pub fn eval(cfg: &ExperimentConfig, args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let (model, mut params) = (ck.model, ck.params);
    let threshold = args.threshold.unwrap_or(cfg.training.threshold);
    let scenes = load_scenes(&args.data)?;
    let pred_dir = args.out.join("predictions");
    create_dir(&pred_dir)?;
    let mut files = Vec::new();
    for (stem, scene) in &scenes {
        let (pred, covered) = predict_scene(&model, &mut params, scene, &cfg.data.features, &cfg.data.window, threshold)?;
        let path = pred_dir.join(format!("{stem}.csv"));
        std::fs::write(&path, format_metadata(&pred)).with_context(|| format!("writing {}", path.display()))?;
        let reference = scene.events.iter().filter(|e| e.frame < covered).copied().collect();
        files.push((pred, reference));
    }
    let r = report(&files, &cfg.training.metrics);
    let line = json(&r)?;
    std::fs::write(args.out.join("scores.json"), line.clone() + "\n")?;
    write_manifest(
        &args.out,
        "eval",
        cfg,
        serde_json::json!({ "checkpoint": args.checkpoint, "data": args.data, "threshold": threshold, "step": ck.step }),
    )?;
    println!("{line}");
    print!("{}", table(&r));
    Ok(())
}

fn read_events(path: &Path) -> Result<Vec<seld_core::data::EventFrame>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_metadata(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn score(metrics: &MetricsConfig, pred: &Path, reference: &Path) -> Result<()> {
    let files = vec![(read_events(pred)?, read_events(reference)?)];
    let r = report(&files, metrics);
    println!("{}", json(&r)?);
    print!("{}", table(&r));
    Ok(())
}
