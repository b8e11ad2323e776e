//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::Instant;

use rand::Rng;
use seld_core::augment::{frameshift, AugmentConfig};
use seld_core::data::{build_examples, synth_scene, EventFrame, Example, SynthConfig, WindowConfig, N_CLASSES};
use seld_core::dsp::{extract_features, FeatureConfig};
use seld_core::experiment::{DataConfig, LogRecord, Trainer, TrainingConfig};
use seld_core::metrics::{seld_score, MetricsConfig, SeldScores, PUBLISHED_ROWS};
use seld_core::model::{init_params, run, tiny_grad_check, ForwardCtx, ModelConfig, ParamSet, Variant};
use seld_core::numeric::{op_suite, rng_from_seed, AdamConfig};
use seld_core::spatial::{angular_distance, ChannelTransform};
use seld_core::targets::{decode_clip, encode_clip, permute_tracks, TargetFormat, PERMUTATIONS};
use seld_core::{Result, Tape, Tensor};

const SEED: u64 = 2024;

struct Outcome {
    pass: bool,
    details: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome { pass: true, details: Vec::new() }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.pass &= ok;
        self.details.push(format!("{} {line}", if ok { "ok  " } else { "FAIL" }));
    }

    fn note(&mut self, line: String) {
        self.details.push(format!("     {line}"));
    }
}

fn seld_rows() -> Result<Outcome> {
    let mut o = Outcome::new();
    for (label, er, f, le, lr, published) in PUBLISHED_ROWS {
        let got = seld_score(er, f / 100.0, le, lr / 100.0);
        o.check((got - published).abs() <= 5e-5, format!("{label}: {got:.5} vs {published:.4}"));
    }
    Ok(o)
}

fn shapes() -> Result<Outcome> {
    let mut o = Outcome::new();
    for format in [TargetFormat::Single, TargetFormat::Multi] {
        for fp in [8, 16, 32, 64] {
            let cfg = ModelConfig { format, freq_pool: ModelConfig::freq_pool_for(fp)?, ..ModelConfig::default() };
            let mut params: ParamSet<f32> = init_params(&cfg, &mut rng_from_seed(SEED))?;
            let mut rng = rng_from_seed(SEED + 1);
            let x = Tensor::from_fn([2, 7, cfg.input_frames, cfg.input_bins], |_| rng.random_range(-1.0..1.0f32));
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let xv = tape.constant(x);
            let mut ctx = ForwardCtx::eval().traced();
            let y = run(&mut tape, xv, &cfg, &bound, &mut params.buffers, &mut ctx)?;
            let shape = tape.shape(y).to_vec();
            let trace = ctx.trace.unwrap_or_default();
            let maps: Vec<[usize; 2]> = trace.iter().map(|t| t.map).collect();
            let want_maps: Vec<[usize; 2]> =
                (0..cfg.n_dst_blocks).flat_map(|_| [[fp, fp], [50, 50]]).collect();
            o.check(
                shape == [2, 50, format.dim()] && maps == want_maps,
                format!("{format:?} F'={fp} pool {:?}: output {shape:?}, maps {maps:?}", cfg.freq_pool),
            );
        }
    }
    Ok(o)
}

fn gradients() -> Result<Outcome> {
    let mut o = Outcome::new();
    for (name, err) in op_suite(1e-5)? {
        o.check(err < 1e-4, format!("{name}: {err:.2e}"));
    }
    let mut rng = rng_from_seed(SEED);
    for format in [TargetFormat::Single, TargetFormat::Multi] {
        let d = format.dim();
        let pred = Tensor::from_fn([2, 5, d], |_| rng.random_range(-1.0..1.0f64));
        let target = Tensor::from_fn([2, 5, d], |_| rng.random_range(-1.0..1.0f64));
        let errs = seld_core::numeric::grad_check_many(
            |t, v| {
                let tv = t.constant(target.clone());
                t.target_loss(v[0], tv, format)
            },
            &[pred],
            1e-5,
        )?;
        o.check(errs[0] < 1e-4, format!("{format:?} loss: {:.2e}", errs[0]));
    }
    for format in [TargetFormat::Single, TargetFormat::Multi] {
        let errs = tiny_grad_check(format, 74, 1e-5)?;
        let (worst, err) = errs.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
        o.check(err < 1e-4, format!("tiny DST {format:?}: {} parameter tensors, worst {worst} {err:.2e}", errs.len()));
    }
    Ok(o)
}

fn random_events(rng: &mut seld_core::SeldRng, frames: usize) -> Vec<EventFrame> {
    let mut events = Vec::new();
    for frame in 0..frames {
        for class in 0..N_CLASSES {
            if rng.random_bool(0.3) {
                events.push(EventFrame::new(frame, class, 0, rng.random_range(-180.0..180.0), rng.random_range(-80.0..80.0)));
            }
        }
    }
    events
}

/// Per-label-frame DoA estimate from the summed intensity channels.
fn intensity_doas(clip: &Tensor<f32>, frames: &[usize]) -> Vec<[f64; 3]> {
    let (t, f) = (clip.shape()[1], clip.shape()[2]);
    let per = t / 50;
    frames
        .iter()
        .map(|&lf| {
            let mut v = [0.0; 3];
            for (axis, slot) in v.iter_mut().enumerate() {
                let base = (4 + axis) * t * f;
                *slot = clip.data()[base + lf * per * f..base + (lf + 1) * per * f].iter().map(|&x| x as f64).sum();
            }
            v
        })
        .collect()
}

fn round_trips() -> Result<Outcome> {
    let mut o = Outcome::new();
    let mut rng = rng_from_seed(SEED);

    let mut worst = 0.0f64;
    let mut exact = true;
    for _ in 0..20 {
        let events = random_events(&mut rng, 50);
        let decoded = decode_clip(&encode_clip::<f64>(&events, 50, TargetFormat::Single)?, TargetFormat::Single, 0.5, 0)?;
        exact &= decoded.len() == events.len();
        for (d, e) in decoded.iter().zip(&events) {
            exact &= (d.frame, d.class) == (e.frame, e.class);
            worst = worst.max(d.doa().angle_to(&e.doa()));
        }
    }
    o.check(exact && worst < 1e-6, format!("single decode(encode): events identical, max angle {worst:.1e} deg"));

    let mut invariant = true;
    for _ in 0..20 {
        let pred = Tensor::from_fn([2, 50, 117], |_| rng.random_range(-1.0..1.0f32));
        let target = Tensor::from_fn([2, 50, 117], |_| rng.random_range(-1.0..1.0f32));
        let loss = |target: Tensor<f32>| -> Result<f32> {
            let mut t = Tape::new();
            let (p, q) = (t.constant(pred.clone()), t.constant(target));
            let l = t.loss_multi_pit(p, q)?;
            Ok(t.value(l).item())
        };
        let base = loss(target.clone())?;
        for perm in PERMUTATIONS {
            invariant &= loss(permute_tracks(&target, perm)?)?.to_bits() == base.to_bits();
        }
    }
    o.check(invariant, "multi PIT loss bit-identical under all 6 track permutations".into());

    let events = random_events(&mut rng, 50);
    let target = encode_clip::<f32>(&events, 50, TargetFormat::Single)?;
    let want = decode_clip(&target, TargetFormat::Single, 0.5, 0)?;
    let mut worst = 0.0f64;
    let mut same = true;
    for tr in ChannelTransform::all() {
        let mut t = target.clone();
        tr.apply_accdoa(t.data_mut());
        let got = decode_clip(&t, TargetFormat::Single, 0.5, 0)?;
        same &= got.len() == want.len();
        for (g, w) in got.iter().zip(&want) {
            same &= (g.frame, g.class) == (w.frame, w.class);
            worst = worst.max(g.doa().angle_to(&tr.apply_doa(&w.doa())));
        }
    }
    o.check(same && worst < 1e-9, format!("channel swap at target level: max angle {worst:.1e} deg"));

    let cfg = SynthConfig { duration: 5.0, n_events: 1, classes: vec![3], snr_db: (40.0, 40.0), ..SynthConfig::default() };
    let scene = synth_scene(&mut rng_from_seed(SEED), &cfg)?;
    let frames: Vec<usize> = scene.events.iter().map(|e| e.frame).filter(|&f| f < 50).collect();
    let feats = FeatureConfig::default();
    let base = extract_features(&scene.wave, &feats)?;
    let mut worst = 0.0f64;
    for tr in ChannelTransform::all() {
        let through = extract_features(&tr.apply_wave(&scene.wave), &feats)?;
        let expected = tr.apply_clip(&base)?;
        for (a, b) in intensity_doas(&through.data, &frames).iter().zip(intensity_doas(&expected.data, &frames)) {
            worst = worst.max(angular_distance(*a, b));
        }
    }
    o.check(worst <= 2.0, format!("channel swap through DSP: {} active frames, max angle {worst:.2e} deg", frames.len()));

    let mut restored = true;
    for s in [0usize, 1, 7, 25, 49] {
        let f0 = Tensor::from_fn([2, 7, 250, 8], |_| rng.random_range(-1.0..1.0f32));
        let t0 = Tensor::from_fn([2, 50, 39], |_| rng.random_range(-1.0..1.0f32));
        let (mut f, mut t) = (f0.clone(), t0.clone());
        frameshift(&mut f, &mut t, &[s, (50 - s) % 50])?;
        frameshift(&mut f, &mut t, &[(50 - s) % 50, s % 50])?;
        restored &= f == f0 && t == t0;
    }
    o.check(restored, "frameshift by s then by L - s restores features and targets exactly".into());
    Ok(o)
}

fn desk_model() -> ModelConfig {
    ModelConfig {
        format: TargetFormat::Single,
        m_channels: 16,
        n_heads: 2,
        n_dst_blocks: 1,
        freq_pool: [4, 2, 1],
        ..ModelConfig::default()
    }
}

fn desk_examples(format: TargetFormat) -> Result<Vec<Example>> {
    let synth = SynthConfig { duration: 5.0, n_events: 1, classes: vec![0, 1], snr_db: (40.0, 40.0), ..SynthConfig::default() };
    let data = DataConfig { n_scenes: 64, seed: SEED, synth, ..DataConfig::default() };
    build_examples(&data.synth_scenes()?, format, &data.features, &WindowConfig::default())
}

struct DeskRun {
    losses: Vec<f64>,
    scores_json: String,
    scores: SeldScores,
    seconds: f64,
}

fn desk_run(examples: &[Example]) -> Result<DeskRun> {
    let start = Instant::now();
    let mut trainer = Trainer::new(desk_model(), AdamConfig::default(), AugmentConfig::none(), SEED)?;
    let cfg = TrainingConfig { epochs: usize::MAX, batch_size: 8, max_steps: Some(2000), ..TrainingConfig::default() };
    let mut losses = Vec::new();
    trainer.fit(examples, &[], &cfg, None, &mut |r| {
        if let LogRecord::Step { loss, .. } = r {
            losses.push(*loss);
        }
        Ok(())
    })?;
    let report = trainer.evaluate(examples, 16, 0.5, &MetricsConfig::default())?;
    Ok(DeskRun {
        losses,
        scores_json: serde_json::to_string(&report.scores)?,
        scores: report.scores,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn learning(run: &DeskRun, n_examples: usize) -> Outcome {
    let mut o = Outcome::new();
    let first = run.losses[0];
    let at200 = run.losses[190..200].iter().sum::<f64>() / 10.0;
    let drop = 1.0 - at200 / first;
    o.note(format!("{n_examples} examples, batch 8, Adam lr 1e-3, {:.0} s", run.seconds));
    o.check(drop >= 0.5, format!("loss {first:.4} at step 1 -> {at200:.4} mean of steps 191-200 ({:.0}% drop)", 100.0 * drop));
    let s = &run.scores;
    o.check(s.le < 10.0, format!("after 2000 steps LE {:.2} deg", s.le));
    o.check(s.lr > 0.9, format!("after 2000 steps LR {:.3} (ER {:.3}, F {:.3}, SELD {:.4})", s.lr, s.er, s.f, s.seld_score));
    o.check(run.seconds <= 900.0, format!("runtime {:.0} s", run.seconds));
    o
}

fn determinism(a: &DeskRun, b: &DeskRun) -> Outcome {
    let mut o = Outcome::new();
    let same_curve = a.losses.len() == b.losses.len()
        && a.losses.iter().zip(&b.losses).all(|(x, y)| x.to_bits() == y.to_bits());
    o.check(same_curve, format!("{} step losses bit-identical", a.losses.len()));
    o.check(a.scores_json == b.scores_json, format!("scores JSON identical: {}", a.scores_json));
    o
}

fn trend() -> Result<Outcome> {
    let mut o = Outcome::new();
    let synth = SynthConfig { duration: 5.0, n_events: 2, classes: vec![0, 1, 2, 3], snr_db: (20.0, 30.0), ..SynthConfig::default() };
    let data = DataConfig { n_scenes: 40, seed: SEED + 7, synth, val_fraction: 0.2, ..DataConfig::default() };
    let (train_scenes, dev_scenes) = data.split(data.synth_scenes()?);
    let format = TargetFormat::Multi;
    let train = build_examples(&train_scenes, format, &data.features, &data.window)?;
    let dev = build_examples(&dev_scenes, format, &data.features, &data.window)?;
    let dst = ModelConfig { format, ..desk_model() };
    let baseline = ModelConfig {
        variant: Variant::Baseline,
        format,
        m_channels: 16,
        n_heads: 2,
        freq_pool: [4, 2, 1],
        gru_hidden: 64,
        n_temporal_mhsa: 1,
        ..ModelConfig::default()
    };
    let cfg = TrainingConfig { epochs: usize::MAX, batch_size: 8, max_steps: Some(1500), ..TrainingConfig::default() };
    o.note(format!("{} train / {} dev windows, multi-ACCDOA, 1500 steps each (reported, not asserted)", train.len(), dev.len()));
    for (name, model) in [("DST", dst), ("baseline", baseline)] {
        let start = Instant::now();
        let mut trainer = Trainer::new(model, AdamConfig::default(), AugmentConfig::none(), SEED)?;
        trainer.fit(&train, &[], &cfg, None, &mut |_| Ok(()))?;
        let s = trainer.evaluate(&dev, 16, 0.5, &MetricsConfig::default())?.scores;
        o.note(format!(
            "{name:<8} params {:>7}  ER {:.3}  F {:.3}  LE {:6.2}  LR {:.3}  SELD {:.4}  ({:.0} s)",
            trainer.params.count(),
            s.er,
            s.f,
            s.le,
            s.lr,
            s.seld_score,
            start.elapsed().as_secs_f64()
        ));
    }
    Ok(o)
}

fn report(index: usize, name: &str, outcome: Result<Outcome>) -> bool {
    match outcome {
        Ok(o) => {
            println!("{} [{index}] {name}", if o.pass { "PASS" } else { "FAIL" });
            for d in &o.details {
                println!("      {d}");
            }
            o.pass
        }
        Err(e) => {
            println!("FAIL [{index}] {name}: error {e}");
            false
        }
    }
}

fn main() {
    // strict mode: one worker thread
    let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    // optional criterion numbers on the command line select a subset
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |i: usize| only.is_empty() || only.contains(&i);
    let mut all = true;
    if want(1) {
        all &= report(1, "SELD score arithmetic", seld_rows());
    }
    if want(2) {
        all &= report(2, "shape suite", shapes());
    }
    if want(3) {
        all &= report(3, "gradient suite", gradients());
    }
    if want(4) {
        all &= report(4, "codec and augmentation round trips", round_trips());
    }
    if want(6) && !want(5) && !want(7) {
        all &= report(6, "DST vs baseline trend", trend());
    }
    if !(want(5) || want(7)) {
        if !all {
            std::process::exit(1);
        }
        return;
    }

    let runs = desk_examples(TargetFormat::Single).and_then(|ex| {
        let a = desk_run(&ex)?;
        let b = desk_run(&ex)?;
        Ok((ex.len(), a, b))
    });
    match runs {
        Ok((n, a, b)) => {
            all &= report(5, "desk-scale learning", Ok(learning(&a, n)));
            if want(6) {
                all &= report(6, "DST vs baseline trend", trend());
            }
            all &= report(7, "determinism", Ok(determinism(&a, &b)));
        }
        Err(e) => {
            println!("FAIL [5] desk-scale learning: error {e}");
            if want(6) {
                report(6, "DST vs baseline trend", trend());
            }
            println!("FAIL [7] determinism: error {e}");
            all = false;
        }
    }
    if !all {
        std::process::exit(1);
    }
}
