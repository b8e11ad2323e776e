//! Synthetic FoA scenes: parametric per-class sources spatialized as plane
//! waves, summed, and buried in uncorrelated per-channel noise.

use std::f64::consts::PI;

use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use std::path::Path;

use super::metadata::{format_metadata, parse_metadata, sort_events, EventFrame, LABEL_RATE, N_CLASSES};
use crate::dsp::wav::{read_foa, write_foa, SAMPLE_RATE};
use crate::error::{Result, SeldError};
use crate::numeric::SeldRng;
use crate::spatial::{encode_foa_plane_wave, Doa};

const EVENT_RMS: f64 = 0.1;
const SAMPLES_PER_FRAME: usize = SAMPLE_RATE as usize / LABEL_RATE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub duration: f64,
    pub n_events: usize,
    /// Classes events are drawn from, uniformly.
    pub classes: Vec<usize>,
    pub max_overlap: usize,
    /// SNR range in dB; each scene draws one value uniformly.
    pub snr_db: (f64, f64),
    /// Event length range in seconds.
    pub event_len: (f64, f64),
    pub elevation_range: (f64, f64),
    /// Optional diffuse exponential tail (RT60 seconds).
    pub rt60: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            duration: 10.0,
            n_events: 3,
            classes: (0..N_CLASSES).collect(),
            max_overlap: 2,
            snr_db: (6.0, 30.0),
            event_len: (1.0, 3.0),
            elevation_range: (-45.0, 45.0),
            rt60: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[W, X, Y, Z]` at 24 kHz.
    pub wave: [Vec<f32>; 4],
    pub events: Vec<EventFrame>,
    pub duration: f64,
}

impl Scene {
    /// Writes `<stem>.wav` (FoA, ACN order) and `<stem>.csv` labels.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_foa(&dir.join(format!("{stem}.wav")), &self.wave)?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, format_metadata(&self.events)).map_err(|e| SeldError::io(&csv, e))
    }

    /// Reads a WAV file and its label CSV.
    pub fn load(wav: &Path, csv: &Path) -> Result<Scene> {
        let wave = read_foa(wav)?;
        let text = std::fs::read_to_string(csv).map_err(|e| SeldError::io(csv, e))?;
        let events = parse_metadata(&text)?;
        let duration = wave[0].len() as f64 / SAMPLE_RATE as f64;
        Ok(Scene { wave, events, duration })
    }

    pub fn label_frames(&self) -> usize {
        (self.duration * LABEL_RATE as f64).round() as usize
    }
}

/// Mono source for `class`, unit RMS. Classes cycle through three signal
/// families (harmonic tone, chirp, band noise) on a geometric frequency grid.
pub fn class_template(class: usize, n: usize, rng: &mut SeldRng) -> Vec<f32> {
    let fs = SAMPLE_RATE as f64;
    let f0 = 250.0 * 1.32f64.powi(class as i32);
    let mut x: Vec<f64> = match class % 3 {
        0 => {
            let phases: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    let am = 0.6 + 0.4 * (2.0 * PI * 4.0 * t).sin();
                    let tone: f64 = (1..=3)
                        .filter(|&h| h as f64 * f0 < 11_000.0)
                        .map(|h| (2.0 * PI * h as f64 * f0 * t + phases[h - 1]).sin() / h as f64)
                        .sum();
                    am * tone
                })
                .collect()
        }
        1 => {
            let period = 0.25;
            let (lo, hi) = (0.8 * f0, 1.25 * f0);
            let rate = (hi - lo) / period;
            (0..n)
                .map(|i| {
                    let tau = (i as f64 / fs) % period;
                    (2.0 * PI * (lo * tau + 0.5 * rate * tau * tau)).sin()
                })
                .collect()
        }
        _ => {
            let partials: Vec<(f64, f64)> = (0..24)
                .map(|_| (f0 * (0.8 + 0.45 * rng.random::<f64>()), rng.random::<f64>() * 2.0 * PI))
                .collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    partials.iter().map(|&(f, p)| (2.0 * PI * f * t + p).sin()).sum()
                })
                .collect()
        }
    };
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    // 10 ms raised-cosine fades
    let fade = (0.01 * fs) as usize;
    for i in 0..fade.min(n / 2) {
        let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
    x.into_iter().map(|v| v as f32).collect()
}

struct Placement {
    class: usize,
    track: usize,
    start: usize,
    len: usize,
    azimuth: f64,
    elevation: f64,
}

fn place_events(cfg: &SynthConfig, n_frames: usize, rng: &mut SeldRng) -> Result<Vec<Placement>> {
    let mut placed: Vec<Placement> = Vec::with_capacity(cfg.n_events);
    let min_len = ((cfg.event_len.0 * LABEL_RATE as f64).round() as usize).max(1);
    let max_len = ((cfg.event_len.1 * LABEL_RATE as f64).round() as usize).max(min_len);
    if min_len > n_frames {
        return Err(SeldError::Generation(format!(
            "events of {min_len} frames do not fit a {n_frames}-frame scene"
        )));
    }
    for k in 0..cfg.n_events {
        let mut ok = None;
        for _ in 0..200 {
            let class = cfg.classes[rng.random_range(0..cfg.classes.len())];
            let len = rng.random_range(min_len..=max_len.min(n_frames));
            let start = rng.random_range(0..=n_frames - len);
            let overlaps = |p: &&Placement| p.start < start + len && start < p.start + p.len;
            let busy = (start..start + len)
                .map(|f| placed.iter().filter(|p| p.start <= f && f < p.start + p.len).count())
                .max()
                .unwrap_or(0);
            if busy >= cfg.max_overlap {
                continue;
            }
            let used: Vec<usize> = placed
                .iter()
                .filter(overlaps)
                .filter(|p| p.class == class)
                .map(|p| p.track)
                .collect();
            let Some(track) = (0..3).find(|t| !used.contains(t)) else {
                continue;
            };
            ok = Some(Placement {
                class,
                track,
                start,
                len,
                azimuth: rng.random_range(-180i32..180) as f64,
                elevation: rng.random_range(cfg.elevation_range.0 as i32..=cfg.elevation_range.1 as i32)
                    as f64,
            });
            break;
        }
        match ok {
            Some(p) => placed.push(p),
            None => {
                return Err(SeldError::Generation(format!(
                    "could not place event {k} under max_overlap = {}",
                    cfg.max_overlap
                )))
            }
        }
    }
    Ok(placed)
}

fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let (fwd, inv) = (planner.plan_fft_forward(n), planner.plan_fft_inverse(n));
    let lift = |s: &[f64]| {
        let mut v: Vec<Complex<f64>> = s.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let (mut a, mut b) = (lift(x), lift(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    a.iter().take(x.len()).map(|c| c.re / n as f64).collect()
}

pub fn synth_scene(rng: &mut SeldRng, cfg: &SynthConfig) -> Result<Scene> {
    if cfg.classes.is_empty() || cfg.classes.iter().any(|&c| c >= N_CLASSES) {
        return Err(SeldError::Config(format!("invalid class set {:?}", cfg.classes)));
    }
    if cfg.max_overlap == 0 && cfg.n_events > 0 {
        return Err(SeldError::Generation("max_overlap = 0 admits no events".into()));
    }
    let n_frames = (cfg.duration * LABEL_RATE as f64).round() as usize;
    let n = n_frames * SAMPLES_PER_FRAME;
    let placements = place_events(cfg, n_frames, rng)?;
    let mut mix = [vec![0f64; n], vec![0f64; n], vec![0f64; n], vec![0f64; n]];
    let mut events = Vec::new();
    for p in &placements {
        let len = p.len * SAMPLES_PER_FRAME;
        let mono: Vec<f32> = class_template(p.class, len, rng)
            .into_iter()
            .map(|v| (v as f64 * EVENT_RMS) as f32)
            .collect();
        let doa = Doa::from_degrees(p.azimuth, p.elevation);
        let foa = encode_foa_plane_wave(&mono, &doa);
        let offset = p.start * SAMPLES_PER_FRAME;
        for (dst, src) in mix.iter_mut().zip(&foa) {
            for (d, &s) in dst[offset..offset + len].iter_mut().zip(src) {
                *d += s as f64;
            }
        }
        if let Some(rt60) = cfg.rt60 {
            let tail_len = (rt60 * SAMPLE_RATE as f64) as usize;
            let decay = 6.9 / (rt60 * SAMPLE_RATE as f64);
            let mono64: Vec<f64> = mono.iter().map(|&v| v as f64).collect();
            for dst in mix.iter_mut() {
                let h: Vec<f64> = (0..tail_len)
                    .map(|i| 0.02 * rng.sample::<f64, _>(StandardNormal) * (-decay * i as f64).exp())
                    .collect();
                let wet = fft_convolve(&mono64, &h);
                for (d, w) in dst[offset..offset + len].iter_mut().zip(wet) {
                    *d += w;
                }
            }
        }
        for f in p.start..p.start + p.len {
            events.push(EventFrame::new(f, p.class, p.track, p.azimuth, p.elevation));
        }
    }
    let snr = if cfg.snr_db.1 > cfg.snr_db.0 {
        rng.random_range(cfg.snr_db.0..cfg.snr_db.1)
    } else {
        cfg.snr_db.0
    };
    let noise_std = EVENT_RMS * 10f64.powf(-snr / 20.0);
    let wave = mix.map(|ch| {
        ch.into_iter()
            .map(|v| (v + noise_std * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect()
    });
    sort_events(&mut events);
    Ok(Scene {
        wave,
        events,
        duration: n_frames as f64 / LABEL_RATE as f64,
    })
}
