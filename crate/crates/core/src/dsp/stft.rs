use num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeldError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Reflect-pad `win_len / 2` samples at both ends; frame `t` is centred
    /// on sample `t·hop` and there are `ceil(len / hop)` frames.
    Reflect,
    /// No padding; `1 + (len − win_len) / hop` frames.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub padding: Padding,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            sample_rate: 24_000,
            win_len: 960,
            hop: 480,
            fft_size: 1024,
            padding: Padding::Reflect,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win_len || self.win_len > self.fft_size {
            return Err(SeldError::Config(format!(
                "need 0 < hop ({}) <= win_len ({}) <= fft_size ({})",
                self.hop, self.win_len, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    pub fn frame_count(&self, len: usize) -> usize {
        match self.padding {
            Padding::Reflect => len.div_ceil(self.hop),
            Padding::Valid => {
                if len < self.win_len {
                    0
                } else {
                    1 + (len - self.win_len) / self.hop
                }
            }
        }
    }
}

/// One-sided complex spectrogram, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn power(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|c| c.norm_sqr())
    }
}

pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn stft(wave: &[f32], cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if wave.len() < cfg.win_len {
        return Err(SeldError::Input(format!(
            "signal of {} samples is shorter than the {}-sample window",
            wave.len(),
            cfg.win_len
        )));
    }
    let signal: Vec<f64> = match cfg.padding {
        Padding::Valid => wave.iter().map(|&s| s as f64).collect(),
        Padding::Reflect => {
            let pad = cfg.win_len / 2;
            let n = wave.len();
            let at = |i: isize| -> f64 {
                // numpy-style reflect (edge sample not repeated)
                let period = 2 * (n as isize - 1);
                let mut j = i.rem_euclid(period.max(1));
                if j >= n as isize {
                    j = period - j;
                }
                wave[j as usize] as f64
            };
            (-(pad as isize)..(n + pad) as isize).map(at).collect()
        }
    };
    let frames = cfg.frame_count(wave.len());
    let bins = cfg.bins();
    let window = hann_periodic(cfg.win_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < cfg.win_len {
                Complex::new(signal[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram { frames, bins, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_seconds_give_250_frames() {
        let cfg = StftConfig::default();
        let spec = stft(&vec![0.0; 120_000], &cfg).unwrap();
        assert_eq!(spec.frames, 250);
        assert_eq!(spec.bins, 513);
        assert!(spec.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn default_configuration_timing() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.win_len as f64 / cfg.sample_rate as f64, 0.04);
        assert_eq!(cfg.hop_seconds(), 0.02);
    }

    #[test]
    fn too_short_is_input_error() {
        assert!(matches!(stft(&[0.0; 100], &StftConfig::default()), Err(SeldError::Input(_))));
    }

    #[test]
    fn frame_rate_is_fifty_per_second() {
        let cfg = StftConfig::default();
        for secs in [1usize, 2, 5, 10] {
            assert_eq!(cfg.frame_count(secs * 24_000), 50 * secs);
        }
        let valid = StftConfig { padding: Padding::Valid, ..cfg };
        assert_eq!(valid.frame_count(24_000), 49);
    }

    #[test]
    fn bin_centred_sine_has_single_dominant_bin() {
        let cfg = StftConfig::default();
        let k = 40usize;
        let freq = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
        let wave: Vec<f32> = (0..24_000)
            .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / cfg.sample_rate as f64).sin() as f32)
            .collect();
        let spec = stft(&wave, &cfg).unwrap();
        // Closed form: a windowed sine at bin k has peak magnitude Σw/2 at k.
        let peak_expected = hann_periodic(cfg.win_len).iter().sum::<f64>() / 2.0;
        for t in 2..spec.frames - 2 {
            let mags: Vec<f64> = spec.frame(t).iter().map(|c| c.norm()).collect();
            let (argmax, &peak) = mags
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            assert_eq!(argmax, k);
            // zero-padding 960→1024 smears the window kernel slightly
            assert!((peak - peak_expected).abs() / peak_expected < 0.01, "{peak} vs {peak_expected}");
            let far: f64 = mags.iter().enumerate().filter(|(i, _)| i.abs_diff(k) > 3).map(|(_, m)| *m).fold(0.0, f64::max);
            assert!(far < 0.01 * peak);
        }
    }
}
