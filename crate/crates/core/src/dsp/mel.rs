use serde::{Deserialize, Serialize};

use crate::error::{Result, SeldError};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_mels: 64,
            f_min: 20.0,
            f_max: 12_000.0,
        }
    }
}

/// Triangular HTK-mel filterbank, `n_mels × bins`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelBank {
    pub n_mels: usize,
    pub bins: usize,
    pub weights: Vec<f64>,
    /// Filter centre frequencies in Hz.
    pub centers: Vec<f64>,
}

impl MelBank {
    pub fn new(cfg: &MelConfig, sample_rate: u32, fft_size: usize) -> Result<MelBank> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(cfg.f_min >= 0.0 && cfg.f_min < cfg.f_max && cfg.f_max <= nyquist) {
            return Err(SeldError::Config(format!(
                "mel range [{}, {}] Hz must satisfy 0 <= f_min < f_max <= {nyquist}",
                cfg.f_min, cfg.f_max
            )));
        }
        if cfg.n_mels == 0 {
            return Err(SeldError::Config("n_mels must be positive".into()));
        }
        let bins = fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let points: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let mut weights = vec![0.0; cfg.n_mels * bins];
        for m in 0..cfg.n_mels {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                weights[m * bins + k] = w;
            }
            if weights[m * bins..(m + 1) * bins].iter().all(|&w| w <= 0.0) {
                return Err(SeldError::Config(format!(
                    "mel filter {m} ({left:.1}–{right:.1} Hz) covers no FFT bin"
                )));
            }
        }
        Ok(MelBank {
            n_mels: cfg.n_mels,
            bins,
            weights,
            centers: points[1..=cfg.n_mels].to_vec(),
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    /// Rows rescaled to sum to one, for weighted averaging.
    pub fn normalized(&self) -> MelBank {
        let mut out = self.clone();
        for m in 0..self.n_mels {
            let s: f64 = self.row(m).iter().sum();
            out.weights[m * self.bins..(m + 1) * self.bins]
                .iter_mut()
                .for_each(|w| *w /= s);
        }
        out
    }

    /// `values[bins] → out[n_mels]`.
    pub fn project(&self, values: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(values).map(|(w, v)| w * v).sum();
        }
    }
}
