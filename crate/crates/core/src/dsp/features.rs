use serde::{Deserialize, Serialize};

use super::mel::{MelBank, MelConfig};
use super::stft::{stft, Spectrogram, StftConfig};
use crate::error::{Result, SeldError};
use crate::numeric::Tensor;

pub const LOG_EPS: f64 = 1e-10;
const ENERGY_EPS: f64 = 1e-10;

/// Value of a log-mel bin with no energy.
pub fn log_floor() -> f32 {
    LOG_EPS.ln() as f32
}

pub const CHANNEL_NAMES: [&str; 7] = [
    "logmel_w", "logmel_x", "logmel_y", "logmel_z", "intensity_x", "intensity_y", "intensity_z",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub stft: StftConfig,
    pub mel: MelConfig,
}

impl FeatureConfig {
    pub fn mel_bank(&self) -> Result<MelBank> {
        MelBank::new(&self.mel, self.stft.sample_rate, self.stft.fft_size)
    }
}

/// `[7, T, n_mels]` input block: log-mel of W, X, Y, Z followed by the
/// mel-projected normalized intensity vector (x, y, z).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureClip {
    pub data: Tensor<f32>,
    pub hop_seconds: f64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    hop_seconds: f64,
    channels: Vec<String>,
}

impl FeatureClip {
    pub fn new(data: Tensor<f32>, hop_seconds: f64) -> Result<Self> {
        if data.rank() != 3 || data.shape()[0] != 7 {
            return Err(SeldError::dim("FeatureClip", data.shape(), &[7, 0, 0]));
        }
        Ok(FeatureClip { data, hop_seconds })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn sidecar_json(&self) -> String {
        serde_json::to_string(&Sidecar {
            hop_seconds: self.hop_seconds,
            channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        })
        .expect("sidecar serializes")
    }

    pub fn from_parts(data: Tensor<f32>, sidecar: &str) -> Result<Self> {
        let meta: Sidecar = serde_json::from_str(sidecar.trim())?;
        if meta.channels != CHANNEL_NAMES {
            return Err(SeldError::Input(format!("unexpected channel list {:?}", meta.channels)));
        }
        FeatureClip::new(data, meta.hop_seconds)
    }
}

/// `log(power · bankᵀ + eps)` as `[T, n_mels]`.
pub fn log_mel(spec: &Spectrogram, bank: &MelBank) -> Result<Tensor<f32>> {
    if spec.bins != bank.bins {
        return Err(SeldError::dim("log_mel", &[spec.frames, spec.bins], &[bank.n_mels, bank.bins]));
    }
    let mut out = Vec::with_capacity(spec.frames * bank.n_mels);
    let mut power = vec![0.0; spec.bins];
    let mut mel = vec![0.0; bank.n_mels];
    for t in 0..spec.frames {
        for (p, c) in power.iter_mut().zip(spec.frame(t)) {
            *p = c.norm_sqr();
        }
        bank.project(&power, &mut mel);
        out.extend(mel.iter().map(|&m| (m + LOG_EPS).ln() as f32));
    }
    Ok(Tensor::from_vec(vec![spec.frames, bank.n_mels], out))
}

/// Per-bin normalized active intensity `Re(conj(W)·D) / (|W|²+|X|²+|Y|²+|Z|² + eps)`
/// for `D ∈ {X, Y, Z}`, as `[3, T, bins]` in f64 before mel projection.
pub fn normalized_intensity(foa: [&Spectrogram; 4]) -> Result<Vec<f64>> {
    let [w, x, y, z] = foa;
    for s in [x, y, z] {
        if (s.frames, s.bins) != (w.frames, w.bins) {
            return Err(SeldError::Input(format!(
                "spectrogram shapes differ: {}x{} vs {}x{}",
                w.frames, w.bins, s.frames, s.bins
            )));
        }
    }
    let n = w.data.len();
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let energy = w.data[i].norm_sqr()
            + x.data[i].norm_sqr()
            + y.data[i].norm_sqr()
            + z.data[i].norm_sqr()
            + ENERGY_EPS;
        let wc = w.data[i].conj();
        for (d, s) in [x, y, z].into_iter().enumerate() {
            out[d * n + i] = (wc * s.data[i]).re / energy;
        }
    }
    Ok(out)
}

/// Mel-projected intensity, `[3, T, n_mels]`. Each mel value is the
/// filter-weighted average of the per-bin normalized intensity.
pub fn intensity_vectors(foa: [&Spectrogram; 4], bank: &MelBank) -> Result<Tensor<f32>> {
    let w = foa[0];
    if w.bins != bank.bins {
        return Err(SeldError::dim("intensity_vectors", &[w.frames, w.bins], &[bank.n_mels, bank.bins]));
    }
    let per_bin = normalized_intensity(foa)?;
    let avg = bank.normalized();
    let n = w.data.len();
    let mut out = Vec::with_capacity(3 * w.frames * bank.n_mels);
    let mut mel = vec![0.0; bank.n_mels];
    for d in 0..3 {
        for t in 0..w.frames {
            let row = &per_bin[d * n + t * w.bins..d * n + (t + 1) * w.bins];
            avg.project(row, &mut mel);
            out.extend(mel.iter().map(|&m| m as f32));
        }
    }
    Ok(Tensor::from_vec(vec![3, w.frames, bank.n_mels], out))
}

/// Full pipeline from `[W, X, Y, Z]` waveforms to a 7-channel clip.
pub fn extract_features(wave: &[Vec<f32>], cfg: &FeatureConfig) -> Result<FeatureClip> {
    let bank = cfg.mel_bank()?;
    extract_with_bank(wave, cfg, &bank)
}

pub fn extract_with_bank(wave: &[Vec<f32>], cfg: &FeatureConfig, bank: &MelBank) -> Result<FeatureClip> {
    if wave.len() != 4 {
        return Err(SeldError::Input(format!("expected 4 FoA channels, got {}", wave.len())));
    }
    if wave.iter().any(|c| c.len() != wave[0].len()) {
        return Err(SeldError::Input("FoA channels differ in length".into()));
    }
    let specs: Vec<Spectrogram> = wave.iter().map(|c| stft(c, &cfg.stft)).collect::<Result<_>>()?;
    let frames = specs[0].frames;
    let mut data = Vec::with_capacity(7 * frames * bank.n_mels);
    for s in &specs {
        data.extend_from_slice(log_mel(s, bank)?.data());
    }
    let iv = intensity_vectors([&specs[0], &specs[1], &specs[2], &specs[3]], bank)?;
    data.extend_from_slice(iv.data());
    FeatureClip::new(
        Tensor::from_vec(vec![7, frames, bank.n_mels], data),
        cfg.stft.hop_seconds(),
    )
}
