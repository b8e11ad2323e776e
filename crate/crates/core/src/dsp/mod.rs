//! Feature extraction: STFT, log-mel and first-order Ambisonics intensity
//! vectors stacked into a 7-channel block.

mod features;
mod mel;
mod stft;
pub mod wav;

pub use features::{
    extract_features, extract_with_bank, intensity_vectors, log_floor, log_mel,
    normalized_intensity, FeatureClip, FeatureConfig, CHANNEL_NAMES, LOG_EPS,
};
pub use mel::{hz_to_mel, mel_to_hz, MelBank, MelConfig};
pub use stft::{hann_periodic, stft, Padding, Spectrogram, StftConfig};
