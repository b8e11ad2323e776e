use serde::{Deserialize, Serialize};

use crate::error::{Result, SeldError};
use crate::targets::TargetFormat;

pub const INPUT_CHANNELS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dst,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub format: TargetFormat,
    /// Conv channels M, also the attention embedding width of the DST model.
    pub m_channels: usize,
    pub freq_pool: [usize; 3],
    pub time_pool: [usize; 3],
    pub n_heads: usize,
    pub n_dst_blocks: usize,
    pub dropout: f64,
    /// Bidirectional GRU between encoder and DST blocks (DST variant only).
    pub include_gru: bool,
    /// Baseline GRU width per direction.
    pub gru_hidden: usize,
    pub gru_layers: usize,
    /// Baseline temporal attention layers.
    pub n_temporal_mhsa: usize,
    pub head_hidden: usize,
    pub input_frames: usize,
    pub input_bins: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Dst,
            format: TargetFormat::Multi,
            m_channels: 64,
            freq_pool: [2, 2, 1],
            time_pool: [5, 1, 1],
            n_heads: 8,
            n_dst_blocks: 2,
            dropout: 0.05,
            include_gru: false,
            gru_hidden: 128,
            gru_layers: 2,
            n_temporal_mhsa: 2,
            head_hidden: 128,
            input_frames: 250,
            input_bins: 64,
        }
    }
}

impl ModelConfig {
    pub fn baseline() -> Self {
        ModelConfig {
            variant: Variant::Baseline,
            freq_pool: [4, 4, 2],
            ..ModelConfig::default()
        }
    }

    /// Smallest configuration used for end-to-end gradient checks:
    /// `[B, 7, 50, 8]` input, M = 8, two heads, one DST block, no dropout.
    pub fn tiny_grad(format: TargetFormat) -> Self {
        ModelConfig {
            format,
            m_channels: 8,
            n_heads: 2,
            n_dst_blocks: 1,
            dropout: 0.0,
            head_hidden: 8,
            input_frames: 50,
            input_bins: 8,
            ..ModelConfig::default()
        }
    }

    /// Pooling schedule giving the requested reduced spectral extent for a
    /// 64-bin input.
    pub fn freq_pool_for(f_prime: usize) -> Result<[usize; 3]> {
        match f_prime {
            64 => Ok([1, 1, 1]),
            32 => Ok([2, 1, 1]),
            16 => Ok([2, 2, 1]),
            8 => Ok([4, 2, 1]),
            4 => Ok([4, 2, 2]),
            2 => Ok([4, 4, 2]),
            _ => Err(SeldError::Config(format!("no pooling schedule for F' = {f_prime}"))),
        }
    }

    pub fn f_prime(&self) -> usize {
        self.input_bins / self.freq_pool.iter().product::<usize>().max(1)
    }

    pub fn out_frames(&self) -> usize {
        self.input_frames / self.time_pool.iter().product::<usize>().max(1)
    }

    pub fn output_dim(&self) -> usize {
        self.format.dim()
    }

    /// Width of the per-frame embedding entering the output head.
    pub fn embed_width(&self) -> usize {
        match self.variant {
            Variant::Dst => self.f_prime() * self.m_channels,
            Variant::Baseline => 2 * self.gru_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SeldError::Config(msg));
        let fp: usize = self.freq_pool.iter().product();
        let tp: usize = self.time_pool.iter().product();
        if fp == 0 || !self.input_bins.is_multiple_of(fp) {
            return bad(format!("freq_pool {:?} does not divide {} bins", self.freq_pool, self.input_bins));
        }
        if !matches!(self.f_prime(), 2 | 4 | 8 | 16 | 32 | 64) {
            return bad(format!("F' = {} not in {{2, 4, 8, 16, 32, 64}}", self.f_prime()));
        }
        if tp != 5 || !self.input_frames.is_multiple_of(tp) {
            return bad(format!("time_pool {:?} must multiply to 5 and divide {} frames", self.time_pool, self.input_frames));
        }
        if self.m_channels == 0 || self.n_heads == 0 || self.head_hidden == 0 {
            return bad("zero-sized layer".into());
        }
        let attn_width = match self.variant {
            Variant::Dst => self.m_channels,
            Variant::Baseline => 2 * self.gru_hidden,
        };
        if attn_width % self.n_heads != 0 {
            return bad(format!("attention width {attn_width} not divisible by {} heads", self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.variant == Variant::Dst && self.include_gru && !self.embed_width().is_multiple_of(2) {
            return bad("GRU ablation needs an even F'·M".into());
        }
        if self.variant == Variant::Baseline && (self.gru_hidden == 0 || self.gru_layers == 0) {
            return bad("baseline needs at least one GRU layer".into());
        }
        Ok(())
    }
}
