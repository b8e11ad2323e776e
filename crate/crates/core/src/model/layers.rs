use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Variant};
use super::params::{Bound, ParamSet};
use crate::error::{Result, SeldError};
use crate::numeric::{rng_from_seed, BatchNormStats, Float, GruWeights, SeldRng, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Spectral,
    Temporal,
}

/// One attention call: its kind and the `[L, L]` map extent, plus how many
/// sequences (batch × merged axis) and heads it ran over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub kind: AttentionKind,
    pub sequences: usize,
    pub heads: usize,
    pub map: [usize; 2],
}

/// Per-call state: train/eval mode, the dropout generator, and optional
/// attention instrumentation.
pub struct ForwardCtx {
    pub training: bool,
    pub rng: SeldRng,
    pub trace: Option<Vec<AttentionTrace>>,
}

impl ForwardCtx {
    pub fn train(rng: SeldRng) -> Self {
        ForwardCtx { training: true, rng, trace: None }
    }

    pub fn eval() -> Self {
        ForwardCtx { training: false, rng: rng_from_seed(0), trace: None }
    }

    pub fn traced(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }
}

fn dropout<T: Float>(tape: &mut Tape<T>, x: Var, p: f64, ctx: &mut ForwardCtx) -> Result<Var> {
    if p == 0.0 || !ctx.training {
        return Ok(x);
    }
    tape.dropout(x, p, true, &mut ctx.rng)
}

/// Three conv blocks: conv3×3 → batch norm → ReLU → max-pool → dropout.
/// `[B, 7, T, F]` → `[B, M, T / 5, F′]`.
pub fn conv_encoder<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &ModelConfig,
    p: &Bound,
    buffers: &mut BTreeMap<String, BatchNormStats<T>>,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != super::config::INPUT_CHANNELS || shape[2] != cfg.input_frames || shape[3] != cfg.input_bins {
        return Err(SeldError::dim(
            "conv_encoder",
            &shape,
            &[0, super::config::INPUT_CHANNELS, cfg.input_frames, cfg.input_bins],
        ));
    }
    let zero_bias = tape.constant(Tensor::zeros(vec![cfg.m_channels]));
    let mut h = x;
    for i in 0..3 {
        h = tape.conv2d(h, p.get(&format!("enc.{i}.conv.w"))?, zero_bias)?;
        let stats = buffers
            .get_mut(&format!("enc.{i}.bn"))
            .ok_or_else(|| SeldError::Config(format!("missing buffer enc.{i}.bn")))?;
        h = tape.batch_norm2d(
            h,
            p.get(&format!("enc.{i}.bn.gamma"))?,
            p.get(&format!("enc.{i}.bn.beta"))?,
            stats,
            ctx.training,
        )?;
        h = tape.relu(h);
        h = tape.max_pool2d(h, cfg.time_pool[i], cfg.freq_pool[i])?;
        h = dropout(tape, h, cfg.dropout, ctx)?;
    }
    Ok(h)
}

/// Scaled dot-product self-attention with `n_heads` heads over `[N, L, M]`.
/// Parameters under `name`: `wq`, `bq`, `wk`, `v.{w,b}`, `o.{w,b}`.
pub fn multihead_self_attention<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    n_heads: usize,
    p: &Bound,
    name: &str,
) -> Result<(Var, Var)> {
    let [n, l, m] = match *tape.shape(x) {
        [n, l, m] => [n, l, m],
        ref s => return Err(SeldError::dim("multihead_self_attention", s, &[0, 0, 0])),
    };
    if n_heads == 0 || m % n_heads != 0 {
        return Err(SeldError::Config(format!("width {m} not divisible by {n_heads} heads")));
    }
    let dh = m / n_heads;
    let q = tape.linear(x, p.get(&format!("{name}.wq"))?, p.get(&format!("{name}.bq"))?)?;
    let flat = tape.reshape(x, &[n * l, m])?;
    let k = tape.matmul(flat, p.get(&format!("{name}.wk"))?)?;
    let v = tape.linear(x, p.get(&format!("{name}.v.w"))?, p.get(&format!("{name}.v.b"))?)?;
    let heads = |tape: &mut Tape<T>, t: Var, perm: &[usize]| -> Result<Var> {
        let t = tape.reshape(t, &[n, l, n_heads, dh])?;
        tape.permute(t, perm)
    };
    let q = heads(tape, q, &[0, 2, 1, 3])?;
    let kt = heads(tape, k, &[0, 2, 3, 1])?;
    let v = heads(tape, v, &[0, 2, 1, 3])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
    let attn = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n, l, m])?;
    let out = tape.linear(ctx, p.get(&format!("{name}.o.w"))?, p.get(&format!("{name}.o.b"))?)?;
    Ok((out, attn))
}

/// attention → residual add → dropout → layer norm, over `[N, L, M]`.
fn attention_sublayer<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    n_heads: usize,
    p: &Bound,
    name: &str,
    norm: &str,
    kind: AttentionKind,
    dropout_p: f64,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let (a, attn) = multihead_self_attention(tape, x, n_heads, p, name)?;
    if let Some(trace) = ctx.trace.as_mut() {
        let s = tape.shape(attn);
        trace.push(AttentionTrace { kind, sequences: s[0], heads: s[1], map: [s[2], s[3]] });
    }
    let h = tape.add(x, a)?;
    let h = dropout(tape, h, dropout_p, ctx)?;
    tape.layer_norm(h, p.get(&format!("{norm}.gamma"))?, p.get(&format!("{norm}.beta"))?, LN_EPS)
}

/// Spectral sublayer on `[B, M, T, F]`: frames are merged into the batch,
/// so attention runs over the F′ bins of each frame separately.
pub fn spectral_mhsa<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &ModelConfig,
    p: &Bound,
    block: usize,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let [b, m, t, f] = dims4(tape.shape(x))?;
    let h = tape.permute(x, &[0, 2, 3, 1])?;
    let h = tape.reshape(h, &[b * t, f, m])?;
    let name = format!("dst.{block}.spec");
    let h = attention_sublayer(tape, h, cfg.n_heads, p, &name, &format!("{name}_norm"), AttentionKind::Spectral, cfg.dropout, ctx)?;
    let h = tape.reshape(h, &[b, t, f, m])?;
    tape.permute(h, &[0, 3, 1, 2])
}

/// Temporal sublayer on `[B, M, T, F]`: bins are merged into the batch, so
/// attention runs over the frames of each bin separately.
pub fn temporal_mhsa<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &ModelConfig,
    p: &Bound,
    block: usize,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let [b, m, t, f] = dims4(tape.shape(x))?;
    let h = tape.permute(x, &[0, 3, 2, 1])?;
    let h = tape.reshape(h, &[b * f, t, m])?;
    let name = format!("dst.{block}.temp");
    let h = attention_sublayer(tape, h, cfg.n_heads, p, &name, &format!("{name}_norm"), AttentionKind::Temporal, cfg.dropout, ctx)?;
    let h = tape.reshape(h, &[b, f, t, m])?;
    tape.permute(h, &[0, 3, 2, 1])
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [b, m, t, f] => Ok([b, m, t, f]),
        ref s => Err(SeldError::dim("dst_block", s, &[0, 0, 0, 0])),
    }
}

/// One DST block: spectral then temporal sublayer. `[B, M, T, F]` in and out.
pub fn dst_block<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &ModelConfig,
    p: &Bound,
    block: usize,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let h = spectral_mhsa(tape, x, cfg, p, block, ctx)?;
    temporal_mhsa(tape, h, cfg, p, block, ctx)
}

fn gru_weights(p: &Bound, name: &str) -> Result<GruWeights> {
    Ok(GruWeights {
        w_ih: p.get(&format!("{name}.w_ih"))?,
        w_hh: p.get(&format!("{name}.w_hh"))?,
        b_ih: p.get(&format!("{name}.b_ih"))?,
        b_hh: p.get(&format!("{name}.b_hh"))?,
    })
}

fn bigru<T: Float>(tape: &mut Tape<T>, x: Var, p: &Bound, layer: usize) -> Result<Var> {
    let f = gru_weights(p, &format!("gru.{layer}.fwd"))?;
    let r = gru_weights(p, &format!("gru.{layer}.bwd"))?;
    tape.gru_bidirectional(x, &f, &r)
}

/// linear → ReLU → linear → tanh over `[B, T, E]`.
fn head<T: Float>(tape: &mut Tape<T>, x: Var, p: &Bound) -> Result<Var> {
    let h = tape.linear(x, p.get("head.fc1.w")?, p.get("head.fc1.b")?)?;
    let h = tape.relu(h);
    let h = tape.linear(h, p.get("head.fc2.w")?, p.get("head.fc2.b")?)?;
    Ok(tape.tanh(h))
}

/// DST model: `[B, 7, T, F]` → `[B, T / 5, D]`.
pub fn forward<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &ModelConfig,
    p: &Bound,
    buffers: &mut BTreeMap<String, BatchNormStats<T>>,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    if cfg.variant != Variant::Dst {
        return Err(SeldError::Config("forward expects the dst variant".into()));
    }
    let mut h = conv_encoder(tape, x, cfg, p, buffers, ctx)?;
    let [b, m, t, f] = dims4(tape.shape(h))?;
    if cfg.include_gru {
        let s = tape.permute(h, &[0, 2, 3, 1])?;
        let s = tape.reshape(s, &[b, t, f * m])?;
        let s = bigru(tape, s, p, 0)?;
        let s = tape.reshape(s, &[b, t, f, m])?;
        h = tape.permute(s, &[0, 3, 1, 2])?;
    }
    for k in 0..cfg.n_dst_blocks {
        h = dst_block(tape, h, cfg, p, k, ctx)?;
    }
    let h = tape.permute(h, &[0, 2, 3, 1])?;
    let h = tape.reshape(h, &[b, t, f * m])?;
    head(tape, h, p)
}

/// CRNN baseline: encoder → spectral flatten → bidirectional GRU stack →
/// temporal MHSA layers (residual + layer norm) → head.
pub fn baseline_forward<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &ModelConfig,
    p: &Bound,
    buffers: &mut BTreeMap<String, BatchNormStats<T>>,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    if cfg.variant != Variant::Baseline {
        return Err(SeldError::Config("baseline_forward expects the baseline variant".into()));
    }
    let h = conv_encoder(tape, x, cfg, p, buffers, ctx)?;
    let [b, m, t, f] = dims4(tape.shape(h))?;
    let h = tape.permute(h, &[0, 2, 1, 3])?;
    let mut h = tape.reshape(h, &[b, t, m * f])?;
    for l in 0..cfg.gru_layers {
        h = bigru(tape, h, p, l)?;
    }
    for k in 0..cfg.n_temporal_mhsa {
        let name = format!("mhsa.{k}");
        h = attention_sublayer(tape, h, cfg.n_heads, p, &name, &format!("{name}.norm"), AttentionKind::Temporal, cfg.dropout, ctx)?;
    }
    head(tape, h, p)
}

/// Dispatches on `cfg.variant`.
pub fn run<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &ModelConfig,
    p: &Bound,
    buffers: &mut BTreeMap<String, BatchNormStats<T>>,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    match cfg.variant {
        Variant::Dst => forward(tape, x, cfg, p, buffers, ctx),
        Variant::Baseline => baseline_forward(tape, x, cfg, p, buffers, ctx),
    }
}

/// Inference on a `[B, 7, T, F]` batch without gradient tracking.
pub fn predict<T: Float>(cfg: &ModelConfig, params: &mut ParamSet<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(features.clone());
    let mut ctx = ForwardCtx::eval();
    let y = run(&mut tape, x, cfg, &bound, &mut params.buffers, &mut ctx)?;
    Ok(tape.value(y).clone())
}
