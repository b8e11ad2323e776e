use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{ModelConfig, Variant, INPUT_CHANNELS};
use crate::error::{Result, SeldError};
use crate::numeric::{BatchNormStats, Float, SeldRng, Tape, Tensor, Var};

/// Trainable tensors by name plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Float = f32> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, BatchNormStats<T>>,
}

/// Tape handles for every parameter of a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| SeldError::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Bound { vars }
    }
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    fn insert(&mut self, name: String, t: Tensor<T>) {
        let prev = self.params.insert(name.clone(), t);
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let mut t = v.clone();
                t.requires_grad = trainable;
                t.grad = None;
                (k.clone(), tape.leaf(t))
            })
            .collect();
        Bound { vars }
    }

    /// Copies gradients from the tape into each parameter's `grad`.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (k, p) in self.params.iter_mut() {
            p.grad = bound
                .vars
                .get(k)
                .and_then(|&v| tape.grad(v))
                .map(<[T]>::to_vec)
                .or_else(|| Some(vec![T::zero(); p.numel()]));
        }
    }

    /// L2 norm of each parameter's gradient.
    pub fn grad_norms(&self) -> BTreeMap<String, f64> {
        self.params
            .iter()
            .map(|(k, p)| {
                let n = p.grad.as_ref().map_or(0.0, |g| g.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt());
                (k.clone(), n)
            })
            .collect()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, s)| {
                    let c = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
                    (k.clone(), BatchNormStats { mean: c(&s.mean), var: c(&s.var), momentum: s.momentum, eps: s.eps })
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

impl<T: Float> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn uniform<T: Float>(rng: &mut SeldRng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

/// Kaiming-uniform (ReLU gain): `U(-√(6 / fan_in), √(6 / fan_in))`.
fn kaiming<T: Float>(rng: &mut SeldRng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
}

/// Kaiming-uniform with `a = √5`: `U(-1/√fan_in, 1/√fan_in)`.
fn kaiming_linear<T: Float>(rng: &mut SeldRng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    uniform(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

/// `[n, n]` orthogonal matrix from Gram-Schmidt on a Gaussian draw.
fn orthogonal(rng: &mut SeldRng, n: usize) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q.concat()
}

fn linear<T: Float>(p: &mut ParamSet<T>, rng: &mut SeldRng, name: &str, fan_in: usize, fan_out: usize) {
    p.insert(format!("{name}.w"), kaiming_linear(rng, vec![fan_in, fan_out], fan_in));
    p.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
}

fn norm<T: Float>(p: &mut ParamSet<T>, name: &str, width: usize) {
    p.insert(format!("{name}.gamma"), Tensor::ones(vec![width]));
    p.insert(format!("{name}.beta"), Tensor::zeros(vec![width]));
}

fn attention<T: Float>(p: &mut ParamSet<T>, rng: &mut SeldRng, name: &str, width: usize) {
    p.insert(format!("{name}.wq"), kaiming_linear(rng, vec![width, width], width));
    p.insert(format!("{name}.bq"), Tensor::zeros(vec![width]));
    // keys carry no bias: it shifts every score of a query equally
    p.insert(format!("{name}.wk"), kaiming_linear(rng, vec![width, width], width));
    linear(p, rng, &format!("{name}.v"), width, width);
    linear(p, rng, &format!("{name}.o"), width, width);
}

fn gru<T: Float>(p: &mut ParamSet<T>, rng: &mut SeldRng, name: &str, input: usize, hidden: usize) {
    let bound = 1.0 / (hidden as f64).sqrt();
    p.insert(format!("{name}.w_ih"), uniform(rng, vec![input, 3 * hidden], bound));
    // orthogonal block per gate, stored [H, 3H]
    let blocks: Vec<Vec<f64>> = (0..3).map(|_| orthogonal(rng, hidden)).collect();
    let w_hh = Tensor::from_fn(vec![hidden, 3 * hidden], |i| {
        let (r, c) = (i / (3 * hidden), i % (3 * hidden));
        T::of(blocks[c / hidden][r * hidden + c % hidden])
    });
    p.insert(format!("{name}.w_hh"), w_hh);
    p.insert(format!("{name}.b_ih"), uniform(rng, vec![3 * hidden], bound));
    p.insert(format!("{name}.b_hh"), uniform(rng, vec![3 * hidden], bound));
}

pub fn init_params<T: Float>(cfg: &ModelConfig, rng: &mut SeldRng) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let m = cfg.m_channels;
    for i in 0..3 {
        let cin = if i == 0 { INPUT_CHANNELS } else { m };
        p.insert(format!("enc.{i}.conv.w"), kaiming(rng, vec![m, cin, 3, 3], cin * 9));
        norm(&mut p, &format!("enc.{i}.bn"), m);
        p.buffers.insert(format!("enc.{i}.bn"), BatchNormStats::new(m));
    }
    match cfg.variant {
        Variant::Dst => {
            if cfg.include_gru {
                let w = cfg.embed_width();
                gru(&mut p, rng, "gru.0.fwd", w, w / 2);
                gru(&mut p, rng, "gru.0.bwd", w, w / 2);
            }
            for k in 0..cfg.n_dst_blocks {
                attention(&mut p, rng, &format!("dst.{k}.spec"), m);
                norm(&mut p, &format!("dst.{k}.spec_norm"), m);
                attention(&mut p, rng, &format!("dst.{k}.temp"), m);
                norm(&mut p, &format!("dst.{k}.temp_norm"), m);
            }
        }
        Variant::Baseline => {
            let h = cfg.gru_hidden;
            for l in 0..cfg.gru_layers {
                let input = if l == 0 { cfg.f_prime() * m } else { 2 * h };
                gru(&mut p, rng, &format!("gru.{l}.fwd"), input, h);
                gru(&mut p, rng, &format!("gru.{l}.bwd"), input, h);
            }
            for k in 0..cfg.n_temporal_mhsa {
                attention(&mut p, rng, &format!("mhsa.{k}"), 2 * h);
                norm(&mut p, &format!("mhsa.{k}.norm"), 2 * h);
            }
        }
    }
    linear(&mut p, rng, "head.fc1", cfg.embed_width(), cfg.head_hidden);
    linear(&mut p, rng, "head.fc2", cfg.head_hidden, cfg.output_dim());
    Ok(p)
}

pub fn count_params<T: Float>(p: &ParamSet<T>) -> usize {
    p.count()
}
