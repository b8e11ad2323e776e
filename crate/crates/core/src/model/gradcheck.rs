use rand::Rng;

use super::config::ModelConfig;
use super::layers::{forward, ForwardCtx};
use super::params::{init_params, Bound, ParamSet};
use crate::error::Result;
use crate::numeric::{grad_check_many, rng_from_seed, Tensor};
use crate::targets::TargetFormat;

/// Gradient check of the loss of the tiny DST model (see
/// [`ModelConfig::tiny_grad`]) against a random target, in double precision.
/// Returns the max relative error per parameter tensor.
pub fn tiny_grad_check(format: TargetFormat, seed: u64, h: f64) -> Result<Vec<(String, f64)>> {
    let cfg = ModelConfig::tiny_grad(format);
    let mut rng = rng_from_seed(seed);
    let params: ParamSet<f64> = init_params(&cfg, &mut rng)?;
    let names: Vec<String> = params.params.keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = params.params.values().cloned().collect();
    let x = Tensor::from_fn([1, 7, cfg.input_frames, cfg.input_bins], |_| rng.random_range(-1.0..1.0));
    let target = Tensor::from_fn([1, cfg.out_frames(), format.dim()], |_| rng.random_range(-0.9..0.9));
    let errs = grad_check_many(
        |tape, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect());
            let xv = tape.constant(x.clone());
            let tv = tape.constant(target.clone());
            let mut buffers = params.buffers.clone();
            let y = forward(tape, xv, &cfg, &bound, &mut buffers, &mut ForwardCtx::train(rng_from_seed(0)))?;
            tape.target_loss(y, tv, format)
        },
        &inputs,
        h,
    )?;
    Ok(names.into_iter().zip(errs).collect())
}
