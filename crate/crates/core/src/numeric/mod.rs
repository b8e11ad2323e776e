//! Dense tensors, a reverse-mode gradient tape, the kernels the models need,
//! and the Adam optimizer.

mod adam;
mod conv;
mod gradcheck;
mod gru;
pub mod io;
mod ops;
mod scalar;
mod tape;
mod tensor;

#[cfg(test)]
mod tests;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::BatchNormStats;
pub use gradcheck::{grad_check, grad_check_many, op_suite};
pub use gru::GruWeights;
pub use scalar::Float;
pub use tape::{BackwardArgs, BackwardFn, Tape, Var};
pub use tensor::{inverse_perm, numel, strides, Tensor};

/// The single seedable generator threaded through every stochastic step.
pub type SeldRng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeldRng {
    use rand::SeedableRng;
    SeldRng::seed_from_u64(seed)
}
