//! Shared helpers for the oracle test suites. The finite-difference code
//! here is the independent gradient oracle; it never touches the backward
//! pass it checks.

#![allow(dead_code)] // each test target uses a different subset

use advreg_core::models::{ModelBundle, ModelDims};
use advreg_core::objective::Batch;
use advreg_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let vals = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::matrix(rows, cols, vals).unwrap()
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central finite differences (step `h`) of a scalar function of several
/// tensors, with respect to the tensor at `which`.
pub fn central_diff<F>(inputs: &[Tensor], which: usize, h: f64, f: F) -> Tensor
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut grads = Tensor::zeros_like(&inputs[which]);
    for j in 0..inputs[which].len() {
        let mut plus = inputs.to_vec();
        plus[which].values_mut()[j] += h;
        let mut minus = inputs.to_vec();
        minus[which].values_mut()[j] -= h;
        grads.values_mut()[j] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    grads
}

pub fn tiny_dims() -> ModelDims {
    ModelDims {
        vocab: 10,
        embed: 4,
        q_dim: 5,
        img_dim: 6,
        raw_dim: 3,
        fusion_hidden: 7,
        adversary_hidden: 8,
        num_answers: 4,
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, dims: &ModelDims, n: usize, qlen: usize) -> Batch {
    Batch {
        tokens: (0..n)
            .map(|_| (0..qlen).map(|_| rng.gen_range(0..dims.vocab)).collect())
            .collect(),
        features: (0..n)
            .map(|_| {
                (0..dims.raw_dim)
                    .map(|_| rng.gen_range(-2.0..2.0))
                    .collect()
            })
            .collect(),
        labels: (0..n).map(|_| rng.gen_range(0..dims.num_answers)).collect(),
    }
}

/// Adds small uniform noise to every parameter so pre-activations are
/// generic: fresh bundles have all-zero biases, which can park hidden units
/// exactly at the relu kink where finite differences are invalid.
pub fn jitter_bundle(bundle: &mut ModelBundle, rng: &mut ChaCha8Rng) {
    for p in bundle.params_mut() {
        for v in p.value.values_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

/// Evaluates a loss term as a pure function of a perturbed parameter
/// vector, for finite differencing end-to-end losses.
pub fn loss_with_param<F>(
    bundle: &ModelBundle,
    param_index: usize,
    replacement: &Tensor,
    eval: F,
) -> f64
where
    F: Fn(&ModelBundle) -> f64,
{
    let mut b = bundle.clone();
    b.params_mut()[param_index].value = replacement.clone();
    eval(&b)
}
