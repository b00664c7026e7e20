//! Finite-difference checks of the tape's gradients for a few operations.
//!
//! `cargo run --example gradient_check`

use forgery_knowledge::tensor::{grad_check, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> forgery_knowledge::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let attn = [random(&mut rng, &[3, 4]), random(&mut rng, &[5, 4]), random(&mut rng, &[5, 4])];
    let norm = [random(&mut rng, &[3, 6]), random(&mut rng, &[6]), random(&mut rng, &[6])];
    let deconv = [random(&mut rng, &[2, 2, 3]), random(&mut rng, &[3, 2, 2, 2])];
    let logits = [random(&mut rng, &[4, 5])];

    let reports = [
        ("attention", grad_check(|t, v| t.attention(v[0], v[1], v[2], false), &attn, 1e-6)?),
        ("layer_norm", grad_check(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), &norm, 1e-6)?),
        ("conv_transpose2d", grad_check(|t, v| t.conv_transpose2d(v[0], v[1], 2), &deconv, 1e-6)?),
        ("log_softmax", grad_check(|t, v| t.log_softmax(v[0], 1), &logits, 1e-6)?),
    ];
    for (name, r) in reports {
        println!(
            "{name:<18} max relative error {:.2e} over {} elements",
            r.max_relative_error, r.checked
        );
    }
    Ok(())
}
