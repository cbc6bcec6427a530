//! Compares reverse-mode gradients of an encoder block with central
//! differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tlmk::blocks::{feed_forward, FeedForwardParams, FeedForwardVars};
use tlmk::graph::grad_check;
use tlmk::Tensor;

fn main() -> tlmk::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = FeedForwardParams::init(&mut rng, 6, 2);
    let x = Tensor::new(vec![4, 6], (0..24).map(|i| ((i * 7) % 11) as f32 / 11.0 - 0.5).collect())?;
    let err = grad_check(
        |g, v| feed_forward(g, &FeedForwardVars { w_up: v[1], w_down: v[2] }, v[0]),
        &[x, p.w_up.clone(), p.w_down.clone()],
        2e-3,
    )?;
    println!("feed-forward: max relative gradient error {err:.3e}");
    Ok(())
}
