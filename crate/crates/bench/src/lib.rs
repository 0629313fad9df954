//! Shared fixtures for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vgg_iqa::{RgbImage, Tensor};

pub fn noise_image(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(width, height, |_, _| rng.random())
}

pub fn noise_tensor(channels: usize, height: usize, width: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(channels, height, width, |_, _, _| rng.random_range(-1.0..1.0))
}
