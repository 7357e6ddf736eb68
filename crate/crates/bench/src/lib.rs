//! Seeded fixtures shared by the criterion benchmarks.

use clearmap_core::{
    conv2d_output_shape, initial_network, parse_network_spec, KernelBank, Network, Tensor,
    TrainConfig, MNIST_NETSPEC,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A tensor of uniform values in `[0, 1)`, reproducible per seed.
pub fn random_image(channels: usize, height: usize, width: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * height * width)
        .map(|_| rng.random::<f64>())
        .collect();
    Tensor::from_vec(channels, height, width, data).unwrap()
}

/// A kernel bank with small centered weights and zero biases.
pub fn random_bank(
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    seed: u64,
) -> KernelBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..out_channels * in_channels * kh * kw)
        .map(|_| rng.random::<f64>() - 0.5)
        .collect();
    let bias = vec![0.0; out_channels];
    KernelBank::from_parts(out_channels, in_channels, kh, kw, weights, bias).unwrap()
}

/// The bundled 28×28 digit network with freshly initialized weights.
pub fn mnist_network() -> Network {
    let spec = parse_network_spec(MNIST_NETSPEC).unwrap();
    initial_network(spec, &TrainConfig::default())
}

/// A batch of `n` seeded images shaped for [`mnist_network`], with labels
/// cycling through the classes.
pub fn mnist_batch(n: usize) -> (Vec<Tensor>, Vec<usize>) {
    let images = (0..n)
        .map(|i| random_image(1, 28, 28, 100 + i as u64))
        .collect();
    let labels = (0..n).map(|i| i % 10).collect();
    (images, labels)
}

/// Sanity hook so `cargo test -p clearmap-bench` exercises the fixtures.
pub fn fixture_checksum() -> f64 {
    let image = random_image(1, 28, 28, 7);
    image.data().iter().sum()
}
