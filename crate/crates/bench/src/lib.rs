//! Shared fixtures for the benchmarks.

use cshape::channel::{apply_channel_with_noise, sigma_n_from_snr, sigma_phi_from_linewidth};
use cshape::rng::{substream, Stream};
use cshape::system::{draw_batch, LabelSource};
use cshape::{Complex64, Constellation};
use rand::Rng;

/// Random unit-energy constellation with `2^m` points.
pub fn random_constellation(m: usize, seed: u64) -> Constellation {
    let mut rng = substream(seed, Stream::Init, 0);
    let points = (0..1 << m)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    Constellation::uniform(points).expect("nondegenerate constellation")
}

/// Received block at 17 dB and 100 kHz linewidth.
pub fn received_block(c: &Constellation, len: usize, seed: u64) -> Vec<Complex64> {
    let input = draw_batch(
        &c.probs,
        LabelSource::Uniform,
        len,
        sigma_n_from_snr(17.0, 1.0),
        sigma_phi_from_linewidth(100e3, 32e9),
        true,
        seed,
        0,
    );
    let x: Vec<Complex64> = input.labels.iter().map(|&l| c.points[l]).collect();
    apply_channel_with_noise(&x, &input.noise, &input.trace).expect("matching lengths")
}
