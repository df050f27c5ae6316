//! Fixtures shared by the benchmarks.

use objabn::data::{render_split, sample_clip, SampledClip, SamplingMode, SamplingProtocol};
use objabn::{SyntheticSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic uniform tensor in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// `count` training clips from the default synthetic dataset.
pub fn synthetic_batch(count: usize) -> Vec<SampledClip> {
    let spec = SyntheticSpec::default();
    let videos = render_split(&spec, true, count).expect("default spec renders");
    let protocol = SamplingProtocol::synthetic(SamplingMode::Train, spec.num_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    videos
        .iter()
        .map(|v| sample_clip(v, &protocol, &mut rng).expect("clip fits"))
        .collect()
}
