//! Shared fixtures for the criterion benchmarks.

use fieldgen_core::boundary::SourceGeometrySpec;
use fieldgen_core::rng;
use fieldgen_core::tensor::Tensor;

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut r = rng::stream(seed, "bench", &[]);
    Tensor::from_vec(shape, rng::normal_vec(&mut r, n)).expect("bench tensor")
}

pub fn bench_source() -> SourceGeometrySpec {
    SourceGeometrySpec { x: 28, y: 30, width: 3, height: 2, amplitude: 2.0, wavelength: 20.0 }
}
