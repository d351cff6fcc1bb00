//! Property tests over randomized inputs.

use proptest::prelude::*;

use fieldgen_core::boundary::{
    assemble_condition_tensor, decode_sample, encode_sample, rasterize_sketch, spatial_reference,
    BoundarySample, SourceGeometrySpec,
};
use fieldgen_core::prior::{alpha, blend_latents, BlendSchedule};
use fieldgen_core::tensor::{Tape, Tensor};

fn in_bounds_rect(size: usize) -> impl Strategy<Value = SourceGeometrySpec> {
    (1..=size / 2, 1..=size / 2).prop_flat_map(move |(w, h)| {
        (0..=size - w, 0..=size - h, 0.1f64..5.0).prop_map(move |(x, y, amplitude)| {
            SourceGeometrySpec { x, y, width: w, height: h, amplitude, wavelength: 20.0 }
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sketch_area_is_exact(spec in in_bounds_rect(32)) {
        let s = rasterize_sketch(&spec, 32, 32).unwrap();
        let ones = s.data().iter().filter(|&&v| v == 1.0).count();
        prop_assert_eq!(ones, spec.width * spec.height);
        prop_assert!(s.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn sample_files_round_trip_bit_exactly(
        spec in in_bounds_rect(16),
        seed in any::<u64>(),
        fill in proptest::collection::vec(-1.0f32..1.0, 3 * 16 * 16),
    ) {
        let sketch = rasterize_sketch(&spec, 16, 16).unwrap();
        let sample = BoundarySample {
            edge: sketch.clone(),
            sketch,
            spatial_ref: spatial_reference(16, 16),
            target: Tensor::from_vec(&[3, 16, 16], fill).unwrap(),
            geometry: spec,
            seed,
        };
        let bytes = encode_sample(&sample).unwrap();
        let back = decode_sample(&bytes).unwrap();
        prop_assert_eq!(&back, &sample);
        prop_assert_eq!(encode_sample(&back).unwrap(), bytes);
    }

    #[test]
    fn condition_tensor_is_nine_channels_in_order(spec in in_bounds_rect(16)) {
        let sketch = rasterize_sketch(&spec, 16, 16).unwrap();
        let sample = BoundarySample {
            edge: sketch.map(|v| v * 0.5),
            sketch: sketch.clone(),
            spatial_ref: spatial_reference(16, 16),
            target: Tensor::zeros(&[3, 16, 16]),
            geometry: spec,
            seed: 0,
        };
        let cond = assemble_condition_tensor(&sample).unwrap();
        prop_assert_eq!(cond.shape(), &[9usize, 16, 16]);
        let plane = 256;
        for c in 0..3 {
            prop_assert_eq!(&cond.data()[c * plane..(c + 1) * plane], sketch.data());
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..9,
        values in proptest::collection::vec(-30.0f64..30.0, 40),
    ) {
        let data: Vec<f64> = values.into_iter().take(rows * cols).collect();
        prop_assume!(data.len() == rows * cols);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[rows, cols], data).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        for r in 0..rows {
            let sum: f64 = tape.value(y).data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn blending_identical_latents_is_identity(
        a in 0.0f64..=1.0,
        values in proptest::collection::vec(-3.0f32..3.0, 12),
    ) {
        let z = Tensor::from_vec(&[12], values).unwrap();
        prop_assert_eq!(blend_latents(&z, &z, a).unwrap(), z);
    }

    #[test]
    fn alpha_is_monotone_and_clamped(n in 0u64..4000, m in 0u64..4000) {
        let s = BlendSchedule::default();
        let (lo, hi) = if n <= m { (n, m) } else { (m, n) };
        prop_assert!(alpha(lo, &s) >= alpha(hi, &s));
        prop_assert!((0.0..=1.0).contains(&alpha(n, &s)));
        if n >= 1000 {
            prop_assert_eq!(alpha(n, &s), 0.0);
        }
    }
}
