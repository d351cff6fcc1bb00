//! Boundary-condition inputs: source sketches, Canny edge maps, spatial
//! reference channels, the 9-channel condition tensor, and the on-disk
//! dataset format.

mod canny;
mod dataset;
pub mod io;

pub use canny::canny_edges;
pub use dataset::{
    decode_sample, encode_sample, read_manifest, read_sample, read_sample_verified, sha256_hex,
    write_manifest, write_sample, DatasetManifest, ManifestEntry, SampleSplit, FORMAT_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corruption error: {0}")]
    Corruption(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Rectangular wave-source region, in cell coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceGeometrySpec {
    /// Top-left cell column.
    pub x: usize,
    /// Top-left cell row.
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub amplitude: f64,
    /// Source wavelength in cells.
    pub wavelength: f64,
}

impl SourceGeometrySpec {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(DataError::Geometry(format!(
                "source rectangle must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        if self.x + self.width > width || self.y + self.height > height {
            return Err(DataError::Geometry(format!(
                "source rectangle ({}, {}) {}x{} exceeds {}x{} bounds",
                self.x, self.y, self.width, self.height, width, height
            )));
        }
        Ok(())
    }
}

/// One dataset record: sketch, edge map, spatial reference, target field.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySample {
    /// Binary source sketch, `[h, w]` with values in {0, 1}.
    pub sketch: Tensor<f32>,
    /// Canny edge map of the sketch, `[h, w]` in [0, 1].
    pub edge: Tensor<f32>,
    /// Coordinate/radial reference channels, `[3, h, w]`.
    pub spatial_ref: Tensor<f32>,
    /// Ground-truth field image, `[3, h, w]` in [0, 1].
    pub target: Tensor<f32>,
    pub geometry: SourceGeometrySpec,
    pub seed: u64,
}

impl BoundarySample {
    pub fn height(&self) -> usize {
        self.sketch.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.sketch.shape()[1]
    }
}

/// 1 inside the source rectangle, 0 elsewhere.
pub fn rasterize_sketch(spec: &SourceGeometrySpec, height: usize, width: usize) -> Result<Tensor<f32>> {
    spec.validate(width, height)?;
    let mut data = vec![0.0f32; height * width];
    for y in spec.y..spec.y + spec.height {
        for x in spec.x..spec.x + spec.width {
            data[y * width + x] = 1.0;
        }
    }
    Ok(Tensor::from_vec(&[height, width], data).expect("sketch shape"))
}

/// Three reference channels: x/(W-1), y/(H-1), and radial distance from the
/// image center normalized to 1 at the corners.
pub fn spatial_reference(height: usize, width: usize) -> Tensor<f32> {
    assert!(height >= 2 && width >= 2, "spatial_reference needs H, W >= 2");
    let cy = (height - 1) as f64 / 2.0;
    let cx = (width - 1) as f64 / 2.0;
    let corner = (cy * cy + cx * cx).sqrt();
    let mut data = vec![0.0f32; 3 * height * width];
    let plane = height * width;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            data[i] = (x as f64 / (width - 1) as f64) as f32;
            data[plane + i] = (y as f64 / (height - 1) as f64) as f32;
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            data[2 * plane + i] = ((dy * dy + dx * dx).sqrt() / corner) as f32;
        }
    }
    Tensor::from_vec(&[3, height, width], data).expect("spatial_reference shape")
}

/// Stack `[sketch x3; edge x3; spatial_ref]` into the 9-channel condition
/// tensor, in that fixed order.
pub fn assemble_condition_tensor(sample: &BoundarySample) -> Result<Tensor<f32>> {
    let (h, w) = (sample.height(), sample.width());
    for (name, t, ch) in [
        ("edge", &sample.edge, 1usize),
        ("spatial_ref", &sample.spatial_ref, 3),
        ("target", &sample.target, 3),
    ] {
        let want: &[usize] = if ch == 1 { &[h, w] } else { &[ch, h, w] };
        if t.shape() != want {
            return Err(DataError::Dimension(format!(
                "{name} shape {:?}, expected {:?}",
                t.shape(),
                want
            )));
        }
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(9 * plane);
    for _ in 0..3 {
        data.extend_from_slice(sample.sketch.data());
    }
    for _ in 0..3 {
        data.extend_from_slice(sample.edge.data());
    }
    data.extend_from_slice(sample.spatial_ref.data());
    Ok(Tensor::from_vec(&[9, h, w], data).expect("condition tensor shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(x: usize, y: usize, w: usize, h: usize) -> SourceGeometrySpec {
        SourceGeometrySpec { x, y, width: w, height: h, amplitude: 1.0, wavelength: 20.0 }
    }

    #[test]
    fn full_domain_rectangle_is_all_ones() {
        let s = rasterize_sketch(&spec(0, 0, 8, 6), 6, 8).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_cell_rectangle() {
        let s = rasterize_sketch(&spec(5, 5, 1, 1), 16, 16).unwrap();
        let ones: Vec<usize> = s
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(ones, vec![5 * 16 + 5]);
    }

    #[test]
    fn rectangle_area_is_exact() {
        let s = rasterize_sketch(&spec(3, 7, 10, 10), 32, 32).unwrap();
        let count = s.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(count, 100);
        assert!(s.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn zero_extent_rectangle_is_rejected() {
        assert!(rasterize_sketch(&spec(0, 0, 0, 3), 8, 8).is_err());
    }

    #[test]
    fn out_of_bounds_rectangle_is_rejected() {
        let err = rasterize_sketch(&spec(6, 6, 4, 4), 8, 8).unwrap_err();
        assert!(matches!(err, DataError::Geometry(_)));
    }

    #[test]
    fn spatial_reference_center_and_corner() {
        let r = spatial_reference(9, 9);
        let plane = 81;
        let center = 4 * 9 + 4;
        assert!((r.data()[center] - 0.5).abs() < 1e-6);
        assert!((r.data()[plane + center] - 0.5).abs() < 1e-6);
        assert_eq!(r.data()[2 * plane + center], 0.0);
        // Corner (0, 0): x = 0, y = 0, radius = 1.
        assert_eq!(r.data()[0], 0.0);
        assert_eq!(r.data()[plane], 0.0);
        assert!((r.data()[2 * plane] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn radial_channel_symmetric_under_180_rotation() {
        let r = spatial_reference(7, 11);
        let plane = 7 * 11;
        let rad = &r.data()[2 * plane..3 * plane];
        for y in 0..7 {
            for x in 0..11 {
                let a = rad[y * 11 + x];
                let b = rad[(6 - y) * 11 + (10 - x)];
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn condition_tensor_layout() {
        let g = spec(2, 3, 4, 2);
        let sketch = rasterize_sketch(&g, 16, 16).unwrap();
        let edge = Tensor::zeros(&[16, 16]);
        let sample = BoundarySample {
            sketch: sketch.clone(),
            edge,
            spatial_ref: spatial_reference(16, 16),
            target: Tensor::zeros(&[3, 16, 16]),
            geometry: g,
            seed: 0,
        };
        let cond = assemble_condition_tensor(&sample).unwrap();
        assert_eq!(cond.shape(), &[9, 16, 16]);
        let plane = 256;
        // Sketch replicated across the first three channels.
        assert_eq!(&cond.data()[..plane], &cond.data()[plane..2 * plane]);
        assert_eq!(&cond.data()[..plane], &cond.data()[2 * plane..3 * plane]);
        assert_eq!(&cond.data()[..plane], sketch.data());
        // Zero edge stream leaves channels 3-5 zero.
        assert!(cond.data()[3 * plane..6 * plane].iter().all(|&v| v == 0.0));
        // Channels 6-8 carry the spatial reference.
        assert_eq!(&cond.data()[6 * plane..], sample.spatial_ref.data());
    }

    #[test]
    fn condition_tensor_full_scale_shape() {
        let g = spec(100, 100, 8, 8);
        let sample = BoundarySample {
            sketch: rasterize_sketch(&g, 256, 256).unwrap(),
            edge: Tensor::zeros(&[256, 256]),
            spatial_ref: spatial_reference(256, 256),
            target: Tensor::zeros(&[3, 256, 256]),
            geometry: g,
            seed: 0,
        };
        let cond = assemble_condition_tensor(&sample).unwrap();
        assert_eq!(cond.shape(), &[9, 256, 256]);
    }

    #[test]
    fn condition_tensor_rejects_extent_mismatch() {
        let g = spec(0, 0, 2, 2);
        let sample = BoundarySample {
            sketch: rasterize_sketch(&g, 16, 16).unwrap(),
            edge: Tensor::zeros(&[8, 8]),
            spatial_ref: spatial_reference(16, 16),
            target: Tensor::zeros(&[3, 16, 16]),
            geometry: g,
            seed: 0,
        };
        assert!(matches!(
            assemble_condition_tensor(&sample),
            Err(DataError::Dimension(_))
        ));
    }
}
