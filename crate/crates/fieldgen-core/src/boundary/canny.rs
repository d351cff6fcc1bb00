//! Canny edge detection: Gaussian blur, Sobel gradients, non-maximum
//! suppression, hysteresis linking.

use crate::tensor::Tensor;

/// Canny edge map of a `[h, w]` image. `lo` and `hi` are hysteresis
/// thresholds as fractions of the maximum gradient magnitude; output pixels
/// are exactly 0.0 or 1.0.
pub fn canny_edges(image: &Tensor<f32>, sigma: f64, lo: f64, hi: f64) -> Tensor<f32> {
    assert_eq!(image.shape().len(), 2, "canny_edges expects [h, w]");
    assert!(lo < hi, "lo threshold must be below hi");
    let h = image.shape()[0];
    let w = image.shape()[1];

    let blurred = gaussian_blur(image.data(), h, w, sigma);
    let (gx, gy) = sobel(&blurred, h, w);
    let mag: Vec<f64> = gx
        .iter()
        .zip(gy.iter())
        .map(|(&x, &y)| (x * x + y * y).sqrt())
        .collect();
    let max_mag = mag.iter().cloned().fold(0.0f64, f64::max);
    if max_mag == 0.0 {
        return Tensor::zeros(&[h, w]);
    }

    let thinned = non_maximum_suppression(&mag, &gx, &gy, h, w);
    let edges = hysteresis(&thinned, h, w, lo * max_mag, hi * max_mag);
    Tensor::from_vec(&[h, w], edges).expect("canny shape")
}

fn gaussian_blur(img: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for k in kernel.iter_mut() {
        *k /= sum;
    }

    // Separable passes with clamp-to-edge borders.
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + ki as isize - radius, w);
                acc += kv * img[y * w + sx] as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + ki as isize - radius, h);
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn sobel(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0f64; h * w];
    let mut gy = vec![0.0f64; h * w];
    if h < 3 || w < 3 {
        return (gx, gy);
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = |dy: usize, dx: usize| img[(y + dy - 1) * w + (x + dx - 1)];
            gx[y * w + x] = (p(0, 2) + 2.0 * p(1, 2) + p(2, 2)) - (p(0, 0) + 2.0 * p(1, 0) + p(2, 0));
            gy[y * w + x] = (p(2, 0) + 2.0 * p(2, 1) + p(2, 2)) - (p(0, 0) + 2.0 * p(0, 1) + p(0, 2));
        }
    }
    (gx, gy)
}

/// Keep gradient-direction local maxima. Ties along the direction keep the
/// forward pixel only (>= backward, > forward), so a symmetric two-pixel
/// ridge thins to a single line.
fn non_maximum_suppression(mag: &[f64], gx: &[f64], gy: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; h * w];
    if h < 3 || w < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            if mag[i] == 0.0 {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // Quantize to one of 4 directions; (back, fwd) offsets.
            let (bdy, bdx) = if !(22.5..157.5).contains(&angle) {
                (0isize, 1isize) // horizontal gradient
            } else if angle < 67.5 {
                (1, 1) // diagonal
            } else if angle < 112.5 {
                (1, 0) // vertical gradient
            } else {
                (1, -1) // anti-diagonal
            };
            let fwd = mag[((y as isize + bdy) as usize) * w + (x as isize + bdx) as usize];
            let back = mag[((y as isize - bdy) as usize) * w + (x as isize - bdx) as usize];
            if mag[i] >= back && mag[i] > fwd {
                out[i] = mag[i];
            }
        }
    }
    out
}

/// Breadth-first linking: strong pixels seed edges, weak pixels join when
/// 8-connected to an accepted pixel.
fn hysteresis(thinned: &[f64], h: usize, w: usize, lo: f64, hi: f64) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    let mut stack = Vec::new();
    for i in 0..h * w {
        if thinned[i] >= hi && out[i] == 0.0 {
            out[i] = 1.0;
            stack.push(i);
            while let Some(j) = stack.pop() {
                let (y, x) = (j / w, j % w);
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let n = ny as usize * w + nx as usize;
                        if out[n] == 0.0 && thinned[n] >= lo {
                            out[n] = 1.0;
                            stack.push(n);
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::{rasterize_sketch, SourceGeometrySpec};

    const SIGMA: f64 = 1.0;
    const LO: f64 = 0.1;
    const HI: f64 = 0.3;

    #[test]
    fn constant_image_has_no_edges() {
        let img = Tensor::full(&[32, 32], 0.6f32);
        let e = canny_edges(&img, SIGMA, LO, HI);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_gives_one_pixel_line() {
        // Left half 0, right half 1; expect a single vertical line.
        let (h, w) = (24, 24);
        let mut data = vec![0.0f32; h * w];
        for y in 0..h {
            for x in w / 2..w {
                data[y * w + x] = 1.0;
            }
        }
        let img = Tensor::from_vec(&[h, w], data).unwrap();
        let e = canny_edges(&img, SIGMA, LO, HI);
        // Interior rows must contain exactly one edge pixel each, all in the
        // same column.
        let mut col = None;
        for y in 2..h - 2 {
            let cols: Vec<usize> = (0..w).filter(|&x| e.data()[y * w + x] == 1.0).collect();
            assert_eq!(cols.len(), 1, "row {y}: {cols:?}");
            match col {
                None => col = Some(cols[0]),
                Some(c) => assert_eq!(c, cols[0]),
            }
        }
    }

    #[test]
    fn rectangle_boundary_is_a_thin_closed_loop() {
        let spec = SourceGeometrySpec {
            x: 11,
            y: 9,
            width: 10,
            height: 10,
            amplitude: 1.0,
            wavelength: 20.0,
        };
        let sketch = rasterize_sketch(&spec, 32, 32).unwrap();
        let e = canny_edges(&sketch, SIGMA, LO, HI);
        let count = e.data().iter().filter(|&&v| v == 1.0).count();
        // Perimeter of a 10x10 block traced one pixel wide is 36; allow +-4
        // for corner handling.
        assert!(
            (32..=40).contains(&count),
            "edge pixel count {count} not within 36 +- 4"
        );
        // Closed loop: every edge pixel has at least two 8-connected edge
        // neighbors.
        for y in 0..32 {
            for x in 0..32 {
                if e.data()[y * 32 + x] != 1.0 {
                    continue;
                }
                let mut neighbors = 0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny < 0 || nx < 0 || ny >= 32 || nx >= 32 {
                            continue;
                        }
                        if e.data()[ny as usize * 32 + nx as usize] == 1.0 {
                            neighbors += 1;
                        }
                    }
                }
                assert!(neighbors >= 2, "open loop at ({y}, {x})");
            }
        }
    }

    #[test]
    fn output_is_binary() {
        let spec = SourceGeometrySpec {
            x: 4,
            y: 6,
            width: 7,
            height: 3,
            amplitude: 1.0,
            wavelength: 20.0,
        };
        let sketch = rasterize_sketch(&spec, 24, 24).unwrap();
        let e = canny_edges(&sketch, SIGMA, LO, HI);
        assert!(e.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(e.data().contains(&1.0));
    }

    #[test]
    fn reapplication_fixed_point_only_for_all_zero() {
        // All-zero input is a fixed point of the pipeline.
        let zero = Tensor::zeros(&[24, 24]);
        let e = canny_edges(&zero, SIGMA, LO, HI);
        assert!(e.data().iter().all(|&v| v == 0.0));
        // A rectangle's edge map is not: re-applying changes the pixel set.
        let spec = SourceGeometrySpec {
            x: 6,
            y: 6,
            width: 10,
            height: 10,
            amplitude: 1.0,
            wavelength: 20.0,
        };
        let sketch = rasterize_sketch(&spec, 24, 24).unwrap();
        let once = canny_edges(&sketch, SIGMA, LO, HI);
        let twice = canny_edges(&once, SIGMA, LO, HI);
        assert_ne!(once.data(), twice.data());
    }
}
