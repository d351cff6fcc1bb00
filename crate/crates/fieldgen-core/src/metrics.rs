//! Evaluation metrics: SSIM, MSE/PSNR, edge fidelity, boundary accuracy.
//!
//! All functions are pure and operate on `[h, w]` or `[c, h, w]` images in
//! [0, 1]; multi-channel inputs are reduced per definition (SSIM averages
//! over channels, the edge metrics work on the channel mean).

use crate::tensor::{Result, Tensor, TensorError};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Sobel-magnitude binarization threshold, as a fraction of each image's
/// maximum.
const EDGE_THRESHOLD: f64 = 0.2;
/// Chebyshev dilation radius of the sketch boundary band.
const BAND_RADIUS: usize = 2;

fn planes(t: &Tensor<f32>) -> Result<(usize, usize, Vec<&[f32]>)> {
    match t.shape() {
        [h, w] => Ok((*h, *w, vec![t.data()])),
        [c, h, w] => {
            let plane = h * w;
            Ok((*h, *w, (0..*c).map(|ci| &t.data()[ci * plane..(ci + 1) * plane]).collect()))
        }
        other => Err(TensorError::Dimension(format!(
            "metric input must be [h, w] or [c, h, w], got {other:?}"
        ))),
    }
}

fn check_same(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut sum = 0.0;
    for y in -r..=r {
        for x in -r..=r {
            let v = (-((y * y + x * x) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w.push(v);
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean local structural similarity with an 11x11 Gaussian window
/// (sigma 1.5), valid-region evaluation, luminance range 1. Multi-channel
/// images average the per-channel scores.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, pa) = planes(a)?;
    let (_, _, pb) = planes(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(TensorError::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let mut channel_scores = Vec::with_capacity(pa.len());
    for (ca, cb) in pa.iter().zip(pb.iter()) {
        let mut acc = 0.0;
        let mut count = 0usize;
        for cy in r..h - r {
            for cx in r..w - r {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                let mut k = 0;
                for wy in 0..SSIM_WINDOW {
                    let y = cy + wy - r;
                    for wx in 0..SSIM_WINDOW {
                        let x = cx + wx - r;
                        let g = win[k];
                        k += 1;
                        let va = ca[y * w + x] as f64;
                        let vb = cb[y * w + x] as f64;
                        ma += g * va;
                        mb += g * vb;
                        saa += g * va * va;
                        sbb += g * vb * vb;
                        sab += g * va * vb;
                    }
                }
                let var_a = saa - ma * ma;
                let var_b = sbb - mb * mb;
                let cov = sab - ma * mb;
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
                acc += num / den;
                count += 1;
            }
        }
        channel_scores.push(acc / count as f64);
    }
    Ok(channel_scores.iter().sum::<f64>() / channel_scores.len() as f64)
}

/// Mean squared error and peak signal-to-noise ratio over unit range; PSNR
/// caps at 100 dB when the MSE drops below 1e-10.
pub fn mse_psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(f64, f64)> {
    check_same(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    let psnr = if mse < 1e-10 { 100.0 } else { 10.0 * (1.0 / mse).log10() };
    Ok((mse, psnr))
}

/// Channel-mean luma plane of an image.
fn luma(t: &Tensor<f32>) -> Result<Vec<f64>> {
    let (h, w, ps) = planes(t)?;
    let mut out = vec![0.0f64; h * w];
    for p in &ps {
        for (o, &v) in out.iter_mut().zip(p.iter()) {
            *o += v as f64;
        }
    }
    let inv = 1.0 / ps.len() as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(out)
}

/// Interior Sobel gradient magnitudes (borders zero).
fn sobel_mag(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut mag = vec![0.0f64; h * w];
    if h < 3 || w < 3 {
        return mag;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = |dy: usize, dx: usize| img[(y + dy - 1) * w + (x + dx - 1)];
            let gx = (p(0, 2) + 2.0 * p(1, 2) + p(2, 2)) - (p(0, 0) + 2.0 * p(1, 0) + p(2, 0));
            let gy = (p(2, 0) + 2.0 * p(2, 1) + p(2, 2)) - (p(0, 0) + 2.0 * p(0, 1) + p(0, 2));
            mag[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    mag
}

fn edge_set(t: &Tensor<f32>) -> Result<(usize, usize, Vec<bool>)> {
    let (h, w, _) = planes(t)?;
    let l = luma(t)?;
    let mag = sobel_mag(&l, h, w);
    let max = mag.iter().cloned().fold(0.0f64, f64::max);
    let thr = EDGE_THRESHOLD * max;
    let set = if max == 0.0 {
        vec![false; h * w]
    } else {
        mag.iter().map(|&m| m >= thr).collect()
    };
    Ok((h, w, set))
}

fn iou(a: &[bool], b: &[bool], restrict: Option<&[bool]>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for i in 0..a.len() {
        if let Some(band) = restrict {
            if !band[i] {
                continue;
            }
        }
        match (a[i], b[i]) {
            (true, true) => {
                inter += 1;
                union += 1;
            }
            (true, false) | (false, true) => union += 1,
            _ => {}
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Intersection-over-union of the Sobel edge sets of two images, binarized
/// at 0.2 x each image's maximum gradient; 1.0 when both sets are empty.
pub fn edge_fidelity(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_same(a, b)?;
    let (_, _, ea) = edge_set(a)?;
    let (_, _, eb) = edge_set(b)?;
    Ok(iou(&ea, &eb, None))
}

/// Edge-set IoU between generated and ground-truth images, restricted to a
/// band obtained by dilating the sketch boundary by 2 pixels (Chebyshev).
/// An empty sketch has no band and is an error.
pub fn boundary_accuracy(
    generated: &Tensor<f32>,
    target: &Tensor<f32>,
    sketch: &Tensor<f32>,
) -> Result<f64> {
    check_same(generated, target)?;
    let (h, w, sp) = planes(sketch)?;
    if sp.len() != 1 {
        return Err(TensorError::Dimension("sketch must be single-channel".into()));
    }
    let s = sp[0];
    // Boundary pixels: sketch cells with a zero 4-neighbor (or on the image
    // border).
    let mut boundary = vec![false; h * w];
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if s[y * w + x] == 0.0 {
                continue;
            }
            let at_border = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let has_zero_neighbor = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|(dy, dx)| {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                ny >= 0
                    && nx >= 0
                    && (ny as usize) < h
                    && (nx as usize) < w
                    && s[ny as usize * w + nx as usize] == 0.0
            });
            if at_border || has_zero_neighbor {
                boundary[y * w + x] = true;
                any = true;
            }
        }
    }
    if !any {
        return Err(TensorError::Parameter(
            "boundary accuracy undefined for an empty sketch".into(),
        ));
    }
    let mut band = vec![false; h * w];
    let r = BAND_RADIUS as isize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !boundary[y as usize * w + x as usize] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        band[ny as usize * w + nx as usize] = true;
                    }
                }
            }
        }
    }
    let (_, _, eg) = edge_set(generated)?;
    let (_, _, et) = edge_set(target)?;
    Ok(iou(&eg, &et, Some(&band)))
}

/// Per-sample metric row.
#[derive(Clone, Copy, Debug)]
pub struct SampleMetrics {
    pub ssim: f64,
    pub mse: f64,
    pub psnr_db: f64,
    pub edge_fidelity: f64,
    pub boundary_accuracy: f64,
}

/// Aggregate over an evaluation run: per-sample rows plus mean/std per
/// metric.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub rows: Vec<SampleMetrics>,
}

const METRIC_NAMES: [&str; 5] = ["ssim", "mse", "psnr_db", "edge_fidelity", "boundary_accuracy"];

impl MetricReport {
    pub fn push(&mut self, row: SampleMetrics) {
        self.rows.push(row);
    }

    fn column(&self, idx: usize) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| match idx {
                0 => r.ssim,
                1 => r.mse,
                2 => r.psnr_db,
                3 => r.edge_fidelity,
                _ => r.boundary_accuracy,
            })
            .collect()
    }

    /// (name, mean, std, n) per metric; std is the population deviation.
    pub fn aggregates(&self) -> Vec<(&'static str, f64, f64, usize)> {
        METRIC_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let col = self.column(i);
                let n = col.len();
                let mean = if n == 0 { 0.0 } else { col.iter().sum::<f64>() / n as f64 };
                let var = if n == 0 {
                    0.0
                } else {
                    col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
                };
                (*name, mean, var.sqrt(), n)
            })
            .collect()
    }

    pub fn mean_ssim(&self) -> f64 {
        self.aggregates()[0].1
    }

    pub fn mean_mse(&self) -> f64 {
        self.aggregates()[1].1
    }

    /// Per-sample CSV: `sample,ssim,mse,psnr_db,edge_fidelity,boundary_accuracy`.
    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("sample,ssim,mse,psnr_db,edge_fidelity,boundary_accuracy\n");
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{},{}\n",
                r.ssim, r.mse, r.psnr_db, r.edge_fidelity, r.boundary_accuracy
            ));
        }
        out
    }

    /// Aggregate CSV: `metric,mean,std,n`.
    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("metric,mean,std,n\n");
        for (name, mean, std, n) in self.aggregates() {
            out.push_str(&format!("{name},{mean},{std},{n}\n"));
        }
        out
    }
}
