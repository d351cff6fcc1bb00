//! Patch-grid geometry: pairwise distances/directions, distance buckets, and
//! the multi-scale neighborhood masks.

use crate::tensor::{Scalar, Tensor};

pub const DIRECTION_EPS: f64 = 1e-8;

/// Additive logit value that effectively removes a pair from attention.
pub const MASKED_LOGIT: f64 = -1e9;

/// Precomputed pairwise geometry of a g x g patch grid. Token i sits at grid
/// cell (i / g, i % g), row-major.
#[derive(Clone, Debug)]
pub struct PatchGeometry {
    pub grid: usize,
    /// Euclidean distances, row-major `[g^2 * g^2]`.
    pub dist: Vec<f64>,
    /// Unit directions (p_i - p_j) / (d_ij + eps), interleaved (dy, dx).
    pub dir: Vec<f64>,
    /// floor(d_ij) per pair, for the relative-position embedding table.
    pub buckets: Vec<usize>,
    /// Table size: ceil(max distance) + 1.
    pub n_buckets: usize,
}

pub fn pairwise_geometry(grid: usize) -> PatchGeometry {
    assert!(grid >= 2, "pairwise_geometry needs g >= 2");
    let n = grid * grid;
    let mut dist = vec![0.0f64; n * n];
    let mut dir = vec![0.0f64; n * n * 2];
    let mut buckets = vec![0usize; n * n];
    for i in 0..n {
        let (iy, ix) = ((i / grid) as f64, (i % grid) as f64);
        for j in 0..n {
            let (jy, jx) = ((j / grid) as f64, (j % grid) as f64);
            let dy = iy - jy;
            let dx = ix - jx;
            let d = (dy * dy + dx * dx).sqrt();
            let p = i * n + j;
            dist[p] = d;
            dir[2 * p] = dy / (d + DIRECTION_EPS);
            dir[2 * p + 1] = dx / (d + DIRECTION_EPS);
            buckets[p] = d.floor() as usize;
        }
    }
    let max_d = (grid - 1) as f64 * std::f64::consts::SQRT_2;
    PatchGeometry { grid, dist, dir, buckets, n_buckets: max_d.ceil() as usize + 1 }
}

/// Per-scale boolean adjacency under the Chebyshev metric:
/// mask_k[i][j] <=> Linf(p_i, p_j) <= k.
#[derive(Clone, Debug)]
pub struct NeighborhoodMasks {
    pub grid: usize,
    pub scales: Vec<usize>,
    masks: Vec<Vec<bool>>,
}

pub fn neighborhood_masks(grid: usize, scales: &[usize]) -> NeighborhoodMasks {
    assert!(!scales.is_empty() && scales.iter().all(|&k| k > 0));
    let n = grid * grid;
    let masks = scales
        .iter()
        .map(|&k| {
            let mut m = vec![false; n * n];
            for i in 0..n {
                let (iy, ix) = ((i / grid) as isize, (i % grid) as isize);
                for j in 0..n {
                    let (jy, jx) = ((j / grid) as isize, (j % grid) as isize);
                    let cheb = (iy - jy).abs().max((ix - jx).abs());
                    m[i * n + j] = cheb <= k as isize;
                }
            }
            m
        })
        .collect();
    NeighborhoodMasks { grid, scales: scales.to_vec(), masks }
}

impl NeighborhoodMasks {
    pub fn contains(&self, scale_idx: usize, i: usize, j: usize) -> bool {
        let n = self.grid * self.grid;
        self.masks[scale_idx][i * n + j]
    }

    pub fn neighborhood_size(&self, scale_idx: usize, i: usize) -> usize {
        let n = self.grid * self.grid;
        self.masks[scale_idx][i * n..(i + 1) * n]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// Additive pre-softmax mask: 0 where attention is allowed, a large
    /// negative surrogate where it is not.
    pub fn additive<S: Scalar>(&self, scale_idx: usize) -> Tensor<S> {
        let n = self.grid * self.grid;
        let data = self.masks[scale_idx]
            .iter()
            .map(|&b| if b { S::ZERO } else { S::from_f64(MASKED_LOGIT) })
            .collect();
        Tensor::from_vec(&[n, n], data).expect("mask shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_geometry_is_degenerate() {
        let geo = pairwise_geometry(8);
        let n = 64;
        for i in 0..n {
            let p = i * n + i;
            assert_eq!(geo.dist[p], 0.0);
            assert_eq!(geo.dir[2 * p], 0.0);
            assert_eq!(geo.dir[2 * p + 1], 0.0);
            assert_eq!(geo.buckets[p], 0);
        }
    }

    #[test]
    fn three_four_five_triangle() {
        let g = 8;
        let geo = pairwise_geometry(g);
        // i at cell (0,0), j at cell (3,4).
        let i = 0;
        let j = 3 * g + 4;
        let p = i * g * g + j;
        assert!((geo.dist[p] - 5.0).abs() < 1e-12);
        assert!((geo.dir[2 * p] - (-0.6)).abs() < 1e-8);
        assert!((geo.dir[2 * p + 1] - (-0.8)).abs() < 1e-8);
    }

    #[test]
    fn max_distance_and_bucket_count_for_g8() {
        let geo = pairwise_geometry(8);
        let max = geo.dist.iter().cloned().fold(0.0f64, f64::max);
        assert!((max - 7.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!((max - 9.899).abs() < 1e-3);
        assert_eq!(geo.n_buckets, 11);
        assert!(geo.buckets.iter().all(|&b| b < 11));
    }

    #[test]
    fn neighborhood_sizes_match_brute_force() {
        let g = 8;
        let masks = neighborhood_masks(g, &[1, 2, 4]);
        // Brute-force oracle over all cells and scales.
        for (si, &k) in [1usize, 2, 4].iter().enumerate() {
            for i in 0..g * g {
                let (iy, ix) = ((i / g) as isize, (i % g) as isize);
                let mut want = 0;
                for j in 0..g * g {
                    let (jy, jx) = ((j / g) as isize, (j % g) as isize);
                    let inside = (iy - jy).abs().max((ix - jx).abs()) <= k as isize;
                    assert_eq!(masks.contains(si, i, j), inside);
                    if inside {
                        want += 1;
                    }
                }
                assert_eq!(masks.neighborhood_size(si, i), want);
            }
        }
        // Pinned counts: corner k=1 -> 4, center k=1 -> 9.
        assert_eq!(masks.neighborhood_size(0, 0), 4);
        assert_eq!(masks.neighborhood_size(0, 3 * g + 3), 9);
        // k=4 sizes range [25, 64]; cell (3,3) sees everything.
        for i in 0..g * g {
            let s = masks.neighborhood_size(2, i);
            assert!((25..=64).contains(&s), "cell {i}: {s}");
        }
        assert_eq!(masks.neighborhood_size(2, 3 * g + 3), 64);
    }

    #[test]
    fn masks_are_nested_and_reflexive_for_all_small_grids() {
        // Exhaustive enumeration for every grid side up to 8.
        for g in 2..=8usize {
            let masks = neighborhood_masks(g, &[1, 2, 4]);
            for i in 0..g * g {
                assert!(masks.contains(0, i, i), "g = {g}: self missing at {i}");
                for j in 0..g * g {
                    if masks.contains(0, i, j) {
                        assert!(masks.contains(1, i, j), "g = {g}: N1 not in N2");
                    }
                    if masks.contains(1, i, j) {
                        assert!(masks.contains(2, i, j), "g = {g}: N2 not in N4");
                    }
                }
            }
        }
    }

    #[test]
    fn additive_mask_values() {
        let masks = neighborhood_masks(4, &[1]);
        let add = masks.additive::<f32>(0);
        assert_eq!(add.shape(), &[16, 16]);
        for i in 0..16 {
            for j in 0..16 {
                let v = add.data()[i * 16 + j];
                if masks.contains(0, i, j) {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, -1e9);
                }
            }
        }
    }
}
