//! Heightfield to point cloud conversion with voxel-grid down-sampling.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::field::HeightField;

/// Converts each cell to a 3D point `(x_mm, y_mm, depth)` at the cell
/// centre, then buckets points into voxels of side `voxel_size_mm` and emits
/// one centroid per occupied voxel, ordered lexicographically by voxel index.
pub fn to_point_cloud(field: &HeightField, voxel_size_mm: f64) -> Result<Vec<[f64; 3]>> {
    if !(voxel_size_mm > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "voxel_size must be positive, got {voxel_size_mm}"
        )));
    }
    // BTreeMap key order is the required output order
    let mut buckets: BTreeMap<(i64, i64, i64), ([f64; 3], usize)> = BTreeMap::new();
    let cell = field.cell_size();
    for r in 0..field.height() {
        for c in 0..field.width() {
            let p = [
                (c as f64 + 0.5) * cell,
                (r as f64 + 0.5) * cell,
                field.at(c, r),
            ];
            let key = (
                (p[0] / voxel_size_mm).floor() as i64,
                (p[1] / voxel_size_mm).floor() as i64,
                (p[2] / voxel_size_mm).floor() as i64,
            );
            let e = buckets.entry(key).or_insert(([0.0; 3], 0));
            for k in 0..3 {
                e.0[k] += p[k];
            }
            e.1 += 1;
        }
    }
    Ok(buckets
        .into_values()
        .map(|(sum, n)| {
            let inv = 1.0 / n as f64;
            [sum[0] * inv, sum[1] * inv, sum[2] * inv]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rejects_non_positive_voxel_size() {
        let f = HeightField::flat(4, 4, 1.0, 10.0, 5.0).unwrap();
        assert!(to_point_cloud(&f, 0.0).is_err());
        assert!(to_point_cloud(&f, -1.0).is_err());
    }

    #[test]
    fn tiny_voxels_give_one_point_per_cell() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let depths: Vec<f64> = (0..36).map(|_| rng.gen_range(0.0..9.0)).collect();
        let f = HeightField::new(6, 6, 2.0, 10.0, depths).unwrap();
        let pts = to_point_cloud(&f, 0.5).unwrap();
        assert_eq!(pts.len(), 36);
    }

    #[test]
    fn single_bucket_gives_mean_point() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let depths: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..9.0)).collect();
        let f = HeightField::new(5, 5, 2.0, 10.0, depths.clone()).unwrap();
        let pts = to_point_cloud(&f, 1000.0).unwrap();
        assert_eq!(pts.len(), 1);
        let mean_depth = depths.iter().sum::<f64>() / 25.0;
        assert!((pts[0][0] - 5.0).abs() < 1e-12); // mean of cell centres 1..9
        assert!((pts[0][1] - 5.0).abs() < 1e-12);
        assert!((pts[0][2] - mean_depth).abs() < 1e-12);
    }

    #[test]
    fn bucketing_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        // 16x16 field with flat depths so only x/y bucketing matters:
        // voxels 4 cells wide -> 16 centroids
        let depths: Vec<f64> = (0..256).map(|_| 5.0 + rng.gen_range(0.0..0.5)).collect();
        let f = HeightField::new(16, 16, 1.0, 10.0, depths.clone()).unwrap();
        let voxel = 4.0;
        let pts = to_point_cloud(&f, voxel).unwrap();
        assert_eq!(pts.len(), 16);
        // brute-force bucketing in the same key order
        let mut expect: BTreeMap<(i64, i64, i64), (f64, f64, f64, usize)> = BTreeMap::new();
        for r in 0..16usize {
            for c in 0..16usize {
                let (x, y, z) = (c as f64 + 0.5, r as f64 + 0.5, depths[r * 16 + c]);
                let key = (
                    (x / voxel).floor() as i64,
                    (y / voxel).floor() as i64,
                    (z / voxel).floor() as i64,
                );
                let e = expect.entry(key).or_insert((0.0, 0.0, 0.0, 0));
                e.0 += x;
                e.1 += y;
                e.2 += z;
                e.3 += 1;
            }
        }
        for (got, (_, (sx, sy, sz, n))) in pts.iter().zip(expect.iter()) {
            let n = *n as f64;
            assert!((got[0] - sx / n).abs() < 1e-12);
            assert!((got[1] - sy / n).abs() < 1e-12);
            assert!((got[2] - sz / n).abs() < 1e-12);
        }
    }
}
