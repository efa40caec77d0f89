//! Heightfield state representation and the shared geometric substrate:
//! spatial gradients, canonical-pose warps, point-cloud export and volume
//! accounting.
//!
//! Depth convention: values are distances from the overhead sensor plane in
//! millimetres, so *larger depth = farther from the sensor = less material*.
//! The bare table sits at `d_max`; a slab of material shows up as depths
//! below `d_max`.

mod action;
mod canonical;
mod cloud;
mod io;

pub use action::{Action, ActionBounds, ActionKind, PinchAction, Pose, PushAction};
pub use canonical::{
    anchor_for, from_canonical, from_canonical_into, to_canonical, warp_field_to_patch_coords,
    warp_patch_to_field_coords, CanonicalPatch, PatchGeometry,
};
pub(crate) use canonical::{from_canonical_kernel, to_canonical_kernel};
pub use cloud::to_point_cloud;
pub use io::{read_hfd, read_pgm, write_hfd, write_pgm};

use crate::error::{Error, Result};

/// Tolerance above `d_max` allowed for sensor/oracle noise, in mm.
pub const EPS_TABLE_MM: f64 = 0.5;

/// Dense depth map over the work surface; the state representation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightField {
    width: usize,
    height: usize,
    cell_size: f64,
    d_max: f64,
    depths: Vec<f64>,
}

impl HeightField {
    /// Builds a field and checks the full set of invariants: finite depths in
    /// `[0, d_max + EPS_TABLE_MM]`, positive dimensions.
    ///
    /// Use this at trust boundaries (file loads, user input, oracle scans).
    pub fn new(
        width: usize,
        height: usize,
        cell_size: f64,
        d_max: f64,
        depths: Vec<f64>,
    ) -> Result<Self> {
        let field = Self::from_raw(width, height, cell_size, d_max, depths)?;
        for (i, &d) in field.depths.iter().enumerate() {
            if !(0.0..=field.d_max + EPS_TABLE_MM).contains(&d) {
                return Err(Error::InvalidField(format!(
                    "depth {d} at cell {i} outside [0, {}]",
                    field.d_max + EPS_TABLE_MM
                )));
            }
        }
        Ok(field)
    }

    /// Builds a field checking only shape and finiteness, not the depth range.
    ///
    /// Model predictions are estimates and may stray slightly outside
    /// `[0, d_max]`; they still need a `HeightField` carrier.
    pub fn from_raw(
        width: usize,
        height: usize,
        cell_size: f64,
        d_max: f64,
        depths: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidField("zero-sized grid".into()));
        }
        if !(cell_size > 0.0) || !(d_max > 0.0) {
            return Err(Error::InvalidField(format!(
                "cell_size {cell_size} and d_max {d_max} must be positive"
            )));
        }
        if depths.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} = {} depths", width, height, width * height),
                got: format!("{}", depths.len()),
            });
        }
        if let Some(i) = depths.iter().position(|d| !d.is_finite()) {
            return Err(Error::NonFinite(format!("depth at cell {i}")));
        }
        Ok(Self {
            width,
            height,
            cell_size,
            d_max,
            depths,
        })
    }

    /// A bare-table-at-uniform-depth field.
    pub fn flat(width: usize, height: usize, cell_size: f64, d_max: f64, depth: f64) -> Result<Self> {
        Self::new(width, height, cell_size, d_max, vec![depth; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn depths_mut(&mut self) -> &mut [f64] {
        &mut self.depths
    }

    /// Physical extent (width_mm, height_mm).
    pub fn extent_mm(&self) -> (f64, f64) {
        (
            self.width as f64 * self.cell_size,
            self.height as f64 * self.cell_size,
        )
    }

    #[inline]
    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.depths[row * self.width + col]
    }

    #[inline]
    pub fn at_mut(&mut self, col: usize, row: usize) -> &mut f64 {
        &mut self.depths[row * self.width + col]
    }

    /// Bilinear sample at continuous cell coordinates (cell centres at
    /// integer coordinates). Out-of-bounds coordinates clamp to the border.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        sample_bilinear_clamped(&self.depths, self.width, self.height, x, y)
    }

    /// True if `other` shares grid shape, cell size and `d_max`.
    pub fn same_geometry(&self, other: &HeightField) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.cell_size == other.cell_size
            && self.d_max == other.d_max
    }

    /// Total material volume in mm^3: sum over cells of
    /// `max(0, d_max - depth) * cell_size^2`.
    ///
    /// Never mutates the field and never goes negative; cells scanned at or
    /// below the table plane contribute nothing.
    pub fn material_volume(&self) -> f64 {
        let cell_area = self.cell_size * self.cell_size;
        self.depths
            .iter()
            .map(|&d| (self.d_max - d).max(0.0))
            .sum::<f64>()
            * cell_area
    }

    /// Central-difference spatial gradient, one-sided at borders, scaled by
    /// `1/cell_size` (dimensionless slope, mm per mm).
    pub fn spatial_gradient(&self) -> GradientField {
        let (w, h) = (self.width, self.height);
        let mut dx = vec![0.0; w * h];
        let mut dy = vec![0.0; w * h];
        gradient_into(&self.depths, w, h, self.cell_size, &mut dx, &mut dy);
        GradientField {
            width: w,
            height: h,
            dx,
            dy,
        }
    }
}

/// Two-channel field of depth partials (mm per mm).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    width: usize,
    height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl GradientField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    /// Mean of `dx^2 + dy^2` over all cells; the high-frequency energy
    /// statistic used to compare deformation roughness.
    pub fn mean_squared(&self) -> f64 {
        let n = (self.width * self.height) as f64;
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(a, b)| a * a + b * b)
            .sum::<f64>()
            / n
    }
}

/// Central differences scaled by `1/cell_size`, one-sided at the borders.
/// Shared by `HeightField::spatial_gradient` and the autodiff gradient op.
pub(crate) fn gradient_into(
    values: &[f64],
    width: usize,
    height: usize,
    cell_size: f64,
    dx: &mut [f64],
    dy: &mut [f64],
) {
    let inv = 1.0 / cell_size;
    let inv2 = 0.5 * inv;
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            dx[i] = if width == 1 {
                0.0
            } else if c == 0 {
                (values[i + 1] - values[i]) * inv
            } else if c == width - 1 {
                (values[i] - values[i - 1]) * inv
            } else {
                (values[i + 1] - values[i - 1]) * inv2
            };
            dy[i] = if height == 1 {
                0.0
            } else if r == 0 {
                (values[i + width] - values[i]) * inv
            } else if r == height - 1 {
                (values[i] - values[i - width]) * inv
            } else {
                (values[i + width] - values[i - width]) * inv2
            };
        }
    }
}

/// Bilinear sample with border replication at continuous cell coordinates.
#[inline]
pub(crate) fn sample_bilinear_clamped(
    values: &[f64],
    width: usize,
    height: usize,
    x: f64,
    y: f64,
) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = (x.floor() as usize).min(width - 1);
    let y0 = (y.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v00 = values[y0 * width + x0];
    let v01 = values[y0 * width + x1];
    let v10 = values[y1 * width + x0];
    let v11 = values[y1 * width + x1];
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_field(w: usize, h: usize, cell: f64, d_max: f64, a: f64) -> HeightField {
        // depths = a * column_index * cell_size
        let depths: Vec<f64> = (0..w * h).map(|i| a * (i % w) as f64 * cell).collect();
        HeightField::new(w, h, cell, d_max, depths).unwrap()
    }

    #[test]
    fn rejects_out_of_range_and_non_finite() {
        assert!(HeightField::new(2, 2, 1.0, 10.0, vec![0.0, 1.0, 2.0, 11.0]).is_err());
        assert!(HeightField::new(2, 2, 1.0, 10.0, vec![0.0, f64::NAN, 2.0, 3.0]).is_err());
        assert!(HeightField::new(2, 2, 1.0, 10.0, vec![0.0; 3]).is_err());
        // from_raw admits out-of-range but not non-finite
        assert!(HeightField::from_raw(2, 2, 1.0, 10.0, vec![0.0, 1.0, 2.0, 14.0]).is_ok());
        assert!(HeightField::from_raw(2, 2, 1.0, 10.0, vec![0.0, f64::INFINITY, 2.0, 3.0]).is_err());
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let f = HeightField::flat(9, 7, 2.0, 50.0, 30.0).unwrap();
        let g = f.spatial_gradient();
        assert!(g.dx().iter().all(|&v| v == 0.0));
        assert!(g.dy().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_linear_ramp() {
        let a = 0.75;
        let f = ramp_field(8, 6, 2.0, 100.0, a);
        let g = f.spatial_gradient();
        for r in 0..6 {
            for c in 0..8 {
                let i = r * 8 + c;
                // one-sided borders agree with the interior on an exact ramp
                assert!((g.dx()[i] - a).abs() < 1e-12, "dx at ({c},{r})");
                assert!(g.dy()[i].abs() < 1e-12, "dy at ({c},{r})");
            }
        }
    }

    #[test]
    fn gradient_matches_brute_force_on_random_field() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (w, h, cell) = (8, 8, 1.5);
        let depths: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..40.0)).collect();
        let f = HeightField::new(w, h, cell, 50.0, depths.clone()).unwrap();
        let g = f.spatial_gradient();
        // direct per-cell finite differences
        let at = |c: i64, r: i64| depths[(r.clamp(0, h as i64 - 1) * w as i64 + c.clamp(0, w as i64 - 1)) as usize];
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                let i = (r * w as i64 + c) as usize;
                let ex = if c == 0 {
                    (at(1, r) - at(0, r)) / cell
                } else if c == w as i64 - 1 {
                    (at(c, r) - at(c - 1, r)) / cell
                } else {
                    (at(c + 1, r) - at(c - 1, r)) / (2.0 * cell)
                };
                let ey = if r == 0 {
                    (at(c, 1) - at(c, 0)) / cell
                } else if r == h as i64 - 1 {
                    (at(c, r) - at(c, r - 1)) / cell
                } else {
                    (at(c, r + 1) - at(c, r - 1)) / (2.0 * cell)
                };
                assert!((g.dx()[i] - ex).abs() < 1e-12);
                assert!((g.dy()[i] - ey).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_invariant_to_constant_offset() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let depths: Vec<f64> = (0..64).map(|_| rng.gen_range(5.0..20.0)).collect();
        let f1 = HeightField::new(8, 8, 2.0, 60.0, depths.clone()).unwrap();
        let shifted: Vec<f64> = depths.iter().map(|d| d + 7.5).collect();
        let f2 = HeightField::new(8, 8, 2.0, 60.0, shifted).unwrap();
        let (g1, g2) = (f1.spatial_gradient(), f2.spatial_gradient());
        for i in 0..64 {
            assert!((g1.dx()[i] - g2.dx()[i]).abs() < 1e-12);
            assert!((g1.dy()[i] - g2.dy()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn volume_of_bare_table_is_zero() {
        let f = HeightField::flat(10, 10, 2.0, 40.0, 40.0).unwrap();
        assert_eq!(f.material_volume(), 0.0);
    }

    #[test]
    fn volume_arithmetic() {
        // depths = d_max - 1 on a 10x10 grid with 2mm cells -> 100 * 1 * 4 = 400 mm^3
        let f = HeightField::flat(10, 10, 2.0, 40.0, 39.0).unwrap();
        assert!((f.material_volume() - 400.0).abs() < 1e-9);
    }

    #[test]
    fn volume_matches_direct_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (w, h, cell, d_max) = (13, 9, 1.75, 55.0);
        let depths: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..d_max)).collect();
        let f = HeightField::new(w, h, cell, d_max, depths.clone()).unwrap();
        let mut expect = 0.0;
        for d in &depths {
            expect += (d_max - d).max(0.0) * cell * cell;
        }
        assert!((f.material_volume() - expect).abs() < 1e-9);
    }

    #[test]
    fn volume_unchanged_by_point_cloud_export() {
        let f = ramp_field(16, 16, 2.0, 100.0, 0.5);
        let before = f.material_volume();
        let _ = to_point_cloud(&f, 4.0).unwrap();
        assert_eq!(f.material_volume(), before);
    }
}
