//! The two dynamics/planning objectives.
//!
//! `loss_3d` compares depths in normalized units (depth / d_max) so values
//! are comparable across field scales; `loss_viz` compares the physical
//! spatial-gradient channels (mm per mm), which a constant depth offset
//! cannot change.

use crate::error::{Error, Result};
use crate::field::HeightField;

fn check_pair(pred: &HeightField, truth: &HeightField) -> Result<()> {
    if !pred.same_geometry(truth) {
        return Err(Error::ShapeMismatch {
            expected: format!(
                "{}x{} cell {} d_max {}",
                truth.width(),
                truth.height(),
                truth.cell_size(),
                truth.d_max()
            ),
            got: format!(
                "{}x{} cell {} d_max {}",
                pred.width(),
                pred.height(),
                pred.cell_size(),
                pred.d_max()
            ),
        });
    }
    Ok(())
}

/// Mean squared depth error in normalized units.
pub fn loss_3d(pred: &HeightField, truth: &HeightField) -> Result<f64> {
    check_pair(pred, truth)?;
    let inv = 1.0 / truth.d_max();
    let n = pred.depths().len() as f64;
    let sum: f64 = pred
        .depths()
        .iter()
        .zip(truth.depths())
        .map(|(a, b)| {
            let d = (a - b) * inv;
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Mean squared spatial-gradient error over both channels.
pub fn loss_viz(pred: &HeightField, truth: &HeightField) -> Result<f64> {
    check_pair(pred, truth)?;
    let gp = pred.spatial_gradient();
    let gt = truth.spatial_gradient();
    let n = (2 * pred.depths().len()) as f64;
    let sum: f64 = gp
        .dx()
        .iter()
        .zip(gt.dx())
        .chain(gp.dy().iter().zip(gt.dy()))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rnd_field(seed: u64) -> HeightField {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let depths: Vec<f64> = (0..100).map(|_| rng.gen_range(10.0..70.0)).collect();
        HeightField::new(10, 10, 2.0, 80.0, depths).unwrap()
    }

    #[test]
    fn identical_fields_have_zero_loss() {
        let f = rnd_field(1);
        assert_eq!(loss_3d(&f, &f).unwrap(), 0.0);
        assert_eq!(loss_viz(&f, &f).unwrap(), 0.0);
    }

    #[test]
    fn uniform_offset_arithmetic() {
        // 0.1 normalized units offset -> loss_3d = 0.01
        let truth = HeightField::flat(8, 8, 2.0, 50.0, 20.0).unwrap();
        let pred = HeightField::flat(8, 8, 2.0, 50.0, 25.0).unwrap();
        let l = loss_3d(&pred, &truth).unwrap();
        assert!((l - 0.01).abs() < 1e-12);
        // gradients kill constants
        assert_eq!(loss_viz(&pred, &truth).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_invariance_of_viz_only() {
        let truth = rnd_field(2);
        let shifted: Vec<f64> = truth.depths().iter().map(|d| d + 3.0).collect();
        let pred = HeightField::new(10, 10, 2.0, 80.0, shifted).unwrap();
        assert!(loss_viz(&pred, &truth).unwrap() < 1e-24);
        assert!(loss_3d(&pred, &truth).unwrap() > 0.0);
    }

    #[test]
    fn losses_match_direct_oracles() {
        let a = rnd_field(3);
        let b = rnd_field(4);
        // direct loops
        let inv = 1.0 / 80.0;
        let mut sum3d = 0.0;
        for (x, y) in a.depths().iter().zip(b.depths()) {
            sum3d += ((x - y) * inv).powi(2);
        }
        assert!((loss_3d(&a, &b).unwrap() - sum3d / 100.0).abs() < 1e-12 * sum3d.max(1.0));
        let (ga, gb) = (a.spatial_gradient(), b.spatial_gradient());
        let mut sumviz = 0.0;
        for i in 0..100 {
            sumviz += (ga.dx()[i] - gb.dx()[i]).powi(2) + (ga.dy()[i] - gb.dy()[i]).powi(2);
        }
        assert!((loss_viz(&a, &b).unwrap() - sumviz / 200.0).abs() < 1e-12 * sumviz.max(1.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = rnd_field(5);
        let b = HeightField::flat(9, 9, 2.0, 80.0, 40.0).unwrap();
        assert!(loss_3d(&a, &b).is_err());
        assert!(loss_viz(&a, &b).is_err());
    }
}
