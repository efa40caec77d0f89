//! Grayscale PNG emission for fields, matrices and loss curves.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::field::HeightField;

fn save(img: GrayImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
}

/// Value-mapped raster of an arbitrary grid, each cell an
/// `upscale x upscale` block, min-max normalized (dark = low).
pub fn write_heatmap_png(
    values: &[f64],
    width: usize,
    height: usize,
    upscale: usize,
    path: &Path,
) -> Result<()> {
    if values.len() != width * height || upscale == 0 {
        return Err(Error::InvalidConfig("bad heatmap dimensions".into()));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = GrayImage::new((width * upscale) as u32, (height * upscale) as u32);
    for r in 0..height {
        for c in 0..width {
            let v = ((values[r * width + c] - lo) / span * 255.0).round() as u8;
            for dy in 0..upscale {
                for dx in 0..upscale {
                    img.put_pixel(
                        (c * upscale + dx) as u32,
                        (r * upscale + dy) as u32,
                        Luma([v]),
                    );
                }
            }
        }
    }
    save(img, path)
}

/// Depth map render: `[0, d_max]` maps to `[black, white]`.
pub fn write_field_png(field: &HeightField, path: &Path) -> Result<()> {
    let mut img = GrayImage::new(field.width() as u32, field.height() as u32);
    let scale = 255.0 / field.d_max();
    for r in 0..field.height() {
        for c in 0..field.width() {
            let v = (field.at(c, r) * scale).clamp(0.0, 255.0).round() as u8;
            img.put_pixel(c as u32, r as u32, Luma([v]));
        }
    }
    save(img, path)
}

/// Minimal polyline plot: series in distinct gray levels on white, axes
/// margins included, min-max scaled over all series.
pub fn write_curves_png(series: &[&[(f64, f64)]], path: &Path) -> Result<()> {
    if series.is_empty() || series.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptyInput("curve series".into()));
    }
    let (w, h) = (640u32, 480u32);
    let margin = 40.0;
    let mut img = GrayImage::from_pixel(w, h, Luma([255]));
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in *s {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
    }
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    if y_hi <= y_lo {
        y_hi = y_lo + 1.0;
    }
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (
            margin + (x - x_lo) / (x_hi - x_lo) * (w as f64 - 2.0 * margin),
            (h as f64 - margin) - (y - y_lo) / (y_hi - y_lo) * (h as f64 - 2.0 * margin),
        )
    };
    // axes
    for px in margin as u32..(w - margin as u32) {
        img.put_pixel(px, h - margin as u32, Luma([0]));
    }
    for py in margin as u32..(h - margin as u32) {
        img.put_pixel(margin as u32, py, Luma([0]));
    }
    for (si, s) in series.iter().enumerate() {
        let shade = (40 + 60 * si.min(3)) as u8;
        for pair in s.windows(2) {
            let (x0, y0) = to_px(pair[0].0, pair[0].1);
            let (x1, y1) = to_px(pair[1].0, pair[1].1);
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                let px = (x0 + (x1 - x0) * t).round() as i64;
                let py = (y0 + (y1 - y0) * t).round() as i64;
                if px >= 0 && px < w as i64 && py >= 0 && py < h as i64 {
                    img.put_pixel(px as u32, py as u32, Luma([shade]));
                }
            }
        }
    }
    save(img, path)
}
