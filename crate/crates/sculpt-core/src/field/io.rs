//! HFD binary heightfield format and 16-bit PGM import/export.
//!
//! HFD layout (little-endian): magic `HFD1`, u32 width, u32 height,
//! f32 cell_size_mm, f32 d_max_mm, then `width*height` f32 depths row-major.
//!
//! PGM uses the 16-bit binary (`P5`, maxval 65535, big-endian samples)
//! variant with the linear mapping `[0, 65535] <-> [0, d_max]`, so external
//! tools can author goals.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::HeightField;

const HFD_MAGIC: &[u8; 4] = b"HFD1";

/// Writes a field (or a delta grid carried in a `HeightField`) as HFD.
pub fn write_hfd(field: &HeightField, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + field.depths().len() * 4);
    buf.extend_from_slice(HFD_MAGIC);
    buf.extend_from_slice(&(field.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(field.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(field.cell_size() as f32).to_le_bytes());
    buf.extend_from_slice(&(field.d_max() as f32).to_le_bytes());
    for &d in field.depths() {
        buf.extend_from_slice(&(d as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads an HFD file. `validate` enforces the depth-range invariant; pass
/// `false` for delta grids, which may be negative.
pub fn read_hfd(path: &Path, validate: bool) -> Result<HeightField> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    if buf.len() < 20 {
        return Err(Error::format(p, "truncated header"));
    }
    if &buf[0..4] != HFD_MAGIC {
        return Err(Error::format(p, "bad magic"));
    }
    let width = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let cell_size = f32::from_le_bytes(buf[12..16].try_into().unwrap()) as f64;
    let d_max = f32::from_le_bytes(buf[16..20].try_into().unwrap()) as f64;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(&p, "dimension overflow"))?;
    if buf.len() != 20 + n * 4 {
        return Err(Error::format(
            p,
            format!("expected {} payload bytes, got {}", n * 4, buf.len() - 20),
        ));
    }
    let depths: Vec<f64> = buf[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if validate {
        HeightField::new(width, height, cell_size, d_max, depths)
    } else {
        HeightField::from_raw(width, height, cell_size, d_max, depths)
    }
}

/// Writes a field as 16-bit binary PGM, depths mapped linearly onto
/// `[0, 65535]` over `[0, d_max]`.
pub fn write_pgm(field: &HeightField, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write!(
        &mut buf,
        "P5\n{} {}\n65535\n",
        field.width(),
        field.height()
    )
    .expect("in-memory write");
    let scale = 65535.0 / field.d_max();
    for &d in field.depths() {
        let v = (d * scale).round().clamp(0.0, 65535.0) as u16;
        buf.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a 16-bit binary PGM, mapping `[0, maxval]` linearly onto
/// `[0, d_max_mm]`. Grid metadata is not stored in PGM, so the caller
/// supplies the physical calibration.
pub fn read_pgm(path: &Path, cell_size_mm: f64, d_max_mm: f64) -> Result<HeightField> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    let mut pos = 0usize;

    let mut token = |buf: &[u8]| -> Result<String> {
        // skip whitespace and '#' comment lines
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(&p, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };

    if token(&buf)? != "P5" {
        return Err(Error::format(&p, "not a binary PGM (P5)"));
    }
    let width: usize = token(&buf)?
        .parse()
        .map_err(|_| Error::format(&p, "bad width"))?;
    let height: usize = token(&buf)?
        .parse()
        .map_err(|_| Error::format(&p, "bad height"))?;
    let maxval: u32 = token(&buf)?
        .parse()
        .map_err(|_| Error::format(&p, "bad maxval"))?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(&p, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace byte after maxval
    let n = width * height;
    let wide = maxval > 255;
    let expected = n * if wide { 2 } else { 1 };
    if buf.len() < pos + expected {
        return Err(Error::format(&p, "truncated pixel data"));
    }
    let scale = d_max_mm / maxval as f64;
    let depths: Vec<f64> = if wide {
        buf[pos..pos + expected]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes(c.try_into().unwrap()) as f64 * scale)
            .collect()
    } else {
        buf[pos..pos + expected]
            .iter()
            .map(|&b| b as f64 * scale)
            .collect()
    };
    HeightField::new(width, height, cell_size_mm, d_max_mm, depths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn f32_exact_field(seed: u64) -> HeightField {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let depths: Vec<f64> = (0..12 * 9)
            .map(|_| rng.gen_range(0.0f32..50.0) as f64)
            .collect();
        HeightField::new(12, 9, 2.5, 50.0, depths).unwrap()
    }

    #[test]
    fn hfd_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.hfd");
        let f = f32_exact_field(1);
        write_hfd(&f, &path).unwrap();
        let g = read_hfd(&path, true).unwrap();
        assert_eq!(f.width(), g.width());
        assert_eq!(f.depths(), g.depths());
        // file -> memory -> file is byte-identical
        let bytes1 = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("g.hfd");
        write_hfd(&g, &path2).unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn hfd_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hfd");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(read_hfd(&path, true).is_err());
        std::fs::write(&path, b"HFD1\x02\x00\x00\x00\x02\x00\x00\x00").unwrap();
        assert!(read_hfd(&path, true).is_err());
    }

    #[test]
    fn pgm_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        let f = f32_exact_field(2);
        write_pgm(&f, &path).unwrap();
        let g = read_pgm(&path, f.cell_size(), f.d_max()).unwrap();
        let q = f.d_max() / 65535.0;
        for (a, b) in f.depths().iter().zip(g.depths()) {
            assert!((a - b).abs() <= 0.5 * q + 1e-12);
        }
    }

    #[test]
    fn delta_grids_round_trip_unvalidated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.hfd");
        let delta =
            HeightField::from_raw(4, 4, 2.0, 50.0, vec![-1.5f32 as f64; 16]).unwrap();
        write_hfd(&delta, &path).unwrap();
        assert!(read_hfd(&path, true).is_err());
        let back = read_hfd(&path, false).unwrap();
        assert_eq!(back.depths(), delta.depths());
    }
}
