//! Depth maps to per-pixel surface normals.
//!
//! Depth is treated as a height field. At each pixel whose 4-neighborhood is
//! valid, central differences give `gx`, `gy` and the normal is
//! `normalize(-gx, -gy, 1)`. Everything else is marked invalid with a zero
//! normal.

use std::fs;
use std::path::Path;

use crate::error::{CimdlError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Row-major samples.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a map where every positive finite sample is valid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(CimdlError::shape(format!(
                "depth map {width}x{height} needs {} samples, got {}",
                width * height,
                values.len()
            )));
        }
        let valid = values.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        Ok(DepthMap {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let values = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::from_values(width, height, values)
    }

    fn at(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.values[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    /// Row-major unit normals; `[0, 0, 0]` where invalid.
    pub normals: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl NormalMap {
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.normals[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }
}

pub fn depth_to_surface_normals(d: &DepthMap) -> Result<NormalMap> {
    if d.width < 3 || d.height < 3 {
        return Err(CimdlError::shape(format!(
            "depth map must be at least 3x3, got {}x{}",
            d.width, d.height
        )));
    }
    if d.values.len() != d.width * d.height || d.valid.len() != d.values.len() {
        return Err(CimdlError::shape("depth map buffers do not match its size"));
    }
    let (w, h) = (d.width, d.height);
    let mut normals = vec![[0.0; 3]; w * h];
    let mut valid = vec![false; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let samples = (
                d.at(x, y),
                d.at(x - 1, y),
                d.at(x + 1, y),
                d.at(x, y - 1),
                d.at(x, y + 1),
            );
            let (Some(_), Some(left), Some(right), Some(up), Some(down)) = samples else {
                continue;
            };
            let gx = (right - left) / 2.0;
            let gy = (down - up) / 2.0;
            let norm = (gx * gx + gy * gy + 1.0).sqrt();
            normals[y * w + x] = [-gx / norm, -gy / norm, 1.0 / norm];
            valid[y * w + x] = true;
        }
    }
    Ok(NormalMap {
        width: w,
        height: h,
        normals,
        valid,
    })
}

/// Channel value `round((n + 1) / 2 * 255)`.
pub fn normal_to_rgb(n: [f64; 3]) -> [u8; 3] {
    n.map(|v| ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8)
}

fn pgm_err(path: &Path, offset: usize, message: impl Into<String>) -> CimdlError {
    CimdlError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parses the next whitespace-separated header token, skipping `#` comments.
fn header_token(buf: &[u8], pos: &mut usize, path: &Path) -> Result<(usize, String)> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(pgm_err(path, start, "truncated PGM header"));
    }
    Ok((
        start,
        String::from_utf8_lossy(&buf[start..*pos]).into_owned(),
    ))
}

/// Reads a 16-bit binary PGM (`P5`, maxval 65535). Zero samples are invalid.
pub fn read_pgm16(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| CimdlError::io(path, e))?;
    let mut pos = 0;
    let (_, magic) = header_token(&buf, &mut pos, path)?;
    if magic != "P5" {
        return Err(pgm_err(
            path,
            0,
            format!("bad magic {magic:?}, expected \"P5\""),
        ));
    }
    let mut number = |what: &str| -> Result<usize> {
        let (at, tok) = header_token(&buf, &mut pos, path)?;
        tok.parse()
            .map_err(|_| pgm_err(path, at, format!("{what} {tok:?} is not a number")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 65535 {
        return Err(pgm_err(
            path,
            pos,
            format!("maxval {maxval} unsupported, expected 65535"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(2))
        .ok_or_else(|| pgm_err(path, 0, "image dimensions overflow"))?;
    if buf.len() < start + need {
        return Err(pgm_err(
            path,
            buf.len(),
            format!("truncated raster: need {need} bytes after offset {start}"),
        ));
    }
    let values = buf[start..start + need]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
        .collect();
    DepthMap::from_values(width, height, values)
}

/// Writes depth values as a 16-bit PGM; invalid pixels become 0.
pub fn write_pgm16(path: impl AsRef<Path>, d: &DepthMap) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n65535\n", d.width, d.height).into_bytes();
    for (&v, &ok) in d.values.iter().zip(&d.valid) {
        let s = if ok {
            v.round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&s.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| CimdlError::io(path, e))
}

/// Writes the normal map as an 8-bit binary PPM.
pub fn write_ppm(path: impl AsRef<Path>, n: &NormalMap) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P6\n{} {}\n255\n", n.width, n.height).into_bytes();
    for normal in &n.normals {
        out.extend_from_slice(&normal_to_rgb(*normal));
    }
    fs::write(path, out).map_err(|e| CimdlError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_plane_faces_camera() {
        let d = DepthMap::from_fn(6, 5, |_, _| 100.0).unwrap();
        let n = depth_to_surface_normals(&d).unwrap();
        for y in 1..4 {
            for x in 1..5 {
                assert_eq!(n.get(x, y), [0.0, 0.0, 1.0]);
            }
        }
        assert!(!n.is_valid(0, 0) && n.get(0, 2) == [0.0; 3]);
    }

    #[test]
    fn slope_plane() {
        let d = DepthMap::from_fn(5, 5, |x, _| 10.0 + x as f64).unwrap();
        let n = depth_to_surface_normals(&d).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for y in 1..4 {
            for x in 1..4 {
                let v = n.get(x, y);
                assert!((v[0] + s).abs() < 1e-12 && v[1].abs() < 1e-12 && (v[2] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_neighbors_propagate() {
        let mut d = DepthMap::from_fn(5, 5, |_, _| 7.0).unwrap();
        d.values[2 * 5 + 2] = 0.0;
        d.valid[2 * 5 + 2] = false;
        let n = depth_to_surface_normals(&d).unwrap();
        for (x, y) in [(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)] {
            assert!(!n.is_valid(x, y));
            assert_eq!(n.get(x, y), [0.0; 3]);
        }
        assert!(n.is_valid(1, 1));
    }

    #[test]
    fn depth_reversal_flips_tangent_components() {
        let f = |x: usize, y: usize| 50.0 + (x as f64 * 0.3).sin() * 4.0 + (y * y) as f64 * 0.1;
        let a = depth_to_surface_normals(&DepthMap::from_fn(7, 6, f).unwrap()).unwrap();
        let b = depth_to_surface_normals(&DepthMap::from_fn(7, 6, |x, y| 200.0 - f(x, y)).unwrap())
            .unwrap();
        for (p, q) in a.normals.iter().zip(&b.normals) {
            assert!(
                (p[0] + q[0]).abs() < 1e-12
                    && (p[1] + q[1]).abs() < 1e-12
                    && (p[2] - q[2]).abs() < 1e-12
            );
        }
    }

    #[test]
    fn too_small_rejected() {
        let d = DepthMap::from_fn(2, 5, |_, _| 1.0).unwrap();
        assert!(depth_to_surface_normals(&d).is_err());
    }

    #[test]
    fn rgb_mapping() {
        assert_eq!(normal_to_rgb([0.0, 0.0, 1.0]), [128, 128, 255]);
        assert_eq!(normal_to_rgb([-1.0, 0.0, 0.0]), [0, 128, 128]);
    }
}
