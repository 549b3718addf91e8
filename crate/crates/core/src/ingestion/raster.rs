use std::fs;
use std::path::{Path, PathBuf};

use super::tsv::{parse_f64, read_tsv, write_atomic};
use crate::error::{Result, SencaError};

/// 8-bit RGB image with a physical scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    units_per_pixel: f64,
}

impl ImageRaster {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, units_per_pixel: f64) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(SencaError::shape(
                "raster",
                &[width, height, 3],
                &[pixels.len()],
            ));
        }
        if !(units_per_pixel > 0.0 && units_per_pixel.is_finite()) {
            return Err(SencaError::Parameter(format!(
                "units_per_pixel must be positive, got {units_per_pixel}"
            )));
        }
        Ok(ImageRaster {
            width,
            height,
            pixels,
            units_per_pixel,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn units_per_pixel(&self) -> f64 {
        self.units_per_pixel
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

/// Square RGB block cut around a spot.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub side: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl Patch {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.side + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }
}

/// Sidecar metadata path: `image.ppm` → `image.meta.tsv`.
pub fn meta_path(ppm: &Path) -> PathBuf {
    ppm.with_extension("meta.tsv")
}

/// Reads a binary P6 PPM plus its `units_per_pixel` sidecar.
pub fn load_raster(path: &Path) -> Result<ImageRaster> {
    let bytes = fs::read(path).map_err(|e| SencaError::io(path, e))?;
    let (width, height, pixels) = decode_ppm(path, &bytes)?;
    let upp = load_units_per_pixel(&meta_path(path))?;
    ImageRaster::new(width, height, pixels, upp)
}

fn load_units_per_pixel(path: &Path) -> Result<f64> {
    let table = read_tsv(path)?;
    let col = table
        .header
        .iter()
        .position(|h| h == "units_per_pixel")
        .ok_or_else(|| SencaError::parse(path, 1, "missing units_per_pixel column"))?;
    let (line, fields) = table
        .rows
        .first()
        .ok_or_else(|| SencaError::parse(path, 2, "missing units_per_pixel value"))?;
    parse_f64(path, *line, &fields[col])
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(SencaError::parse(path, 1, "truncated PPM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P6" {
        return Err(SencaError::parse(path, 1, format!("expected P6, found {}", tokens[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| SencaError::parse(path, 1, format!("bad PPM header field {s:?}")))
    };
    let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(SencaError::parse(path, 1, format!("only 8-bit PPM supported, maxval {maxval}")));
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(SencaError::parse(path, 1, "truncated PPM pixel data"));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

pub fn encode_ppm(raster: &ImageRaster) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.pixels);
    out
}

pub fn write_raster(path: &Path, raster: &ImageRaster) -> Result<()> {
    write_atomic(path, &encode_ppm(raster))?;
    let meta = format!("units_per_pixel\n{}\n", raster.units_per_pixel);
    write_atomic(&meta_path(path), meta.as_bytes())
}

/// Side length in pixels of a patch spanning `degree` spot spacings on each
/// side of the centre.
pub fn patch_side(spacing: f64, degree: usize, units_per_pixel: f64) -> usize {
    ((2.0 * degree as f64 * spacing / units_per_pixel).round() as usize).max(1)
}

/// Crops a square patch centred on `center` (physical units). Pixels past the
/// raster edge replicate the nearest edge pixel.
pub fn extract_patch(
    raster: &ImageRaster,
    center: [f64; 2],
    spacing: f64,
    degree: usize,
) -> Result<Patch> {
    if degree == 0 {
        return Err(SencaError::Parameter("patch degree must be at least 1".into()));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(SencaError::Parameter(format!("spot spacing must be positive, got {spacing}")));
    }
    let cx = center[0] / raster.units_per_pixel;
    let cy = center[1] / raster.units_per_pixel;
    if !(cx >= 0.0 && cy >= 0.0 && cx < raster.width as f64 && cy < raster.height as f64) {
        return Err(SencaError::Bounds(format!(
            "spot centre ({}, {}) lies outside the {}x{} raster",
            center[0], center[1], raster.width, raster.height
        )));
    }
    let side = patch_side(spacing, degree, raster.units_per_pixel);
    let x0 = (cx - side as f64 / 2.0).round() as i64;
    let y0 = (cy - side as f64 / 2.0).round() as i64;
    let max_x = raster.width as i64 - 1;
    let max_y = raster.height as i64 - 1;
    let mut pixels = Vec::with_capacity(side * side * 3);
    for dy in 0..side as i64 {
        let y = (y0 + dy).clamp(0, max_y) as usize;
        for dx in 0..side as i64 {
            let x = (x0 + dx).clamp(0, max_x) as usize;
            pixels.extend_from_slice(&raster.pixel(x, y));
        }
    }
    Ok(Patch { side, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_raster(w: usize, h: usize) -> ImageRaster {
        let mut px = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                px.extend_from_slice(&[x as u8, y as u8, (x + y) as u8]);
            }
        }
        ImageRaster::new(w, h, px, 1.0).unwrap()
    }

    #[test]
    fn centred_patch_is_exact_crop() {
        let r = gradient_raster(20, 20);
        let p = extract_patch(&r, [10.0, 10.0], 1.0, 3).unwrap();
        assert_eq!(p.side, 6);
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(p.pixel(x, y), r.pixel(7 + x, 7 + y));
            }
        }
    }

    #[test]
    fn corner_patch_replicates_edges() {
        let r = gradient_raster(20, 20);
        let p = extract_patch(&r, [0.0, 0.0], 1.0, 3).unwrap();
        assert_eq!(p.side, 6);
        assert_eq!(p.pixel(0, 0), r.pixel(0, 0));
        assert_eq!(p.pixel(2, 1), r.pixel(0, 0));
        assert_eq!(p.pixel(5, 5), r.pixel(2, 2));
    }

    #[test]
    fn patch_sum_matches_naive_loop() {
        let r = gradient_raster(15, 11);
        for center in [[3.3, 4.9], [14.5, 0.2], [7.0, 10.9]] {
            let p = extract_patch(&r, center, 1.3, 2).unwrap();
            let side = p.side as i64;
            let x0 = (center[0] - side as f64 / 2.0).round() as i64;
            let y0 = (center[1] - side as f64 / 2.0).round() as i64;
            let mut naive = 0u64;
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    let xi = x.max(0).min(14) as usize;
                    let yi = y.max(0).min(10) as usize;
                    naive += r.pixel(xi, yi).iter().map(|&v| v as u64).sum::<u64>();
                }
            }
            let got: u64 = p.pixels.iter().map(|&v| v as u64).sum();
            assert_eq!(got, naive);
        }
    }

    #[test]
    fn outside_centre_is_bounds_error() {
        let r = gradient_raster(5, 5);
        assert!(matches!(
            extract_patch(&r, [5.0, 1.0], 1.0, 1),
            Err(SencaError::Bounds(_))
        ));
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("image.ppm");
        let r = ImageRaster::new(3, 2, (0..18).collect(), 0.5).unwrap();
        write_raster(&path, &r).unwrap();
        assert_eq!(load_raster(&path).unwrap(), r);
    }
}
