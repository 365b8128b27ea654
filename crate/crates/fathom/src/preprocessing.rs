//! Contrast-limited adaptive histogram equalization for 8-bit grayscale
//! images, plus binary PGM I/O for test corpora.
//!
//! The image is divided into a grid of tiles; each tile's histogram is
//! clipped at a multiple of the uniform bin height with the excess
//! redistributed evenly, and the per-tile transfer functions are blended
//! per pixel by bilinear interpolation of the four surrounding tiles.
//! Border pixels clamp their interpolation coordinates.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("empty image")]
    Empty,
    #[error("buffer length {got} does not match {width}x{height}")]
    BadDimensions { got: usize, width: u32, height: u32 },
    #[error("tile grid {0}x{1} invalid for this image")]
    BadTileGrid(u32, u32),
    #[error("not a binary PGM (P5) file")]
    BadFormat,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty);
        }
        if data.len() != (width as usize) * (height as usize) {
            return Err(ImageError::BadDimensions { got: data.len(), width, height });
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Result<Self, ImageError> {
        GrayImage::new(width, height, vec![value; (width as usize) * (height as usize)])
    }

    pub fn at(&self, x: u32, y: u32) -> u8 {
        self.data[(y as usize) * (self.width as usize) + (x as usize)]
    }

    /// Reads a binary (P5) PGM file with 8-bit depth.
    pub fn read_pgm(path: &std::path::Path) -> Result<Self, ImageError> {
        let bytes = std::fs::read(path)?;
        let mut pos = 0usize;
        let mut token = || -> Result<String, ImageError> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::BadFormat);
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err(ImageError::BadFormat);
        }
        let width: u32 = token()?.parse().map_err(|_| ImageError::BadFormat)?;
        let height: u32 = token()?.parse().map_err(|_| ImageError::BadFormat)?;
        let maxval: u32 = token()?.parse().map_err(|_| ImageError::BadFormat)?;
        if maxval != 255 {
            return Err(ImageError::BadFormat);
        }
        pos += 1; // single whitespace after maxval
        let need = (width as usize) * (height as usize);
        if bytes.len() < pos + need {
            return Err(ImageError::BadFormat);
        }
        GrayImage::new(width, height, bytes[pos..pos + need].to_vec())
    }

    /// Writes a binary (P5) PGM file.
    pub fn write_pgm(&self, path: &std::path::Path) -> Result<(), ImageError> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Per-tile transfer function: maps an input level to an output level.
type TileLut = [u8; 256];

/// Builds the clipped-equalization lookup table of one tile.
fn tile_lut(hist: &[u32; 256], n_pixels: u32, clip_limit: f64) -> TileLut {
    let mut hist: Vec<f64> = hist.iter().map(|&h| h as f64).collect();
    if clip_limit.is_finite() {
        // Clip at clip_limit times the uniform bin height and spread the
        // excess evenly over all bins.
        let uniform = n_pixels as f64 / 256.0;
        let limit = (clip_limit * uniform).max(1.0);
        let mut excess = 0.0;
        for h in hist.iter_mut() {
            if *h > limit {
                excess += *h - limit;
                *h = limit;
            }
        }
        let bonus = excess / 256.0;
        for h in hist.iter_mut() {
            *h += bonus;
        }
    }
    let total: f64 = hist.iter().sum();
    let mut lut = [0u8; 256];
    if total <= 0.0 {
        for (v, out) in lut.iter_mut().enumerate() {
            *out = v as u8;
        }
        return lut;
    }
    let mut cdf = 0.0;
    for v in 0..256 {
        cdf += hist[v];
        lut[v] = ((cdf / total) * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    lut
}

/// Contrast-limited adaptive histogram equalization.
///
/// `tiles` is the grid size `(tx, ty)`; both must be at least 1 and no
/// larger than the image dimensions. `clip_limit` is relative to the
/// uniform bin height and must be at least 1; `f64::INFINITY` disables
/// clipping, which at a 1x1 grid reduces to classical global histogram
/// equalization.
pub fn clahe(
    img: &GrayImage,
    tiles: (u32, u32),
    clip_limit: f64,
) -> Result<GrayImage, ImageError> {
    if img.data.is_empty() {
        return Err(ImageError::Empty);
    }
    let (tx, ty) = tiles;
    if tx == 0 || ty == 0 || tx > img.width || ty > img.height || clip_limit < 1.0 {
        return Err(ImageError::BadTileGrid(tx, ty));
    }

    let w = img.width as usize;
    let h = img.height as usize;
    let tw = w.div_ceil(tx as usize);
    let th = h.div_ceil(ty as usize);

    let mut luts: Vec<TileLut> = Vec::with_capacity((tx * ty) as usize);
    for tj in 0..ty as usize {
        for ti in 0..tx as usize {
            let x0 = ti * tw;
            let y0 = tj * th;
            let x1 = (x0 + tw).min(w);
            let y1 = (y0 + th).min(h);
            let mut hist = [0u32; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[img.data[y * w + x] as usize] += 1;
                }
            }
            let n = ((x1 - x0) * (y1 - y0)) as u32;
            luts.push(tile_lut(&hist, n, clip_limit));
        }
    }

    // Bilinear interpolation of the four surrounding tile mappings, with
    // coordinates clamped at the borders.
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        let fy = (y as f64 + 0.5) / th as f64 - 0.5;
        let j0 = fy.floor().clamp(0.0, (ty - 1) as f64) as usize;
        let j1 = (j0 + 1).min(ty as usize - 1);
        let wy = if j1 == j0 { 0.0 } else { (fy - fy.floor()).clamp(0.0, 1.0) };
        for x in 0..w {
            let fx = (x as f64 + 0.5) / tw as f64 - 0.5;
            let i0 = fx.floor().clamp(0.0, (tx - 1) as f64) as usize;
            let i1 = (i0 + 1).min(tx as usize - 1);
            let wx = if i1 == i0 { 0.0 } else { (fx - fx.floor()).clamp(0.0, 1.0) };

            let v = img.data[y * w + x] as usize;
            let f00 = luts[j0 * tx as usize + i0][v] as f64;
            let f10 = luts[j0 * tx as usize + i1][v] as f64;
            let f01 = luts[j1 * tx as usize + i0][v] as f64;
            let f11 = luts[j1 * tx as usize + i1][v] as f64;
            let blended = (1.0 - wy) * ((1.0 - wx) * f00 + wx * f10)
                + wy * ((1.0 - wx) * f01 + wx * f11);
            out[y * w + x] = blended.round().clamp(0.0, 255.0) as u8;
        }
    }
    GrayImage::new(img.width, img.height, out)
}

/// Default grid used by the pipeline.
pub const DEFAULT_TILES: (u32, u32) = (8, 8);
/// Default clip limit relative to the uniform bin height.
pub const DEFAULT_CLIP_LIMIT: f64 = 2.0;
