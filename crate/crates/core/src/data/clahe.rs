use serde::{Deserialize, Serialize};

use super::image::GrayImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Histogram clip level as a fraction of tile pixels (so 0.02 caps any
    /// bin at 2% of the tile).
    pub clip_limit: f64,
    /// Tile grid as (rows, cols).
    pub tile_grid: (usize, usize),
    pub bins: usize,
    /// Target (height, width); images are resized before equalization.
    pub target_resolution: (usize, usize),
    pub apply_clahe: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            clip_limit: 0.02,
            tile_grid: (8, 8),
            bins: 256,
            target_resolution: (512, 512),
            apply_clahe: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_limit > 0.0 && self.clip_limit.is_finite()) {
            return Err(Error::Config(format!("clip_limit must be > 0, got {}", self.clip_limit)));
        }
        let (rows, cols) = self.tile_grid;
        let (h, w) = self.target_resolution;
        if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
            return Err(Error::Config(format!(
                "tile grid {rows}x{cols} must divide target resolution {h}x{w}"
            )));
        }
        if self.bins < 2 {
            return Err(Error::Config("need at least 2 histogram bins".into()));
        }
        Ok(())
    }
}

/// Contrast-limited adaptive histogram equalization.
///
/// Each tile's histogram is clipped at `clip_limit * tile_pixels` with the
/// excess spread uniformly over all bins; the resulting CDFs are blended
/// bilinearly between the four nearest tile centers.
pub fn clahe(image: &GrayImage, config: &PreprocessConfig) -> Result<GrayImage> {
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clahe input".into()));
    }
    let (rows, cols) = config.tile_grid;
    let (h, w) = (image.height, image.width);
    if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
        return Err(Error::Config(format!("tile grid {rows}x{cols} does not divide {h}x{w}")));
    }
    let bins = config.bins;
    let (th, tw) = (h / rows, w / cols);
    let tile_pixels = (th * tw) as f64;
    let clip = (config.clip_limit * tile_pixels).max(1.0);

    let bin_of = |v: f32| -> usize { ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1) };

    let mut luts = vec![0f64; rows * cols * bins];
    let mut hist = vec![0f64; bins];
    for tr in 0..rows {
        for tc in 0..cols {
            hist.iter_mut().for_each(|b| *b = 0.0);
            for y in tr * th..(tr + 1) * th {
                for x in tc * tw..(tc + 1) * tw {
                    hist[bin_of(image.data[y * w + x])] += 1.0;
                }
            }
            let mut excess = 0.0;
            for b in hist.iter_mut() {
                if *b > clip {
                    excess += *b - clip;
                    *b = clip;
                }
            }
            let share = excess / bins as f64;
            let lut = &mut luts[(tr * cols + tc) * bins..(tr * cols + tc + 1) * bins];
            let mut cdf = 0.0;
            for (l, b) in lut.iter_mut().zip(&hist) {
                cdf += b + share;
                *l = cdf / tile_pixels;
            }
        }
    }

    // tile-center coordinates for bilinear blending
    let axis = |p: usize, size: usize, n: usize| -> (usize, usize, f64) {
        let t = (p as f64 + 0.5) / size as f64 - 0.5;
        if t <= 0.0 {
            (0, 0, 0.0)
        } else if t >= (n - 1) as f64 {
            (n - 1, n - 1, 0.0)
        } else {
            let i = t.floor() as usize;
            (i, i + 1, t - i as f64)
        }
    };

    let mut out = GrayImage::new(h, w);
    for y in 0..h {
        let (r0, r1, fy) = axis(y, th, rows);
        for x in 0..w {
            let (c0, c1, fx) = axis(x, tw, cols);
            let b = bin_of(image.data[y * w + x]);
            let at = |r: usize, c: usize| luts[(r * cols + c) * bins + b];
            let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
            let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            out.data[y * w + x] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}
