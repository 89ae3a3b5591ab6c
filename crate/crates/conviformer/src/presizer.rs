//! Aspect-preserving image presizing: strip a fixed border, reflect-pad the
//! short axis to a square, bilinear-resize, center-crop.
//!
//! Reflection is appended on the trailing side (right or bottom) only and
//! mirrors about the boundary between pixels, so the edge row/column is the
//! first repeated one and no new pixel values are invented. A deficit larger
//! than the image extent repeats the reflection with alternating
//! orientation.

use std::fmt;

use crate::image::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PresizeConfig {
    pub border_px: usize,
    pub resize_to: usize,
    pub crop_to: usize,
}

impl Default for PresizeConfig {
    fn default() -> Self {
        PresizeConfig {
            border_px: 20,
            resize_to: 512,
            crop_to: 448,
        }
    }
}

impl PresizeConfig {
    pub fn validate(&self) -> Result<(), PresizeError> {
        if self.crop_to > self.resize_to {
            return Err(PresizeError::BadConfig {
                detail: format!("crop_to {} exceeds resize_to {}", self.crop_to, self.resize_to),
            });
        }
        if self.resize_to == 0 {
            return Err(PresizeError::ZeroTarget);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PresizeError {
    /// Image too small for the requested border strip.
    TooSmall { height: usize, width: usize, border: usize },
    /// Crop target larger than the image side.
    CropTooLarge { side: usize, crop: usize },
    ZeroTarget,
    NotSquare { height: usize, width: usize },
    BadConfig { detail: String },
}

impl fmt::Display for PresizeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PresizeError::TooSmall { height, width, border } => write!(
                f,
                "image {height}x{width} too small to strip a {border}px border"
            ),
            PresizeError::CropTooLarge { side, crop } => {
                write!(f, "crop {crop} larger than image side {side}")
            }
            PresizeError::ZeroTarget => write!(f, "resize target must be positive"),
            PresizeError::NotSquare { height, width } => {
                write!(f, "resize expects a square input, got {height}x{width}")
            }
            PresizeError::BadConfig { detail } => write!(f, "bad presize config: {detail}"),
        }
    }
}

impl std::error::Error for PresizeError {}

/// Drop `border_px` pixels from all four sides.
pub fn strip_border(img: &RasterImage, border_px: usize) -> Result<RasterImage, PresizeError> {
    if border_px == 0 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    if 2 * border_px >= h || 2 * border_px >= w {
        return Err(PresizeError::TooSmall { height: h, width: w, border: border_px });
    }
    let (nh, nw) = (h - 2 * border_px, w - 2 * border_px);
    RasterImage::from_fn(nh, nw, |y, x| img.get(y + border_px, x + border_px))
        .map_err(|e| PresizeError::BadConfig { detail: e.to_string() })
}

/// Triangle-wave index: 0,1,..,n-1,n-1,..,1,0,0,1,.. for mirrored tiling.
fn mirror_index(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let m = i % period;
    if m < n {
        m
    } else {
        period - 1 - m
    }
}

/// Pad the short axis to `max(h, w)` by appending the mirror reflection on
/// the trailing side. Square inputs pass through unchanged.
pub fn reflect_pad_to_square(img: &RasterImage) -> RasterImage {
    let (h, w) = (img.height(), img.width());
    if h == w {
        return img.clone();
    }
    let side = h.max(w);
    RasterImage::from_fn(side, side, |y, x| {
        img.get(mirror_index(y, h), mirror_index(x, w))
    })
    .expect("padded image is non-degenerate")
}

/// Bilinear resize of a square image using half-pixel-center sampling:
/// destination pixel centers map to `(i + 0.5) * src/dst - 0.5` in source
/// coordinates, clamped to the valid range. Channels round to nearest.
pub fn resize(img: &RasterImage, to: usize) -> Result<RasterImage, PresizeError> {
    if to == 0 {
        return Err(PresizeError::ZeroTarget);
    }
    let (h, w) = (img.height(), img.width());
    if h != w {
        return Err(PresizeError::NotSquare { height: h, width: w });
    }
    let src = h as f64;
    let dst = to as f64;
    let scale = src / dst;
    let coord = |i: usize| -> (usize, usize, f64) {
        let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, src - 1.0);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(h - 1);
        (lo, hi, c - lo as f64)
    };
    RasterImage::from_fn(to, to, |y, x| {
        let (y0, y1, fy) = coord(y);
        let (x0, x1, fx) = coord(x);
        let mut out = [0u8; 3];
        for c in 0..3 {
            let p00 = img.get(y0, x0)[c] as f64;
            let p01 = img.get(y0, x1)[c] as f64;
            let p10 = img.get(y1, x0)[c] as f64;
            let p11 = img.get(y1, x1)[c] as f64;
            let top = p00 * (1.0 - fx) + p01 * fx;
            let bot = p10 * (1.0 - fx) + p11 * fx;
            out[c] = (top * (1.0 - fy) + bot * fy).round() as u8;
        }
        out
    })
    .map_err(|e| PresizeError::BadConfig { detail: e.to_string() })
}

/// Centered `to`x`to` crop with offset `(side - to) / 2` on each axis.
pub fn center_crop(img: &RasterImage, to: usize) -> Result<RasterImage, PresizeError> {
    let side = img.height().min(img.width());
    if to > side {
        return Err(PresizeError::CropTooLarge { side, crop: to });
    }
    if to == 0 {
        return Err(PresizeError::ZeroTarget);
    }
    let oy = (img.height() - to) / 2;
    let ox = (img.width() - to) / 2;
    RasterImage::from_fn(to, to, |y, x| img.get(y + oy, x + ox))
        .map_err(|e| PresizeError::BadConfig { detail: e.to_string() })
}

/// Full pipeline: strip border, pad to square, resize, center crop.
pub fn presize(img: &RasterImage, cfg: &PresizeConfig) -> Result<RasterImage, PresizeError> {
    cfg.validate()?;
    let stripped = strip_border(img, cfg.border_px)?;
    let padded = reflect_pad_to_square(&stripped);
    let resized = resize(&padded, cfg.resize_to)?;
    center_crop(&resized, cfg.crop_to)
}
