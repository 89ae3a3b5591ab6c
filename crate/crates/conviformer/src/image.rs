//! 8-bit RGB raster images and the binary PPM (P6) codec.
//!
//! The writer emits a canonical header (`P6\n<w> <h>\n255\n`) so a
//! write/read cycle is bit-exact. The reader accepts the full P6 header
//! grammar: any whitespace between tokens and `#` comments through
//! end-of-line.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageError {
    /// Zero extent, or data length inconsistent with height*width*3.
    Degenerate { detail: String },
}

impl fmt::Display for ImageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageError::Degenerate { detail } => write!(f, "degenerate image: {detail}"),
        }
    }
}

impl std::error::Error for ImageError {}

impl RasterImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::Degenerate {
                detail: format!("extent {height}x{width}"),
            });
        }
        if data.len() != height * width * 3 {
            return Err(ImageError::Degenerate {
                detail: format!(
                    "{} bytes for {height}x{width}x3 (expected {})",
                    data.len(),
                    height * width * 3
                ),
            });
        }
        Ok(RasterImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self::new(height, width, data)
    }

    /// Build from a per-pixel function of (row, col).
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Normalized f32/f64 pixel planes in [0,1], channel-major ([3, H, W]).
    pub fn to_chw<T: crate::tensor::Element>(&self) -> Vec<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::zero(); 3 * hw];
        let scale = T::from_f64(1.0 / 255.0);
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = T::from_usize(self.data[p * 3 + c] as usize) * scale;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PpmError {
    BadMagic,
    /// Header token missing or not a number.
    BadHeader { detail: String },
    UnsupportedMaxval { maxval: u64 },
    /// Raster shorter than width*height*3.
    Truncated { expected: usize, got: usize },
    ZeroExtent,
    Io(String),
}

impl fmt::Display for PpmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PpmError::BadMagic => write!(f, "not a P6 ppm file"),
            PpmError::BadHeader { detail } => write!(f, "bad ppm header: {detail}"),
            PpmError::UnsupportedMaxval { maxval } => {
                write!(f, "unsupported maxval {maxval} (only 255)")
            }
            PpmError::Truncated { expected, got } => {
                write!(f, "truncated raster: expected {expected} bytes, got {got}")
            }
            PpmError::ZeroExtent => write!(f, "zero width or height"),
            PpmError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for PpmError {}

impl From<io::Error> for PpmError {
    fn from(e: io::Error) -> Self {
        PpmError::Io(e.to_string())
    }
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_number(&mut self, what: &str) -> Result<u64, PpmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(PpmError::BadHeader {
                detail: format!("expected {what}"),
            });
        }
        // Length-capped above; overflow still possible on absurd tokens.
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PpmError::BadHeader {
                detail: format!("{what} out of range"),
            })
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RasterImage, PpmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(PpmError::BadMagic);
    }
    let mut sc = HeaderScanner { bytes, pos: 2 };
    let width = sc.read_number("width")?;
    let height = sc.read_number("height")?;
    let maxval = sc.read_number("maxval")?;
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval { maxval });
    }
    if width == 0 || height == 0 {
        return Err(PpmError::ZeroExtent);
    }
    if width > 1 << 20 || height > 1 << 20 || width.saturating_mul(height) > 1 << 28 {
        return Err(PpmError::BadHeader {
            detail: format!("implausible extent {width}x{height}"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    if sc.pos >= bytes.len() || !bytes[sc.pos].is_ascii_whitespace() {
        return Err(PpmError::BadHeader {
            detail: "missing raster separator".into(),
        });
    }
    let raster = &bytes[sc.pos + 1..];
    let expected = (width * height * 3) as usize;
    if raster.len() < expected {
        return Err(PpmError::Truncated {
            expected,
            got: raster.len(),
        });
    }
    RasterImage::new(height as usize, width as usize, raster[..expected].to_vec())
        .map_err(|e| PpmError::BadHeader { detail: e.to_string() })
}

pub fn encode_ppm(img: &RasterImage) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.data().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(img.data());
    out
}

pub fn read_ppm(path: &Path) -> Result<RasterImage, PpmError> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: &Path, img: &RasterImage) -> Result<(), PpmError> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let img = RasterImage::from_fn(5, 7, |y, x| [y as u8, x as u8, (y * x) as u8]).unwrap();
        let bytes = encode_ppm(&img);
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(img, back);
        assert_eq!(bytes, encode_ppm(&back));
    }

    #[test]
    fn header_comments_and_whitespace() {
        let mut bytes = b"P6 # comment\n# another line\n 2\t3\n255\n".to_vec();
        bytes.extend_from_slice(&[0u8; 18]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 3));
    }

    #[test]
    fn truncated_raster_rejected() {
        let mut bytes = b"P6\n4 4\n255\n".to_vec();
        bytes.extend_from_slice(&[9u8; 10]);
        assert!(matches!(
            decode_ppm(&bytes),
            Err(PpmError::Truncated { expected: 48, got: 10 })
        ));
    }

    #[test]
    fn wrong_magic_and_maxval_rejected() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\0"), Err(PpmError::BadMagic)));
        let mut bytes = b"P6\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0u8; 6]);
        assert!(matches!(
            decode_ppm(&bytes),
            Err(PpmError::UnsupportedMaxval { maxval: 65535 })
        ));
    }

    #[test]
    fn degenerate_images_rejected() {
        assert!(RasterImage::new(0, 4, vec![]).is_err());
        assert!(RasterImage::new(2, 2, vec![0; 5]).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_prefix_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode_ppm(&bytes);
        }

        #[test]
        fn roundtrip_random_images(h in 1usize..6, w in 1usize..6, seed in any::<u8>()) {
            let img = RasterImage::from_fn(h, w, |y, x| {
                [seed.wrapping_add(y as u8), seed.wrapping_mul(x as u8), seed ^ (y + x) as u8]
            }).unwrap();
            let back = decode_ppm(&encode_ppm(&img)).unwrap();
            prop_assert_eq!(img, back);
        }
    }
}
