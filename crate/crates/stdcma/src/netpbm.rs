//! Binary PPM (P6) and PGM (P5) with maxval 255.
//!
//! Header grammar: magic, then width, height and maxval separated by
//! whitespace, where a `#` comment running to the end of its line may stand
//! in any whitespace gap; exactly one whitespace byte precedes the raster.

use std::fmt;
use std::path::Path;

use stdcma_core::Tensor;

use crate::error::AppError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatError {
    /// Byte offset at which parsing failed.
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (at byte {})", self.message, self.offset)
    }
}

impl std::error::Error for FormatError {}

fn fail<T>(offset: usize, message: impl Into<String>) -> Result<T, FormatError> {
    Err(FormatError { offset, message: message.into() })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_gap(&mut self) -> Result<(), FormatError> {
        let start = self.pos;
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(_) if self.pos > start => return Ok(()),
                Some(_) => return fail(self.pos, "expected whitespace"),
                None => return fail(self.pos, "header ends early"),
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, FormatError> {
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return fail(start, format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| fail(start, format!("{what} out of range")), Ok)
    }
}

/// Returns `(width, height, raster)` for the given magic and channel count.
fn parse<'a>(bytes: &'a [u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, &'a [u8]), FormatError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return fail(0, format!("bad magic, expected {}", String::from_utf8_lossy(magic)));
    }
    let mut c = Cursor { bytes, pos: 2 };
    c.skip_gap()?;
    let width = c.number("width")?;
    c.skip_gap()?;
    let height = c.number("height")?;
    c.skip_gap()?;
    let at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return fail(at, format!("maxval {maxval} unsupported, only 255"));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return fail(c.pos, "expected one whitespace byte before the raster"),
    }
    if width == 0 || height == 0 {
        return fail(c.pos, format!("empty image {width}x{height}"));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .map_or_else(|| fail(c.pos, "image dimensions overflow"), Ok)?;
    let have = bytes.len() - c.pos;
    if have < need {
        return fail(bytes.len(), format!("truncated raster: expected {need} bytes, found {have}"));
    }
    Ok((width, height, &bytes[c.pos..c.pos + need]))
}

/// Decodes a P6 image into a `[1,3,H,W]` tensor with values in `[0,1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let (w, h, raster) = parse(bytes, b"P6", 3)?;
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| raster[(y * w + x) * 3 + c] as f64 / 255.0))
}

/// Quantizes to 8 bits, rounding half up and clamping to `[0,255]`.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Encodes the first image of a `[N,3,H,W]` tensor as P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>, AppError> {
    let [n, c, h, w] = image.shape();
    if n < 1 || c != 3 {
        return Err(AppError::data(format!("PPM needs a [1,3,H,W] image, got {:?}", image.shape())));
    }
    image.ensure_finite("image")?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(quantize(image.at(0, ch, y, x)));
            }
        }
    }
    Ok(out)
}

/// A single-channel 8-bit map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayMap, FormatError> {
    let (width, height, raster) = parse(bytes, b"P5", 1)?;
    Ok(GrayMap { width, height, data: raster.to_vec() })
}

pub fn encode_pgm(map: &GrayMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend_from_slice(&map.data);
    out
}

fn read(path: &Path) -> Result<Vec<u8>, AppError> {
    std::fs::read(path).map_err(|e| AppError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), AppError> {
    std::fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor, AppError> {
    decode_ppm(&read(path)?).map_err(|e| AppError::format(path, e))
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<(), AppError> {
    write(path, &encode_ppm(image)?)
}

pub fn read_pgm(path: &Path) -> Result<GrayMap, AppError> {
    decode_pgm(&read(path)?).map_err(|e| AppError::format(path, e))
}

pub fn write_pgm(path: &Path, map: &GrayMap) -> Result<(), AppError> {
    if map.data.len() != map.width * map.height {
        return Err(AppError::data(format!("{} bytes for a {}x{} map", map.data.len(), map.width, map.height)));
    }
    write(path, &encode_pgm(map))
}
