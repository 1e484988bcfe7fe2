//! Raster containers.
//!
//! Raw scans (signed 16-bit) are read from either of two layouts:
//!
//! * `DTR1`: the 4 ASCII bytes `DTR1`, height and width as `u32`
//!   little-endian, then `height·width` `i16` little-endian values, row-major.
//! * 16-bit binary PGM: `P5`, width, height, maxval `65535` as ASCII decimal
//!   fields separated by whitespace (`#` comments allowed between fields),
//!   one whitespace byte, then `height·width` big-endian `u16` samples.
//!   A sample `s` encodes the raw value `s − 32768`.
//!
//! Processed images are 8-bit binary PGM: `P5\n<w> <h>\n255\n` then one byte
//! per pixel, row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const DTR1_MAGIC: &[u8; 4] = b"DTR1";
pub const MIN_SCAN_EXTENT: usize = 32;
const P5_16_OFFSET: i32 = 32768;

/// Signed 16-bit attenuation grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawScan {
    height: usize,
    width: usize,
    pixels: Vec<i16>,
}

impl RawScan {
    pub fn new(height: usize, width: usize, pixels: Vec<i16>) -> Result<Self> {
        if height < MIN_SCAN_EXTENT || width < MIN_SCAN_EXTENT {
            return Err(Error::invalid(format!(
                "scan {height}x{width} is smaller than {MIN_SCAN_EXTENT}x{MIN_SCAN_EXTENT}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::Shape {
                op: "raw_scan",
                lhs: vec![height, width],
                rhs: vec![pixels.len()],
            });
        }
        Ok(RawScan { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[i16] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> i16 {
        self.pixels[y * self.width + x]
    }

    pub fn max_value(&self) -> i16 {
        self.pixels.iter().copied().max().unwrap_or(0)
    }

    pub fn to_dtr1(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 2 * self.pixels.len());
        out.extend_from_slice(DTR1_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for &p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn to_pgm16(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for &p in &self.pixels {
            let s = (i32::from(p) + P5_16_OFFSET) as u16;
            out.extend_from_slice(&s.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(DTR1_MAGIC) {
            return Self::decode_dtr1(bytes);
        }
        let (w, h, maxval, body) = parse_pgm_header(bytes)?;
        if maxval != 65535 {
            return Err(Error::format("raw scan", format!("expected maxval 65535, found {maxval}")));
        }
        expect_len(body, w * h * 2, "raw scan")?;
        let pixels = body
            .chunks_exact(2)
            .map(|c| (i32::from(u16::from_be_bytes([c[0], c[1]])) - P5_16_OFFSET) as i16)
            .collect();
        RawScan::new(h, w, pixels)
    }

    fn decode_dtr1(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::format("raw scan", "truncated DTR1 header"));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        expect_len(body, h.saturating_mul(w).saturating_mul(2), "raw scan")?;
        let pixels = body.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
        RawScan::new(h, w, pixels)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write_dtr1(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_dtr1())?;
        Ok(())
    }
}

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Gray8 {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Shape {
                op: "gray8",
                lhs: vec![height, width],
                rhs: vec![pixels.len()],
            });
        }
        Ok(Gray8 { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (w, h, maxval, body) = parse_pgm_header(bytes)?;
        if maxval != 255 {
            return Err(Error::format("8-bit image", format!("expected maxval 255, found {maxval}")));
        }
        expect_len(body, w * h, "8-bit image")?;
        Gray8::new(h, w, body.to_vec())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

/// Any raster the pipeline can ingest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Raster {
    Raw(RawScan),
    Gray(Gray8),
}

impl Raster {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(DTR1_MAGIC) {
            return RawScan::decode(bytes).map(Raster::Raw);
        }
        let (_, _, maxval, _) = parse_pgm_header(bytes)?;
        match maxval {
            255 => Gray8::decode(bytes).map(Raster::Gray),
            65535 => RawScan::decode(bytes).map(Raster::Raw),
            m => Err(Error::format("raster", format!("unsupported maxval {m}"))),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn expect_len(body: &[u8], want: usize, what: &'static str) -> Result<()> {
    if body.len() != want {
        return Err(Error::format(
            what,
            format!("payload has {} bytes, expected {want}", body.len()),
        ));
    }
    Ok(())
}

/// Returns (width, height, maxval, payload).
fn parse_pgm_header(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::format("raster", "unrecognized magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("raster", "truncated PGM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("raster", "bad PGM header number"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format("raster", "missing separator after PGM header")),
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::format("raster", "zero extent"));
    }
    Ok((w, h, maxval, &bytes[pos..]))
}
