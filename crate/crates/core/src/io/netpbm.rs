//! Binary netpbm images: P5 (grey) and P6 (RGB), 8-bit.

use std::path::Path;

use crate::error::{Error, Result};

/// Decoded netpbm raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::format(path, "not a binary PGM (P5) or PPM (P6) file")),
    };
    let mut h = Header { bytes, pos: 2 };
    let mut field = |name: &str| h.number().ok_or_else(|| Error::format(path, format!("missing or malformed {name}")));
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, format!("empty raster {width}x{height}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::format(path, format!("maxval {maxval} unsupported (only 8-bit samples)")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "header not terminated by whitespace"));
    }
    let start = h.pos + 1;
    let n = width * height * channels;
    let data = bytes
        .get(start..start + n)
        .ok_or_else(|| Error::format(path, format!("raster holds {} of {n} bytes", bytes.len().saturating_sub(start))))?
        .to_vec();
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        data,
    })
}

pub fn encode_pnm(width: usize, height: usize, channels: usize, data: &[u8]) -> Vec<u8> {
    assert_eq!(data.len(), width * height * channels, "raster size");
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

pub fn write_pnm(path: &Path, width: usize, height: usize, channels: usize, data: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pnm(width, height, channels, data)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_header_with_comments() {
        let mut bytes = b"P6 # rgb\n# another\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let p = decode_pnm(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!((p.width, p.height, p.channels), (2, 1, 3));
        assert_eq!(p.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn round_trip_grey() {
        let data: Vec<u8> = (0..12).collect();
        let bytes = encode_pnm(4, 3, 1, &data);
        let p = decode_pnm(&bytes, Path::new("m.pgm")).unwrap();
        assert_eq!(p.data, data);
        assert_eq!(p.channels, 1);
    }

    #[test]
    fn rejects_ascii_and_short_rasters() {
        assert!(decode_pnm(b"P3\n1 1\n255\n0 0 0", Path::new("a")).is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00\x01", Path::new("a")).is_err());
        assert!(decode_pnm(b"P5\n2 2\n65535\n", Path::new("a")).is_err());
    }
}
