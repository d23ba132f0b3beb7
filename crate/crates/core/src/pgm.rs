//! Binary (P5) PGM encoding and decoding.

use crate::error::{Error, Result};

/// Decoded greyscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

/// 8-bit P5 with the given maxval (at most 255).
pub fn encode8(width: usize, height: usize, maxval: u8, samples: &[u8]) -> Vec<u8> {
    assert_eq!(samples.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

/// 16-bit P5, maxval 65535, big-endian samples.
pub fn encode16(width: usize, height: usize, samples: &[u16]) -> Vec<u8> {
    assert_eq!(samples.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(samples.len() * 2);
    for s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse("PGM", format!("missing {field}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::parse("PGM", format!("{field} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pgm> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::parse("PGM", "missing P5 magic"));
    }
    let mut header = Header { bytes, pos: 2 };
    let width = header.number("width")?;
    let height = header.number("height")?;
    let maxval = header.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(
            "PGM",
            format!("maxval {maxval} not in 1..=65535"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(header.pos) {
        Some(b) if b.is_ascii_whitespace() => header.pos += 1,
        _ => return Err(Error::parse("PGM", "no whitespace after maxval")),
    }
    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(bytes_per_sample))
        .ok_or_else(|| Error::parse("PGM", "dimensions overflow"))?;
    let raster = &bytes[header.pos..];
    if raster.len() != expected {
        return Err(Error::parse(
            "PGM",
            format!("raster has {} bytes, expected {expected}", raster.len()),
        ));
    }
    let samples: Vec<u16> = if bytes_per_sample == 1 {
        raster.iter().map(|&b| b as u16).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if samples.iter().any(|&s| s as usize > maxval) {
        return Err(Error::parse("PGM", "sample exceeds maxval"));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}
