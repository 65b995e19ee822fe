//! Binary PPM (P6, maxval 255). Bytes map to intensities as `byte / 255`;
//! writing rounds `v * 255` to the nearest byte.

use std::fs;
use std::path::Path;

use super::ImageTensor;
use crate::error::{Error, Result};

pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    encode_ppm_with_comment(img, None)
}

/// Adds one `# comment` header line; newlines in `comment` become spaces.
pub fn encode_ppm_with_comment(img: &ImageTensor, comment: Option<&str>) -> Vec<u8> {
    let note = comment
        .map(|c| format!("# {}\n", c.replace(['\n', '\r'], " ")))
        .unwrap_or_default();
    let mut out = format!("P6\n{note}{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|v| (v * 255.0).round() as u8));
    out
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { what: "PPM", reason: reason.into() }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(bad("truncated header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| bad("non-ASCII header"))
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        tok.parse().map_err(|_| bad(format!("bad header field `{tok}`")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let mut hdr = Header { bytes, pos: 0 };
    if hdr.token()? != "P6" {
        return Err(bad("missing P6 magic"));
    }
    let width = hdr.number()?;
    let height = hdr.number()?;
    let maxval = hdr.number()?;
    if maxval != 255 {
        return Err(bad(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = hdr.pos + 1;
    let need = width * height * 3;
    let raster = bytes
        .get(start..start + need)
        .ok_or_else(|| bad(format!("raster truncated, need {need} bytes")))?;
    let data = raster.iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageTensor::new(height, width, data)
}

pub fn write_ppm(path: &Path, img: &ImageTensor) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn write_ppm_with_comment(path: &Path, img: &ImageTensor, comment: &str) -> Result<()> {
    fs::write(path, encode_ppm_with_comment(img, Some(comment)))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    decode_ppm(&fs::read(path)?)
}
