//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{CsdError, Result};
use crate::image::Image;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(CsdError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        })
    }

    /// Skips whitespace and `#` comments between header tokens.
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => {
                self.pos = start;
                self.fail(format!("invalid {what} `{text}`"))
            }
        }
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return cur.fail("not a binary PGM/PPM header (expected P5 or P6)"),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        cur.pos = maxval_at;
        cur.skip_separators();
        return cur.fail(format!("unsupported maxval {maxval} (only 255)"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return cur.fail("expected one whitespace byte after maxval"),
    }
    let need = width * height * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        cur.pos = bytes.len();
        return cur.fail(format!("truncated payload: {} of {need} bytes", payload.len()));
    }
    let data = payload[..need].iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(height, width, channels, data)
}

pub fn encode(image: &Image) -> Vec<u8> {
    let magic = if image.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

/// `round(v · 255)`; values are already in `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v * 255.0).round() as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CsdError::io(path, e))?;
    decode(&bytes, path)
}

pub fn save_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(image)).map_err(|e| CsdError::io(path, e))
}
