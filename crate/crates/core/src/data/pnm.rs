//! Binary PGM (P5) and PPM (P6) images.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A decoded PNM raster, samples interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("expected {what} in header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| format!("{what} out of range"))
    }
}

impl PnmImage {
    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err("not a binary PGM/PPM file (expected P5 or P6 magic)".into()),
        };
        let mut h = Header { bytes, pos: 2 };
        let width = h.number("width")?;
        let height = h.number("height")?;
        let maxval = h.number("maxval")?;
        if width == 0 || height == 0 {
            return Err(format!("degenerate size {width}x{height}"));
        }
        if !(1..=65535).contains(&maxval) {
            return Err(format!("maxval {maxval} outside 1..=65535"));
        }
        if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err("missing whitespace after maxval".into());
        }
        let body = &bytes[h.pos + 1..];
        let count = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or("image too large")?;
        let wide = maxval > 255;
        let need = if wide { count * 2 } else { count };
        if body.len() < need {
            return Err(format!("truncated pixel data: {} of {need} bytes", body.len()));
        }
        let samples: Vec<u16> = if wide {
            body[..need].chunks_exact(2).map(|p| u16::from_be_bytes([p[0], p[1]])).collect()
        } else {
            body[..need].iter().map(|&b| u16::from(b)).collect()
        };
        if let Some(bad) = samples.iter().find(|&&s| usize::from(s) > maxval) {
            return Err(format!("sample {bad} exceeds maxval {maxval}"));
        }
        Ok(Self { width, height, channels, maxval: maxval as u16, samples })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            out.extend(self.samples.iter().flat_map(|s| s.to_be_bytes()));
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    /// `[3,H,W]` in `[0,1]`; grayscale is replicated across channels.
    pub fn to_tensor(&self) -> Tensor {
        let scale = f64::from(self.maxval);
        let (w, c) = (self.width, self.channels);
        Tensor::from_fn([3, self.height, w], |i| {
            let (ch, y, x) = (i / (self.height * w), (i / w) % self.height, i % w);
            let src = if c == 1 { 0 } else { ch };
            f64::from(self.samples[(y * w + x) * c + src]) / scale
        })
    }

    /// 8-bit PPM of a `[3,H,W]` tensor, values rounded from `[0,1]`.
    pub fn from_tensor(pixels: &Tensor) -> Result<Self> {
        let &[3, height, width] = pixels.shape() else {
            return Err(Error::Contract(format!("expected [3,H,W] pixels, got {:?}", pixels.shape())));
        };
        let plane = height * width;
        let d = pixels.data();
        let samples = (0..plane * 3)
            .map(|i| {
                let (p, ch) = (i / 3, i % 3);
                (d[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u16
            })
            .collect();
        Ok(Self { width, height, channels: 3, maxval: 255, samples })
    }
}
