//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit raster with one (gray) or three (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        Raster {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Raster {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg);
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
        }
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            other => return Err(bad(&format!("unsupported magic {other:?}"))),
        };
        let num = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(&format!("bad {what} {s:?}")))
        };
        let width = num(fields[1], "width")?;
        let height = num(fields[2], "height")?;
        if num(fields[3], "maxval")? != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        if width == 0 || height == 0 {
            return Err(bad("empty image"));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() {
            return Err(bad("missing raster"));
        }
        pos += 1;
        let need = width * height * channels;
        let raster = &bytes[pos..];
        if raster.len() < need {
            return Err(bad(&format!(
                "truncated raster: {} of {need} bytes",
                raster.len()
            )));
        }
        if raster.len() > need {
            return Err(bad("trailing bytes after raster"));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data: raster.to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn read_gray(path: &Path) -> Result<Self> {
        let r = Self::read(path)?;
        if r.channels != 1 {
            return Err(Error::format(path, "expected a grayscale (P5) image"));
        }
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

/// `round(v·255)` with clamping to `[0,255]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}
