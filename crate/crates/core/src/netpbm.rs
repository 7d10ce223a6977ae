//! Binary netpbm (P5 greyscale, P6 RGB), 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    Pgm,
    Ppm,
}

#[derive(Clone, Debug)]
pub struct PnmImage {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    /// Interleaved samples, one per pixel (PGM) or three (PPM).
    pub samples: Vec<u8>,
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

struct HeaderReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.data.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.data.get(self.pos) {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.data.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| format_err(start, format!("{what} out of range")))
    }
}

pub fn decode(data: &[u8]) -> Result<PnmImage> {
    let kind = match data.get(..2) {
        Some(b"P5") => PnmKind::Pgm,
        Some(b"P6") => PnmKind::Ppm,
        Some(_) => return Err(format_err(0, "unsupported magic (expected P5 or P6)")),
        None => return Err(format_err(data.len(), "truncated header")),
    };
    let mut r = HeaderReader { data, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval_at = r.pos;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(format_err(maxval_at, format!("maxval {maxval} unsupported (need 255)")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(2, "zero image dimension"));
    }
    match data.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(format_err(r.pos, "expected single whitespace before raster")),
    }
    let channels = if kind == PnmKind::Pgm { 1 } else { 3 };
    let need = width * height * channels;
    let raster = &data[r.pos..];
    if raster.len() < need {
        return Err(format_err(
            data.len(),
            format!("truncated raster: {} of {need} bytes", raster.len()),
        ));
    }
    Ok(PnmImage {
        kind,
        width,
        height,
        samples: raster[..need].to_vec(),
    })
}

pub fn encode(img: &PnmImage) -> Vec<u8> {
    let magic = match img.kind {
        PnmKind::Pgm => "P5",
        PnmKind::Ppm => "P6",
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.samples);
    out
}

/// BT.601 luma in `[0, 1]`.
pub fn luma(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
}

impl PnmImage {
    pub fn to_gray(&self) -> Tensor {
        let data = match self.kind {
            PnmKind::Pgm => self.samples.iter().map(|&v| v as f64 / 255.0).collect(),
            PnmKind::Ppm => self
                .samples
                .chunks_exact(3)
                .map(|p| luma(p[0], p[1], p[2]))
                .collect(),
        };
        Tensor::new(&[self.height, self.width], data).unwrap()
    }

    /// `3×H×W` in `[0, 1]`; greyscale is replicated across channels.
    pub fn to_rgb(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                let s = match self.kind {
                    PnmKind::Pgm => self.samples[p],
                    PnmKind::Ppm => self.samples[3 * p + c],
                };
                data[c * hw + p] = s as f64 / 255.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], data).unwrap()
    }

    /// Quantises a `3×H×W` tensor in `[0, 1]` to a PPM.
    pub fn from_rgb(t: &Tensor) -> Result<Self> {
        let [3, h, w] = t.shape() else {
            return Err(Error::dim("ppm", t.shape(), &[3, 0, 0]));
        };
        let (h, w) = (*h, *w);
        let hw = h * w;
        let mut samples = Vec::with_capacity(3 * hw);
        for p in 0..hw {
            for c in 0..3 {
                samples.push(quantize(t.data()[c * hw + p]));
            }
        }
        Ok(Self {
            kind: PnmKind::Ppm,
            width: w,
            height: h,
            samples,
        })
    }

    pub fn from_gray_bytes(width: usize, height: usize, samples: Vec<u8>) -> Self {
        assert_eq!(samples.len(), width * height);
        Self {
            kind: PnmKind::Pgm,
            width,
            height,
            samples,
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read(path: impl AsRef<Path>) -> Result<PnmImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write(path: impl AsRef<Path>, img: &PnmImage) -> Result<()> {
    let path = path.as_ref();
    crate::fsio::write_atomic(path, &encode(img))
}

/// Reads a P5/P6 file as an `H×W` greyscale tensor in `[0, 1]`.
pub fn load_image_gray(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(read(path)?.to_gray())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_scaling() {
        let img = decode(b"P5\n2 2\n255\n\x00\xff\xff\x00").unwrap();
        assert_eq!(img.to_gray().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn p6_luma() {
        let white = decode(b"P6 1 1 255 \xff\xff\xff").unwrap().to_gray();
        assert!((white.data()[0] - 1.0).abs() < 1e-12);
        let red = decode(b"P6 1 1 255 \xff\x00\x00").unwrap().to_gray();
        assert!((red.data()[0] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn comments_in_header() {
        let img = decode(b"P5 # made by hand\n1 # width done\n1\n255\n\x80").unwrap();
        assert_eq!(img.samples, vec![0x80]);
    }

    #[test]
    fn errors_name_offsets() {
        assert!(matches!(decode(b"P3 1 1 255 0"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode(b"P5 1 1 65535 \x00\x00"), Err(Error::Format { offset: 6, .. })));
        let err = decode(b"P5 2 2 255 \x00\x00\x00").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 14, .. }), "{err}");
    }

    #[test]
    fn encode_decode() {
        let img = PnmImage::from_gray_bytes(3, 1, vec![1, 2, 3]);
        let back = decode(&encode(&img)).unwrap();
        assert_eq!(back.samples, vec![1, 2, 3]);
        assert_eq!((back.width, back.height), (3, 1));
    }
}
