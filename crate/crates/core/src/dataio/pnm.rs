//! Binary netpbm images: P6 (RGB) and P5 (grayscale), maxval 255.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// 8-bit RGB image, row-major `[r, g, b]` triples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != 3 * width * height {
            return Err(Error::dim(
                "rgb_image",
                format!("{width}x{height} image with {} bytes", pixels.len()),
            ));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// `[3, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            self.pixels[3 * p + c] as f64 / 255.0
        })
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); values are clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[3, h, w] = t.shape() else {
            return Err(Error::dim("rgb_image", format!("expected [3, H, W], got {:?}", t.shape())));
        };
        let mut pixels = vec![0u8; 3 * h * w];
        for c in 0..3 {
            for p in 0..h * w {
                pixels[3 * p + c] = (t.data()[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Self::new(w, h, pixels)
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let err = |offset: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        detail,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(err(
            0,
            format!("expected magic {:?}, found {found:?}", std::str::from_utf8(magic).unwrap()),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and '#' comments
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
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(err(start, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        fields[k] = text.parse().map_err(|_| err(start, format!("{name} {text} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected a single whitespace byte after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err(2, format!("degenerate size {width}x{height}")));
    }
    if maxval != 255 {
        return Err(err(pos - 1, format!("maxval {maxval} unsupported (only 255)")));
    }
    Ok(Header {
        width,
        height,
        data_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let have = bytes.len() - h.data_start;
    if have < need {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len(),
            detail: format!("truncated pixel data: {have} of {need} bytes"),
        });
    }
    if have > need {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: h.data_start + need,
            detail: format!("{} trailing bytes after pixel data", have - need),
        });
    }
    Ok(&bytes[h.data_start..])
}

/// Decodes a P6 image; `path` is only used in error messages.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6", path)?;
    let data = payload(bytes, &h, 3, path)?;
    RgbImage::new(h.width, h.height, data.to_vec())
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let h = parse_header(bytes, b"P5", path)?;
    let data = payload(bytes, &h, 1, path)?;
    Ok(GrayImage {
        width: h.width,
        height: h.height,
        pixels: data.to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Placeholder path for in-memory decoding.
pub fn memory_path() -> PathBuf {
    PathBuf::from("<memory>")
}
