//! Binary PGM/PPM codec and the image transforms used by the pipelines.

use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Row-major image with values in `[0, 1]` and channels interleaved per
/// pixel (`RGBRGB...` for colour).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Domain(format!("image dims {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Unsupported(format!("{channels}-channel image")));
        }
        if pixels.len() != width * height * channels {
            return shape_err(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                pixels.len()
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            pixels: vec![value.clamp(0.0, 1.0); width * height * channels],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// One channel as a contiguous plane.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        self.pixels
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Replicate a grey image to three channels; colour images pass through.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            pixels: self.pixels.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }
}

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

struct HeaderReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    /// Skip whitespace and `#` comments, then read one decimal field.
    fn number(&mut self, what: &str) -> Result<u32> {
        loop {
            match self.buf.get(self.pos) {
                Some(&b) if is_space(b) => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.buf.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format(format!("truncated header before {what}"))),
            }
        }
        let start = self.pos;
        let mut v: u32 = 0;
        while let Some(&b) = self.buf.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            v = v
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as u32))
                .ok_or_else(|| Error::Format(format!("{what} too large")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Format(format!("expected decimal {what}")));
        }
        Ok(v)
    }
}

/// Decode a binary PGM (`P5`) or PPM (`P6`) with maxval 255.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(m) => {
            return Err(Error::Format(format!(
                "unsupported magic {:?}",
                String::from_utf8_lossy(m)
            )))
        }
        None => return Err(Error::Format("missing magic".into())),
    };
    let mut r = HeaderReader { buf: bytes, pos: 2 };
    if !bytes.get(2).copied().is_some_and(is_space) {
        return Err(Error::Format("magic must be followed by whitespace".into()));
    }
    let width = r.number("width")? as usize;
    let height = r.number("height")? as usize;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("zero image dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("maxval {maxval} out of range")));
    }
    if maxval != 255 {
        return Err(Error::Unsupported(format!("maxval {maxval} (only 255)")));
    }
    match bytes.get(r.pos) {
        Some(&b) if is_space(b) => r.pos += 1,
        _ => return Err(Error::Format("missing whitespace after maxval".into())),
    }
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| Error::Format("image size overflow".into()))?;
    let payload = &bytes[r.pos..];
    if payload.len() < n {
        return Err(Error::Format(format!(
            "truncated pixel data: {} of {n} bytes",
            payload.len()
        )));
    }
    Ok(Image {
        width,
        height,
        channels,
        pixels: payload[..n].iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

/// Quantise to 8 bits with `round(v·255)`, halves rounding up.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

/// Encode as `P5` (grey) or `P6` (colour).
pub fn encode_image(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| quantize(v)));
    out
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| e.context(path.display().to_string()))
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_image(img)).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling of one plane with half-pixel centres: output pixel
/// `i` samples source coordinate `(i + 0.5)·in/out − 0.5`, clamped to the
/// image.
pub fn resize_plane(src: &[f32], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    let taps = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let xs = taps(out_w, w);
    let ys = taps(out_h, h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Domain(format!("resize target {out_w}x{out_h}")));
    }
    if img.width == out_w && img.height == out_h {
        return Ok(img.clone());
    }
    let planes: Vec<Vec<f32>> = (0..img.channels)
        .map(|c| resize_plane(&img.plane(c), img.width, img.height, out_w, out_h))
        .collect();
    let mut pixels = Vec::with_capacity(out_w * out_h * img.channels);
    for i in 0..out_w * out_h {
        for p in &planes {
            pixels.push(p[i].clamp(0.0, 1.0));
        }
    }
    Ok(Image {
        width: out_w,
        height: out_h,
        channels: img.channels,
        pixels,
    })
}

pub const DEFAULT_MEAN: f32 = 0.5;
pub const DEFAULT_STD: f32 = 0.5;

/// `(v − mean)/std` per value, laid out as a `[C,H,W]` tensor.
pub fn normalize(img: &Image, mean: f32, std: f32) -> Result<Tensor<f32>> {
    if !(std > 0.0) {
        return Err(Error::Domain(format!("normalisation std {std} must be > 0")));
    }
    let mut data = Vec::with_capacity(img.pixels.len());
    for c in 0..img.channels {
        data.extend(img.plane(c).into_iter().map(|v| (v - mean) / std));
    }
    Tensor::new(vec![img.channels, img.height, img.width], data)
}

/// Inverse of [`normalize`] for a `[C,H,W]` tensor; results are clamped to
/// `[0, 1]`.
pub fn denormalize(t: &Tensor<f32>, mean: f32, std: f32) -> Result<Image> {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        s => return shape_err(format!("denormalize expects [C,H,W], got {s:?}")),
    };
    let d = t.data();
    let mut pixels = Vec::with_capacity(d.len());
    for i in 0..h * w {
        for ch in 0..c {
            pixels.push((d[ch * h * w + i] * std + mean).clamp(0.0, 1.0));
        }
    }
    Image::new(w, h, c, pixels)
}

/// ITU-R BT.601 luma: `0.299 R + 0.587 G + 0.114 B`. Grey images pass through.
pub fn rgb_to_luma(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    Image {
        width: img.width,
        height: img.height,
        channels: 1,
        pixels: img
            .pixels
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect(),
    }
}
