//! Image decoding, field-of-view detection and network-input preparation.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixels brighter than this in any channel count as fundus foreground.
pub const DEFAULT_BRIGHTNESS_THRESHOLD: u8 = 20;

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

/// Axis-aligned box; `x1` and `y1` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FovBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl FovBox {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != 3 * width * height {
            return Err(Error::Input(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.repeat(width * height),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Decodes PPM (P6) or PNG bytes; the format is sniffed from the data.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Decode(e.to_string()))?;
        Self::from_rgb(img.to_rgb8())
    }

    pub fn decode_as(bytes: &[u8], format: ImageFormat) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, format).map_err(|e| Error::Decode(e.to_string()))?;
        Self::from_rgb(img.to_rgb8())
    }

    fn from_rgb(img: RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Binary PPM: `P6\n<w> <h>\n255\n` followed by the raw RGB bytes.
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Decode(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    fn check_box(&self, b: &FovBox) -> Result<()> {
        if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > self.width || b.y1 > self.height {
            return Err(Error::InvalidBox {
                x0: b.x0,
                y0: b.y0,
                x1: b.x1,
                y1: b.y1,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    pub fn crop(&self, b: &FovBox) -> Result<Self> {
        self.check_box(b)?;
        let mut pixels = Vec::with_capacity(3 * b.width() * b.height());
        for y in b.y0..b.y1 {
            let row = 3 * (y * self.width);
            pixels.extend_from_slice(&self.pixels[row + 3 * b.x0..row + 3 * b.x1]);
        }
        Self::new(b.width(), b.height(), pixels)
    }
}

/// Tightest box around every pixel with `max(R, G, B) > threshold`.
pub fn detect_fov(image: &RawImage, threshold: u8) -> Result<FovBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (y, row) in image.pixels.chunks(3 * image.width).enumerate() {
        for (x, px) in row.chunks_exact(3).enumerate() {
            if px[0].max(px[1]).max(px[2]) > threshold {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::AllDark { threshold });
    }
    Ok(FovBox { x0, y0, x1, y1 })
}

/// Crops to `b`, resamples bilinearly to `side`×`side` and maps each channel
/// value `v` to `v/255 − 0.5`. Output shape `[1, 3, side, side]`.
pub fn crop_resize<T: Scalar>(image: &RawImage, b: &FovBox, side: usize) -> Result<Tensor<T>> {
    image.check_box(b)?;
    if side == 0 {
        return Err(Error::Config("output side must be positive".into()));
    }
    let plane = side * side;
    let mut out = vec![T::zero(); 3 * plane];
    let sx = b.width() as f64 / side as f64;
    let sy = b.height() as f64 / side as f64;
    // Pixel-centre aligned sample positions, clamped to the box.
    let taps = |o: usize, scale: f64, lo: usize, n: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i = p.floor() as usize;
        let j = (i + 1).min(n - 1);
        (lo + i, lo + j, p - i as f64)
    };
    let xs: Vec<_> = (0..side).map(|o| taps(o, sx, b.x0, b.width())).collect();
    for oy in 0..side {
        let (ya, yb, fy) = taps(oy, sy, b.y0, b.height());
        for (ox, &(xa, xb, fx)) in xs.iter().enumerate() {
            let (p00, p01) = (image.pixel(xa, ya), image.pixel(xb, ya));
            let (p10, p11) = (image.pixel(xa, yb), image.pixel(xb, yb));
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                let bot = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                let v = top * (1.0 - fy) + bot * fy;
                out[c * plane + oy * side + ox] = T::lit(v / 255.0 - 0.5);
            }
        }
    }
    Tensor::new([1, 3, side, side], out)
}

/// `detect_fov` with the default threshold followed by `crop_resize`.
pub fn prepare<T: Scalar>(image: &RawImage, side: usize) -> Result<Tensor<T>> {
    let b = detect_fov(image, DEFAULT_BRIGHTNESS_THRESHOLD)?;
    crop_resize(image, &b, side)
}
