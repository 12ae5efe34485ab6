//! Floating-point image container, sampling, color conversion and PNG I/O.
//!
//! Pixel coordinates are `(u, v) = (column, row)` with the origin at the center
//! of the top-left pixel. Samples are stored row-major, channels interleaved.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParam(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimMismatch(format!(
                "{}x{}x{} image needs {} samples, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        assert!(channels == 1 || channels == 3);
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        assert!(channels == 1 || channels == 3);
        let mut data = Vec::with_capacity(width * height * channels);
        for v in 0..height {
            for u in 0..width {
                for c in 0..channels {
                    data.push(f(u, v, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn in_bounds(&self, u: i64, v: i64) -> bool {
        u >= 0 && v >= 0 && (u as usize) < self.width && (v as usize) < self.height
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f32] {
        let i = (v * self.width + u) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f32] {
        let i = (v * self.width + u) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn get(&self, u: usize, v: usize, c: usize) -> f32 {
        self.data[(v * self.width + u) * self.channels + c]
    }

    pub fn clamp01(&mut self) {
        for x in &mut self.data {
            *x = x.clamp(0.0, 1.0);
        }
    }

    /// Bilinear interpolation at a subpixel location. Neighbors outside the
    /// image contribute the fill value 0.
    pub fn bilinear_sample(&self, u: f64, v: f64, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.channels);
        out.iter_mut().for_each(|o| *o = 0.0);
        if !u.is_finite() || !v.is_finite() {
            return;
        }
        let u0 = u.floor();
        let v0 = v.floor();
        let fu = (u - u0) as f32;
        let fv = (v - v0) as f32;
        let (u0, v0) = (u0 as i64, v0 as i64);
        let taps = [
            (u0, v0, (1.0 - fu) * (1.0 - fv)),
            (u0 + 1, v0, fu * (1.0 - fv)),
            (u0, v0 + 1, (1.0 - fu) * fv),
            (u0 + 1, v0 + 1, fu * fv),
        ];
        for (x, y, w) in taps {
            if w == 0.0 || !self.in_bounds(x, y) {
                continue;
            }
            let p = self.pixel(x as usize, y as usize);
            for (o, &s) in out.iter_mut().zip(p) {
                *o += w * s;
            }
        }
    }

    /// Per-pixel luma `0.299 R + 0.587 G + 0.114 B` as a one-channel image.
    pub fn luma(&self) -> Result<Image> {
        self.require_rgb()?;
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .collect();
        Image::new(self.width, self.height, 1, data)
    }

    pub(crate) fn require_rgb(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::ChannelMismatch {
                expected: 3,
                actual: self.channels,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&x| to_byte(x)).collect()
    }

    /// Interleaved RGBA bytes, replicating gray images across RGB.
    pub fn to_rgba(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.width * self.height * 4);
        for p in self.data.chunks_exact(self.channels) {
            if self.channels == 1 {
                let b = to_byte(p[0]);
                out.extend_from_slice(&[b, b, b, 255]);
            } else {
                out.extend_from_slice(&[to_byte(p[0]), to_byte(p[1]), to_byte(p[2]), 255]);
            }
        }
        out
    }
}

pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Map `[0,1]` to a byte; 1.0 maps to 255.
pub fn to_byte(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|message| Error::Decode {
        path: path.to_path_buf(),
        message,
    })
}

pub fn decode_png(bytes: &[u8]) -> Result<Image, String> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        // alpha is dropped, deeper formats are reduced to 8 bits
        other => (3, other.to_rgb8().into_raw()),
    };
    let data = raw.into_iter().map(|b| b as f32 / 255.0).collect();
    Image::new(w, h, channels, data).map_err(|e| e.to_string())
}

pub fn encode_png(img: &Image) -> Vec<u8> {
    let bytes = img.to_bytes();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = if img.channels == 1 {
        DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).unwrap())
    } else {
        DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).unwrap())
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(img)).map_err(|e| Error::io(path, e))
}

pub fn rgb_to_hsv(img: &Image) -> Result<Image> {
    img.require_rgb()?;
    let mut out = img.clone();
    for p in out.data.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv_pixel(p[0], p[1], p[2]);
        p.copy_from_slice(&[h, s, v]);
    }
    Ok(out)
}

pub fn hsv_to_rgb(img: &Image) -> Result<Image> {
    img.require_rgb()?;
    let mut out = img.clone();
    for p in out.data.chunks_exact_mut(3) {
        let (r, g, b) = hsv_to_rgb_pixel(p[0], p[1], p[2]);
        p.copy_from_slice(&[r, g, b]);
    }
    Ok(out)
}

pub fn rgb_to_hsv_pixel(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    ((h / 6.0).rem_euclid(1.0), s, v)
}

pub fn hsv_to_rgb_pixel(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
