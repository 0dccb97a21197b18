use std::io::Cursor;

use crate::error::{Error, Result};
use crate::geo::TileKey;

/// A decoded RGB image with channel values in `[0, 1]`.
///
/// Pixels are stored channel-first (`3 × H × W`) because that is the layout
/// the convolution layers consume.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub key: TileKey,
}

pub const CHANNELS: usize = 3;

impl ImageTile {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, key: TileKey) -> Result<Self> {
        if pixels.len() != CHANNELS * height * width {
            return Err(Error::domain(format!(
                "pixel buffer of {} values does not match 3×{height}×{width}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self { height, width, pixels, key })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3], key: TileKey) -> Self {
        let mut pixels = vec![0.0; CHANNELS * height * width];
        for (c, v) in rgb.iter().enumerate() {
            pixels[c * height * width..(c + 1) * height * width].fill(*v);
        }
        Self { height, width, pixels, key }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.pixels[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    /// From interleaved 8-bit RGB.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8], key: TileKey) -> Result<Self> {
        if rgb.len() != CHANNELS * width * height {
            return Err(Error::domain("rgb buffer size mismatch"));
        }
        let mut pixels = vec![0.0f32; rgb.len()];
        let plane = width * height;
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                pixels[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Ok(Self { height, width, pixels, key })
    }

    /// Interleaved 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = vec![0u8; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                out[i * 3 + c] = (self.pixels[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }

    pub fn decode_png(bytes: &[u8], key: TileKey) -> Result<Self> {
        let (w, h, rgb) = decode_png_rgb8(bytes)?;
        Self::from_rgb8(w, h, &rgb, key)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png_rgb8(self.width, self.height, &self.to_rgb8())
    }

    /// Resample to `size × size`. Shrinking averages source areas; enlarging
    /// (or equal size) uses bilinear interpolation on pixel centres.
    pub fn resized(&self, size: usize) -> ImageTile {
        if size == self.width && size == self.height {
            return self.clone();
        }
        let pixels = if size < self.width && size < self.height {
            resize_area(self, size)
        } else {
            resize_bilinear(&self.pixels, self.height, self.width, size, size)
        };
        ImageTile { height: size, width: size, pixels, key: self.key.clone() }
    }

    /// Mean value per channel.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for (c, v) in m.iter_mut().enumerate() {
            *v = self.channel(c).iter().map(|&x| x as f64).sum::<f64>() / (self.width * self.height) as f64;
        }
        m
    }
}

/// Bilinear resampling of a channel-first buffer, sampling at pixel centres.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; CHANNELS * out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = (fy - y0 as f64) as f32;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = (fx - x0 as f64) as f32;
            for c in 0..CHANNELS {
                let base = c * h * w;
                let a = src[base + y0 * w + x0];
                let b = src[base + y0 * w + x1];
                let cc = src[base + y1 * w + x0];
                let d = src[base + y1 * w + x1];
                let top = a + (b - a) * tx;
                let bot = cc + (d - cc) * tx;
                out[(c * out_h + oy) * out_w + ox] = (top + (bot - top) * ty).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn resize_area(tile: &ImageTile, size: usize) -> Vec<f32> {
    let (h, w) = (tile.height, tile.width);
    let mut out = vec![0.0f32; CHANNELS * size * size];
    let sy = h as f64 / size as f64;
    let sx = w as f64 / size as f64;
    for oy in 0..size {
        let y_lo = oy as f64 * sy;
        let y_hi = y_lo + sy;
        for ox in 0..size {
            let x_lo = ox as f64 * sx;
            let x_hi = x_lo + sx;
            let mut acc = [0.0f64; 3];
            let mut area = 0.0;
            let mut y = y_lo.floor() as usize;
            while (y as f64) < y_hi && y < h {
                let wy = (y_hi.min(y as f64 + 1.0) - y_lo.max(y as f64)).max(0.0);
                let mut x = x_lo.floor() as usize;
                while (x as f64) < x_hi && x < w {
                    let wx = (x_hi.min(x as f64 + 1.0) - x_lo.max(x as f64)).max(0.0);
                    let wgt = wx * wy;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += wgt * tile.at(c, y, x) as f64;
                    }
                    area += wgt;
                    x += 1;
                }
                y += 1;
            }
            for c in 0..CHANNELS {
                out[(c * size + oy) * size + ox] = ((acc[c] / area) as f32).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Decode a PNG into interleaved 8-bit RGB. Grey and alpha variants are
/// converted; anything that is not a PNG is a corrupt response.
pub fn decode_png_rgb8(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::CorruptResponse(format!("not a PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::CorruptResponse("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::CorruptResponse(format!("PNG frame: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => data.to_vec(),
        png::ColorType::Rgba => data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => data.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => data.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(Error::CorruptResponse(format!("unsupported PNG colour type {other:?}"))),
    };
    Ok((w, h, rgb))
}

pub fn encode_png_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    encode_png(width, height, rgb, png::ColorType::Rgb)
}

pub fn encode_png_gray8(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    encode_png(width, height, gray, png::ColorType::Grayscale)
}

fn encode_png(width: usize, height: usize, data: &[u8], color: png::ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        w.write_image_data(data).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}
