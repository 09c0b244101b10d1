//! 8-bit raster images with an optional validity mask, plus a float grayscale
//! companion used by the detectors.

use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<u8>,
    pub mask: Option<Vec<bool>>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(
                "image dimensions must be positive".into(),
            ));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "unsupported channel count {channels}"
            )));
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
            mask: None,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Result<Self> {
        let mut img = RasterImage::new(width, height, channels)?;
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        Ok(img)
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[y * self.width + x])
    }

    /// Bilinear sample of channel `c` at continuous pixel coordinates with
    /// clamp-to-edge; pixel centers sit at integer coordinates.
    pub fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let v00 = self.get(x0, y0, c) as f64;
        let v10 = self.get(x1, y0, c) as f64;
        let v01 = self.get(x0, y1, c) as f64;
        let v11 = self.get(x1, y1, c) as f64;
        let top = v00 + (v10 - v00) * fx;
        let bottom = v01 + (v11 - v01) * fx;
        top + (bottom - top) * fy
    }

    pub fn to_gray(&self) -> GrayImage {
        let data = match self.channels {
            1 => self.data.iter().map(|&v| v as f32).collect(),
            _ => self
                .data
                .chunks_exact(self.channels)
                .map(|px| 0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32)
                .collect(),
        };
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Single-channel copy (luma for RGB inputs).
    pub fn to_luma8(&self) -> RasterImage {
        if self.channels == 1 {
            return self.clone();
        }
        let g = self.to_gray();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data: g
                .data
                .iter()
                .map(|&v| v.round().clamp(0.0, 255.0) as u8)
                .collect(),
            mask: self.mask.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        Ok(Self::from_dynamic(img))
    }

    pub fn from_dynamic(img: DynamicImage) -> Self {
        match img {
            DynamicImage::ImageLuma8(g) => RasterImage {
                width: g.width() as usize,
                height: g.height() as usize,
                channels: 1,
                data: g.into_raw(),
                mask: None,
            },
            other => {
                let rgb = other.to_rgb8();
                RasterImage {
                    width: rgb.width() as usize,
                    height: rgb.height() as usize,
                    channels: 3,
                    data: rgb.into_raw(),
                    mask: None,
                }
            }
        }
    }

    /// Writes PNG or binary PPM depending on the extension (`.ppm`, `.pgm`, `.pnm`
    /// select PNM). Invalid pixels are written as stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        let format = match ext.as_str() {
            "ppm" | "pgm" | "pnm" => ImageFormat::Pnm,
            _ => ImageFormat::Png,
        };
        let (w, h) = (self.width as u32, self.height as u32);
        let dynamic = if self.channels == 1 && ext != "ppm" {
            DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(w, h, self.data.clone())
                    .ok_or_else(|| Error::Io("buffer size mismatch".into()))?,
            )
        } else {
            let rgb = if self.channels == 3 {
                self.data.clone()
            } else {
                self.data.iter().flat_map(|&v| [v, v, v]).collect()
            };
            DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(w, h, rgb)
                    .ok_or_else(|| Error::Io("buffer size mismatch".into()))?,
            )
        };
        dynamic.save_with_format(path, format)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Clamped integer access.
    pub fn at(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    /// Separable Gaussian blur with clamped borders; the kernel spans 3 sigma.
    pub fn gaussian_blur(&self, sigma: f64) -> GrayImage {
        let r = (3.0 * sigma).ceil().max(1.0) as isize;
        let mut k: Vec<f32> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
            .collect();
        let sum: f32 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= sum);
        let pass = |src: &GrayImage, horizontal: bool| {
            let mut out = vec![0f32; src.data.len()];
            for y in 0..src.height as isize {
                for x in 0..src.width as isize {
                    let mut acc = 0f32;
                    for (j, w) in k.iter().enumerate() {
                        let o = j as isize - r;
                        acc += w * if horizontal {
                            src.at(x + o, y)
                        } else {
                            src.at(x, y + o)
                        };
                    }
                    out[y as usize * src.width + x as usize] = acc;
                }
            }
            GrayImage {
                width: src.width,
                height: src.height,
                data: out,
            }
        };
        pass(&pass(self, true), false)
    }

    /// Sobel gradients scaled to intensity units per pixel, clamped at borders.
    pub fn sobel(&self) -> (Vec<f32>, Vec<f32>) {
        let mut gx = vec![0f32; self.data.len()];
        let mut gy = vec![0f32; self.data.len()];
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                let p = |dx: isize, dy: isize| self.at(x + dx, y + dy);
                let sx =
                    (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
                let sy =
                    (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
                let i = y as usize * self.width + x as usize;
                gx[i] = sx / 8.0;
                gy[i] = sy / 8.0;
            }
        }
        (gx, gy)
    }
}
