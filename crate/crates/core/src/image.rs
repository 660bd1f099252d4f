//! `ImageGrid`: an H x W x C real image, plus 16-bit lossless file I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nlos_tensor::{Array, Scalar};

use crate::error::{Error, Result};

/// Image with values nominally in `[0, 1]`, stored channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageGrid<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        }
    }

    /// From channel-planar data (`c * H * W + y * W + x`).
    pub fn from_planar(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clip01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ImageGrid<U> {
        ImageGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Channel-mean luma as a single-channel image.
    pub fn luma(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let inv = T::one() / T::from_usize_lossy(self.channels);
        let data = (0..n)
            .map(|i| (0..self.channels).map(|c| self.data[c * n + i]).sum::<T>() * inv)
            .collect();
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// `[1, C, H, W]` tensor view.
    pub fn to_array(&self) -> Array<T> {
        Array::from_vec(&[1, self.channels, self.height, self.width], self.data.clone())
            .expect("image tensor shape")
    }

    /// Stack images of identical size into `[N, C, H, W]`.
    pub fn stack(images: &[&ImageGrid<T>]) -> Result<Array<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero images".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if im.dims() != first.dims() {
                return Err(Error::Dimension(format!(
                    "stacking {:?} with {:?}",
                    first.dims(),
                    im.dims()
                )));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Array::from_vec(
            &[images.len(), first.channels, first.height, first.width],
            data,
        )?)
    }

    /// Sample `i` of an `[N, C, H, W]` tensor.
    pub fn from_array(a: &Array<T>, i: usize) -> Result<Self> {
        let [n, c, h, w] = a.dims4()?;
        if i >= n {
            return Err(Error::Dimension(format!("sample {i} of batch {n}")));
        }
        let per = c * h * w;
        Self::from_planar(h, w, c, a.data()[i * per..(i + 1) * per].to_vec())
    }

    /// Area-average / nearest resampling to a new size.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        Self::from_fn(height, width, self.channels, |y, x, c| {
            // Box filter over the source footprint of the target pixel.
            let y0 = y * self.height / height;
            let y1 = ((y + 1) * self.height).div_ceil(height).max(y0 + 1);
            let x0 = x * self.width / width;
            let x1 = ((x + 1) * self.width).div_ceil(width).max(x0 + 1);
            let mut acc = T::zero();
            for sy in y0..y1.min(self.height) {
                for sx in x0..x1.min(self.width) {
                    acc += self.get(sy, sx, c);
                }
            }
            acc / T::from_usize_lossy((y1.min(self.height) - y0) * (x1.min(self.width) - x0))
        })
    }

    /// Write as a 16-bit PNG (grayscale or RGB). Values are clipped to `[0, 1]`.
    pub fn write_png16(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::Format(format!("cannot write {c}-channel image"))),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Sixteen);
        let img_err = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(img_err)?;
        let n = self.height * self.width;
        let mut bytes = Vec::with_capacity(n * self.channels * 2);
        for i in 0..n {
            for c in 0..self.channels {
                let v = self.data[c * n + i].as_f64().clamp(0.0, 1.0);
                let q = (v * 65535.0).round() as u16;
                bytes.extend_from_slice(&q.to_be_bytes());
            }
        }
        writer.write_image_data(&bytes).map_err(img_err)?;
        writer.finish().map_err(img_err)
    }

    /// Read an 8- or 16-bit PNG; alpha is dropped, values scaled to `[0, 1]`.
    pub fn read_png(path: &Path) -> Result<Self> {
        let img_err = |msg: String| Error::Image {
            path: path.to_path_buf(),
            msg,
        };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND);
        let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| img_err("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let (src_channels, keep) = match info.color_type {
            png::ColorType::Grayscale => (1, 1),
            png::ColorType::GrayscaleAlpha => (2, 1),
            png::ColorType::Rgb => (3, 3),
            png::ColorType::Rgba => (4, 3),
            png::ColorType::Indexed => return Err(img_err("unexpanded palette image".into())),
        };
        let sample = |i: usize| -> f64 {
            match info.bit_depth {
                png::BitDepth::Sixteen => u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64 / 65535.0,
                png::BitDepth::Eight => buf[i] as f64 / 255.0,
                _ => buf[i] as f64 / ((1u32 << info.bit_depth as u32) - 1) as f64,
            }
        };
        let mut data = vec![T::zero(); h * w * keep];
        for p in 0..h * w {
            for c in 0..keep {
                data[c * h * w + p] = T::lit(sample(p * src_channels + c));
            }
        }
        Self::from_planar(h, w, keep, data)
    }

    /// Replicate a single channel to `channels`, or average to one channel.
    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (1, c) => {
                let mut data = Vec::with_capacity(self.data.len() * c);
                for _ in 0..c {
                    data.extend_from_slice(&self.data);
                }
                Self::from_planar(self.height, self.width, c, data)
            }
            (_, 1) => Ok(self.luma()),
            (a, b) => Err(Error::Dimension(format!("cannot convert {a} channels to {b}"))),
        }
    }
}
