//! Row-major interleaved pixel buffers.
//!
//! `Raster<u8>` holds 8-bit images and label masks, `Raster<f32>` holds
//! normalized images (values nominally in `[0, 1]`) and real-valued planes.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<T>,
}

impl<T: Copy + Default> Raster<T> {
    pub fn new(width: u32, height: u32, channels: u8) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![T::default(); width as usize * height as usize * channels as usize],
        }
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: T) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![value; width as usize * height as usize * channels as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, channels: u8, data: Vec<T>) -> Result<Self> {
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        if channels == 0 {
            return Err(Error::ShapeMismatch("zero channels".into()));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, channels: u8, mut f: impl FnMut(u32, u32, u8) -> T) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * channels as usize);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Raster {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    fn offset(&self, x: u32, y: u32, c: u8) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u8) -> T {
        self.data[self.offset(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: u8, v: T) {
        let o = self.offset(x, y, c);
        self.data[o] = v;
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[T] {
        let o = self.offset(x, y, 0);
        &self.data[o..o + self.channels as usize]
    }

    /// Copies out a `w`×`h` window with its top-left at `(x, y)`.
    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> Result<Self> {
        if x as u64 + w as u64 > self.width as u64 || y as u64 + h as u64 > self.height as u64 {
            return Err(Error::OutOfBounds {
                x: x as i64,
                y: y as i64,
                w: w as u64,
                h: h as u64,
                width: self.width as u64,
                height: self.height as u64,
            });
        }
        let c = self.channels as usize;
        let mut data = Vec::with_capacity(w as usize * h as usize * c);
        for row in y..y + h {
            let start = self.offset(x, row, 0);
            data.extend_from_slice(&self.data[start..start + w as usize * c]);
        }
        Ok(Raster {
            width: w,
            height: h,
            channels: self.channels,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let (w, h) = (self.width, self.height);
        Raster::from_fn(w, h, self.channels, |x, y, c| self.get(w - 1 - x, y, c))
    }

    pub fn flip_vertical(&self) -> Self {
        let (w, h) = (self.width, self.height);
        Raster::from_fn(w, h, self.channels, |x, y, c| self.get(x, h - 1 - y, c))
    }

    /// Channel-major (planar) copy of the buffer.
    pub fn to_planar(&self) -> Vec<T> {
        let c = self.channels as usize;
        let n = self.width as usize * self.height as usize;
        let mut out = vec![T::default(); n * c];
        for (i, px) in self.data.chunks_exact(c).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                out[ch * n + i] = *v;
            }
        }
        out
    }
}

impl Raster<u8> {
    pub fn to_normalized(&self) -> Raster<f32> {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    /// Sorted set of distinct values present in the buffer.
    pub fn value_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode(format!("{}: {other}", path.display())),
        })?;
        let (w, h) = (img.width(), img.height());
        match img {
            image::DynamicImage::ImageLuma8(buf) => Raster::from_vec(w, h, 1, buf.into_raw()),
            image::DynamicImage::ImageRgb8(buf) => Raster::from_vec(w, h, 3, buf.into_raw()),
            other => Raster::from_vec(w, h, 3, other.into_rgb8().into_raw()),
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::ChannelMismatch { expected: 3, actual: c }),
        };
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(encoder, &self.data, self.width, self.height, color)
            .map_err(|e| Error::Decode(e.to_string()))?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

impl Raster<f32> {
    /// Quantizes `[0, 1]` values to 8 bits with round-half-to-even.
    pub fn to_u8(&self) -> Raster<u8> {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| quantize(v)).collect(),
        }
    }
}

/// Reads only the header of an image file.
pub fn png_dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode(format!("{}: {other}", path.display())),
    })
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_length_is_checked() {
        assert!(Raster::<u8>::from_vec(2, 2, 3, vec![0; 12]).is_ok());
        assert!(Raster::<u8>::from_vec(2, 2, 3, vec![0; 11]).is_err());
    }

    #[test]
    fn crop_and_bounds() {
        let r = Raster::from_fn(4, 3, 1, |x, y, _| (y * 4 + x) as u8);
        let c = r.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[5, 6, 9, 10]);
        assert!(matches!(r.crop(3, 0, 2, 1), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn quantize_round_trip() {
        for v in 0..=255u8 {
            assert_eq!(quantize(v as f32 / 255.0), v);
        }
        // 0.5 * 255 = 127.5 rounds to even
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(2.0), 255);
    }

    #[test]
    fn planar_layout() {
        let r = Raster::from_vec(2, 1, 3, vec![1u8, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(r.to_planar(), vec![1, 4, 2, 5, 3, 6]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Raster::from_fn(5, 3, 3, |x, y, c| (x * 40 + y * 7 + c as u32) as u8);
        let p = dir.path().join("a.png");
        rgb.save_png(&p).unwrap();
        assert_eq!(Raster::load_png(&p).unwrap(), rgb);
        let mask = Raster::from_fn(5, 3, 1, |x, _, _| (x % 6) as u8);
        let p = dir.path().join("m.png");
        mask.save_png(&p).unwrap();
        assert_eq!(Raster::load_png(&p).unwrap(), mask);
    }
}
