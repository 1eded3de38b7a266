//! Dense row-major, channel-interleaved 2D arrays.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "raster dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "raster {height}x{width}x{channels} needs {} elements, got {}",
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

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty raster");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty raster");
        let mut data = Vec::with_capacity(height * width * channels);
        for row in 0..height {
            for col in 0..width {
                for ch in 0..channels {
                    data.push(f(row, col, ch));
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

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn same_shape<U>(&self, other: &Raster<U>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    fn offset(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        (row * self.width + col) * self.channels
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let o = self.offset(row, col);
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let o = self.offset(row, col);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[self.offset(row, col) + ch]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Raster<f32> {
    pub fn to_f64(&self) -> Raster<f64> {
        self.map(f64::from)
    }
}

impl Raster<f64> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// Narrowing conversion; values are rounded to the nearest `f32`.
    pub fn to_f32(&self) -> Raster<f32> {
        self.map(|v| v as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_addressing_is_row_major_interleaved() {
        let r = Raster::from_fn(2, 3, 2, |row, col, ch| (row * 100 + col * 10 + ch) as f32);
        assert_eq!(r.pixel(1, 2), &[120.0, 121.0]);
        assert_eq!(r.data()[2], 10.0);
        assert_eq!(r.get(0, 1, 1), 11.0);
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(Raster::new(2, 2, 1, vec![0.0f32; 3]).is_err());
        assert!(Raster::new(0, 2, 1, Vec::<f32>::new()).is_err());
    }
}
