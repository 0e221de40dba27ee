//! Row-major image-plane grids.

use thiserror::Error;

/// Class id reserved for pixels that carry no label.
pub const UNLABELED: u8 = 255;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RasterError {
    #[error("raster data has {len} elements, expected {width}x{height}")]
    BadLength { width: usize, height: usize, len: usize },
    #[error("raster dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
}

/// An `height x width` grid stored row-major (v outer, u inner).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T> Raster<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::BadLength {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self { width, height, data }
    }

    /// A single-row raster, handy for 1-D fixtures.
    pub fn row(data: Vec<T>) -> Self {
        Self {
            width: data.len(),
            height: if data.is_empty() { 0 } else { 1 },
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, u: usize, v: usize) -> Option<&T> {
        if u < self.width && v < self.height {
            self.data.get(v * self.width + u)
        } else {
            None
        }
    }

    pub fn get_mut(&mut self, u: usize, v: usize) -> Option<&mut T> {
        if u < self.width && v < self.height {
            self.data.get_mut(v * self.width + u)
        } else {
            None
        }
    }

    /// Panics when out of bounds.
    #[inline]
    pub fn at(&self, u: usize, v: usize) -> &T {
        assert!(u < self.width && v < self.height, "pixel ({u}, {v}) out of bounds");
        &self.data[v * self.width + u]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_same_dims<U>(&self, other: &Raster<U>) -> Result<(), RasterError> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(RasterError::DimensionMismatch {
                a: self.dims(),
                b: other.dims(),
            })
        }
    }
}

impl<T: Clone> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

/// Mask selecting every pixel of a raster with the given dims.
pub fn full_mask(width: usize, height: usize) -> Raster<bool> {
    Raster::filled(width, height, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_layout() {
        let r = Raster::from_fn(3, 2, |u, v| 10 * v + u);
        assert_eq!(r.as_slice(), &[0, 1, 2, 10, 11, 12]);
        assert_eq!(*r.at(2, 1), 12);
        assert_eq!(r.get(3, 0), None);
    }

    #[test]
    fn length_checked() {
        assert_eq!(
            Raster::from_vec(2, 2, vec![1.0; 3]),
            Err(RasterError::BadLength {
                width: 2,
                height: 2,
                len: 3
            })
        );
    }

    #[test]
    fn empty_row() {
        let r: Raster<f64> = Raster::row(vec![]);
        assert_eq!(r.dims(), (0, 0));
        assert!(r.is_empty());
    }
}
