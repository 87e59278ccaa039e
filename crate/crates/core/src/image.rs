//! Dense per-pixel containers with validity masks.
//!
//! Pixels are addressed as `(x, y)` with `x` the column and `y` the row;
//! storage is row-major. Every map carries a validity flag per pixel and
//! consumers must treat data at unflagged pixels as meaningless.

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Per-pixel boolean flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "mask buffer has {} entries, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Like [`Mask::get`] but false outside the image.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.data[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        debug_assert_eq!(self.dims(), other.dims());
        Mask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }

    pub fn or(&self, other: &Mask) -> Mask {
        debug_assert_eq!(self.dims(), other.dims());
        Mask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a || b)
                .collect(),
        }
    }

    pub fn and_not(&self, other: &Mask) -> Mask {
        debug_assert_eq!(self.dims(), other.dims());
        Mask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && !b)
                .collect(),
        }
    }
}

/// A dense image of `T` with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Map<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
    mask: Vec<bool>,
}

/// Scalar field: depth in metres, phase in radians, unitless ratios or intensities.
pub type ScalarMap = Map<f64>;

/// Three-vector field: normals, view vectors or 3D points.
pub type VectorMap = Map<Vector3<f64>>;

impl<T: Clone> Map<T> {
    /// A map filled with `value`, every pixel flagged valid.
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
            mask: vec![true; width * height],
        }
    }

    /// A map filled with `value`, every pixel flagged invalid.
    pub fn invalid(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
            mask: vec![false; width * height],
        }
    }
}

impl<T> Map<T> {
    pub fn from_parts(width: usize, height: usize, data: Vec<T>, mask: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if data.len() != n || mask.len() != n {
            return Err(Error::InvalidInput(format!(
                "map buffers have {}/{} entries, expected {n}",
                data.len(),
                mask.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            mask,
        })
    }

    /// Builds a map from a closure returning `Some(value)` for valid pixels.
    pub fn from_fn(
        width: usize,
        height: usize,
        fill: T,
        mut f: impl FnMut(usize, usize) -> Option<T>,
    ) -> Self
    where
        T: Clone,
    {
        let mut data = Vec::with_capacity(width * height);
        let mut mask = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                match f(x, y) {
                    Some(v) => {
                        data.push(v);
                        mask.push(true);
                    }
                    None => {
                        data.push(fill.clone());
                        mask.push(false);
                    }
                }
            }
        }
        Self {
            width,
            height,
            data,
            mask,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let i = y * self.width + x;
        self.data[i] = value;
        self.mask[i] = true;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    /// Validity lookup that is false outside the image.
    #[inline]
    pub fn is_valid_signed(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.mask[y as usize * self.width + x as usize]
    }

    /// Value at a pixel if it is flagged valid.
    #[inline]
    pub fn valid(&self, x: usize, y: usize) -> Option<&T> {
        let i = y * self.width + x;
        self.mask[i].then(|| &self.data[i])
    }

    #[inline]
    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.mask[i] = false;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn mask_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_slice_mut(&mut self) -> &mut [bool] {
        &mut self.mask
    }

    pub fn mask(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.mask.clone(),
        }
    }

    /// Replaces the validity flags, keeping data untouched.
    pub fn with_mask(mut self, mask: &Mask) -> Self {
        debug_assert_eq!(mask.dims(), self.dims());
        self.mask.copy_from_slice(mask.as_slice());
        self
    }

    pub fn count_valid(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Iterates `(x, y, &value)` over valid pixels in row-major order.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, &T)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (_, &m))| m)
            .map(move |(i, (v, _))| (i % w, i / w, v))
    }

    /// Applies `f` to every pixel value, keeping the mask.
    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Map<U> {
        Map {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
            mask: self.mask.clone(),
        }
    }

    pub fn check_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: self.dims(),
            });
        }
        Ok(())
    }
}

impl ScalarMap {
    /// Returns an error naming `what` if any valid pixel is non-finite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.iter_valid().any(|(_, _, v)| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    /// Minimum and maximum over valid pixels.
    pub fn valid_range(&self) -> Option<(f64, f64)> {
        self.iter_valid().fold(None, |acc, (_, _, &v)| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }
}
