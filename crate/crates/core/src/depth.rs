//! Single-channel depth maps.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// A 2-D field of depth (or disparity) values stored row-major.
///
/// `value_range` is encoding metadata (e.g. the bit depth a file was read from); it does not
/// clamp the values.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
    value_range: (T, T),
}

impl<T: Scalar> DepthMap<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if height * width != values.len() {
            return Err(Error::Shape(format!(
                "{height}x{width} depth map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        let range = data_range(&values);
        Ok(DepthMap {
            height,
            width,
            values,
            value_range: range,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        DepthMap {
            height,
            width,
            values: vec![value; height * width],
            value_range: (value, value),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        let range = data_range(&values);
        DepthMap {
            height,
            width,
            values,
            value_range: range,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.values[y * self.width + x] = v;
    }

    pub fn value_range(&self) -> (T, T) {
        self.value_range
    }

    pub fn with_value_range(mut self, min: T, max: T) -> Result<Self> {
        if !(min <= max) {
            return Err(Error::InvalidArgument(format!("value range [{min}, {max}] is empty")));
        }
        self.value_range = (min, max);
        Ok(self)
    }

    /// Minimum and maximum of the stored values.
    pub fn data_range(&self) -> (T, T) {
        data_range(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn ensure_same_dims(&self, other: &DepthMap<T>, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn transpose(&self) -> DepthMap<T> {
        let mut t = DepthMap::from_fn(self.width, self.height, |y, x| self.get(x, y));
        t.value_range = self.value_range;
        t
    }

    /// Sub-rectangle starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<DepthMap<T>> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut c = DepthMap::from_fn(height, width, |y, x| self.get(top + y, left + x));
        c.value_range = self.value_range;
        Ok(c)
    }

    /// Replicates every pixel into a `factor x factor` block.
    pub fn nearest_upsample(&self, factor: usize) -> DepthMap<T> {
        DepthMap::from_fn(self.height * factor, self.width * factor, |y, x| {
            self.get(y / factor, x / factor)
        })
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> DepthMap<T> {
        let values: Vec<T> = self.values.iter().map(|&v| f(v)).collect();
        let range = data_range(&values);
        DepthMap {
            height: self.height,
            width: self.width,
            values,
            value_range: range,
        }
    }

    /// View as a (1, 1, H, W) tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), self.values.clone())
            .expect("dims agree by construction")
    }

    /// Builds a map from a single-item, single-channel tensor.
    pub fn from_tensor(t: &Tensor<T>) -> Result<DepthMap<T>> {
        let s = t.shape();
        if s.batch != 1 || s.channels != 1 {
            return Err(Error::Shape(format!("expected a 1x1xHxW tensor, got {s}")));
        }
        DepthMap::new(s.height, s.width, t.data().to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> DepthMap<U> {
        DepthMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
            value_range: (U::of(self.value_range.0.as_f64()), U::of(self.value_range.1.as_f64())),
        }
    }
}

fn data_range<T: Scalar>(values: &[T]) -> (T, T) {
    let mut it = values.iter().copied().filter(|v| v.is_finite());
    match it.next() {
        None => (T::zero(), T::zero()),
        Some(first) => it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))),
    }
}
