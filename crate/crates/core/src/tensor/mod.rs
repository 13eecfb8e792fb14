//! Dense rank-4 tensors and the op set the detector needs.
//!
//! Layout is NCHW row-major. The same container carries convolution weights
//! as `(Cout, Cin, Kh, Kw)` and per-channel vectors as `(1, C, 1, 1)`.
//! Runtime code instantiates `f32`; verification paths instantiate `f64`.

pub mod ops;
pub mod tape;

use crate::error::{Error, Result};

/// Scalar element of every tensor in the kit.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumCast
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Lift an `f64` constant into the active scalar type.
#[inline]
pub fn real<T: Scalar>(x: f64) -> T {
    T::from(x).expect("constant not representable in scalar type")
}

/// Rank-4 activation tensor, immutable after construction in graph code.
#[derive(Clone, PartialEq)]
pub struct FeatureMap<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let numel = shape.iter().product::<usize>();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        FeatureMap {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        FeatureMap {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        FeatureMap { shape, data }
    }

    /// Scalar wrapped as a (1,1,1,1) map.
    pub fn scalar(value: T) -> Self {
        FeatureMap {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    /// Per-channel vector wrapped as (1,C,1,1).
    pub fn per_channel(values: Vec<T>) -> Self {
        FeatureMap {
            shape: [1, values.len(), 1, 1],
            data: values,
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
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
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let i = self.index(n, c, h, w);
        &mut self.data[i]
    }

    /// Contiguous H*W slice of one channel of one image.
    #[inline]
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> FeatureMap<T> {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Extract the scalar from a (1,1,1,1) map.
    pub fn scalar_value(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "scalar_value on non-scalar map");
        self.data[0]
    }

    /// Cast every element (used for checkpoint I/O and verification builds).
    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&x| U::from(x).expect("cast out of range"))
                .collect(),
        }
    }

    pub(crate) fn same_shape(&self, other: &FeatureMap<T>, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch in {context}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> std::fmt::Debug for FeatureMap<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "FeatureMap<{}>{:?}",
            std::any::type_name::<T>(),
            self.shape
        )?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(FeatureMap::<f64>::new([1, 2, 2, 2], vec![0.0; 8]).is_ok());
        assert!(FeatureMap::<f64>::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let m = FeatureMap::<f64>::from_fn([2, 3, 4, 5], |n, c, h, w| {
            (n * 1000 + c * 100 + h * 10 + w) as f64
        });
        assert_eq!(m.at(1, 2, 3, 4), 1234.0);
        assert_eq!(m.channel(1, 2)[3 * 5 + 4], 1234.0);
    }
}
