//! Dense n-dimensional float arrays.
//!
//! [`Grid`] is the universal value carrier: images, displacement fields,
//! confidence maps, network parameters, and loss scalars are all grids.
//! Images use `[channels, height, width]` layout, row-major.
//!
//! The engine runs in either 32-bit (training) or 64-bit (gradient checking)
//! precision; [`Scalar`] abstracts over the two.

use crate::error::{Error, Result};
use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type of a [`Grid`]: `f32` or `f64`.
pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_val(self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn floor(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite_val(self) -> bool {
                self.is_finite()
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn floor(self) -> Self {
                self.floor()
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn minimum(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dense array with shape metadata. Immutable once produced by an operation;
/// only the optimizer mutates parameter grids in place.
#[derive(Clone, PartialEq)]
pub struct Grid<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "grid",
                format!("zero-sized dimension in shape {shape:?}"),
            ));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::shape(
                "grid",
                format!(
                    "shape {shape:?} implies {count} values, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Grid { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let count: usize = shape.iter().product();
        Grid {
            shape: shape.to_vec(),
            data: vec![T::ZERO; count],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let count: usize = shape.iter().product();
        Grid {
            shape: shape.to_vec(),
            data: vec![value; count],
        }
    }

    /// Single-value grid of shape `[1]`; the scalar carrier used by losses.
    pub fn scalar_grid(value: T) -> Self {
        Grid {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let count: usize = shape.iter().product();
        Grid {
            shape: shape.to_vec(),
            data: (0..count).map(|i| f(i)).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.shape == other.shape
    }

    /// Value of a `[C, H, W]` grid at `(c, row, col)`.
    #[inline]
    pub fn at3(&self, c: usize, row: usize, col: usize) -> T {
        debug_assert_eq!(self.rank(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + row) * w + col]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, row: usize, col: usize, v: T) {
        debug_assert_eq!(self.rank(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + row) * w + col] = v;
    }

    /// The single value of a `[1]` grid.
    pub fn scalar(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "scalar",
                format!("expected a scalar grid, got shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_val())
    }

    pub fn ensure_finite(&self, context: &'static str) -> Result<()> {
        if self.is_all_finite() {
            Ok(())
        } else {
            let idx = self
                .data
                .iter()
                .position(|v| !v.is_finite_val())
                .unwrap_or(0);
            Err(Error::domain(
                context,
                format!("non-finite value at flat index {idx} (shape {:?})", self.shape),
            ))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Grid<T> {
        Grid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Grid<T>> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                op,
                format!("operands differ: {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Grid {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Lossless widening / narrowing between precisions.
    pub fn cast<U: Scalar>(&self) -> Grid<U> {
        Grid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Grid<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid{:?}", self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.len())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_value_count() {
        assert!(Grid::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Grid::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Grid::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn at3_uses_chw_layout() {
        let g = Grid::<f64>::from_fn(&[2, 2, 3], |i| i as f64);
        assert_eq!(g.at3(0, 0, 0), 0.0);
        assert_eq!(g.at3(0, 1, 2), 5.0);
        assert_eq!(g.at3(1, 0, 0), 6.0);
        assert_eq!(g.at3(1, 1, 1), 10.0);
    }

    #[test]
    fn finite_check_reports_index() {
        let mut g = Grid::<f64>::zeros(&[4]);
        g.data_mut()[2] = f64::NAN;
        let err = g.ensure_finite("test").unwrap_err();
        assert!(err.to_string().contains("index 2"));
    }
}
