//! Images as node samples of densities on the unit square.
//!
//! Pixel `(i, j)` of an `m x n` image sits on node `(i / (m - 1), j / (n - 1))`,
//! so the image corners coincide with the corners of `[0, 1]^2`. Row index `i`
//! runs along `x1`, column index `j` along `x2`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Uniform node grid on `[0, 1]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    rows: usize,
    cols: usize,
}

impl GridSpec {
    /// Central differences need at least one interior node per axis.
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows < 3 || cols < 3 {
            return Err(Error::invalid(format!(
                "grid must be at least 3x3, got {rows}x{cols}"
            )));
        }
        Ok(Self { rows, cols })
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Number of nodes.
    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Spacing along `x1`, `1 / (m - 1)`.
    #[inline]
    pub fn h<T: Real>(&self) -> T {
        T::one() / T::from_usize_lossy(self.rows - 1)
    }

    /// Spacing along `x2`, `1 / (n - 1)`.
    #[inline]
    pub fn k<T: Real>(&self) -> T {
        T::one() / T::from_usize_lossy(self.cols - 1)
    }

    /// Coordinates of node `(i, j)`.
    #[inline]
    pub fn node<T: Real>(&self, i: usize, j: usize) -> (T, T) {
        (
            T::from_usize_lossy(i) * self.h(),
            T::from_usize_lossy(j) * self.k(),
        )
    }

    #[inline]
    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.rows || j + 1 == self.cols
    }

    /// Composite trapezium weight of node `(i, j)`, including the `h k` factor.
    #[inline]
    pub fn trapezium_weight<T: Real>(&self, i: usize, j: usize) -> T {
        let half = T::lit(0.5);
        let wi = if i == 0 || i + 1 == self.rows {
            half
        } else {
            T::one()
        };
        let wj = if j == 0 || j + 1 == self.cols {
            half
        } else {
            T::one()
        };
        wi * wj * self.h::<T>() * self.k::<T>()
    }

    pub fn trapezium_weights<T: Real>(&self) -> Array2<T> {
        Array2::from_shape_fn(self.shape(), |(i, j)| self.trapezium_weight(i, j))
    }

    pub(crate) fn check<T>(&self, values: &Array2<T>) -> Result<()> {
        if values.dim() != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: values.dim(),
            });
        }
        Ok(())
    }
}

/// Composite 2-D trapezium rule over `[0, 1]^2`: weights 1/4 at corners,
/// 1/2 on edges and 1 inside, times `h k`.
pub fn trapezium_integral<T: Real>(values: &Array2<T>, grid: &GridSpec) -> Result<T> {
    grid.check(values)?;
    let mut acc = T::zero();
    for ((i, j), &v) in values.indexed_iter() {
        acc += grid.trapezium_weight::<T>(i, j) * v;
    }
    Ok(acc)
}

/// Nonnegative pixel intensities, at least one of them positive.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage<T> {
    pixels: Array2<T>,
}

impl<T: Real> RawImage<T> {
    pub fn new(pixels: Array2<T>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::invalid("empty image"));
        }
        if pixels.iter().any(|&p| !p.is_finite() || p < T::zero()) {
            return Err(Error::invalid("pixels must be finite and nonnegative"));
        }
        if !pixels.iter().any(|&p| p > T::zero()) {
            return Err(Error::invalid("image has no positive pixel"));
        }
        Ok(Self { pixels })
    }

    /// Builds an image from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        let pixels = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::invalid(format!("bad image buffer: {e}")))?;
        Self::new(pixels)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.pixels.nrows()
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.pixels.ncols()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    #[inline]
    pub fn pixels(&self) -> &Array2<T> {
        &self.pixels
    }

    /// Row-major pixel vector.
    pub fn as_vector(&self) -> Vec<T> {
        self.pixels.iter().copied().collect()
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.rows(), self.cols())
    }
}

/// Strictly positive grid density with unit trapezium integral.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField<T> {
    grid: GridSpec,
    values: Array2<T>,
}

/// Allowed deviation of a density's trapezium integral from one.
pub fn unit_mass_tolerance<T: Real>() -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(256.0))
}

impl<T: Real> DensityField<T> {
    /// Wraps already-normalized values, checking both invariants.
    pub fn new(grid: GridSpec, values: Array2<T>) -> Result<Self> {
        grid.check(&values)?;
        if values.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::invalid("density values must be finite and > 0"));
        }
        let mass = trapezium_integral(&values, &grid)?;
        if (mass - T::one()).abs() > unit_mass_tolerance::<T>() {
            return Err(Error::invalid(format!(
                "density integrates to {mass}, expected 1"
            )));
        }
        Ok(Self { grid, values })
    }

    /// Scales strictly positive samples so their trapezium integral is one.
    pub fn normalized(grid: GridSpec, mut values: Array2<T>) -> Result<Self> {
        grid.check(&values)?;
        if values.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::invalid("density samples must be finite and > 0"));
        }
        let mass = trapezium_integral(&values, &grid)?;
        values.mapv_inplace(|v| v / mass);
        Self::new(grid, values)
    }

    /// Samples `f` at the nodes and normalizes.
    pub fn from_fn(grid: GridSpec, f: impl Fn(T, T) -> T) -> Result<Self> {
        let values = Array2::from_shape_fn(grid.shape(), |(i, j)| {
            let (x1, x2) = grid.node::<T>(i, j);
            f(x1, x2)
        });
        Self::normalized(grid, values)
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[[i, j]]
    }

    pub fn integral(&self) -> T {
        // Shape is checked at construction.
        trapezium_integral(&self.values, &self.grid).unwrap_or_else(|_| T::nan())
    }
}

/// Adds `offset` to every pixel and normalizes to unit trapezium mass.
///
/// `offset` is in the same intensity scale as `img`; the MNIST pipeline uses
/// intensities in `[0, 1]` with offset `1`.
pub fn density_from_image<T: Real>(img: &RawImage<T>, offset: T) -> Result<DensityField<T>> {
    if !(offset > T::zero()) || !offset.is_finite() {
        return Err(Error::invalid(format!("offset must be > 0, got {offset}")));
    }
    let grid = img.grid()?;
    let values = img.pixels().mapv(|p| p + offset);
    DensityField::normalized(grid, values)
}

/// Library default offset for generic images.
pub const DEFAULT_OFFSET: f64 = 1e-3;
