//! Bicubic interpolating spline of a density, used to evaluate the target
//! density and its gradient off the grid.

use ndarray::Array2;

use crate::grid::{DensityField, GridSpec};
use crate::scalar::Real;

/// End condition of the interpolant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryRule {
    /// Tensor-product cubic spline with not-a-knot ends.
    NotAKnot,
    /// Bilinear interpolation, used when an axis has fewer than four nodes.
    BilinearFallback,
}

/// Tensor-product interpolant stored in Hermite form: node values, both
/// first partials and the cross partial.
#[derive(Debug, Clone)]
pub struct SplineSurface<T> {
    grid: GridSpec,
    values: Array2<T>,
    d1: Array2<T>,
    d2: Array2<T>,
    d12: Array2<T>,
    rule: BoundaryRule,
}

/// Value and first partials of an interpolant at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineSample<T> {
    pub value: T,
    pub dy1: T,
    pub dy2: T,
}

/// Not-a-knot cubic spline slopes for uniformly spaced samples (`len >= 4`).
fn not_a_knot_slopes<T: Real>(y: &[T], step: T) -> Vec<T> {
    let n = y.len();
    debug_assert!(n >= 4);
    let d: Vec<T> = y.windows(2).map(|w| (w[1] - w[0]) / step).collect();
    let (two, three, four, five, half) = (
        T::lit(2.0),
        T::lit(3.0),
        T::lit(4.0),
        T::lit(5.0),
        T::lit(0.5),
    );

    let mut sub = vec![T::one(); n];
    let mut diag = vec![four; n];
    let mut sup = vec![T::one(); n];
    let mut rhs = vec![T::zero(); n];
    diag[0] = T::one();
    sup[0] = two;
    rhs[0] = (five * d[0] + d[1]) * half;
    for i in 1..n - 1 {
        rhs[i] = three * (d[i - 1] + d[i]);
    }
    sub[n - 1] = two;
    diag[n - 1] = T::one();
    rhs[n - 1] = (d[n - 3] + five * d[n - 2]) * half;

    // Thomas algorithm
    for i in 1..n {
        let w = sub[i] / diag[i - 1];
        diag[i] -= w * sup[i - 1];
        let prev = rhs[i - 1];
        rhs[i] -= w * prev;
    }
    let mut s = vec![T::zero(); n];
    s[n - 1] = rhs[n - 1] / diag[n - 1];
    for i in (0..n - 1).rev() {
        s[i] = (rhs[i] - sup[i] * s[i + 1]) / diag[i];
    }
    s
}

fn slopes_along_rows<T: Real>(a: &Array2<T>, step: T) -> Array2<T> {
    let (m, n) = a.dim();
    let mut out = Array2::zeros((m, n));
    for j in 0..n {
        let col: Vec<T> = a.column(j).iter().copied().collect();
        for (i, s) in not_a_knot_slopes(&col, step).into_iter().enumerate() {
            out[[i, j]] = s;
        }
    }
    out
}

fn slopes_along_cols<T: Real>(a: &Array2<T>, step: T) -> Array2<T> {
    let (m, n) = a.dim();
    let mut out = Array2::zeros((m, n));
    for i in 0..m {
        let row: Vec<T> = a.row(i).iter().copied().collect();
        for (j, s) in not_a_knot_slopes(&row, step).into_iter().enumerate() {
            out[[i, j]] = s;
        }
    }
    out
}

/// Cubic Hermite basis on `[0, 1]`: (value-left, slope-left, value-right,
/// slope-right) and their derivatives.
#[inline]
fn hermite<T: Real>(t: T) -> ([T; 4], [T; 4]) {
    let (t2, t3) = (t * t, t * t * t);
    let (one, two, three, four, six) = (T::one(), T::lit(2.0), T::lit(3.0), T::lit(4.0), T::lit(6.0));
    (
        [
            two * t3 - three * t2 + one,
            t3 - two * t2 + t,
            three * t2 - two * t3,
            t3 - t2,
        ],
        [
            six * t2 - six * t,
            three * t2 - four * t + one,
            six * t - six * t2,
            three * t2 - two * t,
        ],
    )
}

/// Cell index and local coordinate in `[0, 1]` of a clamped coordinate.
#[inline]
fn locate<T: Real>(x: T, cells: usize) -> (usize, T) {
    let s = x * T::from_usize_lossy(cells);
    let c = s.floor().to_usize().unwrap_or(0).min(cells - 1);
    (c, s - T::from_usize_lossy(c))
}

/// Fits the interpolant to the density samples.
///
/// Grids with fewer than four nodes along an axis fall back to bilinear
/// interpolation; the surface reports this through [`SplineSurface::rule`].
pub fn fit_spline<T: Real>(g: &DensityField<T>) -> SplineSurface<T> {
    SplineSurface::fit(*g.grid(), g.values().clone())
}

impl<T: Real> SplineSurface<T> {
    /// Fits arbitrary node samples (not necessarily a density).
    pub fn fit(grid: GridSpec, values: Array2<T>) -> Self {
        let (m, n) = grid.shape();
        assert_eq!(values.dim(), (m, n), "sample shape must match grid");
        if m < 4 || n < 4 {
            log::warn!("grid {m}x{n} too small for a bicubic spline, using bilinear interpolation");
            let z = Array2::zeros((m, n));
            return Self {
                grid,
                values,
                d1: z.clone(),
                d2: z.clone(),
                d12: z,
                rule: BoundaryRule::BilinearFallback,
            };
        }
        let h = grid.h::<T>();
        let k = grid.k::<T>();
        let d1 = slopes_along_rows(&values, h);
        let d2 = slopes_along_cols(&values, k);
        let d12 = slopes_along_cols(&d1, k);
        Self {
            grid,
            values,
            d1,
            d2,
            d12,
            rule: BoundaryRule::NotAKnot,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn rule(&self) -> BoundaryRule {
        self.rule
    }

    /// Whether `(y1, y2)` lies outside `[0, 1]^2` beyond rounding.
    #[inline]
    pub fn is_outside(y1: T, y2: T) -> bool {
        let tol = T::lit(1e-12);
        y1 < -tol || y1 > T::one() + tol || y2 < -tol || y2 > T::one() + tol
    }

    #[inline]
    pub fn eval(&self, y1: T, y2: T) -> T {
        self.eval_with_partials(y1, y2).value
    }

    /// Value and analytic first partials. Points outside the unit square are
    /// clamped onto it first.
    pub fn eval_with_partials(&self, y1: T, y2: T) -> SplineSample<T> {
        let y1 = y1.max(T::zero()).min(T::one());
        let y2 = y2.max(T::zero()).min(T::one());
        let (m, n) = self.grid.shape();
        let (i, t) = locate(y1, m - 1);
        let (j, u) = locate(y2, n - 1);
        let h = self.grid.h::<T>();
        let k = self.grid.k::<T>();

        match self.rule {
            BoundaryRule::BilinearFallback => {
                let f = |a: usize, b: usize| self.values[[i + a, j + b]];
                let one = T::one();
                let value = f(0, 0) * (one - t) * (one - u)
                    + f(1, 0) * t * (one - u)
                    + f(0, 1) * (one - t) * u
                    + f(1, 1) * t * u;
                let dy1 = ((f(1, 0) - f(0, 0)) * (one - u) + (f(1, 1) - f(0, 1)) * u) / h;
                let dy2 = ((f(0, 1) - f(0, 0)) * (one - t) + (f(1, 1) - f(1, 0)) * t) / k;
                SplineSample { value, dy1, dy2 }
            }
            BoundaryRule::NotAKnot => {
                let (bt, dbt) = hermite(t);
                let (bu, dbu) = hermite(u);
                let mut value = T::zero();
                let mut dy1 = T::zero();
                let mut dy2 = T::zero();
                for a in 0..2 {
                    for b in 0..2 {
                        let (ii, jj) = (i + a, j + b);
                        // weights: [value, d1*h, d2*k, d12*h*k]
                        let c = [
                            self.values[[ii, jj]],
                            self.d1[[ii, jj]] * h,
                            self.d2[[ii, jj]] * k,
                            self.d12[[ii, jj]] * h * k,
                        ];
                        let (tv, ts) = (2 * a, 2 * a + 1);
                        let (uv, us) = (2 * b, 2 * b + 1);
                        value += bt[tv] * bu[uv] * c[0]
                            + bt[ts] * bu[uv] * c[1]
                            + bt[tv] * bu[us] * c[2]
                            + bt[ts] * bu[us] * c[3];
                        dy1 += dbt[tv] * bu[uv] * c[0]
                            + dbt[ts] * bu[uv] * c[1]
                            + dbt[tv] * bu[us] * c[2]
                            + dbt[ts] * bu[us] * c[3];
                        dy2 += bt[tv] * dbu[uv] * c[0]
                            + bt[ts] * dbu[uv] * c[1]
                            + bt[tv] * dbu[us] * c[2]
                            + bt[ts] * dbu[us] * c[3];
                    }
                }
                SplineSample {
                    value,
                    dy1: dy1 / h,
                    dy2: dy2 / k,
                }
            }
        }
    }
}

/// Floor applied to interpolated target densities before they enter the
/// Monge-Ampere residual.
pub const DEFAULT_VALUE_FLOOR: f64 = 1e-12;
