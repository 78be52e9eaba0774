//! Central finite differences with homogeneous Neumann boundaries.
//!
//! At a boundary node the ghost point across the edge is eliminated with
//! `psi_ghost = psi_mirror`, which zeroes the normal first derivative and turns
//! the normal second difference into `2 (psi_inner - psi_edge) / h^2`. Mixed
//! derivatives are zero on the whole boundary ring; tangential derivatives
//! along an edge are ordinary central differences.

use ndarray::Array2;

use crate::error::Result;
use crate::grid::GridSpec;
use crate::scalar::Real;

/// First partials of a grid function.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField<T> {
    pub dx1: Array2<T>,
    pub dx2: Array2<T>,
}

/// Second partials of a grid function.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianField<T> {
    pub dx1x1: Array2<T>,
    pub dx2x2: Array2<T>,
    pub dx1x2: Array2<T>,
}

impl<T: Real> HessianField<T> {
    /// `det(I - D^2 u)` at node `(i, j)`.
    #[inline]
    pub fn monge_ampere_det(&self, i: usize, j: usize) -> T {
        let a = self.dx1x1[[i, j]];
        let b = self.dx2x2[[i, j]];
        let c = self.dx1x2[[i, j]];
        (T::one() - a) * (T::one() - b) - c * c
    }
}

pub fn gradient<T: Real>(u: &Array2<T>, grid: &GridSpec) -> Result<GradientField<T>> {
    grid.check(u)?;
    let (m, n) = grid.shape();
    let two_h = T::lit(2.0) * grid.h::<T>();
    let two_k = T::lit(2.0) * grid.k::<T>();
    let mut dx1 = Array2::zeros((m, n));
    let mut dx2 = Array2::zeros((m, n));
    for i in 1..m - 1 {
        for j in 0..n {
            dx1[[i, j]] = (u[[i + 1, j]] - u[[i - 1, j]]) / two_h;
        }
    }
    for i in 0..m {
        for j in 1..n - 1 {
            dx2[[i, j]] = (u[[i, j + 1]] - u[[i, j - 1]]) / two_k;
        }
    }
    Ok(GradientField { dx1, dx2 })
}

pub fn hessian<T: Real>(u: &Array2<T>, grid: &GridSpec) -> Result<HessianField<T>> {
    grid.check(u)?;
    let (m, n) = grid.shape();
    let h = grid.h::<T>();
    let k = grid.k::<T>();
    let two = T::lit(2.0);
    let (h2, k2, hk4) = (h * h, k * k, T::lit(4.0) * h * k);

    let mut dx1x1 = Array2::zeros((m, n));
    let mut dx2x2 = Array2::zeros((m, n));
    let mut dx1x2 = Array2::zeros((m, n));
    for j in 0..n {
        dx1x1[[0, j]] = two * (u[[1, j]] - u[[0, j]]) / h2;
        dx1x1[[m - 1, j]] = two * (u[[m - 2, j]] - u[[m - 1, j]]) / h2;
        for i in 1..m - 1 {
            dx1x1[[i, j]] = (u[[i - 1, j]] - two * u[[i, j]] + u[[i + 1, j]]) / h2;
        }
    }
    for i in 0..m {
        dx2x2[[i, 0]] = two * (u[[i, 1]] - u[[i, 0]]) / k2;
        dx2x2[[i, n - 1]] = two * (u[[i, n - 2]] - u[[i, n - 1]]) / k2;
        for j in 1..n - 1 {
            dx2x2[[i, j]] = (u[[i, j - 1]] - two * u[[i, j]] + u[[i, j + 1]]) / k2;
        }
    }
    for i in 1..m - 1 {
        for j in 1..n - 1 {
            dx1x2[[i, j]] = (u[[i + 1, j + 1]] - u[[i + 1, j - 1]] - u[[i - 1, j + 1]]
                + u[[i - 1, j - 1]])
                / hk4;
        }
    }
    Ok(HessianField {
        dx1x1,
        dx2x2,
        dx1x2,
    })
}

/// One stencil entry: offset from the centre node and weight.
pub type Tap<T> = (isize, isize, T);

/// Difference stencils at a single node, consistent with [`gradient`] and
/// [`hessian`]. Used to assemble linearized operators row by row.
#[derive(Debug, Clone)]
pub struct NodeStencils<T> {
    pub d1: Vec<Tap<T>>,
    pub d2: Vec<Tap<T>>,
    pub d11: Vec<Tap<T>>,
    pub d22: Vec<Tap<T>>,
    pub d12: Vec<Tap<T>>,
}

pub fn node_stencils<T: Real>(grid: &GridSpec, i: usize, j: usize) -> NodeStencils<T> {
    let (m, n) = grid.shape();
    let h = grid.h::<T>();
    let k = grid.k::<T>();
    let two = T::lit(2.0);

    let first = |idx: usize, len: usize, step: T, axis: usize| -> Vec<Tap<T>> {
        if idx == 0 || idx + 1 == len {
            return Vec::new();
        }
        let w = T::one() / (two * step);
        let (p, q) = if axis == 0 { ((1, 0), (-1, 0)) } else { ((0, 1), (0, -1)) };
        vec![(p.0, p.1, w), (q.0, q.1, -w)]
    };
    let second = |idx: usize, len: usize, step: T, axis: usize| -> Vec<Tap<T>> {
        let s2 = step * step;
        let unit = |d: isize| if axis == 0 { (d, 0) } else { (0, d) };
        if idx == 0 {
            let (a, b) = unit(1);
            vec![(0, 0, -two / s2), (a, b, two / s2)]
        } else if idx + 1 == len {
            let (a, b) = unit(-1);
            vec![(0, 0, -two / s2), (a, b, two / s2)]
        } else {
            let (a, b) = unit(1);
            let (c, d) = unit(-1);
            vec![(0, 0, -two / s2), (a, b, T::one() / s2), (c, d, T::one() / s2)]
        }
    };
    let d12 = if grid.is_boundary(i, j) {
        Vec::new()
    } else {
        let w = T::one() / (T::lit(4.0) * h * k);
        vec![(1, 1, w), (1, -1, -w), (-1, 1, -w), (-1, -1, w)]
    };
    NodeStencils {
        d1: first(i, m, h, 0),
        d2: first(j, n, k, 1),
        d11: second(i, m, h, 0),
        d22: second(j, n, k, 1),
        d12,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(grid: &GridSpec, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
        Array2::from_shape_fn(grid.shape(), |(i, j)| {
            let (x, y) = grid.node(i, j);
            f(x, y)
        })
    }

    #[test]
    fn constant_has_zero_derivatives() {
        let g = GridSpec::new(6, 9).unwrap();
        let u = Array2::<f64>::from_elem((6, 9), 3.7);
        let gr = gradient(&u, &g).unwrap();
        let he = hessian(&u, &g).unwrap();
        for a in [&gr.dx1, &gr.dx2, &he.dx1x1, &he.dx2x2, &he.dx1x2] {
            assert!(a.iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn quadratic_exact_in_interior() {
        let g = GridSpec::square(11).unwrap();
        let u = sample(&g, |x, _| x * x);
        let gr = gradient(&u, &g).unwrap();
        assert_abs_diff_eq!(gr.dx1[[5, 3]], 1.0, epsilon = 1e-12);
        let he = hessian(&u, &g).unwrap();
        for i in 1..10 {
            for j in 0..11 {
                assert_abs_diff_eq!(he.dx1x1[[i, j]], 2.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn bilinear_mixed_derivative() {
        let g = GridSpec::new(7, 9).unwrap();
        let u = sample(&g, |x, y| x * y);
        let he = hessian(&u, &g).unwrap();
        for i in 0..7 {
            for j in 0..9 {
                let want = if g.is_boundary(i, j) { 0.0 } else { 1.0 };
                assert_abs_diff_eq!(he.dx1x2[[i, j]], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn boundary_normal_gradient_is_zero() {
        let g = GridSpec::new(8, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = Array2::from_shape_fn((8, 5), |_| rng.gen::<f64>());
        let gr = gradient(&u, &g).unwrap();
        for j in 0..5 {
            assert_eq!(gr.dx1[[0, j]], 0.0);
            assert_eq!(gr.dx1[[7, j]], 0.0);
        }
        for i in 0..8 {
            assert_eq!(gr.dx2[[i, 0]], 0.0);
            assert_eq!(gr.dx2[[i, 4]], 0.0);
        }
        // tangential derivative along the x1 = 0 edge is a plain central difference
        let h = g.k::<f64>();
        assert_abs_diff_eq!(gr.dx2[[0, 2]], (u[[0, 3]] - u[[0, 1]]) / (2.0 * h), epsilon = 1e-14);
    }

    #[test]
    fn ghost_elimination_formula() {
        let g = GridSpec::square(5).unwrap();
        let u = sample(&g, |x, y| (3.0 * x).sin() + y * y * y);
        let he = hessian(&u, &g).unwrap();
        let h = g.h::<f64>();
        assert_abs_diff_eq!(he.dx1x1[[0, 2]], 2.0 * (u[[1, 2]] - u[[0, 2]]) / (h * h), epsilon = 1e-12);
        assert_abs_diff_eq!(he.dx2x2[[3, 4]], 2.0 * (u[[3, 3]] - u[[3, 4]]) / (h * h), epsilon = 1e-12);
    }

    // Independent direct-loop oracle with explicit ghost nodes.
    fn oracle_gradient(u: &Array2<f64>, h: f64, k: f64) -> (Array2<f64>, Array2<f64>) {
        let (m, n) = u.dim();
        let at = |i: isize, j: isize| -> f64 {
            let ii = if i < 0 { 1 } else if i >= m as isize { m as isize - 2 } else { i };
            let jj = if j < 0 { 1 } else if j >= n as isize { n as isize - 2 } else { j };
            u[[ii as usize, jj as usize]]
        };
        let mut a = Array2::zeros((m, n));
        let mut b = Array2::zeros((m, n));
        for i in 0..m as isize {
            for j in 0..n as isize {
                a[[i as usize, j as usize]] = (at(i + 1, j) - at(i - 1, j)) / (2.0 * h);
                b[[i as usize, j as usize]] = (at(i, j + 1) - at(i, j - 1)) / (2.0 * k);
            }
        }
        (a, b)
    }

    #[test]
    fn gradient_matches_ghost_point_oracle() {
        let g = GridSpec::square(9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = Array2::from_shape_fn((9, 9), |_| rng.gen::<f64>());
        let gr = gradient(&u, &g).unwrap();
        let (a, b) = oracle_gradient(&u, g.h(), g.k());
        for (x, y) in gr.dx1.iter().zip(a.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        for (x, y) in gr.dx2.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn stencils_match_array_operators() {
        let g = GridSpec::new(6, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Array2::from_shape_fn((6, 7), |_| rng.gen::<f64>());
        let gr = gradient(&u, &g).unwrap();
        let he = hessian(&u, &g).unwrap();
        let apply = |taps: &[Tap<f64>], i: usize, j: usize| -> f64 {
            taps.iter()
                .map(|&(di, dj, w)| w * u[[(i as isize + di) as usize, (j as isize + dj) as usize]])
                .sum()
        };
        for i in 0..6 {
            for j in 0..7 {
                let s = node_stencils::<f64>(&g, i, j);
                assert_abs_diff_eq!(apply(&s.d1, i, j), gr.dx1[[i, j]], epsilon = 1e-11);
                assert_abs_diff_eq!(apply(&s.d2, i, j), gr.dx2[[i, j]], epsilon = 1e-11);
                assert_abs_diff_eq!(apply(&s.d11, i, j), he.dx1x1[[i, j]], epsilon = 1e-9);
                assert_abs_diff_eq!(apply(&s.d22, i, j), he.dx2x2[[i, j]], epsilon = 1e-9);
                assert_abs_diff_eq!(apply(&s.d12, i, j), he.dx1x2[[i, j]], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn linearity() {
        let g = GridSpec::square(7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = Array2::from_shape_fn((7, 7), |_| rng.gen::<f64>());
        let v = Array2::from_shape_fn((7, 7), |_| rng.gen::<f64>());
        let w = &u * 2.5 - &v * 0.75;
        let (hu, hv, hw) = (hessian(&u, &g).unwrap(), hessian(&v, &g).unwrap(), hessian(&w, &g).unwrap());
        for idx in 0..49 {
            let (i, j) = (idx / 7, idx % 7);
            let lin = 2.5 * hu.dx1x2[[i, j]] - 0.75 * hv.dx1x2[[i, j]];
            assert_abs_diff_eq!(hw.dx1x2[[i, j]], lin, epsilon = 1e-9);
            let lin = 2.5 * hu.dx2x2[[i, j]] - 0.75 * hv.dx2x2[[i, j]];
            assert_abs_diff_eq!(hw.dx2x2[[i, j]], lin, epsilon = 1e-9);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = GridSpec::square(5).unwrap();
        assert!(gradient(&Array2::<f64>::zeros((5, 6)), &g).is_err());
        assert!(hessian(&Array2::<f64>::zeros((4, 5)), &g).is_err());
    }
}
