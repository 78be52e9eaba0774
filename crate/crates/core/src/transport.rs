//! Transport map `x - grad u`, the quadrature for the Wasserstein distance and
//! the image-to-image distance pipeline.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdiff::gradient;
use crate::grid::{density_from_image, DensityField, GridSpec, RawImage};
use crate::interp::{fit_spline, SplineSurface};
use crate::ma_solver::{newton_solve_with_spline, NewtonConfig, PotentialField, SolveDiagnostics};
use crate::method::DistanceMethod;
use crate::scalar::Real;

/// Image `T(x)` of every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportMap<T> {
    grid: GridSpec,
    pub t1: Array2<T>,
    pub t2: Array2<T>,
}

impl<T: Real> TransportMap<T> {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Largest distance by which any mapped node leaves `[0, 1]^2`.
    pub fn max_excursion(&self) -> T {
        let out = |v: T| (-v).max(v - T::one()).max(T::zero());
        self.t1
            .iter()
            .chain(self.t2.iter())
            .fold(T::zero(), |acc, &v| acc.max(out(v)))
    }

    /// Squared displacement `|x - T(x)|^2` at every node.
    pub fn squared_displacement(&self) -> Array2<T> {
        Array2::from_shape_fn(self.grid.shape(), |(i, j)| {
            let (x1, x2) = self.grid.node::<T>(i, j);
            let d1 = x1 - self.t1[[i, j]];
            let d2 = x2 - self.t2[[i, j]];
            d1 * d1 + d2 * d2
        })
    }

    /// Writes `i,j,x1,x2,t1,t2` rows for plotting the deformed mesh.
    pub fn write_mesh_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "i,j,x1,x2,t1,t2")?;
        for ((i, j), &t1) in self.t1.indexed_iter() {
            let (x1, x2) = self.grid.node::<T>(i, j);
            writeln!(out, "{i},{j},{x1},{x2},{t1},{}", self.t2[[i, j]])?;
        }
        Ok(())
    }
}

pub fn transport_map<T: Real>(u: &PotentialField<T>) -> TransportMap<T> {
    let grid = *u.grid();
    let g = gradient(u.values(), &grid).expect("potential matches its grid");
    let t1 = Array2::from_shape_fn(grid.shape(), |(i, j)| grid.node::<T>(i, j).0 - g.dx1[[i, j]]);
    let t2 = Array2::from_shape_fn(grid.shape(), |(i, j)| grid.node::<T>(i, j).1 - g.dx2[[i, j]]);
    TransportMap { grid, t1, t2 }
}

/// Ground cost inside the quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    /// `|x - T(x)|^2 / 2`.
    #[default]
    HalfSquared,
    /// `|x - T(x)| / 2`, the unsquared variant.
    Linear,
}

/// `(sum_nodes w_ij c(x, T(x)) f(x))^(1/2)` with trapezium weights.
pub fn wasserstein_distance_with<T: Real>(
    u: &PotentialField<T>,
    f: &DensityField<T>,
    cost: CostKind,
) -> Result<T> {
    if u.grid() != f.grid() {
        return Err(Error::ShapeMismatch {
            expected: f.grid().shape(),
            found: u.grid().shape(),
        });
    }
    let grid = f.grid();
    let sq = transport_map(u).squared_displacement();
    let half = T::lit(0.5);
    let mut acc = T::zero();
    for ((i, j), &d2) in sq.indexed_iter() {
        let c = match cost {
            CostKind::HalfSquared => half * d2,
            CostKind::Linear => half * d2.sqrt(),
        };
        acc += grid.trapezium_weight::<T>(i, j) * c * f.get(i, j);
    }
    Ok(acc.max(T::zero()).sqrt())
}

pub fn wasserstein_distance<T: Real>(u: &PotentialField<T>, f: &DensityField<T>) -> Result<T> {
    wasserstein_distance_with(u, f, CostKind::HalfSquared)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceResult {
    pub value: f64,
    pub method: DistanceMethod,
    /// Present for the PDE method.
    pub diagnostics: Option<SolveDiagnostics>,
}

impl DistanceResult {
    pub fn converged(&self) -> bool {
        self.diagnostics.as_ref().map_or(true, |d| d.converged)
    }
}

/// Settings of the image-to-image PDE distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdeDistanceConfig {
    pub newton: NewtonConfig,
    /// Added to every pixel before normalization.
    pub offset: f64,
    pub cost: CostKind,
}

impl Default for PdeDistanceConfig {
    fn default() -> Self {
        Self {
            newton: NewtonConfig::default(),
            offset: 1.0,
            cost: CostKind::HalfSquared,
        }
    }
}

/// Distance between densities `f` (source) and the target behind `g_spline`.
pub fn density_distance<T: Real>(
    f: &DensityField<T>,
    g_spline: &SplineSurface<T>,
    cfg: &NewtonConfig,
    cost: CostKind,
) -> Result<DistanceResult> {
    let (u, diag) = newton_solve_with_spline(f, g_spline, cfg)?;
    let value = wasserstein_distance_with(&u, f, cost)?.to_f64_lossy();
    Ok(DistanceResult {
        value,
        method: DistanceMethod::Wasserstein,
        diagnostics: Some(diag),
    })
}

/// Image `a` is the source density and `b` the target.
pub fn pde_distance<T: Real>(
    a: &RawImage<T>,
    b: &RawImage<T>,
    cfg: &NewtonConfig,
    offset: T,
) -> Result<DistanceResult> {
    pde_distance_with(
        a,
        b,
        &PdeDistanceConfig {
            newton: *cfg,
            offset: offset.to_f64_lossy(),
            cost: CostKind::HalfSquared,
        },
    )
}

pub fn pde_distance_with<T: Real>(
    a: &RawImage<T>,
    b: &RawImage<T>,
    cfg: &PdeDistanceConfig,
) -> Result<DistanceResult> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            found: b.shape(),
        });
    }
    let offset = T::lit(cfg.offset);
    let f = density_from_image(a, offset)?;
    let g = density_from_image(b, offset)?;
    density_distance(&f, &fit_spline(&g), &cfg.newton, cfg.cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bump(grid: GridSpec, c: (f64, f64), s: f64) -> DensityField<f64> {
        DensityField::from_fn(grid, |x: f64, y: f64| {
            0.2 + (-((x - c.0).powi(2) + (y - c.1).powi(2)) / (2.0 * s * s)).exp()
        })
        .unwrap()
    }

    #[test]
    fn zero_and_constant_potentials_give_identity() {
        let grid = GridSpec::new(5, 7).unwrap();
        for c in [0.0, -1.25] {
            let u = PotentialField::new(grid, Array2::from_elem((5, 7), c)).unwrap();
            let t = transport_map(&u);
            for ((i, j), &v) in t.t1.indexed_iter() {
                let (x1, x2) = grid.node::<f64>(i, j);
                assert_eq!(v, x1);
                assert_eq!(t.t2[[i, j]], x2);
            }
            let f = DensityField::from_fn(grid, |_, _| 1.0f64).unwrap();
            assert_eq!(wasserstein_distance(&u, &f).unwrap(), 0.0);
        }
    }

    #[test]
    fn boundary_nodes_stay_on_their_edges() {
        let grid = GridSpec::square(9).unwrap();
        let u = PotentialField::new(
            grid,
            Array2::from_shape_fn((9, 9), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.001),
        )
        .unwrap();
        let t = transport_map(&u);
        for k in 0..9 {
            assert_eq!(t.t1[[0, k]], 0.0);
            assert_eq!(t.t1[[8, k]], 1.0);
            assert_eq!(t.t2[[k, 0]], 0.0);
            assert_eq!(t.t2[[k, 8]], 1.0);
        }
    }

    #[test]
    fn quadrature_matches_cell_summation() {
        // each cell contributes the mean of its four corners times h k
        let grid = GridSpec::new(11, 13).unwrap();
        let f = bump(grid, (0.4, 0.5), 0.2);
        let u = PotentialField::new(
            grid,
            Array2::from_shape_fn((11, 13), |(i, j)| {
                let (x, y) = grid.node::<f64>(i, j);
                0.01 * (std::f64::consts::PI * x).cos() * (2.0 * std::f64::consts::PI * y).cos()
            }),
        )
        .unwrap();
        let t = transport_map(&u);
        let (h, k) = (grid.h::<f64>(), grid.k::<f64>());
        let integrand = |i: usize, j: usize| {
            let (x1, x2) = grid.node::<f64>(i, j);
            0.5 * ((x1 - t.t1[[i, j]]).powi(2) + (x2 - t.t2[[i, j]]).powi(2)) * f.get(i, j)
        };
        let mut acc = 0.0;
        for i in 0..10 {
            for j in 0..12 {
                acc += 0.25
                    * h
                    * k
                    * (integrand(i, j) + integrand(i + 1, j) + integrand(i, j + 1) + integrand(i + 1, j + 1));
            }
        }
        assert_abs_diff_eq!(wasserstein_distance(&u, &f).unwrap(), acc.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn identical_images_have_zero_distance() {
        let img = RawImage::new(Array2::from_shape_fn((10, 10), |(i, j)| ((i + 2 * j) % 4) as f64)).unwrap();
        let d = pde_distance(&img, &img, &NewtonConfig::default(), 1.0).unwrap();
        assert!(d.value <= 1e-8);
        assert!(d.converged());
        assert_eq!(d.method, DistanceMethod::Wasserstein);
    }

    #[test]
    fn linear_cost_differs() {
        let grid = GridSpec::square(20).unwrap();
        let f = bump(grid, (0.45, 0.5), 0.15);
        let g = bump(grid, (0.55, 0.5), 0.15);
        let cfg = NewtonConfig::default();
        let q = density_distance(&f, &fit_spline(&g), &cfg, CostKind::HalfSquared).unwrap();
        let l = density_distance(&f, &fit_spline(&g), &cfg, CostKind::Linear).unwrap();
        assert!(q.converged() && l.converged());
        assert!(l.value > q.value && q.value > 0.0);
    }

    #[test]
    fn mesh_csv_has_one_row_per_node() {
        let grid = GridSpec::square(4).unwrap();
        let t = transport_map(&PotentialField::<f64>::zeros(grid));
        let mut buf = Vec::new();
        t.write_mesh_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 17);
        assert!(text.starts_with("i,j,x1,x2,t1,t2\n0,0,0,0,0,0"));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = RawImage::new(Array2::from_elem((4, 4), 1.0)).unwrap();
        let b = RawImage::new(Array2::from_elem((4, 5), 1.0)).unwrap();
        assert!(matches!(
            pde_distance(&a, &b, &NewtonConfig::default(), 1.0),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
