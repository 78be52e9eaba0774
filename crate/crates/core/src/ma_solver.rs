//! Damped Newton iteration for `det(I - D^2 u) g(x - grad u) = f(x)`.
//!
//! Each step linearizes around the current `u` with `u -> u + eps w`:
//!
//! ```text
//! G (beta w_11 + gamma w_22 + delta w_12) - alpha (G_1 w_1 + G_2 w_2) = f - alpha G
//! alpha = det(I - D^2 u), beta = u_22 - 1, gamma = u_11 - 1, delta = -2 u_12
//! ```
//!
//! with `G` and its partials taken from the spline of `g` at `x - grad u`.
//! The operator only contains derivatives of `w`, so constants span its
//! kernel; the step is found from the bordered system with multiplier
//! `lambda`, which absorbs any mass mismatch between `f` and the interpolated
//! `g`. The residual therefore converges to a constant, and convergence is
//! measured by its spread `max r - min r`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdiff::{gradient, hessian, node_stencils, GradientField};
use crate::grid::{DensityField, GridSpec};
use crate::interp::{fit_spline, SplineSurface, DEFAULT_VALUE_FLOOR};
use crate::linsolve::{solve_with, BorderedSystem, SolverOptions, SparseMatrix};
use crate::scalar::Real;

/// Potential `u`; the transport map is `x - grad u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField<T> {
    grid: GridSpec,
    u: Array2<T>,
}

impl<T: Real> PotentialField<T> {
    pub fn new(grid: GridSpec, u: Array2<T>) -> Result<Self> {
        grid.check(&u)?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite potential"));
        }
        Ok(Self { grid, u })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            u: Array2::zeros(grid.shape()),
            grid,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &Array2<T> {
        &self.u
    }

    pub fn into_values(self) -> Array2<T> {
        self.u
    }

    /// Convex potential `phi = |x|^2 / 2 - u`, whose gradient is the map.
    pub fn brenier_potential(&self) -> Array2<T> {
        let half = T::lit(0.5);
        Array2::from_shape_fn(self.grid.shape(), |(i, j)| {
            let (x1, x2) = self.grid.node::<T>(i, j);
            half * (x1 * x1 + x2 * x2) - self.u[[i, j]]
        })
    }

    /// `det(I - D^2 u)` at every node.
    pub fn determinant(&self) -> Array2<T> {
        let hs = hessian(&self.u, &self.grid).expect("shape checked at construction");
        Array2::from_shape_fn(self.grid.shape(), |(i, j)| hs.monge_ampere_det(i, j))
    }

    fn remove_mean(&mut self) {
        let mean = self.u.sum() / T::from_usize_lossy(self.u.len());
        self.u.mapv_inplace(|v| v - mean);
    }
}

/// What to do when `x - grad u` leaves the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClampPolicy {
    /// Evaluate the spline at the nearest point of the square and count it.
    #[default]
    Clamp,
    /// Fail the solve.
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    /// Fraction of each Newton step taken, in `(0, 1]`.
    pub damping: f64,
    /// Stop once `max r - min r` drops below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Lower bound applied to interpolated target values.
    pub value_floor: f64,
    pub clamp: ClampPolicy,
    /// Step halvings allowed when the determinant turns nonpositive.
    pub positivity_retries: usize,
    pub solver: SolverOptions,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            damping: 1.0,
            tol: 1e-8,
            max_iters: 50,
            value_floor: DEFAULT_VALUE_FLOOR,
            clamp: ClampPolicy::Clamp,
            positivity_retries: 5,
            solver: SolverOptions::default(),
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.value_floor >= 0.0) {
            return Err(Error::invalid("value_floor must be nonnegative"));
        }
        Ok(())
    }
}

/// Coefficients of the linearized operator at one iterate.
#[derive(Debug, Clone)]
pub struct LinearizationCoefficients<T> {
    pub alpha: Array2<T>,
    pub beta: Array2<T>,
    pub gamma: Array2<T>,
    pub delta: Array2<T>,
    /// Target density at `x - grad u` and its partials.
    pub g: Array2<T>,
    pub g_y1: Array2<T>,
    pub g_y2: Array2<T>,
    /// Nodes whose image point fell outside the unit square.
    pub clamped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    /// Residual spread at each evaluated iterate.
    pub residual_history: Vec<f64>,
    pub clamped_point_count: Vec<usize>,
    /// Times the step was halved to keep the determinant positive.
    pub step_halvings: Vec<usize>,
    /// Bordered multiplier of each linear solve.
    pub multipliers: Vec<f64>,
    pub converged: bool,
    /// `max |r|` at the returned iterate.
    pub final_max_abs_residual: f64,
}

impl SolveDiagnostics {
    pub fn final_spread(&self) -> Option<f64> {
        self.residual_history.last().copied()
    }
}

fn sample_target<T: Real>(
    grid: &GridSpec,
    grad: &GradientField<T>,
    spline: &SplineSurface<T>,
    floor: T,
    policy: ClampPolicy,
) -> Result<(Array2<T>, Array2<T>, Array2<T>, usize)> {
    let shape = grid.shape();
    let mut g = Array2::zeros(shape);
    let mut g1 = Array2::zeros(shape);
    let mut g2 = Array2::zeros(shape);
    let mut clamped = 0;
    for i in 0..shape.0 {
        for j in 0..shape.1 {
            let (x1, x2) = grid.node::<T>(i, j);
            let y1 = x1 - grad.dx1[[i, j]];
            let y2 = x2 - grad.dx2[[i, j]];
            if !y1.is_finite() || !y2.is_finite() {
                return Err(Error::numeric(format!("non-finite map at node ({i}, {j})")));
            }
            if SplineSurface::<T>::is_outside(y1, y2) {
                if policy == ClampPolicy::Reject {
                    return Err(Error::numeric(format!(
                        "map leaves the unit square at node ({i}, {j})"
                    )));
                }
                clamped += 1;
            }
            let s = spline.eval_with_partials(y1, y2);
            g[[i, j]] = s.value.max(floor);
            g1[[i, j]] = s.dy1;
            g2[[i, j]] = s.dy2;
        }
    }
    Ok((g, g1, g2, clamped))
}

fn coefficients_with<T: Real>(
    u: &PotentialField<T>,
    spline: &SplineSurface<T>,
    floor: T,
    policy: ClampPolicy,
) -> Result<LinearizationCoefficients<T>> {
    if spline.grid() != u.grid() {
        return Err(Error::ShapeMismatch {
            expected: u.grid().shape(),
            found: spline.grid().shape(),
        });
    }
    let grid = u.grid();
    let hs = hessian(&u.u, grid)?;
    let grad = gradient(&u.u, grid)?;
    let one = T::one();
    let alpha = Array2::from_shape_fn(grid.shape(), |(i, j)| hs.monge_ampere_det(i, j));
    let beta = hs.dx2x2.mapv(|v| v - one);
    let gamma = hs.dx1x1.mapv(|v| v - one);
    let delta = hs.dx1x2.mapv(|v| T::lit(-2.0) * v);
    if alpha.iter().chain(beta.iter()).chain(delta.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite second derivatives"));
    }
    let (g, g_y1, g_y2, clamped) = sample_target(grid, &grad, spline, floor, policy)?;
    Ok(LinearizationCoefficients {
        alpha,
        beta,
        gamma,
        delta,
        g,
        g_y1,
        g_y2,
        clamped,
    })
}

/// Linearization coefficients at `u` with default floor and clamping.
pub fn coefficients<T: Real>(
    u: &PotentialField<T>,
    g_spline: &SplineSurface<T>,
) -> Result<LinearizationCoefficients<T>> {
    coefficients_with(u, g_spline, T::lit(DEFAULT_VALUE_FLOOR), ClampPolicy::Clamp)
}

/// `f - det(I - D^2 u) g(x - grad u)` at every node.
pub fn residual<T: Real>(
    u: &PotentialField<T>,
    f: &DensityField<T>,
    g_spline: &SplineSurface<T>,
) -> Result<Array2<T>> {
    let c = coefficients(u, g_spline)?;
    residual_from(&c, f)
}

fn residual_from<T: Real>(c: &LinearizationCoefficients<T>, f: &DensityField<T>) -> Result<Array2<T>> {
    f.grid().check(&c.alpha)?;
    Ok(Array2::from_shape_fn(f.grid().shape(), |(i, j)| {
        f.get(i, j) - c.alpha[[i, j]] * c.g[[i, j]]
    }))
}

fn spread<T: Real>(r: &Array2<T>) -> T {
    let (lo, hi) = r
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Bordered Newton system at the current coefficients.
pub fn assemble<T: Real>(
    coef: &LinearizationCoefficients<T>,
    f: &DensityField<T>,
    grid: &GridSpec,
) -> Result<BorderedSystem<T>> {
    grid.check(&coef.alpha)?;
    grid.check(f.values())?;
    let (m, n) = grid.shape();
    let index = |i: usize, j: usize| i * n + j;
    let mut trip = Vec::with_capacity(m * n * 9);
    for i in 0..m {
        for j in 0..n {
            let st = node_stencils::<T>(grid, i, j);
            let g = coef.g[[i, j]];
            let a = coef.alpha[[i, j]];
            let row = index(i, j);
            let terms = [
                (&st.d11, g * coef.beta[[i, j]]),
                (&st.d22, g * coef.gamma[[i, j]]),
                (&st.d12, g * coef.delta[[i, j]]),
                (&st.d1, -a * coef.g_y1[[i, j]]),
                (&st.d2, -a * coef.g_y2[[i, j]]),
            ];
            for (taps, scale) in terms {
                for &(di, dj, w) in taps.iter() {
                    let ii = (i as isize + di) as usize;
                    let jj = (j as isize + dj) as usize;
                    trip.push((row, index(ii, jj), scale * w));
                }
            }
        }
    }
    let core = SparseMatrix::from_triplets(m * n, trip)?;
    let rhs = residual_from(coef, f)?.iter().copied().collect();
    BorderedSystem::new(core, rhs)
}

/// Solves for the potential carrying `f` onto `g`.
pub fn newton_solve<T: Real>(
    f: &DensityField<T>,
    g: &DensityField<T>,
    cfg: &NewtonConfig,
) -> Result<(PotentialField<T>, SolveDiagnostics)> {
    if f.grid() != g.grid() {
        return Err(Error::ShapeMismatch {
            expected: f.grid().shape(),
            found: g.grid().shape(),
        });
    }
    let spline = fit_spline(g);
    newton_solve_with_spline(f, &spline, cfg)
}

/// As [`newton_solve`] with a prebuilt target interpolant.
pub fn newton_solve_with_spline<T: Real>(
    f: &DensityField<T>,
    spline: &SplineSurface<T>,
    cfg: &NewtonConfig,
) -> Result<(PotentialField<T>, SolveDiagnostics)> {
    cfg.validate()?;
    let grid = *f.grid();
    if spline.grid() != &grid {
        return Err(Error::ShapeMismatch {
            expected: grid.shape(),
            found: spline.grid().shape(),
        });
    }
    let floor = T::lit(cfg.value_floor);
    let tol = T::lit(cfg.tol);
    let mut u = PotentialField::zeros(grid);
    let mut diag = SolveDiagnostics::default();
    let mut best: Option<(T, PotentialField<T>, T)> = None;

    for it in 1..=cfg.max_iters {
        let coef = coefficients_with(&u, spline, floor, cfg.clamp).map_err(|e| e.at_iteration(it))?;
        let r = residual_from(&coef, f)?;
        let s = spread(&r);
        let max_abs = r.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
        diag.iterations = it;
        diag.residual_history.push(s.to_f64_lossy());
        diag.clamped_point_count.push(coef.clamped);
        log::debug!("newton iteration {it}: spread {s:e}, clamped {}", coef.clamped);
        if !s.is_finite() {
            return Err(Error::numeric("non-finite residual").at_iteration(it));
        }
        if best.as_ref().map_or(true, |b| s < b.0) {
            best = Some((s, u.clone(), max_abs));
        }
        if s < tol {
            diag.converged = true;
            diag.final_max_abs_residual = max_abs.to_f64_lossy();
            return Ok((u, diag));
        }
        if it == cfg.max_iters {
            break;
        }
        let sys = assemble(&coef, f, &grid).map_err(|e| e.at_iteration(it))?;
        let sol = solve_with(&sys, &cfg.solver).map_err(|e| e.at_iteration(it))?;
        diag.multipliers.push(sol.lambda.to_f64_lossy());

        let mut step = T::lit(cfg.damping);
        let mut halvings = 0;
        let next = loop {
            let mut cand = u.clone();
            for (c, &w) in cand.u.iter_mut().zip(&sol.w) {
                *c += step * w;
            }
            let positive = cand.determinant().iter().all(|&d| d > T::zero());
            if positive || halvings == cfg.positivity_retries {
                if !positive {
                    log::warn!("determinant not positive after {halvings} halvings at iteration {it}");
                }
                break cand;
            }
            step *= T::lit(0.5);
            halvings += 1;
        };
        diag.step_halvings.push(halvings);
        u = next;
        u.remove_mean();
    }

    let (_, u_best, max_abs) = best.expect("at least one iterate evaluated");
    diag.converged = false;
    diag.final_max_abs_residual = max_abs.to_f64_lossy();
    log::warn!(
        "newton solve stopped after {} iterations, spread {:e}",
        diag.iterations,
        diag.final_spread().unwrap_or(f64::NAN)
    );
    Ok((u_best, diag))
}
