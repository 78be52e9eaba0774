//! Baseline image dissimilarities: Euclidean, absolute Pearson correlation and
//! one-sided tangent distance.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

fn check_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn euclidean<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    check_len(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt())
}

/// `|p|` for the sample correlation coefficient `p`.
pub fn pearson_similarity<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    check_len(a, b)?;
    if a.is_empty() {
        return Err(Error::UndefinedCorrelation("empty vectors".into()));
    }
    let n = T::from_usize_lossy(a.len());
    let ma = a.iter().copied().sum::<T>() / n;
    let mb = b.iter().copied().sum::<T>() / n;
    let (mut sab, mut saa, mut sbb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == T::zero() || sbb == T::zero() {
        return Err(Error::UndefinedCorrelation(
            "an image has zero intensity variance".into(),
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).abs().min(T::one()))
}

/// Dissimilarity `1 - |p|` used for nearest-neighbour ranking.
pub fn pearson_dissimilarity<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    Ok(T::one() - pearson_similarity(a, b)?)
}

/// Transformations spanning the tangent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TangentConfig {
    /// Shift along rows.
    pub x1_translation: bool,
    /// Shift along columns.
    pub x2_translation: bool,
    pub rotation: bool,
    pub scaling: bool,
    /// Passes of the 3x3 binomial filter before differencing.
    pub smoothing_passes: usize,
}

impl Default for TangentConfig {
    fn default() -> Self {
        Self {
            x1_translation: true,
            x2_translation: true,
            rotation: true,
            scaling: true,
            smoothing_passes: 1,
        }
    }
}

impl TangentConfig {
    pub fn enabled(&self) -> usize {
        [self.x1_translation, self.x2_translation, self.rotation, self.scaling]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled() == 0 {
            return Err(Error::invalid("no tangent transformation enabled"));
        }
        Ok(())
    }
}

fn binomial_smooth<T: Real>(img: &Array2<T>) -> Array2<T> {
    let (m, n) = img.dim();
    let at = |i: isize, j: isize| {
        let i = i.clamp(0, m as isize - 1) as usize;
        let j = j.clamp(0, n as isize - 1) as usize;
        img[[i, j]]
    };
    let w = [T::lit(0.25), T::lit(0.5), T::lit(0.25)];
    Array2::from_shape_fn((m, n), |(i, j)| {
        let mut acc = T::zero();
        for (a, &wa) in w.iter().enumerate() {
            for (b, &wb) in w.iter().enumerate() {
                acc += wa * wb * at(i as isize + a as isize - 1, j as isize + b as isize - 1);
            }
        }
        acc
    })
}

/// Central differences in pixel units, one-sided at the border.
fn pixel_gradient<T: Real>(img: &Array2<T>) -> (Array2<T>, Array2<T>) {
    let (m, n) = img.dim();
    let half = T::lit(0.5);
    let d = |lo: T, hi: T, span: usize| if span == 2 { (hi - lo) * half } else { hi - lo };
    let g1 = Array2::from_shape_fn((m, n), |(i, j)| {
        let (lo, hi) = (i.saturating_sub(1), (i + 1).min(m - 1));
        d(img[[lo, j]], img[[hi, j]], hi - lo)
    });
    let g2 = Array2::from_shape_fn((m, n), |(i, j)| {
        let (lo, hi) = (j.saturating_sub(1), (j + 1).min(n - 1));
        d(img[[i, lo]], img[[i, hi]], hi - lo)
    });
    (g1, g2)
}

/// Derivative images of the enabled transformations, in the order
/// x1-translation, x2-translation, rotation, scaling.
pub fn tangent_vectors<T: Real>(img: ArrayView2<T>, cfg: &TangentConfig) -> Result<Vec<Array2<T>>> {
    cfg.validate()?;
    let (m, n) = img.dim();
    if m < 3 || n < 3 {
        return Err(Error::invalid(format!("image {m}x{n} is smaller than 3x3")));
    }
    let mut s = img.to_owned();
    for _ in 0..cfg.smoothing_passes {
        s = binomial_smooth(&s);
    }
    let (g1, g2) = pixel_gradient(&s);
    let c1 = T::from_usize_lossy(m - 1) * T::lit(0.5);
    let c2 = T::from_usize_lossy(n - 1) * T::lit(0.5);
    let coord = |i: usize, j: usize| (T::from_usize_lossy(i) - c1, T::from_usize_lossy(j) - c2);
    let mut out = Vec::with_capacity(cfg.enabled());
    if cfg.x1_translation {
        out.push(g1.clone());
    }
    if cfg.x2_translation {
        out.push(g2.clone());
    }
    if cfg.rotation {
        out.push(Array2::from_shape_fn((m, n), |(i, j)| {
            let (x1, x2) = coord(i, j);
            x2 * g1[[i, j]] - x1 * g2[[i, j]]
        }));
    }
    if cfg.scaling {
        out.push(Array2::from_shape_fn((m, n), |(i, j)| {
            let (x1, x2) = coord(i, j);
            x1 * g1[[i, j]] + x2 * g2[[i, j]]
        }));
    }
    Ok(out)
}

/// Orthonormal basis of the tangent space at an image, reusable across many
/// comparisons with that image.
#[derive(Debug, Clone)]
pub struct TangentBasis<T> {
    origin: Vec<T>,
    shape: (usize, usize),
    basis: Vec<Vec<T>>,
}

impl<T: Real> TangentBasis<T> {
    /// Modified Gram-Schmidt over the tangent vectors; nearly dependent
    /// directions are dropped.
    pub fn new(a: ArrayView2<T>, cfg: &TangentConfig) -> Result<Self> {
        let tangents = tangent_vectors(a, cfg)?;
        let mut basis: Vec<Vec<T>> = Vec::with_capacity(tangents.len());
        for t in tangents {
            let mut v: Vec<T> = t.iter().copied().collect();
            let orig = norm(&v);
            for q in &basis {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(x, &y)| *x -= c * y);
            }
            let nv = norm(&v);
            if nv > T::lit(1e-10) * orig && nv > T::zero() {
                v.iter_mut().for_each(|x| *x /= nv);
                basis.push(v);
            }
        }
        Ok(Self {
            origin: a.iter().copied().collect(),
            shape: a.dim(),
            basis,
        })
    }

    /// Rank of the tangent span.
    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    /// Distance from `b` to the tangent plane through the origin image.
    pub fn distance(&self, b: ArrayView2<T>) -> Result<T> {
        if b.dim() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                found: b.dim(),
            });
        }
        let mut r: Vec<T> = b.iter().zip(&self.origin).map(|(&y, &x)| y - x).collect();
        for q in &self.basis {
            let c = dot(&r, q);
            r.iter_mut().zip(q).for_each(|(x, &y)| *x -= c * y);
        }
        Ok(norm(&r))
    }
}

/// `min_alpha |a + sum_l alpha_l t_l(a) - b|`, the residual of the
/// minimum-norm least-squares fit.
pub fn tangent_distance<T: Real>(
    a: ArrayView2<T>,
    b: ArrayView2<T>,
    cfg: &TangentConfig,
) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    TangentBasis::new(a, cfg)?.distance(b)
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}
