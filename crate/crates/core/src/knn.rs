//! Nearest-neighbour classification with pluggable image distances, the
//! accuracy-versus-training-size experiment and the solver timing benchmark.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_partitions, ExperimentSpec, LabeledImage};
use crate::error::{Error, Result};
use crate::grid::{density_from_image, DensityField, GridSpec, RawImage};
use crate::interp::{fit_spline, SplineSurface};
use crate::kantorovich::{measure_from_image, solve_lp, CostMatrix, DiscreteMeasure, GroundCost};
use crate::ma_solver::{newton_solve, NewtonConfig};
use crate::method::DistanceMethod;
use crate::metrics::{euclidean, pearson_dissimilarity, TangentBasis, TangentConfig};
use crate::scalar::Real;
use crate::transport::{density_distance, PdeDistanceConfig};

/// A dissimilarity between images together with its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum DistanceFunction {
    Euclidean,
    /// `1 - |p|`.
    Pearson,
    Tangent(TangentConfig),
    #[serde(rename = "wasserstein-pde")]
    Wasserstein(PdeDistanceConfig),
    /// Exact LP on pixel-centre supports.
    KantorovichLp { cost: GroundCost },
}

/// Per-image data a distance needs, computed once per image.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    image: RawImage<T>,
    pixels: Vec<T>,
    density: Option<DensityField<T>>,
    spline: Option<SplineSurface<T>>,
    tangent: Option<TangentBasis<T>>,
    measure: Option<DiscreteMeasure<T>>,
}

impl<T> Prepared<T> {
    pub fn image(&self) -> &RawImage<T> {
        &self.image
    }
}

/// One evaluated dissimilarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairDistance<T> {
    pub value: T,
    /// False when an iterative solver stopped early.
    pub converged: bool,
}

impl DistanceFunction {
    /// Default settings for a method; `offset` applies to the PDE method.
    pub fn from_method(method: DistanceMethod, offset: f64) -> Self {
        match method {
            DistanceMethod::Euclidean => DistanceFunction::Euclidean,
            DistanceMethod::Pearson => DistanceFunction::Pearson,
            DistanceMethod::Tangent => DistanceFunction::Tangent(TangentConfig::default()),
            DistanceMethod::Wasserstein => DistanceFunction::Wasserstein(PdeDistanceConfig {
                offset,
                ..Default::default()
            }),
            DistanceMethod::KantorovichLp => DistanceFunction::KantorovichLp {
                cost: GroundCost::HalfSquared,
            },
        }
    }

    pub fn method(&self) -> DistanceMethod {
        match self {
            DistanceFunction::Euclidean => DistanceMethod::Euclidean,
            DistanceFunction::Pearson => DistanceMethod::Pearson,
            DistanceFunction::Tangent(_) => DistanceMethod::Tangent,
            DistanceFunction::Wasserstein(_) => DistanceMethod::Wasserstein,
            DistanceFunction::KantorovichLp { .. } => DistanceMethod::KantorovichLp,
        }
    }

    pub fn prepare<T: Real>(&self, img: &RawImage<T>) -> Result<Prepared<T>> {
        let mut p = Prepared {
            image: img.clone(),
            pixels: img.as_vector(),
            density: None,
            spline: None,
            tangent: None,
            measure: None,
        };
        match self {
            DistanceFunction::Euclidean | DistanceFunction::Pearson => {}
            DistanceFunction::Tangent(cfg) => {
                p.tangent = Some(TangentBasis::new(img.pixels().view(), cfg)?);
            }
            DistanceFunction::Wasserstein(cfg) => {
                let f = density_from_image(img, T::lit(cfg.offset))?;
                p.spline = Some(fit_spline(&f));
                p.density = Some(f);
            }
            DistanceFunction::KantorovichLp { .. } => {
                p.measure = Some(measure_from_image(img)?);
            }
        }
        Ok(p)
    }

    /// Dissimilarity of `query` to `reference`. Asymmetric methods use the
    /// query as source (PDE) or as the tangent-plane origin.
    pub fn between<T: Real>(&self, query: &Prepared<T>, reference: &Prepared<T>) -> Result<PairDistance<T>> {
        let exact = |value| Ok(PairDistance { value, converged: true });
        match self {
            DistanceFunction::Euclidean => exact(euclidean(&query.pixels, &reference.pixels)?),
            DistanceFunction::Pearson => exact(pearson_dissimilarity(&query.pixels, &reference.pixels)?),
            DistanceFunction::Tangent(_) => {
                let basis = query.tangent.as_ref().ok_or_else(not_prepared)?;
                exact(basis.distance(reference.image.pixels().view())?)
            }
            DistanceFunction::Wasserstein(cfg) => {
                let f = query.density.as_ref().ok_or_else(not_prepared)?;
                let g = reference.spline.as_ref().ok_or_else(not_prepared)?;
                let r = density_distance(f, g, &cfg.newton, cfg.cost)?;
                Ok(PairDistance {
                    value: T::lit(r.value),
                    converged: r.converged(),
                })
            }
            DistanceFunction::KantorovichLp { cost } => {
                let mu = query.measure.as_ref().ok_or_else(not_prepared)?;
                let nu = reference.measure.as_ref().ok_or_else(not_prepared)?;
                let c = CostMatrix::between(mu, nu, *cost);
                let k = solve_lp(mu, nu, &c)?.objective;
                exact(match cost {
                    GroundCost::HalfSquared => k.max(T::zero()).sqrt(),
                    _ => k,
                })
            }
        }
    }

    pub fn distance<T: Real>(&self, a: &RawImage<T>, b: &RawImage<T>) -> Result<T> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                expected: a.shape(),
                found: b.shape(),
            });
        }
        Ok(self.between(&self.prepare(a)?, &self.prepare(b)?)?.value)
    }
}

fn not_prepared() -> Error {
    Error::invalid("image was prepared for a different distance")
}

/// Majority label among the `k` nearest of `neighbours` (distance, label).
///
/// Distance ties keep the input order. Vote ties go to the class with the
/// smallest summed distance, then to the lowest label.
pub fn vote<T: Real>(neighbours: &[(T, u8)], k: usize) -> Result<u8> {
    if neighbours.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    if k == 0 || k > neighbours.len() {
        return Err(Error::invalid(format!(
            "k = {k} outside 1..={}",
            neighbours.len()
        )));
    }
    if neighbours.iter().any(|n| !n.0.is_finite()) {
        return Err(Error::numeric("non-finite distance"));
    }
    let mut order: Vec<usize> = (0..neighbours.len()).collect();
    order.sort_by(|&a, &b| {
        neighbours[a]
            .0
            .partial_cmp(&neighbours[b].0)
            .expect("finite distances")
    });
    let mut votes = [0usize; 256];
    let mut sums = [T::zero(); 256];
    for &i in order.iter().take(k) {
        let (d, l) = neighbours[i];
        votes[l as usize] += 1;
        sums[l as usize] += d;
    }
    let mut best: Option<u8> = None;
    for l in 0..=255u8 {
        let v = votes[l as usize];
        if v == 0 {
            continue;
        }
        best = match best {
            None => Some(l),
            Some(b) => {
                let bv = votes[b as usize];
                if v > bv || (v == bv && sums[l as usize] < sums[b as usize]) {
                    Some(l)
                } else {
                    Some(b)
                }
            }
        };
    }
    Ok(best.expect("k >= 1 neighbours voted"))
}

/// Label of `test` by `k`-nearest-neighbour vote over `train`.
pub fn classify<T: Real>(
    test: &LabeledImage<T>,
    train: &[LabeledImage<T>],
    k: usize,
    d: &DistanceFunction,
) -> Result<u8> {
    let q = d.prepare(&test.image)?;
    let neighbours = train
        .iter()
        .map(|t| {
            let r = d.prepare(&t.image)?;
            Ok((d.between(&q, &r)?.value, t.label))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::PairFailure { .. } => e,
            other => Error::PairFailure {
                query: test.index,
                reference: usize::MAX,
                source: Box::new(other),
            },
        })?;
    vote(&neighbours, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub method: DistanceMethod,
    pub partition: usize,
    pub size: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: DistanceMethod,
    pub size: usize,
    pub mean: f64,
    /// Sample standard deviation across partitions (0 for one partition).
    pub std: f64,
    pub partitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub partition: usize,
    pub test_index: usize,
    pub train_index: usize,
    pub distance: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: DistanceMethod,
    pub accuracy: Vec<AccuracyRow>,
    pub aggregates: Vec<AggregateRow>,
    pub distance_calls: usize,
    /// Mean wall-clock seconds per distance evaluation.
    pub mean_call_seconds: f64,
    /// Distance evaluations whose solver did not converge.
    pub nonconverged: usize,
    pub pairs: Option<Vec<PairRow>>,
}

impl ExperimentResult {
    pub fn aggregate(&self, size: usize) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.size == size)
    }

    pub fn write_accuracy_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,partition,size,accuracy")?;
        for r in &self.accuracy {
            writeln!(out, "{},{},{},{}", r.method, r.partition, r.size, r.accuracy)?;
        }
        Ok(())
    }

    pub fn write_aggregate_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,size,mean,std,partitions")?;
        for r in &self.aggregates {
            writeln!(out, "{},{},{},{},{}", r.method, r.size, r.mean, r.std, r.partitions)?;
        }
        Ok(())
    }

    pub fn write_pairs_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,partition,test_index,train_index,distance,converged")?;
        for r in self.pairs.iter().flatten() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                self.method, r.partition, r.test_index, r.train_index, r.distance, r.converged
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep every computed distance in the result.
    pub record_pairs: bool,
}

/// Runs the protocol with the default settings of `spec.method`.
pub fn run_experiment<T: Real>(
    spec: &ExperimentSpec,
    train_pool: &[LabeledImage<T>],
    test_pool: &[LabeledImage<T>],
) -> Result<ExperimentResult> {
    let d = DistanceFunction::from_method(spec.method, spec.offset);
    run_experiment_with(spec, train_pool, test_pool, &d, RunOptions::default())
}

pub fn run_experiment_with<T: Real>(
    spec: &ExperimentSpec,
    train_pool: &[LabeledImage<T>],
    test_pool: &[LabeledImage<T>],
    d: &DistanceFunction,
    opts: RunOptions,
) -> Result<ExperimentResult> {
    let parts = build_partitions(train_pool, test_pool, spec)?;
    let max_s = spec.schedule.iter().copied().max().expect("validated schedule");
    let test_idx = parts.test();
    let queries = test_idx
        .par_iter()
        .map(|&t| d.prepare(&test_pool[t].image))
        .collect::<Result<Vec<_>>>()?;

    let mut accuracy = Vec::new();
    let mut pairs = opts.record_pairs.then(Vec::new);
    let mut calls = 0usize;
    let mut seconds = 0.0f64;
    let mut nonconverged = 0usize;

    for (p, part) in parts.training.iter().enumerate() {
        let refs_idx = part.subset(max_s);
        let refs = refs_idx
            .par_iter()
            .map(|&r| d.prepare(&train_pool[r].image))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<Vec<(T, bool, f64)>> = queries
            .par_iter()
            .zip(&test_idx)
            .map(|(q, &ti)| {
                refs.iter()
                    .zip(&refs_idx)
                    .map(|(r, &ri)| {
                        let start = Instant::now();
                        let pd = d.between(q, r).map_err(|e| Error::PairFailure {
                            query: ti,
                            reference: ri,
                            source: Box::new(e),
                        })?;
                        Ok((pd.value, pd.converged, start.elapsed().as_secs_f64()))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        for (row, &ti) in rows.iter().zip(&test_idx) {
            for (&(v, conv, secs), &ri) in row.iter().zip(&refs_idx) {
                calls += 1;
                seconds += secs;
                if !conv {
                    nonconverged += 1;
                }
                if let Some(ps) = pairs.as_mut() {
                    ps.push(PairRow {
                        partition: p,
                        test_index: ti,
                        train_index: ri,
                        distance: v.to_f64_lossy(),
                        converged: conv,
                    });
                }
            }
        }

        for &s in &spec.schedule {
            let mut correct = 0usize;
            for (row, &ti) in rows.iter().zip(&test_idx) {
                // the size-s subset is the first s of each class block
                let neighbours: Vec<(T, u8)> = (0..10)
                    .flat_map(|c| (0..s).map(move |r| c * max_s + r))
                    .map(|pos| (row[pos].0, train_pool[refs_idx[pos]].label))
                    .collect();
                if vote(&neighbours, spec.k.min(neighbours.len()))? == test_pool[ti].label {
                    correct += 1;
                }
            }
            accuracy.push(AccuracyRow {
                method: d.method(),
                partition: p,
                size: s,
                accuracy: correct as f64 / test_idx.len() as f64,
            });
        }
        log::info!("{} partition {p} done", d.method());
    }

    let aggregates = spec
        .schedule
        .iter()
        .map(|&s| {
            let xs: Vec<f64> = accuracy.iter().filter(|r| r.size == s).map(|r| r.accuracy).collect();
            let (mean, std) = mean_std(&xs);
            AggregateRow {
                method: d.method(),
                size: s,
                mean,
                std,
                partitions: xs.len(),
            }
        })
        .collect();

    Ok(ExperimentResult {
        method: d.method(),
        accuracy,
        aggregates,
        distance_calls: calls,
        mean_call_seconds: if calls > 0 { seconds / calls as f64 } else { 0.0 },
        nonconverged,
        pairs,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Benchmark problem: a centred Gaussian mapped onto two Gaussians in
/// opposite corners, both on a uniform background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub newton: NewtonConfig,
    pub sigma: f64,
    pub background: f64,
    /// Timed solves per size; the median is reported.
    pub repeats: usize,
    /// Untimed solves before timing.
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            newton: NewtonConfig::default(),
            sigma: 0.15,
            background: 0.1,
            repeats: 3,
            warmup: 1,
        }
    }
}

pub fn corner_gaussian_pair<T: Real>(
    side: usize,
    sigma: f64,
    background: f64,
) -> Result<(DensityField<T>, DensityField<T>)> {
    let grid = GridSpec::square(side)?;
    let two_s2 = T::lit(2.0 * sigma * sigma);
    let bg = T::lit(background);
    let bump = move |x: T, y: T, cx: f64, cy: f64| {
        let (dx, dy) = (x - T::lit(cx), y - T::lit(cy));
        (-(dx * dx + dy * dy) / two_s2).exp()
    };
    let f = DensityField::from_fn(grid, |x, y| bg + bump(x, y, 0.5, 0.5))?;
    let g = DensityField::from_fn(grid, |x, y| bg + bump(x, y, 0.0, 0.0) + bump(x, y, 1.0, 1.0))?;
    Ok((f, g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub side: usize,
    pub pixels: usize,
    pub seconds: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub points: Vec<BenchPoint>,
    /// Least-squares slope of `ln seconds` against `ln pixels`.
    pub slope: f64,
    pub intercept: f64,
    /// Sides left out of the fit because the solve did not converge.
    pub excluded: Vec<usize>,
}

impl BenchResult {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "N,seconds,side,iterations,converged")?;
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{},{}",
                p.pixels, p.seconds, p.side, p.iterations, p.converged
            )?;
        }
        Ok(())
    }
}

/// Least-squares line through `(ln x, ln y)`.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InsufficientData("at least two points needed".into()));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("all x values coincide"));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Times the benchmark solve for each grid side and fits the log-log slope.
pub fn complexity_benchmark(sizes: &[usize], cfg: &BenchConfig) -> Result<BenchResult> {
    if sizes.len() < 4 {
        return Err(Error::invalid(format!(
            "benchmark needs at least 4 sizes, got {}",
            sizes.len()
        )));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("sizes must be strictly increasing"));
    }
    if cfg.repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let mut points = Vec::with_capacity(sizes.len());
    let mut excluded = Vec::new();
    for &side in sizes {
        let (f, g) = corner_gaussian_pair::<f64>(side, cfg.sigma, cfg.background)?;
        for _ in 0..cfg.warmup {
            newton_solve(&f, &g, &cfg.newton)?;
        }
        let mut times = Vec::with_capacity(cfg.repeats);
        let mut last = None;
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            let (_, diag) = newton_solve(&f, &g, &cfg.newton)?;
            times.push(start.elapsed().as_secs_f64());
            last = Some(diag);
        }
        times.sort_by(|a, b| a.total_cmp(b));
        let diag = last.expect("repeats >= 1");
        if !diag.converged {
            log::warn!("benchmark size {side} did not converge; excluded from the fit");
            excluded.push(side);
        }
        points.push(BenchPoint {
            side,
            pixels: side * side,
            seconds: times[times.len() / 2],
            iterations: diag.iterations,
            converged: diag.converged,
        });
    }
    let fit: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.converged)
        .map(|p| (p.pixels as f64, p.seconds))
        .collect();
    let (slope, intercept) = fit_loglog(&fit)?;
    Ok(BenchResult {
        points,
        slope,
        intercept,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn img(v: f64) -> RawImage<f64> {
        RawImage::new(Array2::from_shape_fn((4, 4), |(i, j)| v + (i * 4 + j) as f64 * 0.01)).unwrap()
    }

    #[test]
    fn vote_rules() {
        // three points at known distances
        let n = [(0.3, 2u8), (0.1, 1), (0.2, 2)];
        assert_eq!(vote(&n, 1).unwrap(), 1);
        assert_eq!(vote(&n, 2).unwrap(), 1); // 1 vs 2 tie, class 1 has smaller sum
        assert_eq!(vote(&n, 3).unwrap(), 2);
        let tied = [(0.5, 7u8), (0.5, 3)];
        assert_eq!(vote(&tied, 2).unwrap(), 3);
        assert!(vote::<f64>(&[], 1).is_err());
        assert!(vote(&n, 4).is_err());
        assert!(vote(&[(f64::NAN, 1u8)], 1).is_err());
    }

    #[test]
    fn classify_finds_self() {
        let train: Vec<LabeledImage<f64>> = (0..5)
            .map(|k| LabeledImage { image: img(k as f64), label: k as u8, index: k })
            .collect();
        for d in [
            DistanceFunction::Euclidean,
            DistanceFunction::Tangent(TangentConfig::default()),
            DistanceFunction::from_method(DistanceMethod::Wasserstein, 1.0),
        ] {
            for t in &train {
                assert_eq!(classify(t, &train, 1, &d).unwrap(), t.label);
            }
        }
    }

    #[test]
    fn pearson_ranking_is_descending_correlation() {
        let q = RawImage::new(Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64)).unwrap();
        let a = RawImage::new(Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 * 2.0 + ((i + j) % 2) as f64)).unwrap();
        let b = RawImage::new(Array2::from_shape_fn((3, 3), |(i, j)| ((i * 7 + j * 5) % 9) as f64)).unwrap();
        let d = DistanceFunction::Pearson;
        let (da, db) = (d.distance(&q, &a).unwrap(), d.distance(&q, &b).unwrap());
        let (pa, pb) = (
            crate::metrics::pearson_similarity(&q.as_vector(), &a.as_vector()).unwrap(),
            crate::metrics::pearson_similarity(&q.as_vector(), &b.as_vector()).unwrap(),
        );
        assert_eq!(da < db, pa > pb);
    }

    #[test]
    fn distance_function_round_trip() {
        for m in DistanceMethod::ALL {
            assert_eq!(DistanceFunction::from_method(m, 1.0).method(), m);
        }
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn loglog_fit_recovers_power() {
        let pts: Vec<(f64, f64)> = [256.0, 1024.0, 4096.0, 16384.0].iter().map(|&n: &f64| (n, 3e-6 * n.powf(1.7))).collect();
        let (s, _) = fit_loglog(&pts).unwrap();
        assert!((s - 1.7).abs() < 1e-12);
    }

    #[test]
    fn benchmark_argument_checks() {
        let cfg = BenchConfig::default();
        assert!(complexity_benchmark(&[16], &cfg).is_err());
        assert!(complexity_benchmark(&[16, 12, 20, 24], &cfg).is_err());
    }
}
