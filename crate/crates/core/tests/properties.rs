use ndarray::Array2;
use proptest::prelude::*;

use monge_ot::dataset::LabeledImage;
use monge_ot::fdiff::{gradient, hessian};
use monge_ot::grid::trapezium_integral;
use monge_ot::kantorovich::{CostMatrix, DiscreteMeasure};
use monge_ot::knn::vote;
use monge_ot::linsolve::solve;
use monge_ot::ma_solver::{assemble, coefficients, residual};
use monge_ot::metrics::pearson_similarity;
use monge_ot::*;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    (rows, cols).prop_flat_map(move |(m, n)| {
        prop::collection::vec(lo..hi, m * n).prop_map(move |v| Array2::from_shape_vec((m, n), v).unwrap())
    })
}

/// Smooth potential with small second derivatives on an `n x n` grid.
fn potential(n: usize, c: [f64; 4]) -> PotentialField64 {
    use std::f64::consts::PI;
    let grid = GridSpec::square(n).unwrap();
    let u = Array2::from_shape_fn((n, n), |(i, j)| {
        let (x, y) = grid.node::<f64>(i, j);
        c[0] * (PI * x).cos() + c[1] * (PI * y).cos() + c[2] * (PI * x).cos() * (PI * y).cos() + c[3] * (2.0 * PI * x).cos()
    });
    PotentialField::new(grid, u).unwrap()
}

fn coeffs() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-0.01..0.01f64)
}

fn bump(n: usize, c: (f64, f64), s: f64) -> DensityField64 {
    DensityField::from_fn(GridSpec::square(n).unwrap(), |x: f64, y: f64| {
        0.2 + (-((x - c.0).powi(2) + (y - c.1).powi(2)) / (2.0 * s * s)).exp()
    })
    .unwrap()
}

fn measure() -> impl Strategy<Value = DiscreteMeasure<f64>> {
    (1..=6usize)
        .prop_flat_map(|n| (prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), n), prop::collection::vec(0.05..1.0f64, n)))
        .prop_map(|(l, w)| DiscreteMeasure::normalized(l, w).unwrap())
}

fn w2(a: &DiscreteMeasure<f64>, b: &DiscreteMeasure<f64>) -> f64 {
    solve_lp(a, b, &CostMatrix::between(a, b, GroundCost::HalfSquared)).unwrap().objective.max(0.0).sqrt()
}

proptest! {
    #[test]
    fn density_invariants_hold(px in matrix(3..=12, 3..=12, 0.0, 1.0), offset in 0.01..5.0f64) {
        let d = density_from_image(&RawImage::new(px).unwrap(), offset).unwrap();
        prop_assert!(d.values().iter().all(|&v| v > 0.0));
        prop_assert!((d.integral() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn density_scale_cancels(px in matrix(3..=10, 3..=10, 0.0, 1.0), offset in 0.01..5.0f64, k in 0.1..10.0f64) {
        let a = density_from_image(&RawImage::new(px.clone()).unwrap(), offset).unwrap();
        let b = density_from_image(&RawImage::new(px.mapv(|v| v * k)).unwrap(), offset * k).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn trapezium_integral_is_linear(
        (u, v) in (3..=9usize, 3..=9usize).prop_flat_map(|(m, n)| (
            prop::collection::vec(-5.0..5.0f64, m * n).prop_map(move |x| Array2::from_shape_vec((m, n), x).unwrap()),
            prop::collection::vec(-5.0..5.0f64, m * n).prop_map(move |x| Array2::from_shape_vec((m, n), x).unwrap()),
        )),
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
    ) {
        let grid = GridSpec::new(u.nrows(), u.ncols()).unwrap();
        let lhs = trapezium_integral(&(&u * a + &v * b), &grid).unwrap();
        let rhs = a * trapezium_integral(&u, &grid).unwrap() + b * trapezium_integral(&v, &grid).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12);
    }

    #[test]
    fn finite_differences_are_linear_with_neumann_gradient(
        (u, v) in (3..=9usize, 3..=9usize).prop_flat_map(|(m, n)| (
            prop::collection::vec(-1.0..1.0f64, m * n).prop_map(move |x| Array2::from_shape_vec((m, n), x).unwrap()),
            prop::collection::vec(-1.0..1.0f64, m * n).prop_map(move |x| Array2::from_shape_vec((m, n), x).unwrap()),
        )),
        a in -2.0..2.0f64,
    ) {
        let grid = GridSpec::new(u.nrows(), u.ncols()).unwrap();
        let w = &u * a + &v;
        let (gu, gv, gw) = (gradient(&u, &grid).unwrap(), gradient(&v, &grid).unwrap(), gradient(&w, &grid).unwrap());
        let (hu, hv, hw) = (hessian(&u, &grid).unwrap(), hessian(&v, &grid).unwrap(), hessian(&w, &grid).unwrap());
        let tol = 1e-9 * (grid.rows().max(grid.cols()) as f64).powi(2);
        for (x, y, z) in [(&gu.dx1, &gv.dx1, &gw.dx1), (&gu.dx2, &gv.dx2, &gw.dx2), (&hu.dx1x1, &hv.dx1x1, &hw.dx1x1), (&hu.dx2x2, &hv.dx2x2, &hw.dx2x2), (&hu.dx1x2, &hv.dx1x2, &hw.dx1x2)] {
            for ((p, q), r) in x.iter().zip(y).zip(z) {
                prop_assert!((a * p + q - r).abs() <= tol);
            }
        }
        let (m, n) = grid.shape();
        for j in 0..n {
            prop_assert_eq!(gu.dx1[[0, j]], 0.0);
            prop_assert_eq!(gu.dx1[[m - 1, j]], 0.0);
        }
        for i in 0..m {
            prop_assert_eq!(gu.dx2[[i, 0]], 0.0);
            prop_assert_eq!(gu.dx2[[i, n - 1]], 0.0);
        }
    }

    #[test]
    fn spline_interpolates_nodes(v in matrix(3..=10, 3..=10, 0.1, 2.0)) {
        let grid = GridSpec::new(v.nrows(), v.ncols()).unwrap();
        let s = SplineSurface::fit(grid, v.clone());
        for ((i, j), &x) in v.indexed_iter() {
            let (y1, y2) = grid.node::<f64>(i, j);
            prop_assert!((s.eval(y1, y2) - x).abs() <= 1e-12);
        }
    }

    #[test]
    fn euclidean_identity_and_pearson_range(a in prop::collection::vec(-1.0..1.0f64, 3..40), k in 0.5..2.0f64) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * k + (i as f64 * 0.37).sin()).collect();
        prop_assert_eq!(euclidean(&a, &a).unwrap(), 0.0);
        if let Ok(p) = pearson_similarity(&a, &b) {
            prop_assert!((0.0..=1.0).contains(&p.abs()));
            prop_assert!((0.0..=1.0).contains(&pearson_dissimilarity(&a, &b).unwrap()));
        }
    }

    #[test]
    fn tangent_distance_to_self_is_zero(px in matrix(6..=10, 6..=10, 0.0, 1.0)) {
        let t = tangent_distance(px.view(), px.view(), &TangentConfig::default()).unwrap();
        prop_assert!(t.abs() <= 1e-10);
    }

    #[test]
    fn vote_is_deterministic_and_order_free_for_distinct_distances(
        d in prop::collection::hash_set(0u32..100_000, 1..30),
        labels in prop::collection::vec(0u8..10, 30),
        k in 1usize..8,
    ) {
        let n: Vec<(f64, u8)> = d.into_iter().zip(&labels).map(|(d, &l)| (d as f64 / 1000.0, l)).collect();
        let k = k.min(n.len());
        let mut rev = n.clone();
        rev.reverse();
        prop_assert_eq!(vote(&n, k).unwrap(), vote(&n, k).unwrap());
        prop_assert_eq!(vote(&n, k).unwrap(), vote(&rev, k).unwrap());
        if k == 1 {
            let nearest = n.iter().min_by(|a, b| a.0.partial_cmp(&b.0).unwrap()).unwrap();
            prop_assert_eq!(vote(&n, 1).unwrap(), nearest.1);
        }
    }

    #[test]
    fn pearson_ranking_is_descending_correlation(
        q in prop::collection::vec(0.0..1.0f64, 16),
        refs in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 16), 2..8),
    ) {
        let d = DistanceFunction::Pearson;
        let qi = RawImage::from_vec(4, 4, q.clone()).unwrap();
        let by_d: Vec<f64> = refs.iter().map(|r| d.distance(&qi, &RawImage::from_vec(4, 4, r.clone()).unwrap()).unwrap()).collect();
        let by_p: Vec<f64> = refs.iter().map(|r| pearson_similarity(&q, r).unwrap().abs()).collect();
        let argmin = (0..refs.len()).min_by(|&a, &b| by_d[a].partial_cmp(&by_d[b]).unwrap()).unwrap();
        let argmax = (0..refs.len()).max_by(|&a, &b| by_p[a].partial_cmp(&by_p[b]).unwrap()).unwrap();
        prop_assert!((by_p[argmin] - by_p[argmax]).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assembled_operator_annihilates_constants(c in coeffs(), n in 5..=14usize) {
        let u = potential(n, c);
        let f = bump(n, (0.45, 0.5), 0.15);
        let g = bump(n, (0.55, 0.5), 0.2);
        let sys = assemble(&coefficients(&u, &fit_spline(&g)).unwrap(), &f, u.grid()).unwrap();
        let ones = vec![1.0; n * n];
        prop_assert!(sys.core.matvec(&ones).iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn newton_steps_are_mean_free_and_deterministic(c in coeffs(), n in 5..=14usize) {
        let u = potential(n, c);
        let f = bump(n, (0.45, 0.5), 0.15);
        let g = bump(n, (0.5, 0.55), 0.2);
        let sys = assemble(&coefficients(&u, &fit_spline(&g)).unwrap(), &f, u.grid()).unwrap();
        let (a, b) = (solve(&sys).unwrap(), solve(&sys).unwrap());
        prop_assert!(a.w.iter().sum::<f64>().abs() <= 1e-9);
        prop_assert!(a.relative_residual <= 1e-9);
        for (x, y) in a.w.iter().zip(&b.w) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn constants_do_not_change_the_linearization(c in coeffs(), shift in -5.0..5.0f64) {
        let u = potential(11, c);
        let moved = PotentialField::new(*u.grid(), u.values().mapv(|v| v + shift)).unwrap();
        let f = bump(11, (0.5, 0.5), 0.15);
        let sp = fit_spline(&bump(11, (0.4, 0.6), 0.2));
        let close = |x: &Array2<f64>, y: &Array2<f64>| x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1e-9);
        prop_assert!(close(&residual(&u, &f, &sp).unwrap(), &residual(&moved, &f, &sp).unwrap()));
        let (a, b) = (transport_map(&u), transport_map(&moved));
        prop_assert!(close(&a.t1, &b.t1) && close(&a.t2, &b.t2));
    }

    #[test]
    fn transport_boundary_nodes_stay_on_edges(c in coeffs(), n in 4..=12usize) {
        let t = transport_map(&potential(n, c));
        for k in 0..n {
            prop_assert_eq!(t.t1[[0, k]], 0.0);
            prop_assert_eq!(t.t1[[n - 1, k]], 1.0);
            prop_assert_eq!(t.t2[[k, 0]], 0.0);
            prop_assert_eq!(t.t2[[k, n - 1]], 1.0);
        }
    }

    #[test]
    fn lp_is_symmetric_and_satisfies_triangle(a in measure(), b in measure(), c in measure()) {
        let (ab, ba) = (w2(&a, &b), w2(&b, &a));
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!(w2(&a, &c) <= ab + w2(&b, &c) + 1e-9);
    }

    #[test]
    fn partitions_are_disjoint_balanced_nested_and_seeded(seed in any::<u64>(), parts in 1..=4usize, per_class in 2..=6usize) {
        let pool: Vec<LabeledImage<f64>> = (0..300)
            .map(|k| LabeledImage { image: RawImage::from_vec(1, 1, vec![k as f64 + 1.0]).unwrap(), label: (k % 10) as u8, index: k })
            .collect();
        let spec = ExperimentSpec { seed, partitions: parts, per_class, test_per_class: 3, schedule: (1..=per_class).collect(), ..Default::default() };
        let p = build_partitions(&pool, &pool, &spec).unwrap();
        prop_assert_eq!(&p, &build_partitions(&pool, &pool, &spec).unwrap());
        let mut seen = std::collections::HashSet::new();
        for part in &p.training {
            for (c, items) in part.by_class.iter().enumerate() {
                prop_assert_eq!(items.len(), per_class);
                prop_assert!(items.iter().all(|&i| pool[i].label as usize == c));
                prop_assert!(items.iter().all(|&i| seen.insert(i)));
            }
            for s in 1..per_class {
                let (small, big) = (part.subset(s), part.subset(s + 1));
                prop_assert!(small.iter().all(|i| big.contains(i)));
                prop_assert_eq!(small.len(), 10 * s);
            }
        }
        prop_assert_eq!(p.test().len(), 30);
    }
}
