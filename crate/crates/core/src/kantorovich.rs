//! Exact discrete optimal transport between point masses.
//!
//! The transportation LP is solved with a primal network simplex on the
//! complete bipartite graph plus an artificial root, using block pricing and
//! a strongly feasible spanning tree to avoid cycling under degeneracy.
//! Optimality is certified afterwards from the final node potentials.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityField, RawImage};
use crate::scalar::Real;

/// Atoms below this normalized mass are dropped.
pub const MASS_CUTOFF: f64 = 1e-12;

/// Point masses in the unit square summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure<T> {
    locations: Vec<(T, T)>,
    masses: Vec<T>,
}

impl<T: Real> DiscreteMeasure<T> {
    /// Validates positivity and unit total mass.
    pub fn new(locations: Vec<(T, T)>, masses: Vec<T>) -> Result<Self> {
        if locations.len() != masses.len() {
            return Err(Error::invalid(format!(
                "{} locations but {} masses",
                locations.len(),
                masses.len()
            )));
        }
        if masses.is_empty() {
            return Err(Error::invalid("measure has no atoms"));
        }
        if masses.iter().any(|&m| !(m > T::zero()) || !m.is_finite()) {
            return Err(Error::invalid("atom masses must be positive and finite"));
        }
        let total: T = masses.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-12).max(T::lit(64.0) * T::epsilon()) {
            return Err(Error::invalid(format!("masses sum to {total}, expected 1")));
        }
        Ok(Self { locations, masses })
    }

    /// Normalizes nonnegative weights, dropping atoms below [`MASS_CUTOFF`].
    pub fn normalized(locations: Vec<(T, T)>, weights: Vec<T>) -> Result<Self> {
        if locations.len() != weights.len() {
            return Err(Error::invalid("locations and weights differ in length"));
        }
        let total: T = weights.iter().copied().sum();
        if !(total > T::zero()) || !total.is_finite() {
            return Err(Error::invalid("total mass must be positive"));
        }
        let cutoff = T::lit(MASS_CUTOFF);
        let (locs, ws): (Vec<_>, Vec<_>) = locations
            .into_iter()
            .zip(weights)
            .filter(|&(_, w)| w / total >= cutoff)
            .unzip();
        let kept: T = ws.iter().copied().sum();
        Self::new(locs, ws.into_iter().map(|w| w / kept).collect())
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn locations(&self) -> &[(T, T)] {
        &self.locations
    }

    pub fn masses(&self) -> &[T] {
        &self.masses
    }
}

/// Nonzero pixels as atoms at pixel centres `((i + 1/2) / m, (j + 1/2) / n)`.
pub fn measure_from_image<T: Real>(img: &RawImage<T>) -> Result<DiscreteMeasure<T>> {
    let (m, n) = img.shape();
    let (fm, fn_) = (T::from_usize_lossy(m), T::from_usize_lossy(n));
    let half = T::lit(0.5);
    let mut locs = Vec::new();
    let mut ws = Vec::new();
    for ((i, j), &v) in img.pixels().indexed_iter() {
        if v > T::zero() {
            locs.push(((T::from_usize_lossy(i) + half) / fm, (T::from_usize_lossy(j) + half) / fn_));
            ws.push(v);
        }
    }
    DiscreteMeasure::normalized(locs, ws)
}

/// Grid nodes as atoms, weighted by their trapezium share of the density.
pub fn measure_from_density<T: Real>(f: &DensityField<T>) -> Result<DiscreteMeasure<T>> {
    let grid = f.grid();
    let mut locs = Vec::with_capacity(grid.len());
    let mut ws = Vec::with_capacity(grid.len());
    for ((i, j), &v) in f.values().indexed_iter() {
        locs.push(grid.node::<T>(i, j));
        ws.push(grid.trapezium_weight::<T>(i, j) * v);
    }
    DiscreteMeasure::normalized(locs, ws)
}

/// Ground cost between atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundCost {
    SquaredEuclidean,
    Euclidean,
    /// `|x - y|^2 / 2`, comparable with the PDE distance after a square root.
    #[default]
    HalfSquared,
}

impl GroundCost {
    #[inline]
    pub fn eval<T: Real>(self, a: (T, T), b: (T, T)) -> T {
        let d1 = a.0 - b.0;
        let d2 = a.1 - b.1;
        let sq = d1 * d1 + d2 * d2;
        match self {
            GroundCost::SquaredEuclidean => sq,
            GroundCost::Euclidean => sq.sqrt(),
            GroundCost::HalfSquared => T::lit(0.5) * sq,
        }
    }
}

/// Dense `rows x cols` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T> {
    kind: Option<GroundCost>,
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Real> CostMatrix<T> {
    pub fn between(src: &DiscreteMeasure<T>, dst: &DiscreteMeasure<T>, kind: GroundCost) -> Self {
        let values = src
            .locations
            .iter()
            .flat_map(|&a| dst.locations.iter().map(move |&b| kind.eval(a, b)))
            .collect();
        Self {
            kind: Some(kind),
            rows: src.len(),
            cols: dst.len(),
            values,
        }
    }

    /// Arbitrary nonnegative costs, row-major.
    pub fn from_values(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::invalid(format!(
                "expected {} costs, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|&c| !(c >= T::zero()) || !c.is_finite()) {
            return Err(Error::invalid("costs must be finite and nonnegative"));
        }
        Ok(Self {
            kind: None,
            rows,
            cols,
            values,
        })
    }

    pub fn kind(&self) -> Option<GroundCost> {
        self.kind
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.cols + j]
    }
}

/// Optimality evidence for a plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpCertificate<T> {
    /// Most negative reduced cost over all arcs; dual feasible when `>= -tol`.
    pub min_reduced_cost: T,
    /// Primal objective minus dual objective.
    pub duality_gap: T,
    /// Largest deviation of a row or column sum from its marginal.
    pub max_marginal_error: T,
}

/// Sparse optimal plan: `(source atom, target atom, mass)` with positive mass.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan<T> {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, T)>,
    pub objective: T,
    pub certificate: LpCertificate<T>,
    pub pivots: usize,
}

impl<T: Real> TransportPlan<T> {
    pub fn row_sums(&self) -> Vec<T> {
        let mut s = vec![T::zero(); self.rows];
        for &(i, _, v) in &self.entries {
            s[i] += v;
        }
        s
    }

    pub fn col_sums(&self) -> Vec<T> {
        let mut s = vec![T::zero(); self.cols];
        for &(_, j, v) in &self.entries {
            s[j] += v;
        }
        s
    }

    /// Writes `src,dst,mass` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "src,dst,mass")?;
        for &(i, j, v) in &self.entries {
            writeln!(out, "{i},{j},{v}")?;
        }
        Ok(())
    }

    /// Writes `x1,x2,y1,y2,mass` rows using the atom locations.
    pub fn write_arrows_csv<W: Write>(
        &self,
        src: &DiscreteMeasure<T>,
        dst: &DiscreteMeasure<T>,
        mut out: W,
    ) -> Result<()> {
        writeln!(out, "x1,x2,y1,y2,mass")?;
        for &(i, j, v) in &self.entries {
            let a = src.locations[i];
            let b = dst.locations[j];
            writeln!(out, "{},{},{},{},{v}", a.0, a.1, b.0, b.1)?;
        }
        Ok(())
    }
}

const LOWER: i8 = 1;
const TREE: i8 = 0;
const UP: i8 = 1;
const DOWN: i8 = -1;

struct Simplex<'a, T> {
    cost: &'a CostMatrix<T>,
    n: usize,
    m: usize,
    root: usize,
    art_cost: T,
    // arcs: [0, n m) real, then n source->root, then m root->sink
    flow: Vec<T>,
    state: Vec<i8>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    dir: Vec<i8>,
    depth: Vec<usize>,
    children: Vec<Vec<usize>>,
    pi: Vec<T>,
}

impl<'a, T: Real> Simplex<'a, T> {
    fn arc_count(&self) -> usize {
        self.n * self.m + self.n + self.m
    }

    #[inline]
    fn ends(&self, e: usize) -> (usize, usize) {
        let nm = self.n * self.m;
        if e < nm {
            (e / self.m, self.n + e % self.m)
        } else if e < nm + self.n {
            (e - nm, self.root)
        } else {
            (self.root, self.n + (e - nm - self.n))
        }
    }

    #[inline]
    fn arc_cost(&self, e: usize) -> T {
        if e < self.n * self.m {
            self.cost.values[e]
        } else {
            self.art_cost
        }
    }

    #[inline]
    fn reduced(&self, e: usize) -> T {
        let (s, t) = self.ends(e);
        self.arc_cost(e) + self.pi[s] - self.pi[t]
    }

    fn new(cost: &'a CostMatrix<T>, supply: &[T], demand: &[T]) -> Self {
        let (n, m) = (supply.len(), demand.len());
        let root = n + m;
        let nodes = n + m + 1;
        let max_c = cost.values.iter().fold(T::zero(), |a, &c| a.max(c));
        let art_cost = (max_c + T::one()) * T::from_usize_lossy(nodes);
        let arcs = n * m + n + m;
        let mut s = Self {
            cost,
            n,
            m,
            root,
            art_cost,
            flow: vec![T::zero(); arcs],
            state: vec![LOWER; arcs],
            parent: vec![root; nodes],
            pred: vec![usize::MAX; nodes],
            dir: vec![UP; nodes],
            depth: vec![1; nodes],
            children: vec![Vec::new(); nodes],
            pi: vec![T::zero(); nodes],
        };
        s.depth[root] = 0;
        s.children[root] = (0..n + m).collect();
        for (i, &a) in supply.iter().enumerate() {
            let e = n * m + i;
            s.flow[e] = a;
            s.state[e] = TREE;
            s.pred[i] = e;
            s.dir[i] = UP;
            s.pi[i] = -art_cost;
        }
        for (j, &b) in demand.iter().enumerate() {
            let e = n * m + n + j;
            s.flow[e] = b;
            s.state[e] = TREE;
            s.pred[n + j] = e;
            s.dir[n + j] = DOWN;
            s.pi[n + j] = art_cost;
        }
        s
    }

    fn run(&mut self, tol: T, max_pivots: usize) -> Result<usize> {
        let arcs = self.arc_count();
        let block = ((arcs as f64).sqrt() as usize).max(10).min(arcs);
        let mut next = 0usize;
        let mut pivots = 0usize;
        loop {
            // block search for the most negative reduced cost
            let mut best = -tol;
            let mut enter = usize::MAX;
            let mut scanned = 0usize;
            let mut in_block = 0usize;
            while scanned < arcs {
                let e = next;
                next += 1;
                if next == arcs {
                    next = 0;
                }
                scanned += 1;
                in_block += 1;
                if self.state[e] == LOWER {
                    let rc = self.reduced(e);
                    if rc < best {
                        best = rc;
                        enter = e;
                    }
                }
                if in_block == block {
                    if enter != usize::MAX {
                        break;
                    }
                    in_block = 0;
                }
            }
            if enter == usize::MAX {
                return Ok(pivots);
            }
            if pivots == max_pivots {
                return Err(Error::numeric(format!(
                    "network simplex exceeded {max_pivots} pivots"
                )));
            }
            self.pivot(enter);
            pivots += 1;
        }
    }

    fn pivot(&mut self, enter: usize) {
        let (first, second) = self.ends(enter);
        let join = {
            let (mut u, mut v) = (first, second);
            while u != v {
                if self.depth[u] > self.depth[v] {
                    u = self.parent[u];
                } else if self.depth[v] > self.depth[u] {
                    v = self.parent[v];
                } else {
                    u = self.parent[u];
                    v = self.parent[v];
                }
            }
            u
        };

        // leaving arc: last blocking arc in cycle order, which keeps the
        // tree strongly feasible
        let mut delta = T::infinity();
        let mut u_out = usize::MAX;
        let mut side = 0;
        let mut u = first;
        while u != join {
            if self.dir[u] == UP {
                let d = self.flow[self.pred[u]];
                if d < delta {
                    delta = d;
                    u_out = u;
                    side = 1;
                }
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != join {
            if self.dir[u] == DOWN {
                let d = self.flow[self.pred[u]];
                if d <= delta {
                    delta = d;
                    u_out = u;
                    side = 2;
                }
            }
            u = self.parent[u];
        }
        debug_assert!(u_out != usize::MAX, "uncapacitated cycle must block");

        if delta > T::zero() {
            self.flow[enter] += delta;
            let mut u = first;
            while u != join {
                let e = self.pred[u];
                if self.dir[u] == UP {
                    self.flow[e] -= delta;
                } else {
                    self.flow[e] += delta;
                }
                u = self.parent[u];
            }
            let mut u = second;
            while u != join {
                let e = self.pred[u];
                if self.dir[u] == UP {
                    self.flow[e] += delta;
                } else {
                    self.flow[e] -= delta;
                }
                u = self.parent[u];
            }
        }
        let leave = self.pred[u_out];
        self.flow[leave] = T::zero();
        self.state[leave] = LOWER;
        self.state[enter] = TREE;

        let (u_in, v_in) = if side == 1 { (first, second) } else { (second, first) };

        // re-hang the path u_in .. u_out below v_in
        let mut path = vec![u_in];
        while *path.last().expect("nonempty") != u_out {
            let p = self.parent[*path.last().expect("nonempty")];
            path.push(p);
        }
        let old: Vec<(usize, usize, i8)> = path
            .iter()
            .map(|&p| (self.parent[p], self.pred[p], self.dir[p]))
            .collect();
        for (&p, &(par, _, _)) in path.iter().zip(&old) {
            let ch = &mut self.children[par];
            let pos = ch.iter().position(|&c| c == p).expect("child registered");
            ch.swap_remove(pos);
        }
        self.parent[u_in] = v_in;
        self.pred[u_in] = enter;
        self.dir[u_in] = if self.ends(enter).0 == u_in { UP } else { DOWN };
        self.children[v_in].push(u_in);
        for t in 1..path.len() {
            let p = path[t];
            self.parent[p] = path[t - 1];
            self.pred[p] = old[t - 1].1;
            self.dir[p] = -old[t - 1].2;
            self.children[path[t - 1]].push(p);
        }

        // refresh depth and potentials below u_in
        let mut stack = vec![u_in];
        while let Some(x) = stack.pop() {
            let par = self.parent[x];
            self.depth[x] = self.depth[par] + 1;
            let c = self.arc_cost(self.pred[x]);
            self.pi[x] = if self.dir[x] == UP {
                self.pi[par] - c
            } else {
                self.pi[par] + c
            };
            stack.extend_from_slice(&self.children[x]);
        }
    }
}

/// Solves the balanced transportation problem between `src` and `dst`.
pub fn solve_lp<T: Real>(
    src: &DiscreteMeasure<T>,
    dst: &DiscreteMeasure<T>,
    cost: &CostMatrix<T>,
) -> Result<TransportPlan<T>> {
    solve_transport(&src.masses, &dst.masses, cost)
}

/// Transportation problem with arbitrary positive marginals of equal total.
pub fn solve_transport<T: Real>(
    supply: &[T],
    demand: &[T],
    cost: &CostMatrix<T>,
) -> Result<TransportPlan<T>> {
    let (n, m) = (supply.len(), demand.len());
    if cost.shape() != (n, m) {
        return Err(Error::ShapeMismatch {
            expected: (n, m),
            found: cost.shape(),
        });
    }
    if n == 0 || m == 0 {
        return Err(Error::invalid("empty marginal"));
    }
    if supply.iter().chain(demand).any(|&v| !(v > T::zero()) || !v.is_finite()) {
        return Err(Error::invalid("marginals must be positive and finite"));
    }
    let total_s: T = supply.iter().copied().sum();
    let total_d: T = demand.iter().copied().sum();
    let scale = total_s.max(total_d);
    let balance_tol = T::lit(1e-12).max(T::lit(64.0) * T::epsilon()) * scale;
    if (total_s - total_d).abs() > balance_tol {
        return Err(Error::invalid(format!(
            "unbalanced marginals: {total_s} vs {total_d}"
        )));
    }

    let max_c = cost.values.iter().fold(T::zero(), |a, &c| a.max(c));
    let price_tol = T::lit(1e-12).max(T::lit(64.0) * T::epsilon()) * (max_c + T::one());
    let mut sx = Simplex::new(cost, supply, demand);
    let max_pivots = 200 * (n + m) * ((n + m) as f64).log2().ceil().max(1.0) as usize + 1000;
    let pivots = sx.run(price_tol, max_pivots)?;

    // leftover flow on the artificial arcs can only come from rounding
    let leftover = (n * m..n * m + n + m).fold(T::zero(), |a, e| a.max(sx.flow[e]));
    if leftover > balance_tol * T::lit(16.0) {
        return Err(Error::numeric(format!(
            "artificial arcs still carry {leftover}"
        )));
    }

    let mut entries = Vec::new();
    let mut objective = T::zero();
    for e in 0..n * m {
        let f = sx.flow[e];
        if f > T::zero() {
            entries.push((e / m, e % m, f));
            objective += f * cost.values[e];
        }
    }
    let mut plan = TransportPlan {
        rows: n,
        cols: m,
        entries,
        objective,
        certificate: LpCertificate {
            min_reduced_cost: T::zero(),
            duality_gap: T::zero(),
            max_marginal_error: T::zero(),
        },
        pivots,
    };
    plan.certificate = certify(&plan, supply, demand, cost, &sx.pi[..n + m]);
    let cert = plan.certificate;
    let cert_tol = T::lit(1e-9) * (max_c + T::one()) * scale;
    if cert.min_reduced_cost < -cert_tol || cert.duality_gap.abs() > cert_tol {
        return Err(Error::numeric(format!(
            "optimality certificate failed: min reduced cost {:e}, gap {:e}",
            cert.min_reduced_cost, cert.duality_gap
        )));
    }
    log::debug!("network simplex: {n}x{m}, {pivots} pivots, objective {objective}");
    Ok(plan)
}

/// Dual feasibility and gap from potentials `pi` with reduced costs
/// `c_ij + pi_i - pi_{n+j}`.
fn certify<T: Real>(
    plan: &TransportPlan<T>,
    supply: &[T],
    demand: &[T],
    cost: &CostMatrix<T>,
    pi: &[T],
) -> LpCertificate<T> {
    let (n, m) = (supply.len(), demand.len());
    let mut min_rc = T::infinity();
    for i in 0..n {
        for j in 0..m {
            min_rc = min_rc.min(cost.get(i, j) + pi[i] - pi[n + j]);
        }
    }
    let dual: T = demand.iter().enumerate().map(|(j, &b)| b * pi[n + j]).sum::<T>()
        - supply.iter().enumerate().map(|(i, &a)| a * pi[i]).sum::<T>();
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    let err = rows
        .iter()
        .zip(supply)
        .chain(cols.iter().zip(demand))
        .fold(T::zero(), |a, (&x, &y)| a.max((x - y).abs()));
    LpCertificate {
        min_reduced_cost: min_rc,
        duality_gap: plan.objective - dual,
        max_marginal_error: err,
    }
}

/// `sum mu_ij c_ij`, optionally raised to `root`.
pub fn kantorovich_distance<T: Real>(
    plan: &TransportPlan<T>,
    cost: &CostMatrix<T>,
    root: Option<T>,
) -> T {
    let k: T = plan
        .entries
        .iter()
        .map(|&(i, j, v)| v * cost.get(i, j))
        .sum();
    match root {
        Some(p) => k.max(T::zero()).powf(p),
        None => k,
    }
}

/// How pixel intensities become transported mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MassConvention {
    /// Both images scaled to unit mass.
    #[default]
    Normalized,
    /// Raw pixel sums, which must agree.
    PixelSum,
}

/// LP distance between two images on pixel-centre supports. With
/// [`GroundCost::HalfSquared`] the square root of the objective is returned.
pub fn image_distance<T: Real>(
    a: &RawImage<T>,
    b: &RawImage<T>,
    kind: GroundCost,
    mass: MassConvention,
) -> Result<T> {
    let mu = measure_from_image(a)?;
    let nu = measure_from_image(b)?;
    let cost = CostMatrix::between(&mu, &nu, kind);
    let plan = solve_lp(&mu, &nu, &cost)?;
    let mut k = kantorovich_distance(&plan, &cost, None);
    if mass == MassConvention::PixelSum {
        let sa: T = a.pixels().sum();
        let sb: T = b.pixels().sum();
        if (sa - sb).abs() > T::lit(1e-9) * sa.max(sb) {
            return Err(Error::invalid(format!(
                "pixel sums differ: {sa} vs {sb}"
            )));
        }
        k *= sa;
    }
    Ok(match kind {
        GroundCost::HalfSquared => k.max(T::zero()).sqrt(),
        _ => k,
    })
}
