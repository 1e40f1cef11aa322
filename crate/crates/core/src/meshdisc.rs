//! Regular chart grids, sampled fields and the Riemannian bookkeeping built
//! on them: metric-weighted `L^p` quadrature, radial cutoffs, grid geodesic
//! distances and sampled Hölder quotients.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::{Read, Write};

use ordered_float::OrderedFloat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convexlab::{GraphFunction, Jet};
use crate::error::{Error, Result};
use crate::graphgeo::{gradient_norm, tensor_norm, MetricAt};
use crate::profile::smoothstep;

const CHUNK: usize = 4096;

/// Sum `f(i)` for `i < len` with a fixed reduction tree, so the result does
/// not depend on the thread count.
pub(crate) fn stable_sum(len: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let chunks: Vec<f64> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(len)).map(&f).sum())
        .collect();
    chunks.iter().sum()
}

/// Vertex-centred grid on an axis-aligned box with a node mask.
///
/// Nodes are stored row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct ChartGrid {
    pub origin: Vec<f64>,
    pub dims: Vec<usize>,
    pub h: f64,
    pub mask: Vec<bool>,
}

impl ChartGrid {
    pub fn new(origin: Vec<f64>, dims: Vec<usize>, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidSpec(format!("grid spacing must be positive, got {h}")));
        }
        if origin.len() != dims.len() || dims.is_empty() {
            return Err(Error::InvalidSpec("origin and dims must have equal, nonzero length".into()));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidSpec("each axis needs at least two nodes".into()));
        }
        let len = dims.iter().product();
        Ok(Self { origin, dims, h, mask: vec![true; len] })
    }

    /// Grid on `[lo, hi]` with `side / h + 1` nodes per axis; the sides must
    /// be integer multiples of `h`.
    pub fn from_box(lo: &[f64], hi: &[f64], h: f64) -> Result<Self> {
        let mut dims = Vec::with_capacity(lo.len());
        for (a, b) in lo.iter().zip(hi) {
            let cells = (b - a) / h;
            let rounded = cells.round();
            if (cells - rounded).abs() > 1e-9 * cells.max(1.0) || rounded < 1.0 {
                return Err(Error::InvalidSpec(format!("box side {} is not a multiple of h = {h}", b - a)));
            }
            dims.push(rounded as usize + 1);
        }
        Self::new(lo.to_vec(), dims, h)
    }

    /// Cube around `center` covering the closed ball of `radius`, masked to
    /// the open ball.
    pub fn ball(center: &[f64], radius: f64, h: f64) -> Result<Self> {
        let m = (radius / h).ceil() as usize;
        let origin: Vec<f64> = center.iter().map(|c| c - m as f64 * h).collect();
        let mut grid = Self::new(origin, vec![2 * m + 1; center.len()], h)?;
        grid.restrict_to_ball(center, radius);
        Ok(grid)
    }

    pub fn restrict_to_ball(&mut self, center: &[f64], radius: f64) {
        let r2 = radius * radius;
        for i in 0..self.len() {
            let x = self.coords(i);
            let d2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
            self.mask[i] = self.mask[i] && d2 < r2;
        }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            out[d] = i % self.dims[d];
            i /= self.dims[d];
        }
        out
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn coords(&self, i: usize) -> Vec<f64> {
        self.multi_index(i)
            .iter()
            .zip(&self.origin)
            .map(|(&k, o)| o + k as f64 * self.h)
            .collect()
    }

    /// Node nearest to `x` (clamped to the box).
    pub fn nearest(&self, x: &[f64]) -> usize {
        let idx: Vec<usize> = x
            .iter()
            .zip(&self.origin)
            .zip(&self.dims)
            .map(|((xi, o), &d)| (((xi - o) / self.h).round().max(0.0) as usize).min(d - 1))
            .collect();
        self.linear_index(&idx)
    }

    /// Neighbour at an integer offset, if it lies in the box.
    pub fn offset(&self, i: usize, step: &[i64]) -> Option<usize> {
        let mut idx = self.multi_index(i);
        for d in 0..self.dim() {
            let k = idx[d] as i64 + step[d];
            if k < 0 || k >= self.dims[d] as i64 {
                return None;
            }
            idx[d] = k as usize;
        }
        Some(self.linear_index(&idx))
    }

    /// Trapezoid factor: halved once per box face the node lies on.
    pub fn quadrature_factor(&self, i: usize) -> f64 {
        self.multi_index(i)
            .iter()
            .zip(&self.dims)
            .map(|(&k, &d)| if k == 0 || k + 1 == d { 0.5 } else { 1.0 })
            .product()
    }

    /// All offsets in `{-1, 0, 1}^n` except zero.
    pub fn king_offsets(&self) -> Vec<Vec<i64>> {
        let n = self.dim();
        let mut out = Vec::new();
        for code in 0..3usize.pow(n as u32) {
            let mut c = code;
            let step: Vec<i64> = (0..n)
                .map(|_| {
                    let s = (c % 3) as i64 - 1;
                    c /= 3;
                    s
                })
                .collect();
            if step.iter().any(|&s| s != 0) {
                out.push(step);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Solution,
    Source,
    Cutoff,
    Derived,
}

impl FieldKind {
    fn code(self) -> u16 {
        match self {
            FieldKind::Solution => 0,
            FieldKind::Source => 1,
            FieldKind::Cutoff => 2,
            FieldKind::Derived => 3,
        }
    }

    fn from_code(c: u16) -> Result<Self> {
        Ok(match c {
            0 => FieldKind::Solution,
            1 => FieldKind::Source,
            2 => FieldKind::Cutoff,
            3 => FieldKind::Derived,
            _ => return Err(Error::Format(format!("unknown field kind {c}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub values: Vec<f64>,
    pub kind: FieldKind,
}

impl ScalarField {
    pub fn new(values: Vec<f64>, kind: FieldKind) -> Self {
        Self { values, kind }
    }

    pub fn zeros(len: usize, kind: FieldKind) -> Self {
        Self { values: vec![0.0; len], kind }
    }

    pub fn sample(grid: &ChartGrid, kind: FieldKind, f: impl Fn(&[f64]) -> f64 + Sync) -> Self {
        let values = (0..grid.len())
            .into_par_iter()
            .map(|i| if grid.mask[i] { f(&grid.coords(i)) } else { 0.0 })
            .collect();
        Self { values, kind }
    }

    pub fn scaled(&self, t: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * t).collect(), kind: self.kind }
    }
}

/// Per-node jets of `f` and the induced volume weights on a masked grid.
#[derive(Debug, Clone)]
pub struct GridGeometry {
    pub grid: ChartGrid,
    pub value: Vec<f64>,
    /// Gradients, stride `n`.
    pub grad: Vec<f64>,
    /// Hessians, stride `n^2`, row-major.
    pub hess: Vec<f64>,
    /// Inverse metrics, stride `n^2`.
    pub g_inv: Vec<f64>,
    pub sqrt_det: Vec<f64>,
    /// Quadrature weights `sqrt(det g) h^n` (trapezoid on box faces), zero
    /// off the mask.
    pub weights: Vec<f64>,
}

impl GridGeometry {
    pub fn build(f: &dyn GraphFunction, grid: ChartGrid) -> Result<Self> {
        let n = grid.dim();
        if f.dim() != n {
            return Err(Error::InvalidSpec(format!("function dimension {} != grid dimension {n}", f.dim())));
        }
        let jets: Vec<Option<Jet>> = (0..grid.len())
            .into_par_iter()
            .map(|i| if grid.mask[i] { f.jet(&grid.coords(i)).map(Some) } else { Ok(None) })
            .collect::<Result<_>>()?;
        let len = grid.len();
        let mut geom = Self {
            value: vec![0.0; len],
            grad: vec![0.0; len * n],
            hess: vec![0.0; len * n * n],
            g_inv: vec![0.0; len * n * n],
            sqrt_det: vec![1.0; len],
            weights: vec![0.0; len],
            grid,
        };
        let hn = geom.grid.h.powi(n as i32);
        for (i, jet) in jets.into_iter().enumerate() {
            let Some(jet) = jet else { continue };
            let m = MetricAt::from_grad(&jet.grad);
            geom.value[i] = jet.value;
            geom.grad[i * n..(i + 1) * n].copy_from_slice(&jet.grad);
            geom.hess[i * n * n..(i + 1) * n * n].copy_from_slice(&jet.hess);
            geom.g_inv[i * n * n..(i + 1) * n * n].copy_from_slice(m.g_inv.transpose().as_slice());
            geom.sqrt_det[i] = m.sqrt_det;
            geom.weights[i] = m.sqrt_det * hn * geom.grid.quadrature_factor(i);
        }
        Ok(geom)
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn jet_at(&self, i: usize) -> Jet {
        let n = self.dim();
        Jet {
            value: self.value[i],
            grad: self.grad[i * n..(i + 1) * n].to_vec(),
            hess: self.hess[i * n * n..(i + 1) * n * n].to_vec(),
        }
    }

    pub fn metric_at(&self, i: usize) -> MetricAt {
        MetricAt::from_grad(&self.grad[i * self.dim()..(i + 1) * self.dim()])
    }

    pub fn volume(&self) -> f64 {
        stable_sum(self.weights.len(), |i| self.weights[i])
    }

    pub fn weighted_mean(&self, values: &[f64]) -> f64 {
        stable_sum(values.len(), |i| self.weights[i] * values[i]) / self.volume()
    }
}

fn check_exponent(p: f64) -> Result<()> {
    if p > 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidExponent(p))
    }
}

/// `(Σ |v|^p sqrt(det g) h^n)^{1/p}` over masked nodes.
pub fn lp_norm(values: &[f64], geom: &GridGeometry, p: f64) -> Result<f64> {
    check_exponent(p)?;
    let grid = &geom.grid;
    if values.len() != grid.len() {
        return Err(Error::Precondition(format!("field has {} values for {} nodes", values.len(), grid.len())));
    }
    if grid.masked_count() == 0 {
        return Err(Error::EmptyMask);
    }
    if let Some(i) = (0..values.len()).find(|&i| grid.mask[i] && !values[i].is_finite()) {
        return Err(Error::Precondition(format!("non-finite field value at node {i}")));
    }
    // Factor out the maximum so large exponents do not overflow.
    let scale = (0..values.len()).filter(|&i| grid.mask[i]).map(|i| values[i].abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(0.0);
    }
    let s = stable_sum(values.len(), |i| geom.weights[i] * (values[i].abs() / scale).powf(p));
    Ok(scale * s.powf(1.0 / p))
}

/// Pointwise `|H|_g` of a symmetric tensor field stored with stride `n^2`.
pub fn tensor_norm_field(hess: &[f64], geom: &GridGeometry) -> ScalarField {
    let n = geom.dim();
    let values = (0..geom.grid.len())
        .into_par_iter()
        .map(|i| {
            let m = nalgebra::DMatrix::from_row_slice(n, n, &hess[i * n * n..(i + 1) * n * n]);
            tensor_norm(&geom.metric_at(i), &m)
        })
        .collect();
    ScalarField::new(values, FieldKind::Derived)
}

/// Pointwise `|∇u|_g` of a gradient field stored with stride `n`.
pub fn gradient_norm_field(grad: &[f64], geom: &GridGeometry) -> ScalarField {
    let n = geom.dim();
    let values = (0..geom.grid.len())
        .into_par_iter()
        .map(|i| gradient_norm(&geom.metric_at(i), &grad[i * n..(i + 1) * n]))
        .collect();
    ScalarField::new(values, FieldKind::Derived)
}

/// Concentric balls `S = B(center, inner_radius)` inside `T = B(center, outer_radius)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub center: Vec<f64>,
    pub inner_radius: f64,
    pub outer_radius: f64,
}

impl CutoffSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_radius > 0.0 && self.outer_radius > self.inner_radius && self.outer_radius.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "cutoff needs 0 < inner radius < outer radius, got {} and {}",
                self.inner_radius, self.outer_radius
            )));
        }
        Ok(())
    }
}

/// `χ(x) = s((r_T - r) / (r_T - r_S))` with `s` the exp-based smoothstep.
#[derive(Debug, Clone, PartialEq)]
pub struct Cutoff {
    pub spec: CutoffSpec,
}

pub fn build_cutoff(spec: CutoffSpec) -> Result<Cutoff> {
    spec.validate()?;
    Ok(Cutoff { spec })
}

impl Cutoff {
    /// `(χ, dχ/dr, d²χ/dr²)` at radius `r`.
    pub fn radial(&self, r: f64) -> (f64, f64, f64) {
        let width = self.spec.outer_radius - self.spec.inner_radius;
        let (s, s1, s2) = smoothstep((self.spec.outer_radius - r) / width);
        (s, -s1 / width, s2 / (width * width))
    }

    pub fn sample(&self, grid: &ChartGrid) -> ScalarField {
        ScalarField::sample(grid, FieldKind::Cutoff, |x| self.radial(self.radius(x)).0)
    }

    fn radius(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.spec.center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

impl GraphFunction for Cutoff {
    fn dim(&self) -> usize {
        self.spec.center.len()
    }

    fn jet(&self, x: &[f64]) -> Result<Jet> {
        let n = self.dim();
        let r = self.radius(x);
        let (c, c1, c2) = self.radial(r);
        let mut jet = Jet::zero(n);
        jet.value = c;
        if c1 == 0.0 && c2 == 0.0 {
            return Ok(jet);
        }
        let u: Vec<f64> = x.iter().zip(&self.spec.center).map(|(a, b)| (a - b) / r).collect();
        for i in 0..n {
            jet.grad[i] = c1 * u[i];
            for j in 0..n {
                let id = if i == j { 1.0 } else { 0.0 };
                jet.hess[i * n + j] = c2 * u[i] * u[j] + c1 / r * (id - u[i] * u[j]);
            }
        }
        Ok(jet)
    }
}

/// Single-source grid geodesic distances over the `3^n - 1` neighbour stencil.
#[derive(Debug, Clone)]
pub struct DistanceField {
    pub source: usize,
    pub dist: Vec<f64>,
}

impl DistanceField {
    pub fn compute(geom: &GridGeometry, source: usize) -> Result<Self> {
        let grid = &geom.grid;
        if !grid.mask.get(source).copied().unwrap_or(false) {
            return Err(Error::Precondition(format!("source node {source} is not masked")));
        }
        let n = grid.dim();
        let offsets = grid.king_offsets();
        let mut dist = vec![f64::INFINITY; grid.len()];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Reverse((OrderedFloat(0.0), source)));
        while let Some(Reverse((OrderedFloat(d), i))) = heap.pop() {
            if d > dist[i] {
                continue;
            }
            for step in &offsets {
                let Some(j) = grid.offset(i, step) else { continue };
                if !grid.mask[j] {
                    continue;
                }
                let mut chart2 = 0.0;
                let mut lift = 0.0;
                for k in 0..n {
                    let dx = step[k] as f64 * grid.h;
                    chart2 += dx * dx;
                    lift += 0.5 * (geom.grad[i * n + k] + geom.grad[j * n + k]) * dx;
                }
                let nd = d + (chart2 + lift * lift).sqrt();
                if nd < dist[j] {
                    dist[j] = nd;
                    heap.push(Reverse((OrderedFloat(nd), j)));
                }
            }
        }
        Ok(Self { source, dist })
    }

    pub fn to(&self, target: usize) -> Result<f64> {
        let d = self.dist[target];
        if d.is_finite() {
            Ok(d)
        } else {
            Err(Error::Disconnected)
        }
    }
}

pub fn geodesic_distance(geom: &GridGeometry, x: usize, y: usize) -> Result<f64> {
    if !geom.grid.mask.get(y).copied().unwrap_or(false) {
        return Err(Error::Precondition(format!("target node {y} is not masked")));
    }
    DistanceField::compute(geom, x)?.to(y)
}

/// `1 - n/p`, rejecting `p <= n`.
pub fn holder_exponent(n: usize, p: f64) -> Result<f64> {
    let a = 1.0 - n as f64 / p;
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err(Error::InvalidExponent(p))
    }
}

/// Number of random source nodes used for the random part of the pair budget.
const RANDOM_SOURCES: usize = 4;

/// Largest sampled `|v(x) - v(y)| / d(x, y)^exponent`.
///
/// Every pair `(anchor, y)` with `y` masked is included, plus `pair_budget`
/// random pairs drawn from a handful of seeded random sources.
pub fn holder_quotient(
    values: &[f64],
    geom: &GridGeometry,
    exponent: f64,
    anchors: &[usize],
    pair_budget: usize,
    seed: u64,
) -> Result<f64> {
    if !(exponent > 0.0 && exponent < 1.0) {
        return Err(Error::InvalidExponent(exponent));
    }
    let masked = geom.grid.masked_indices();
    if masked.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs: Vec<(usize, Vec<usize>)> = anchors.iter().map(|&a| (a, masked.clone())).collect();
    if pair_budget > 0 {
        let sources = RANDOM_SOURCES.min(masked.len());
        let per = pair_budget.div_ceil(sources);
        for _ in 0..sources {
            let s = masked[rng.gen_range(0..masked.len())];
            let targets = (0..per).map(|_| masked[rng.gen_range(0..masked.len())]).collect();
            jobs.push((s, targets));
        }
    }
    let best = jobs
        .par_iter()
        .map(|(src, targets)| -> Result<f64> {
            let df = DistanceField::compute(geom, *src)?;
            let mut best: f64 = 0.0;
            for &t in targets {
                let d = df.dist[t];
                if t == *src || !d.is_finite() {
                    continue;
                }
                best = best.max((values[*src] - values[t]).abs() / d.powf(exponent));
            }
            Ok(best)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(best.into_iter().fold(0.0, f64::max))
}

fn unit_step(n: usize, d: usize, sign: i64) -> Vec<i64> {
    let mut s = vec![0; n];
    s[d] = sign;
    s
}

fn masked_offset(grid: &ChartGrid, i: usize, step: &[i64]) -> Option<usize> {
    grid.offset(i, step).filter(|&j| grid.mask[j])
}

/// Central-difference gradient (stride `n`), one-sided where a neighbour is
/// off the mask; zero off the mask.
pub fn gradient_fd(values: &[f64], grid: &ChartGrid) -> Vec<f64> {
    let n = grid.dim();
    let h = grid.h;
    let rows: Vec<Vec<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut g = vec![0.0; n];
            if !grid.mask[i] {
                return g;
            }
            for (d, gd) in g.iter_mut().enumerate() {
                let p = masked_offset(grid, i, &unit_step(n, d, 1));
                let m = masked_offset(grid, i, &unit_step(n, d, -1));
                *gd = match (p, m) {
                    (Some(p), Some(m)) => (values[p] - values[m]) / (2.0 * h),
                    (Some(p), None) => (values[p] - values[i]) / h,
                    (None, Some(m)) => (values[i] - values[m]) / h,
                    (None, None) => 0.0,
                };
            }
            g
        })
        .collect();
    rows.concat()
}

/// Second differences (stride `n^2`, row-major): three-point central
/// stencils on the diagonal with a one-sided fallback, four-point cross
/// stencils off the diagonal (zero where a corner is off the mask).
pub fn hessian_fd(values: &[f64], grid: &ChartGrid) -> Vec<f64> {
    let n = grid.dim();
    let h2 = grid.h * grid.h;
    let rows: Vec<Vec<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut m = vec![0.0; n * n];
            if !grid.mask[i] {
                return m;
            }
            for d in 0..n {
                let p = masked_offset(grid, i, &unit_step(n, d, 1));
                let q = masked_offset(grid, i, &unit_step(n, d, -1));
                m[d * n + d] = match (p, q) {
                    (Some(p), Some(q)) => (values[p] - 2.0 * values[i] + values[q]) / h2,
                    (Some(p), None) => match masked_offset(grid, i, &unit_step(n, d, 2)) {
                        Some(pp) => (values[i] - 2.0 * values[p] + values[pp]) / h2,
                        None => 0.0,
                    },
                    (None, Some(q)) => match masked_offset(grid, i, &unit_step(n, d, -2)) {
                        Some(qq) => (values[i] - 2.0 * values[q] + values[qq]) / h2,
                        None => 0.0,
                    },
                    (None, None) => 0.0,
                };
                for e in d + 1..n {
                    let corner = |a: i64, b: i64| {
                        let mut s = vec![0; n];
                        s[d] = a;
                        s[e] = b;
                        masked_offset(grid, i, &s).map(|j| values[j])
                    };
                    let v = match (corner(1, 1), corner(1, -1), corner(-1, 1), corner(-1, -1)) {
                        (Some(a), Some(b), Some(c), Some(dd)) => (a - b - c + dd) / (4.0 * h2),
                        _ => 0.0,
                    };
                    m[d * n + e] = v;
                    m[e * n + d] = v;
                }
            }
            m
        })
        .collect();
    rows.concat()
}

/// Decimal rendering with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with one row per node: coordinates, mask flag and value.
pub fn field_to_csv(field: &ScalarField, grid: &ChartGrid) -> String {
    let mut out = String::new();
    for d in 0..grid.dim() {
        out.push_str(&format!("x{d},"));
    }
    out.push_str("masked,value\n");
    for i in 0..grid.len() {
        for x in grid.coords(i) {
            out.push_str(&fmt17(x));
            out.push(',');
        }
        out.push_str(if grid.mask[i] { "1," } else { "0," });
        out.push_str(&fmt17(field.values[i]));
        out.push('\n');
    }
    out
}

const MAGIC: &[u8; 4] = b"CZF1";

/// Binary export: a 32-byte little-endian header (magic `CZF1`, `n: u16`,
/// kind `u16`, three `u32` axis lengths padded with 1, `h: f64`, 4 reserved
/// bytes), then `n` origin coordinates, the node values and one mask byte
/// per node.
pub fn write_field_binary(field: &ScalarField, grid: &ChartGrid, w: &mut impl Write) -> Result<()> {
    let n = grid.dim();
    if n > 3 {
        return Err(Error::Format(format!("binary export supports n <= 3, got {n}")));
    }
    if field.values.len() != grid.len() {
        return Err(Error::Format("field length does not match grid".into()));
    }
    let mut buf = Vec::with_capacity(32 + 8 * n + 9 * grid.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(n as u16).to_le_bytes());
    buf.extend_from_slice(&field.kind.code().to_le_bytes());
    for d in 0..3 {
        let len = grid.dims.get(d).copied().unwrap_or(1) as u32;
        buf.extend_from_slice(&len.to_le_bytes());
    }
    buf.extend_from_slice(&grid.h.to_le_bytes());
    buf.extend_from_slice(&[0u8; 4]);
    for o in &grid.origin {
        buf.extend_from_slice(&o.to_le_bytes());
    }
    for v in &field.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(grid.mask.iter().map(|&m| m as u8));
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_field_binary(r: &mut impl Read) -> Result<(ScalarField, ChartGrid)> {
    let mut header = [0u8; 32];
    r.read_exact(&mut header)?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let n = u16::from_le_bytes([header[4], header[5]]) as usize;
    if !(1..=3).contains(&n) {
        return Err(Error::Format(format!("unsupported dimension {n}")));
    }
    let kind = FieldKind::from_code(u16::from_le_bytes([header[6], header[7]]))?;
    let mut dims = Vec::with_capacity(n);
    for d in 0..n {
        let o = 8 + 4 * d;
        dims.push(u32::from_le_bytes(header[o..o + 4].try_into().expect("4 bytes")) as usize);
    }
    let h = f64::from_le_bytes(header[20..28].try_into().expect("8 bytes"));
    let read_f64 = |r: &mut dyn Read| -> Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    };
    let origin = (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
    let mut grid = ChartGrid::new(origin, dims, h)?;
    let values = (0..grid.len()).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
    let mut mask = vec![0u8; grid.len()];
    r.read_exact(&mut mask)?;
    grid.mask = mask.into_iter().map(|b| b != 0).collect();
    Ok((ScalarField::new(values, kind), grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surfaces::Surface;

    fn unit_box(h: f64) -> ChartGrid {
        ChartGrid::from_box(&[0.0, 0.0], &[1.0, 1.0], h).unwrap()
    }

    #[test]
    fn grid_shape() {
        let g = unit_box(0.25);
        assert_eq!(g.dims, vec![5, 5]);
        assert_eq!(g.len(), 25);
        for i in 0..g.len() {
            assert_eq!(g.linear_index(&g.multi_index(i)), i);
        }
        assert_eq!(g.coords(7), vec![0.25, 0.5]);
        assert_eq!(g.king_offsets().len(), 8);
        assert!(ChartGrid::from_box(&[0.0], &[1.0], 0.3).is_err());
        assert!(ChartGrid::new(vec![0.0], vec![3], 0.0).is_err());
    }

    #[test]
    fn lp_norm_examples() {
        let flat = GridGeometry::build(&Surface::Flat { n: 2 }, unit_box(1.0 / 32.0)).unwrap();
        let ones = vec![1.0; flat.grid.len()];
        for p in [1.5, 2.0, 4.0, 9.0] {
            assert!((lp_norm(&ones, &flat, p).unwrap() - 1.0).abs() < 1e-12);
        }
        // Indicator of x0 < 1/2 with the trapezoid split on the column x0 = 1/2.
        let p = 3.0;
        let half: Vec<f64> = (0..flat.grid.len())
            .map(|i| {
                let x = flat.grid.coords(i)[0];
                if x < 0.5 - 1e-12 {
                    1.0
                } else if x < 0.5 + 1e-12 {
                    0.5f64.powf(1.0 / p)
                } else {
                    0.0
                }
            })
            .collect();
        assert!((lp_norm(&half, &flat, p).unwrap() - 0.5f64.powf(1.0 / p)).abs() < 1e-12);

        let a = 1.7;
        let tilted = GridGeometry::build(&Surface::Affine { slope: vec![a, 0.0] }, unit_box(1.0 / 16.0)).unwrap();
        let ones = vec![1.0; tilted.grid.len()];
        let want = (1.0 + a * a).powf(1.0 / (2.0 * p));
        assert!((lp_norm(&ones, &tilted, p).unwrap() - want).abs() < 1e-12);

        let ones = vec![1.0; flat.grid.len()];
        assert!(matches!(lp_norm(&ones, &flat, 1.0), Err(Error::InvalidExponent(_))));
        let mut empty = flat.clone();
        empty.grid.mask.iter_mut().for_each(|m| *m = false);
        assert!(matches!(lp_norm(&ones, &empty, 2.0), Err(Error::EmptyMask)));
    }

    #[test]
    fn tensor_norm_examples() {
        let grid = ChartGrid::from_box(&[-1.0, -1.0], &[1.0, 1.0], 1.0).unwrap();
        let flat = GridGeometry::build(&Surface::Flat { n: 2 }, grid.clone()).unwrap();
        let id: Vec<f64> = (0..grid.len()).flat_map(|_| [1.0, 0.0, 0.0, 1.0]).collect();
        let t = tensor_norm_field(&id, &flat);
        assert!(t.values.iter().all(|v| (v - 2f64.sqrt()).abs() < 1e-15));
        let zero = vec![0.0; 4 * grid.len()];
        assert!(tensor_norm_field(&zero, &flat).values.iter().all(|&v| v == 0.0));

        let par = GridGeometry::build(&Surface::Paraboloid { n: 2, scale: 1.0 }, grid.clone()).unwrap();
        let node = grid.linear_index(&[2, 1]);
        assert_eq!(grid.coords(node), vec![1.0, 0.0]);
        let e11: Vec<f64> = (0..grid.len()).flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect();
        assert!((tensor_norm_field(&e11, &par).values[node] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn cutoff_examples() {
        let spec = CutoffSpec { center: vec![0.0, 0.0], inner_radius: 0.5, outer_radius: 1.0 };
        let chi = build_cutoff(spec).unwrap();
        let inside = chi.jet(&[0.2, -0.3]).unwrap();
        assert_eq!(inside.value, 1.0);
        assert!(inside.grad.iter().chain(&inside.hess).all(|&v| v == 0.0));
        let outside = chi.jet(&[1.0, 0.4]).unwrap();
        assert_eq!(outside.value, 0.0);
        assert!(outside.grad.iter().chain(&outside.hess).all(|&v| v == 0.0));
        let mid = chi.jet(&[0.75, 0.0]).unwrap();
        assert!(mid.value > 0.0 && mid.value < 1.0);
        // Slope bound: the smoothstep's largest derivative over the width.
        let max_slope = (1..10_000).map(|k| smoothstep(k as f64 / 10_000.0).1).fold(0.0, f64::max);
        for k in 1..200 {
            let r = 0.5 + 0.5 * k as f64 / 200.0;
            let g = chi.jet(&[r * 0.6, r * 0.8]).unwrap();
            let norm = (g.grad[0].powi(2) + g.grad[1].powi(2)).sqrt();
            assert!(norm <= max_slope / 0.5 * (1.0 + 1e-9));
        }
        assert!(build_cutoff(CutoffSpec { center: vec![0.0], inner_radius: 1.0, outer_radius: 1.0 }).is_err());
    }

    #[test]
    fn cutoff_derivatives_match_finite_differences() {
        let chi = build_cutoff(CutoffSpec { center: vec![0.1, -0.2], inner_radius: 0.3, outer_radius: 0.9 }).unwrap();
        let x = [0.45, 0.2];
        let jet = chi.jet(&x).unwrap();
        let h = 1e-5;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let (jp, jm) = (chi.jet(&xp).unwrap(), chi.jet(&xm).unwrap());
            assert!((jet.grad[k] - (jp.value - jm.value) / (2.0 * h)).abs() < 1e-7);
            for l in 0..2 {
                let fd = (jp.grad[l] - jm.grad[l]) / (2.0 * h);
                assert!((jet.hess[k * 2 + l] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn geodesic_examples() {
        let grid = ChartGrid::from_box(&[-0.5, -0.5], &[1.5, 0.5], 1.0 / 32.0).unwrap();
        let flat = GridGeometry::build(&Surface::Flat { n: 2 }, grid.clone()).unwrap();
        let a = grid.nearest(&[0.0, 0.0]);
        let b = grid.nearest(&[1.0 / 32.0, 0.0]);
        assert!((geodesic_distance(&flat, a, b).unwrap() - 1.0 / 32.0).abs() < 1e-15);

        let e = grid.nearest(&[1.0, 0.0]);
        let lin = GridGeometry::build(&Surface::Affine { slope: vec![1.0, 0.0] }, grid.clone()).unwrap();
        let d = geodesic_distance(&lin, a, e).unwrap();
        assert!((d / 2f64.sqrt() - 1.0).abs() < 0.02);

        let par = GridGeometry::build(&Surface::Paraboloid { n: 2, scale: 1.0 }, grid).unwrap();
        let d = geodesic_distance(&par, a, e).unwrap();
        // Arc length of t -> (t, t^2) by composite Simpson.
        let m = 2000;
        let f = |t: f64| (1.0 + 4.0 * t * t).sqrt();
        let arc = (0..m)
            .map(|k| {
                let (t0, t1) = (k as f64 / m as f64, (k + 1) as f64 / m as f64);
                (t1 - t0) / 6.0 * (f(t0) + 4.0 * f(0.5 * (t0 + t1)) + f(t1))
            })
            .sum::<f64>();
        assert!((d / arc - 1.0).abs() < 0.03, "{d} vs {arc}");
    }

    #[test]
    fn disconnected_mask() {
        let mut grid = ChartGrid::from_box(&[0.0, 0.0], &[1.0, 1.0], 0.25).unwrap();
        for i in 0..grid.len() {
            if grid.multi_index(i)[0] == 2 {
                grid.mask[i] = false;
            }
        }
        let flat = GridGeometry::build(&Surface::Flat { n: 2 }, grid.clone()).unwrap();
        let r = geodesic_distance(&flat, grid.linear_index(&[0, 0]), grid.linear_index(&[4, 4]));
        assert!(matches!(r, Err(Error::Disconnected)));
    }

    #[test]
    fn holder_examples() {
        let grid = ChartGrid::ball(&[0.0, 0.0], 1.0, 1.0 / 16.0).unwrap();
        let flat = GridGeometry::build(&Surface::Flat { n: 2 }, grid.clone()).unwrap();
        let alpha = holder_exponent(2, 4.0).unwrap();
        assert_eq!(alpha, 0.5);
        let x0 = grid.nearest(&[0.0, 0.0]);
        let constant = vec![3.0; grid.len()];
        assert_eq!(holder_quotient(&constant, &flat, alpha, &[x0], 500, 1).unwrap(), 0.0);

        let d0 = DistanceField::compute(&flat, x0).unwrap();
        let field: Vec<f64> = d0.dist.iter().map(|d| if d.is_finite() { d.powf(alpha) } else { 0.0 }).collect();
        let q = holder_quotient(&field, &flat, alpha, &[x0], 2000, 7).unwrap();
        assert!((q - 1.0).abs() < 0.05, "{q}");
        let doubled: Vec<f64> = field.iter().map(|v| 2.0 * v).collect();
        let q2 = holder_quotient(&doubled, &flat, alpha, &[x0], 2000, 7).unwrap();
        assert!((q2 - 2.0 * q).abs() < 1e-12);

        assert!(matches!(holder_exponent(2, 2.0), Err(Error::InvalidExponent(_))));
        assert!(matches!(holder_quotient(&field, &flat, 0.0, &[x0], 10, 1), Err(Error::InvalidExponent(_))));
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let grid = ChartGrid::ball(&[0.3, -0.1, 0.2], 0.5, 0.125).unwrap();
        let field = ScalarField::sample(&grid, FieldKind::Solution, |x| (x[0] * 7.1).sin() / 3.0 + x[1] * x[2]);
        let mut bytes = Vec::new();
        write_field_binary(&field, &grid, &mut bytes).unwrap();
        assert_eq!(&bytes[0..4], b"CZF1");
        let (back, g2) = read_field_binary(&mut bytes.as_slice()).unwrap();
        assert_eq!(g2, grid);
        assert_eq!(back.kind, field.kind);
        assert!(back.values.iter().zip(&field.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(read_field_binary(&mut &b"XXXX"[..]).is_err());
    }

    #[test]
    fn finite_differences_exact_on_quadratics() {
        let grid = ChartGrid::ball(&[0.0, 0.0], 1.0, 0.1).unwrap();
        let f = ScalarField::sample(&grid, FieldKind::Derived, |x| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[0] + 3.0 * x[0] * x[1] - x[1] * x[1]);
        let g = gradient_fd(&f.values, &grid);
        let hs = hessian_fd(&f.values, &grid);
        let i = grid.nearest(&[0.3, -0.2]);
        let x = grid.coords(i);
        assert!((g[2 * i] - (2.0 + x[0] + 3.0 * x[1])).abs() < 1e-12);
        assert!((g[2 * i + 1] - (-1.0 + 3.0 * x[0] - 2.0 * x[1])).abs() < 1e-12);
        for (k, want) in [1.0, 3.0, 3.0, -2.0].iter().enumerate() {
            assert!((hs[4 * i + k] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let grid = unit_box(0.5);
        let field = ScalarField::sample(&grid, FieldKind::Derived, |x| x[0] - x[1]);
        let csv = field_to_csv(&field, &grid);
        assert_eq!(csv.lines().count(), 1 + grid.len());
        assert!(csv.starts_with("x0,x1,masked,value\n"));
    }
}
