//! Discrete Laplace-Beltrami operator on a masked chart grid and the
//! localized Poisson solves built on it.
//!
//! The operator comes from the Dirichlet energy `∫ sqrt(g) g^{ij} u_i u_j`
//! split over grid cells: at each of the `2^n` corners of a cell the gradient
//! is taken from the cell edges meeting there and weighted with the metric
//! coefficient `sqrt(g) g^{-1}` of that corner. The resulting matrix `A`
//! is symmetric positive semidefinite and approximates `-Δ` times the lumped
//! mass. On the flat chart it reduces to the `(2n+1)`-point stencil scaled
//! by `h^{n-2}`.
//!
//! Dirichlet data are imposed on a ball by cut edges: an edge leaving the
//! domain is shortened to the boundary crossing at fraction `θ` and its
//! difference quotient is rescaled by `1/sqrt(θ)`, which reproduces the
//! second-order Gibou-type stencil on the flat chart. Without a boundary
//! ball the mask is used as a staircase.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convexlab::{Ball, GraphFunction};
use crate::error::{Error, Result};
use crate::graphgeo::laplace_beltrami_from_jets;
use crate::meshdisc::{gradient_fd, stable_sum, ChartGrid, Cutoff, FieldKind, GridGeometry, ScalarField};

/// Smallest admissible cut fraction; keeps the matrix well conditioned when
/// the boundary passes next to a node.
const MIN_CUT_FRACTION: f64 = 1e-3;

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    /// `u = 0` outside the mask.
    Dirichlet,
    /// Natural boundary condition; solutions are normalized to mean zero.
    Neumann,
}

/// Lipschitz source bump `clamp(2 - 2 r / R, 0, 1)` around `center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl SourceSpec {
    pub fn profile(&self, x: &[f64]) -> f64 {
        let r = x.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        (2.0 - 2.0 * r / self.radius).clamp(0.0, 1.0)
    }
}

/// The source bump minus its Riemannian mean over the working domain: the
/// masked nodes inside `working` when given, otherwise the whole mask. The
/// field vanishes outside the working domain.
///
/// The ball of radius `2R` around the centre must lie inside the mask.
pub fn build_source(geom: &GridGeometry, spec: &SourceSpec, working: Option<&Ball>) -> Result<ScalarField> {
    let grid = &geom.grid;
    if spec.center.len() != grid.dim() || !(spec.radius > 0.0) {
        return Err(Error::InvalidSpec("source needs a centre of grid dimension and a positive radius".into()));
    }
    let reach = 2.0 * spec.radius;
    for d in 0..grid.dim() {
        let lo = grid.origin[d];
        let hi = lo + (grid.dims[d] - 1) as f64 * grid.h;
        if spec.center[d] - reach < lo || spec.center[d] + reach > hi {
            return Err(Error::InvalidSpec("source ball with margin leaves the chart box".into()));
        }
    }
    for i in 0..grid.len() {
        let x = grid.coords(i);
        let r2: f64 = x.iter().zip(&spec.center).map(|(a, b)| (a - b) * (a - b)).sum();
        if r2 < reach * reach && !grid.mask[i] {
            return Err(Error::InvalidSpec(format!("source ball with margin leaves the mask at {x:?}")));
        }
    }
    let inside: Vec<bool> = (0..grid.len())
        .map(|i| grid.mask[i] && working.is_none_or(|w| w.contains(&grid.coords(i))))
        .collect();
    let raw = ScalarField::sample(grid, FieldKind::Source, |x| spec.profile(x));
    let volume = stable_sum(grid.len(), |i| if inside[i] { geom.weights[i] } else { 0.0 });
    if volume == 0.0 {
        return Err(Error::EmptyMask);
    }
    let mean = stable_sum(grid.len(), |i| if inside[i] { geom.weights[i] * raw.values[i] } else { 0.0 }) / volume;
    let values = raw.values.iter().zip(&inside).map(|(v, &m)| if m { v - mean } else { 0.0 }).collect();
    Ok(ScalarField::new(values, FieldKind::Source))
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

impl CsrMatrix {
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .into_par_iter()
            .map(|r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(|k| self.val[k] * x[self.col[k]]).sum())
            .collect()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let cols = &self.col[self.row_ptr[r]..self.row_ptr[r + 1]];
        match cols.binary_search(&c) {
            Ok(k) => self.val[self.row_ptr[r] + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, r)).collect()
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }
}

/// `A ≈ -Δ · M` on the active nodes of a grid.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub bc: BoundaryCondition,
    pub matrix: CsrMatrix,
    /// Grid node of each unknown.
    pub nodes: Vec<usize>,
    /// Unknown of each grid node, `usize::MAX` when inactive.
    pub unknown_of: Vec<usize>,
    /// Lumped mass per unknown.
    pub mass: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    stable_sum(a.len(), |i| a[i] * b[i])
}

/// Fraction along the edge from `a` (inside) to `b` (outside) where the
/// boundary sphere is crossed.
fn cut_fraction(ball: &Ball, a: &[f64], b: &[f64]) -> f64 {
    let e: Vec<f64> = a.iter().zip(&ball.center).map(|(x, c)| x - c).collect();
    let d: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let dd: f64 = d.iter().map(|v| v * v).sum();
    let ed: f64 = e.iter().zip(&d).map(|(x, y)| x * y).sum();
    let ee: f64 = e.iter().map(|v| v * v).sum();
    let disc = (ed * ed - dd * (ee - ball.radius * ball.radius)).max(0.0);
    ((-ed + disc.sqrt()) / dd).clamp(MIN_CUT_FRACTION, 1.0)
}

fn cell_corners(grid: &ChartGrid, cell: &[usize]) -> Vec<usize> {
    let n = grid.dim();
    (0..1usize << n)
        .map(|bits| {
            let idx: Vec<usize> = (0..n).map(|k| cell[k] + ((bits >> k) & 1)).collect();
            grid.linear_index(&idx)
        })
        .collect()
}

/// Local stiffness matrix of one cell (`2^n x 2^n`, row-major), or `None`
/// when the cell does not take part in the energy.
fn cell_matrix(geom: &GridGeometry, corners: &[usize], bc: BoundaryCondition, boundary: Option<&Ball>) -> Option<Vec<f64>> {
    let grid = &geom.grid;
    let n = grid.dim();
    let nc = corners.len();
    let inside: Vec<bool> = corners.iter().map(|&c| grid.mask[c]).collect();
    let count = inside.iter().filter(|&&m| m).count();
    match bc {
        BoundaryCondition::Neumann if count < nc => return None,
        BoundaryCondition::Dirichlet if count == 0 => return None,
        _ => {}
    }
    let coeff_at = |c: usize| -> Vec<f64> {
        let g = &geom.g_inv[c * n * n..(c + 1) * n * n];
        g.iter().map(|v| v * geom.sqrt_det[c]).collect()
    };
    let mut fallback = vec![0.0; n * n];
    for (k, &c) in corners.iter().enumerate() {
        if inside[k] {
            for (f, a) in fallback.iter_mut().zip(coeff_at(c)) {
                *f += a / count as f64;
            }
        }
    }
    let h = grid.h;
    let weight = h.powi(n as i32) / nc as f64;
    let mut k_cell = vec![0.0; nc * nc];
    let mut grad_rows = vec![0.0; n * nc];
    for b in 0..nc {
        let a = if inside[b] { coeff_at(corners[b]) } else { fallback.clone() };
        grad_rows.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..n {
            let nb = b ^ (1 << k);
            let sign = if (b >> k) & 1 == 0 { 1.0 } else { -1.0 };
            let mut scale = sign / h;
            if inside[b] != inside[nb] {
                if let Some(ball) = boundary {
                    let (pin, pout) = if inside[b] { (corners[b], corners[nb]) } else { (corners[nb], corners[b]) };
                    scale /= cut_fraction(ball, &grid.coords(pin), &grid.coords(pout)).sqrt();
                }
            }
            grad_rows[k * nc + nb] += scale;
            grad_rows[k * nc + b] -= scale;
        }
        for i in 0..nc {
            for j in 0..nc {
                let mut s = 0.0;
                for p in 0..n {
                    let di = grad_rows[p * nc + i];
                    if di == 0.0 {
                        continue;
                    }
                    for q in 0..n {
                        s += di * a[p * n + q] * grad_rows[q * nc + j];
                    }
                }
                k_cell[i * nc + j] += weight * s;
            }
        }
    }
    Some(k_cell)
}

/// Assemble the operator; `boundary` gives the Dirichlet ball for cut edges.
pub fn assemble_operator(geom: &GridGeometry, bc: BoundaryCondition, boundary: Option<&Ball>) -> Result<DiscreteOperator> {
    let grid = &geom.grid;
    let n = grid.dim();
    if grid.masked_count() == 0 {
        return Err(Error::EmptyMask);
    }
    if let Some(i) = (0..grid.len()).find(|&i| grid.mask[i] && !geom.sqrt_det[i].is_finite()) {
        return Err(Error::Precondition(format!("singular geometry at node {i}")));
    }
    let cell_dims: Vec<usize> = grid.dims.iter().map(|d| d - 1).collect();
    let cell_count: usize = cell_dims.iter().product();
    let cell_index = |mut c: usize| {
        let mut idx = vec![0; n];
        for d in (0..n).rev() {
            idx[d] = c % cell_dims[d];
            c /= cell_dims[d];
        }
        idx
    };
    let cells: Vec<Option<(Vec<usize>, Vec<f64>)>> = (0..cell_count)
        .into_par_iter()
        .map(|c| {
            let corners = cell_corners(grid, &cell_index(c));
            cell_matrix(geom, &corners, bc, boundary).map(|k| (corners, k))
        })
        .collect();

    let nc = 1usize << n;
    let hn = grid.h.powi(n as i32);
    let mut mass_node = vec![0.0; grid.len()];
    let mut active = vec![false; grid.len()];
    for (corners, _) in cells.iter().flatten() {
        for &c in corners {
            if grid.mask[c] {
                active[c] = true;
                mass_node[c] += geom.sqrt_det[c] * hn / nc as f64;
            }
        }
    }
    if bc == BoundaryCondition::Dirichlet {
        for i in 0..grid.len() {
            if grid.mask[i] {
                active[i] = true;
                mass_node[i] = geom.sqrt_det[i] * hn;
            }
        }
    }
    let nodes: Vec<usize> = (0..grid.len()).filter(|&i| active[i]).collect();
    let mut unknown_of = vec![NONE; grid.len()];
    for (k, &i) in nodes.iter().enumerate() {
        unknown_of[i] = k;
    }
    let cell_of_corner = |node: usize, bits: usize| -> Option<usize> {
        let idx = grid.multi_index(node);
        let mut c = 0;
        for d in 0..n {
            let b = (bits >> d) & 1;
            if idx[d] < b || idx[d] - b >= cell_dims[d] {
                return None;
            }
            c = c * cell_dims[d] + (idx[d] - b);
        }
        Some(c)
    };
    let rows: Vec<Vec<(usize, f64)>> = nodes
        .par_iter()
        .map(|&node| {
            let mut row = BTreeMap::new();
            for bits in 0..nc {
                let Some(c) = cell_of_corner(node, bits) else { continue };
                let Some((corners, k)) = &cells[c] else { continue };
                for (j, &other) in corners.iter().enumerate() {
                    let u = unknown_of[other];
                    if u != NONE {
                        *row.entry(u).or_insert(0.0) += k[bits * nc + j];
                    }
                }
            }
            row.into_iter().collect()
        })
        .collect();
    let mut row_ptr = vec![0];
    let mut col = Vec::new();
    let mut val = Vec::new();
    for row in rows {
        for (c, v) in row {
            col.push(c);
            val.push(v);
        }
        row_ptr.push(col.len());
    }
    let mass = nodes.iter().map(|&i| mass_node[i]).collect();
    Ok(DiscreteOperator {
        bc,
        matrix: CsrMatrix { rows: nodes.len(), row_ptr, col, val },
        nodes,
        unknown_of,
        mass,
    })
}

impl DiscreteOperator {
    pub fn unknowns(&self) -> usize {
        self.nodes.len()
    }

    pub fn restrict(&self, values: &[f64]) -> Vec<f64> {
        self.nodes.iter().map(|&i| values[i]).collect()
    }

    pub fn extend(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.unknown_of.len()];
        for (k, &i) in self.nodes.iter().enumerate() {
            out[i] = x[k];
        }
        out
    }

    /// `A u` on the full node vector, zero on inactive nodes.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.extend(&self.matrix.matvec(&self.restrict(values)))
    }

    /// Discrete `Δu = -(A u) / M`, treating inactive nodes as zero.
    pub fn laplacian(&self, values: &[f64]) -> Vec<f64> {
        let au = self.matrix.matvec(&self.restrict(values));
        let lap: Vec<f64> = au.iter().zip(&self.mass).map(|(a, m)| -a / m).collect();
        self.extend(&lap)
    }

    /// Mean of a full node vector with respect to the lumped mass.
    pub fn weighted_mean(&self, values: &[f64]) -> f64 {
        let total = stable_sum(self.mass.len(), |k| self.mass[k]);
        stable_sum(self.mass.len(), |k| self.mass[k] * values[self.nodes[k]]) / total
    }

    /// Subtract the mass-weighted mean on active nodes.
    pub fn recenter(&self, field: &ScalarField) -> ScalarField {
        let mean = self.weighted_mean(&field.values);
        let mut values = vec![0.0; field.values.len()];
        for &i in &self.nodes {
            values[i] = field.values[i] - mean;
        }
        ScalarField::new(values, field.kind)
    }

    fn project_mean(&self, x: &mut [f64]) {
        if self.bc == BoundaryCondition::Neumann {
            let total = stable_sum(self.mass.len(), |k| self.mass[k]);
            let mean = stable_sum(x.len(), |k| self.mass[k] * x[k]) / total;
            x.iter_mut().for_each(|v| *v -= mean);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 50_000 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    #[serde(skip)]
    pub solution: ScalarField,
    pub relative_residual: f64,
    pub iterations: usize,
    pub mean_solution: f64,
    pub mean_source: f64,
}

/// Jacobi-preconditioned conjugate gradients for `A x = b`.
fn pcg(op: &DiscreteOperator, b: &[f64], opts: &SolverOptions) -> Result<(Vec<f64>, f64, usize)> {
    let a = &op.matrix;
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; b.len()];
    if bnorm == 0.0 {
        return Ok((x, 0.0, 0));
    }
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|d| if *d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=opts.max_iter {
        let ap = a.matvec(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NonConvergence { iterations: it, residual: dot(&r, &r).sqrt() / bnorm });
        }
        let alpha = rz / pap;
        x.par_iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
        r.par_iter_mut().zip(&ap).for_each(|(r, ap)| *r -= alpha * ap);
        let res = dot(&r, &r).sqrt() / bnorm;
        if res <= opts.tol {
            return Ok((x, res, it));
        }
        z.par_iter_mut().zip(&r).zip(&inv_diag).for_each(|((z, r), d)| *z = r * d);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
    }
    Err(Error::NonConvergence { iterations: opts.max_iter, residual: dot(&r, &r).sqrt() / bnorm })
}

/// Solve `Δu = source` with the operator's boundary condition.
pub fn solve(op: &DiscreteOperator, source: &ScalarField, opts: &SolverOptions) -> Result<SolveReport> {
    let s = op.restrict(&source.values);
    let b: Vec<f64> = s.iter().zip(&op.mass).map(|(s, m)| -m * s).collect();
    let mean_source = op.weighted_mean(&source.values);
    if op.bc == BoundaryCondition::Neumann {
        let scale = stable_sum(s.len(), |k| op.mass[k] * s[k].abs()) / stable_sum(s.len(), |k| op.mass[k]);
        if mean_source.abs() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::MeanViolation(mean_source));
        }
    }
    let (mut x, relative_residual, iterations) = pcg(op, &b, opts)?;
    op.project_mean(&mut x);
    let solution = ScalarField::new(op.extend(&x), FieldKind::Solution);
    let mean_solution = op.weighted_mean(&solution.values);
    Ok(SolveReport { solution, relative_residual, iterations, mean_solution, mean_source })
}

/// Smallest nonzero eigenvalue of `A x = λ M x` for a Neumann operator, by
/// inverse iteration on the mean-zero subspace.
pub fn smallest_neumann_eigenvalue(op: &DiscreteOperator, iterations: usize, seed: u64) -> Result<f64> {
    if op.bc != BoundaryCondition::Neumann {
        return Err(Error::Precondition("eigenvalue iteration needs a Neumann operator".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..op.unknowns()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let opts = SolverOptions { tol: 1e-11, max_iter: 100_000 };
    let mut lambda = f64::NAN;
    for _ in 0..iterations {
        op.project_mean(&mut x);
        let mx: Vec<f64> = x.iter().zip(&op.mass).map(|(x, m)| x * m).collect();
        let norm = dot(&x, &mx).sqrt();
        x.iter_mut().for_each(|v| *v /= norm);
        let ax = op.matrix.matvec(&x);
        lambda = dot(&x, &ax);
        let rhs: Vec<f64> = x.iter().zip(&op.mass).map(|(x, m)| x * m).collect();
        x = pcg(op, &rhs, &opts)?.0;
    }
    Ok(lambda)
}

/// `v = χ u` and its Laplacian by the product rule.
#[derive(Debug, Clone)]
pub struct Localized {
    pub v: ScalarField,
    pub lap_v: ScalarField,
}

/// Multiply `u` by the cutoff and form
/// `Δv = χ Δu + u Δχ + 2 <∇u, ∇χ>_g` with the discrete `Δu`, central
/// differences for `∇u` and analytic cutoff derivatives.
pub fn localize(u: &ScalarField, chi: &Cutoff, op: &DiscreteOperator, geom: &GridGeometry) -> Result<Localized> {
    let grid = &geom.grid;
    let n = grid.dim();
    let offsets = grid.king_offsets();
    let outer = chi.spec.outer_radius;
    for i in 0..grid.len() {
        let x = grid.coords(i);
        let r2: f64 = x.iter().zip(&chi.spec.center).map(|(a, b)| (a - b) * (a - b)).sum();
        if r2 >= outer * outer {
            continue;
        }
        let interior = op.unknown_of[i] != NONE
            && offsets.iter().all(|s| grid.offset(i, s).is_some_and(|j| op.unknown_of[j] != NONE));
        if !interior {
            return Err(Error::SupportViolation(format!("cutoff support reaches the solve boundary at {x:?}")));
        }
    }
    let lap_u = op.laplacian(&u.values);
    let grad_u = gradient_fd(&u.values, grid);
    let pairs: Vec<(f64, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            if !grid.mask[i] {
                return Ok((0.0, 0.0));
            }
            let cj = chi.jet(&grid.coords(i))?;
            if cj.value == 0.0 && cj.grad.iter().all(|&g| g == 0.0) {
                return Ok((0.0, 0.0));
            }
            let fj = geom.jet_at(i);
            let lap_chi = laplace_beltrami_from_jets(&cj, &fj);
            let g_inv = &geom.g_inv[i * n * n..(i + 1) * n * n];
            let du = &grad_u[i * n..(i + 1) * n];
            let mut cross = 0.0;
            for a in 0..n {
                for b in 0..n {
                    cross += g_inv[a * n + b] * du[a] * cj.grad[b];
                }
            }
            let ui = u.values[i];
            Ok((cj.value * ui, cj.value * lap_u[i] + ui * lap_chi + 2.0 * cross))
        })
        .collect::<Result<_>>()?;
    let (v, lap_v): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok(Localized { v: ScalarField::new(v, FieldKind::Derived), lap_v: ScalarField::new(lap_v, FieldKind::Derived) })
}
