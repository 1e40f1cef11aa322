//! Pointwise differential geometry of `Graph(f)` in `R^{n+1}` in the chart
//! `x -> (x, f(x))`.
//!
//! Everything is computed from the first two derivatives of `f`:
//! `g_ij = δ_ij + f_i f_j`, `h_ij = f_ij / W`, `Γ^k_ij = f_ij f_k / W^2` with
//! `W^2 = 1 + |∇f|^2`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::convexlab::{GraphFunction, Jet};
use crate::error::{Error, Result};

/// First fundamental form at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAt {
    pub g: DMatrix<f64>,
    pub g_inv: DMatrix<f64>,
    pub sqrt_det: f64,
}

impl MetricAt {
    pub fn from_grad(grad: &[f64]) -> Self {
        let n = grad.len();
        let df = DVector::from_column_slice(grad);
        let w2 = 1.0 + df.norm_squared();
        let outer = &df * df.transpose();
        let g = DMatrix::identity(n, n) + &outer;
        // Sherman-Morrison for the rank-one update.
        let g_inv = DMatrix::identity(n, n) - outer / w2;
        Self { g, g_inv, sqrt_det: w2.sqrt() }
    }

    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += a[i] * self.g[(i, j)] * b[j];
            }
        }
        s
    }
}

/// Second fundamental form and Christoffel symbols at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeAt {
    pub h: DMatrix<f64>,
    /// `christoffel[k][(i, j)] = Γ^k_ij`.
    pub christoffel: Vec<DMatrix<f64>>,
}

impl ShapeAt {
    pub fn from_jet(f: &Jet) -> Self {
        let n = f.dim();
        let w2 = 1.0 + f.grad.iter().map(|t| t * t).sum::<f64>();
        let hess = f.hess_matrix();
        let h = &hess / w2.sqrt();
        let christoffel = (0..n).map(|k| &hess * (f.grad[k] / w2)).collect();
        Self { h, christoffel }
    }
}

/// Two tangent vectors in chart components spanning a 2-plane.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentPlane {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl TangentPlane {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        Self { x, y }
    }

    pub fn coordinate(n: usize, i: usize, j: usize) -> Self {
        let mut x = vec![0.0; n];
        let mut y = vec![0.0; n];
        x[i] = 1.0;
        y[j] = 1.0;
        Self { x, y }
    }

    /// All coordinate planes `e_i ^ e_j`, `i < j`.
    pub fn coordinate_planes(n: usize) -> Vec<Self> {
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                out.push(Self::coordinate(n, i, j));
            }
        }
        out
    }
}

pub fn induced_metric(f: &dyn GraphFunction, x: &[f64]) -> Result<MetricAt> {
    Ok(MetricAt::from_grad(&f.jet(x)?.grad))
}

/// `Hess u_ij = u_ij - Γ^k_ij u_k` from jets of `u` and `f`.
pub fn covariant_hessian_from_jets(u: &Jet, f: &Jet) -> DMatrix<f64> {
    let n = f.dim();
    let w2 = 1.0 + f.grad.iter().map(|t| t * t).sum::<f64>();
    let df_du: f64 = f.grad.iter().zip(&u.grad).map(|(a, b)| a * b).sum();
    let mut out = u.hess_matrix();
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] -= f.hess[i * n + j] * df_du / w2;
        }
    }
    out
}

pub fn covariant_hessian(u: &dyn GraphFunction, f: &dyn GraphFunction, x: &[f64]) -> Result<DMatrix<f64>> {
    Ok(covariant_hessian_from_jets(&u.jet(x)?, &f.jet(x)?))
}

/// Metric trace `g^{ij} Hess_ij`.
pub fn metric_trace(metric: &MetricAt, m: &DMatrix<f64>) -> f64 {
    metric.g_inv.component_mul(m).sum()
}

pub fn laplace_beltrami_from_jets(u: &Jet, f: &Jet) -> f64 {
    let metric = MetricAt::from_grad(&f.grad);
    metric_trace(&metric, &covariant_hessian_from_jets(u, f))
}

pub fn laplace_beltrami(u: &dyn GraphFunction, f: &dyn GraphFunction, x: &[f64]) -> Result<f64> {
    Ok(laplace_beltrami_from_jets(&u.jet(x)?, &f.jet(x)?))
}

/// Tensor norm `sqrt(g^{ik} g^{jl} H_ij H_kl)` of a symmetric 2-tensor.
pub fn tensor_norm(metric: &MetricAt, m: &DMatrix<f64>) -> f64 {
    let a = &metric.g_inv * m;
    // |H|^2 = tr(g^-1 H g^-1 H)
    (&a * &a).trace().max(0.0).sqrt()
}

/// `|∇u|_g = sqrt(g^{ij} u_i u_j)`.
pub fn gradient_norm(metric: &MetricAt, du: &[f64]) -> f64 {
    let n = du.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += metric.g_inv[(i, j)] * du[i] * du[j];
        }
    }
    s.max(0.0).sqrt()
}

/// Sectional curvature of the plane through the Gauss equation.
pub fn sectional_curvature_from_jet(f: &Jet, plane: &TangentPlane) -> Result<f64> {
    let metric = MetricAt::from_grad(&f.grad);
    let shape = ShapeAt::from_jet(f);
    let form = |m: &DMatrix<f64>, a: &[f64], b: &[f64]| {
        let n = a.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += a[i] * m[(i, j)] * b[j];
            }
        }
        s
    };
    let (x, y) = (&plane.x, &plane.y);
    let gxx = form(&metric.g, x, x);
    let gyy = form(&metric.g, y, y);
    let gxy = form(&metric.g, x, y);
    let gram = gxx * gyy - gxy * gxy;
    if !(gram > 1e-14 * gxx * gyy) {
        return Err(Error::DegeneratePlane(gram));
    }
    let hxx = form(&shape.h, x, x);
    let hyy = form(&shape.h, y, y);
    let hxy = form(&shape.h, x, y);
    Ok((hxx * hyy - hxy * hxy) / gram)
}

pub fn sectional_curvature(f: &dyn GraphFunction, x: &[f64], plane: &TangentPlane) -> Result<f64> {
    sectional_curvature_from_jet(&f.jet(x)?, plane)
}

/// Principal curvatures: eigenvalues of the shape operator `g^{-1} h`,
/// computed symmetrically as eigenvalues of `g^{-1/2} h g^{-1/2}`.
pub fn principal_curvatures(f: &Jet) -> Vec<f64> {
    let metric = MetricAt::from_grad(&f.grad);
    let shape = ShapeAt::from_jet(f);
    let eig = SymmetricEigen::new(metric.g_inv.clone());
    let sqrt_inv = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()))
        * eig.eigenvectors.transpose();
    let m = &sqrt_inv * &shape.h * &sqrt_inv;
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Exact minimum over all 2-planes: `min_{i<j} k_i k_j`.
pub fn min_sectional_curvature(f: &Jet) -> f64 {
    let k = principal_curvatures(f);
    let mut lo = f64::INFINITY;
    for i in 0..k.len() {
        for j in i + 1..k.len() {
            lo = lo.min(k[i] * k[j]);
        }
    }
    lo
}
