//! Closed-form graph functions used as geometric oracles.

use serde::{Deserialize, Serialize};

use crate::convexlab::{GraphFunction, Jet};
use crate::error::{Error, Result};

/// Analytic graph functions with exact derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    /// `f = 0`.
    Flat { n: usize },
    /// `f(x) = a . x`.
    Affine { slope: Vec<f64> },
    /// `f(x) = scale |x|^2`.
    Paraboloid { n: usize, scale: f64 },
    /// Upper hemisphere `f(x) = sqrt(R^2 - |x|^2)`, defined for `|x| < R`.
    Hemisphere { n: usize, radius: f64 },
}

impl GraphFunction for Surface {
    fn dim(&self) -> usize {
        match self {
            Surface::Flat { n } | Surface::Paraboloid { n, .. } | Surface::Hemisphere { n, .. } => *n,
            Surface::Affine { slope } => slope.len(),
        }
    }

    fn jet(&self, x: &[f64]) -> Result<Jet> {
        let n = self.dim();
        let mut jet = Jet::zero(n);
        match self {
            Surface::Flat { .. } => {}
            Surface::Affine { slope } => {
                jet.value = slope.iter().zip(x).map(|(a, b)| a * b).sum();
                jet.grad.copy_from_slice(slope);
            }
            Surface::Paraboloid { scale, .. } => {
                jet.value = scale * x.iter().map(|t| t * t).sum::<f64>();
                for i in 0..n {
                    jet.grad[i] = 2.0 * scale * x[i];
                    jet.hess[i * n + i] = 2.0 * scale;
                }
            }
            Surface::Hemisphere { radius, .. } => {
                let r2: f64 = x.iter().map(|t| t * t).sum();
                let w2 = radius * radius - r2;
                if w2 <= 0.0 {
                    return Err(Error::Precondition(format!("point outside hemisphere chart (|x|^2 = {r2})")));
                }
                let w = w2.sqrt();
                jet.value = w;
                for i in 0..n {
                    jet.grad[i] = -x[i] / w;
                    for j in 0..n {
                        let id = if i == j { 1.0 } else { 0.0 };
                        jet.hess[i * n + j] = -id / w - x[i] * x[j] / (w * w2);
                    }
                }
            }
        }
        Ok(jet)
    }
}
