use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use czlab::convexlab::{assemble_singular, smooth_approximant_any_scale, Ball, ConvexSpec, GraphFunction};
use czlab::poisson::{BoundaryCondition, SolverOptions, SourceSpec};
use czlab::surfaces::Surface;
use czlab::warped::{AnnuliData, BoundFunction, SpliceOptions};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value = serde_json::from_str(&text).map_err(czlab::Error::from)?;
    Ok(value)
}

/// Parameters for [`czlab::convexlab::choose_centers`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateParams {
    pub n: usize,
    pub ball: Ball,
    pub count: usize,
    pub eta0: f64,
    #[serde(default)]
    pub delta: f64,
    pub min_radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildConfig {
    /// Explicit spec; mutually exclusive with `generate`.
    #[serde(default)]
    pub spec: Option<ConvexSpec>,
    #[serde(default)]
    pub generate: Option<GenerateParams>,
    /// Sample spacing for the certificate; defaults to `radius / 64`.
    #[serde(default)]
    pub sample_spacing: Option<f64>,
    #[serde(default = "default_halvings")]
    pub max_halvings: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_halvings() -> usize {
    24
}

impl BuildConfig {
    pub fn spec(&self) -> Result<ConvexSpec> {
        match (&self.spec, &self.generate) {
            (Some(s), None) => {
                s.validate()?;
                Ok(s.clone())
            }
            (None, Some(g)) => Ok(ConvexSpec::generate(g.n, g.ball.clone(), g.count, g.eta0, g.delta, g.min_radius, self.seed)?),
            _ => bail!(czlab::Error::InvalidSpec("give exactly one of `spec` and `generate`".into())),
        }
    }
}

/// A graph function: either an analytic surface or a convex spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    #[serde(default)]
    pub surface: Option<Surface>,
    #[serde(default)]
    pub convex: Option<ConvexSpec>,
}

impl GraphSpec {
    pub fn function(&self) -> Result<Box<dyn GraphFunction>> {
        match (&self.surface, &self.convex) {
            (Some(s), None) => Ok(Box::new(s.clone())),
            (None, Some(c)) if c.delta > 0.0 => Ok(Box::new(smooth_approximant_any_scale(c)?)),
            (None, Some(c)) => Ok(Box::new(assemble_singular(c)?)),
            _ => bail!(czlab::Error::InvalidSpec("give exactly one of `surface` and `convex`".into())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub center: Vec<f64>,
    pub radius: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonConfig {
    pub graph: GraphSpec,
    pub grid: GridSpec,
    pub boundary: BoundaryCondition,
    pub source: SourceSpec,
    /// Recentering ball radius around the source centre; whole mask if absent.
    #[serde(default)]
    pub working_radius: Option<f64>,
    #[serde(default)]
    pub solver: SolverOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormsConfig {
    /// Binary field file; relative paths resolve against the config file.
    pub field: PathBuf,
    pub graph: GraphSpec,
    pub exponents: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fixture {
    Synthetic,
    SyntheticInfeasible,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarpConfig {
    #[serde(default)]
    pub annuli: Option<AnnuliData>,
    #[serde(default)]
    pub fixture: Option<Fixture>,
    /// Keep only the first annuli of the input.
    #[serde(default)]
    pub truncate: Option<usize>,
    pub bound: BoundFunction,
    #[serde(default)]
    pub options: SpliceOptions,
    #[serde(default = "default_bound_samples")]
    pub samples: usize,
}

fn default_bound_samples() -> usize {
    10_000
}

impl WarpConfig {
    pub fn annuli(&self) -> Result<AnnuliData> {
        let mut data = match (&self.annuli, self.fixture) {
            (Some(a), None) => a.clone(),
            (None, Some(Fixture::Synthetic)) => czlab::warped::synthetic_annuli()?,
            (None, Some(Fixture::SyntheticInfeasible)) => czlab::warped::synthetic_infeasible()?,
            _ => bail!(czlab::Error::InvalidSpec("give exactly one of `annuli` and `fixture`".into())),
        };
        if let Some(k) = self.truncate {
            if k == 0 || k > data.annuli.len() {
                bail!(czlab::Error::InvalidSpec(format!("truncate = {k} out of range")));
            }
            data.annuli.truncate(k);
        }
        data.validate()?;
        Ok(data)
    }
}
