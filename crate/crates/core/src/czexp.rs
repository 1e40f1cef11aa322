//! Calderon-Zygmund ratio experiments on smoothed singular graphs.
//!
//! For each smoothing radius `δ` of a schedule the sweep builds the smoothed
//! graph, solves `Δu = g` for a recentred source bump, localizes `v = χu`
//! and records `‖Hess v‖_p / (‖Δv‖_p + ‖v‖_p)` together with a Morrey-type
//! proxy and the gradient of `u` at the singular centres. Normalized
//! records then assemble the partial sums of a Sobolev-gap series.
//!
//! The Morrey proxy omits the unknown embedding constant; only its trend is
//! meaningful.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convexlab::{
    bump_ray_samples, certify_or_shrink, ball_samples, min_eigenvalue, smooth_approximant_any_scale, Ball, ConvexSpec,
};
use crate::error::{Error, Result};
use crate::graphgeo::{gradient_norm, min_sectional_curvature};
use crate::meshdisc::{
    build_cutoff, fmt17, gradient_fd, gradient_norm_field, hessian_fd, holder_exponent, holder_quotient, lp_norm,
    tensor_norm_field, ChartGrid, CutoffSpec, GridGeometry,
};
use crate::poisson::{assemble_operator, build_source, localize, solve, BoundaryCondition, SolverOptions, SourceSpec};

fn default_pair_budget() -> usize {
    4000
}

fn default_max_halvings() -> usize {
    24
}

fn default_noise() -> f64 {
    0.05
}

/// Everything a sweep needs; all balls live in the chart `R^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n: usize,
    pub p: f64,
    pub bump_count: usize,
    pub eta0: f64,
    /// Ball hosting the bump centres.
    pub perturbation_ball: Ball,
    /// Floor for bump radii during centre enumeration.
    pub min_radius: f64,
    /// Strictly decreasing smoothing radii.
    pub delta_schedule: Vec<f64>,
    pub h: f64,
    /// Radius of the Dirichlet solve ball, centred at the cutoff centre.
    pub solve_radius: f64,
    pub cutoff: CutoffSpec,
    pub source: SourceSpec,
    /// Radius of the ball around the source centre over which the source is
    /// recentred.
    pub working_radius: f64,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default = "default_pair_budget")]
    pub pair_budget: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_halvings")]
    pub max_halvings: usize,
    /// Relative tolerance for the "max gradient at centres decreases" check.
    #[serde(default = "default_noise")]
    pub gradient_noise: f64,
    /// Allows `1 < p <= n`; no claims are attached to such runs.
    #[serde(default)]
    pub experimental_low_p: bool,
}

impl SweepConfig {
    /// The desk-scale blow-up experiment: `n = 2`, `p = 4`, eight bumps near
    /// the tip of the paraboloid, `δ ∈ {0.2, 0.1, 0.05, 0.025}` on a 257²
    /// grid.
    pub fn standard() -> Self {
        Self {
            n: 2,
            p: 4.0,
            bump_count: 8,
            eta0: 0.05,
            perturbation_ball: Ball::new(vec![0.0, 0.0], 0.2),
            min_radius: 0.004,
            delta_schedule: vec![0.2, 0.1, 0.05, 0.025],
            h: 0.00625,
            solve_radius: 0.8,
            cutoff: CutoffSpec { center: vec![0.0, 0.0], inner_radius: 0.2, outer_radius: 0.26 },
            source: SourceSpec { center: vec![0.05, 0.03], radius: 0.08 },
            working_radius: 0.2,
            solver: SolverOptions::default(),
            pair_budget: default_pair_budget(),
            seed: 7,
            max_halvings: default_max_halvings(),
            gradient_noise: default_noise(),
            experimental_low_p: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        let n = self.n as f64;
        if self.n < 2 {
            return bad(format!("n = {} must be at least 2", self.n));
        }
        if self.experimental_low_p {
            if !(self.p > 1.0) {
                return bad(format!("p = {} must exceed 1", self.p));
            }
        } else if !(self.p > n) {
            return bad(format!("p = {} must exceed n = {}", self.p, self.n));
        }
        if !(self.h > 0.0) {
            return bad(format!("grid spacing h = {} must be positive", self.h));
        }
        if self.delta_schedule.iter().any(|d| !(*d > 0.0)) {
            return bad("smoothing radii must be positive".into());
        }
        if self.delta_schedule.windows(2).any(|w| !(w[1] < w[0])) {
            return bad("delta schedule must be strictly decreasing".into());
        }
        if let Some(&last) = self.delta_schedule.last() {
            if last < 4.0 * self.h * (1.0 - 1e-12) {
                return bad(format!("delta_min = {last} must be at least 4h = {}", 4.0 * self.h));
            }
        }
        self.cutoff.validate()?;
        for (name, dim) in [
            ("perturbation ball", self.perturbation_ball.dim()),
            ("cutoff", self.cutoff.center.len()),
            ("source", self.source.center.len()),
        ] {
            if dim != self.n {
                return bad(format!("{name} has dimension {dim}, expected {}", self.n));
            }
        }
        if self.solve_radius < 3.0 * self.cutoff.outer_radius * (1.0 - 1e-12) {
            return bad(format!(
                "solve radius {} must be at least three times the cutoff outer radius {}",
                self.solve_radius, self.cutoff.outer_radius
            ));
        }
        if !(self.working_radius >= 2.0 * self.source.radius) {
            return bad("working radius must be at least twice the source radius".into());
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return bad("solver tolerance and iteration cap must be positive".into());
        }
        Ok(())
    }

    pub fn solve_ball(&self) -> Ball {
        Ball::new(self.cutoff.center.clone(), self.solve_radius)
    }

    pub fn working_ball(&self) -> Ball {
        Ball::new(self.source.center.clone(), self.working_radius)
    }

    /// The bump layout after the convexity gate on the singular function.
    pub fn convex_spec(&self) -> Result<ConvexSpec> {
        let delta = self.delta_schedule.first().copied().unwrap_or(0.0);
        let spec = ConvexSpec::generate(
            self.n,
            self.perturbation_ball.clone(),
            self.bump_count,
            self.eta0,
            delta,
            self.min_radius,
            self.seed,
        )?;
        let spacing = self.h.min(self.perturbation_ball.radius / 32.0);
        let mut samples = ball_samples(&self.perturbation_ball, spacing);
        samples.extend(bump_ray_samples(&spec, 600));
        Ok(certify_or_shrink(&spec, &samples, self.max_halvings)?.0)
    }
}

/// The three norms entering the ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CzNorms {
    pub norm_v: f64,
    pub norm_lap: f64,
    pub norm_hess: f64,
}

impl CzNorms {
    pub fn ratio(&self) -> Result<f64> {
        let den = self.norm_lap + self.norm_v;
        if den == 0.0 {
            return Err(Error::ZeroDenominator);
        }
        Ok(self.norm_hess / den)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CzRecord {
    pub delta: f64,
    pub norm_v: f64,
    pub norm_lap: f64,
    pub norm_hess: f64,
    pub ratio: f64,
    pub morrey_proxy: f64,
    pub max_grad_at_centers: f64,
    /// `‖∇v‖_p`, informational.
    pub norm_grad: f64,
    pub min_hessian_eigenvalue: f64,
    pub min_sectional_curvature: f64,
    pub iterations: usize,
    pub relative_residual: f64,
    /// `δ` is not below a quarter of the smallest bump radius.
    pub coarse: bool,
    /// Fewer than eight grid cells per smoothing radius.
    pub under_resolved: bool,
}

impl CzRecord {
    pub fn norms(&self) -> CzNorms {
        CzNorms { norm_v: self.norm_v, norm_lap: self.norm_lap, norm_hess: self.norm_hess }
    }
}

/// Covariant Hessian `∂²v - Γ ∂v` from second differences of `v` and the
/// analytic Christoffel symbols of the graph (stride `n²`).
pub fn covariant_hessian_field(v: &[f64], geom: &GridGeometry) -> Vec<f64> {
    let n = geom.dim();
    let mut hess = hessian_fd(v, &geom.grid);
    let grad = gradient_fd(v, &geom.grid);
    hess.par_chunks_mut(n * n).enumerate().for_each(|(i, m)| {
        if !geom.grid.mask[i] {
            return;
        }
        let df = &geom.grad[i * n..(i + 1) * n];
        let w2 = 1.0 + df.iter().map(|t| t * t).sum::<f64>();
        let df_dv: f64 = df.iter().zip(&grad[i * n..(i + 1) * n]).map(|(a, b)| a * b).sum();
        for (k, entry) in m.iter_mut().enumerate() {
            *entry -= geom.hess[i * n * n + k] * df_dv / w2;
        }
    });
    hess
}

/// Norms of `v`, `Δv` and `Hess v` (stride `n²`).
pub fn cz_norms(v: &[f64], lap_v: &[f64], hess_v: &[f64], geom: &GridGeometry, p: f64) -> Result<CzNorms> {
    Ok(CzNorms {
        norm_v: lp_norm(v, geom, p)?,
        norm_lap: lp_norm(lap_v, geom, p)?,
        norm_hess: lp_norm(&tensor_norm_field(hess_v, geom).values, geom, p)?,
    })
}

pub fn cz_ratio(v: &[f64], lap_v: &[f64], hess_v: &[f64], geom: &GridGeometry, p: f64) -> Result<f64> {
    cz_norms(v, lap_v, hess_v, geom, p)?.ratio()
}

/// Hölder quotient of `|∇v|_g` with exponent `1 - n/p`, divided by
/// `‖Δv‖_p + ‖v‖_p`.
pub fn cz_lower_bound_via_morrey(
    v: &[f64],
    lap_v: &[f64],
    geom: &GridGeometry,
    p: f64,
    anchors: &[usize],
    pair_budget: usize,
    seed: u64,
) -> Result<f64> {
    let exponent = holder_exponent(geom.dim(), p)?;
    let den = lp_norm(lap_v, geom, p)? + lp_norm(v, geom, p)?;
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let grad = gradient_norm_field(&gradient_fd(v, &geom.grid), geom);
    Ok(holder_quotient(&grad.values, geom, exponent, anchors, pair_budget, seed)? / den)
}

fn run_job(config: &SweepConfig, spec: &ConvexSpec, centers: &[Vec<f64>], delta: f64) -> Result<CzRecord> {
    let n = config.n;
    let f = smooth_approximant_any_scale(&spec.with_delta(delta))?;
    let solve_ball = config.solve_ball();
    let grid = ChartGrid::ball(&solve_ball.center, solve_ball.radius, config.h)?;
    let geom = GridGeometry::build(&f, grid)?;

    let (min_eig, min_sect) = (0..geom.grid.len())
        .into_par_iter()
        .filter(|&i| geom.grid.mask[i])
        .map(|i| {
            let jet = geom.jet_at(i);
            (min_eigenvalue(&jet.hess_matrix()), min_sectional_curvature(&jet))
        })
        .reduce(|| (f64::INFINITY, f64::INFINITY), |a, b| (a.0.min(b.0), a.1.min(b.1)));
    if !(min_eig > 0.0) {
        return Err(Error::ConvexityGate { delta, min_eigenvalue: min_eig });
    }

    let op = assemble_operator(&geom, BoundaryCondition::Dirichlet, Some(&solve_ball))?;
    let source = build_source(&geom, &config.source, Some(&config.working_ball()))?;
    let report = solve(&op, &source, &config.solver)?;
    let chi = build_cutoff(config.cutoff.clone())?;
    let loc = localize(&report.solution, &chi, &op, &geom)?;
    let hess_v = covariant_hessian_field(&loc.v.values, &geom);
    let norms = cz_norms(&loc.v.values, &loc.lap_v.values, &hess_v, &geom, config.p)?;
    let ratio = norms.ratio()?;

    let anchors: Vec<usize> = centers.iter().map(|c| geom.grid.nearest(c)).collect();
    let morrey_proxy = if config.p > n as f64 {
        cz_lower_bound_via_morrey(
            &loc.v.values,
            &loc.lap_v.values,
            &geom,
            config.p,
            &anchors,
            config.pair_budget,
            config.seed,
        )?
    } else {
        f64::NAN
    };
    let grad_u = gradient_fd(&report.solution.values, &geom.grid);
    let max_grad_at_centers = anchors
        .iter()
        .map(|&i| gradient_norm(&geom.metric_at(i), &grad_u[i * n..(i + 1) * n]))
        .fold(0.0, f64::max);
    let grad_v = gradient_norm_field(&gradient_fd(&loc.v.values, &geom.grid), &geom);
    let norm_grad = lp_norm(&grad_v.values, &geom, config.p)?;
    let coarse = spec.min_radius().is_some_and(|eps| delta >= 0.25 * eps);
    Ok(CzRecord {
        delta,
        norm_v: norms.norm_v,
        norm_lap: norms.norm_lap,
        norm_hess: norms.norm_hess,
        ratio,
        morrey_proxy,
        max_grad_at_centers,
        norm_grad,
        min_hessian_eigenvalue: min_eig,
        min_sectional_curvature: min_sect,
        iterations: report.iterations,
        relative_residual: report.relative_residual,
        coarse,
        under_resolved: delta < 8.0 * config.h,
    })
}

fn centers(spec: &ConvexSpec) -> Vec<Vec<f64>> {
    spec.bumps.iter().map(|b| b.center.clone()).collect()
}

/// One record per schedule entry, in schedule order. The first failing
/// entry (in schedule order) aborts the sweep.
pub fn run_sweep(config: &SweepConfig) -> Result<Vec<CzRecord>> {
    config.validate()?;
    if config.delta_schedule.is_empty() {
        return Ok(Vec::new());
    }
    let spec = config.convex_spec()?;
    run_sweep_with_spec(config, &spec)
}

pub fn run_sweep_with_spec(config: &SweepConfig, spec: &ConvexSpec) -> Result<Vec<CzRecord>> {
    let c = centers(spec);
    let results: Vec<Result<CzRecord>> =
        config.delta_schedule.par_iter().map(|&d| run_job(config, spec, &c, d)).collect();
    results.into_iter().collect()
}

/// The unperturbed paraboloid (`K = 0`) with the same grid, source and
/// cutoff; gradients are still read at the sweep's bump centres.
pub fn run_baseline(config: &SweepConfig) -> Result<CzRecord> {
    config.validate()?;
    let spec = config.convex_spec()?;
    run_baseline_with_spec(config, &spec)
}

pub fn run_baseline_with_spec(config: &SweepConfig, spec: &ConvexSpec) -> Result<CzRecord> {
    let flat = ConvexSpec { bumps: Vec::new(), ..spec.clone() };
    let delta = config.delta_schedule.first().copied().unwrap_or(config.h * 4.0);
    let mut rec = run_job(config, &flat, &centers(spec), delta)?;
    rec.delta = 0.0;
    rec.coarse = false;
    rec.under_resolved = false;
    Ok(rec)
}

/// Sweep records plus the baseline and the trend checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub spec: ConvexSpec,
    pub baseline: CzRecord,
    pub records: Vec<CzRecord>,
    pub ratio_strictly_increasing: bool,
    pub morrey_strictly_increasing: bool,
    pub gradient_decreasing_within_noise: bool,
    /// Final ratio over the baseline ratio.
    pub growth_over_baseline: f64,
    pub growth_observed: bool,
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

pub fn summarize(config: &SweepConfig, spec: ConvexSpec, baseline: CzRecord, records: Vec<CzRecord>) -> SweepReport {
    let ratios: Vec<f64> = records.iter().map(|r| r.ratio).collect();
    let morrey: Vec<f64> = records.iter().map(|r| r.morrey_proxy).collect();
    let grad_ok = records
        .windows(2)
        .all(|w| w[1].max_grad_at_centers <= w[0].max_grad_at_centers * (1.0 + config.gradient_noise));
    let growth = ratios.last().map_or(f64::NAN, |r| r / baseline.ratio);
    let ratio_inc = strictly_increasing(&ratios);
    SweepReport {
        spec,
        baseline,
        ratio_strictly_increasing: ratio_inc,
        morrey_strictly_increasing: strictly_increasing(&morrey),
        gradient_decreasing_within_noise: grad_ok,
        growth_over_baseline: growth,
        growth_observed: ratio_inc && growth > 1.0,
        records,
    }
}

/// Gate, baseline and sweep in one call.
pub fn run_experiment(config: &SweepConfig) -> Result<SweepReport> {
    config.validate()?;
    if config.delta_schedule.is_empty() {
        let spec = ConvexSpec::generate(
            config.n,
            config.perturbation_ball.clone(),
            config.bump_count,
            config.eta0,
            0.0,
            config.min_radius,
            config.seed,
        )?;
        let nan = f64::NAN;
        let empty = CzRecord {
            delta: 0.0,
            norm_v: nan,
            norm_lap: nan,
            norm_hess: nan,
            ratio: nan,
            morrey_proxy: nan,
            max_grad_at_centers: nan,
            norm_grad: nan,
            min_hessian_eigenvalue: nan,
            min_sectional_curvature: nan,
            iterations: 0,
            relative_residual: nan,
            coarse: false,
            under_resolved: false,
        };
        return Ok(summarize(config, spec, empty, Vec::new()));
    }
    let spec = config.convex_spec()?;
    let baseline = run_baseline_with_spec(config, &spec)?;
    let records = run_sweep_with_spec(config, &spec)?;
    Ok(summarize(config, spec, baseline, records))
}

pub const CSV_HEADER: &str = "delta,norm_v,norm_lap,norm_hess,ratio,morrey_proxy,max_grad_at_centers";

pub fn records_to_csv(records: &[CzRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let row = [r.delta, r.norm_v, r.norm_lap, r.norm_hess, r.ratio, r.morrey_proxy, r.max_grad_at_centers];
        out.push_str(&row.iter().map(|v| fmt17(*v)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// Per-`j` witness chosen from a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub j: usize,
    pub record: CzRecord,
    /// The schedule was exhausted without reaching `ratio >= j`; the best
    /// record is kept for reporting only.
    pub flagged: bool,
}

/// For each `j ≤ max_j`, the first record along the schedule with
/// `ratio ≥ j`, or the best record flagged.
pub fn select_witnesses(records: &[CzRecord], max_j: usize) -> Vec<Witness> {
    (1..=max_j)
        .filter_map(|j| {
            if let Some(r) = records.iter().find(|r| r.ratio >= j as f64) {
                return Some(Witness { j, record: r.clone(), flagged: false });
            }
            records
                .iter()
                .max_by(|a, b| a.ratio.total_cmp(&b.ratio))
                .map(|r| Witness { j, record: r.clone(), flagged: true })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTerm {
    pub j: usize,
    pub delta: f64,
    pub ratio: f64,
    /// `s_j = 1 / (j² (‖Δv_j‖ + ‖v_j‖))`.
    pub scale: f64,
    pub norm_v: f64,
    pub norm_lap: f64,
    pub norm_hess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolevGapReport {
    pub p: f64,
    pub terms: Vec<GapTerm>,
    /// Cumulative `Σ (‖s_j Δv_j‖ + ‖s_j v_j‖)`; equals `Σ 1/j²`.
    pub data_partial_sums: Vec<f64>,
    /// Cumulative `Σ ratio_j / j²`.
    pub hessian_partial_sums: Vec<f64>,
    /// Cumulative `Σ 1/j`.
    pub harmonic_partial_sums: Vec<f64>,
    /// Cumulative `Σ 1/j²`.
    pub reference_data_sums: Vec<f64>,
    /// `L^p` norms of the truncated series for disjoint supports.
    pub lp_norm_f: f64,
    pub lp_norm_lap_f: f64,
    pub lp_norm_hess_f: f64,
}

/// Series `F_J = Σ_{j≤J} s_j v_j` from witnesses ordered by `j = 1..J`.
pub fn sobolev_gap_series(records: &[CzRecord], p: f64) -> Result<SobolevGapReport> {
    if !(p > 1.0) {
        return Err(Error::InvalidExponent(p));
    }
    let mut terms = Vec::with_capacity(records.len());
    for (k, r) in records.iter().enumerate() {
        let j = k + 1;
        if r.ratio < j as f64 {
            return Err(Error::InsufficientWitness { j, ratio: r.ratio });
        }
        let den = r.norm_lap + r.norm_v;
        if den == 0.0 {
            return Err(Error::ZeroDenominator);
        }
        let j2 = (j * j) as f64;
        let scale = 1.0 / (j2 * den);
        terms.push(GapTerm {
            j,
            delta: r.delta,
            ratio: r.ratio,
            scale,
            norm_v: r.norm_v * scale,
            norm_lap: r.norm_lap * scale,
            norm_hess: r.ratio / j2,
        });
    }
    let cumulative = |f: &dyn Fn(&GapTerm) -> f64| {
        terms
            .iter()
            .scan(0.0, |acc, t| {
                *acc += f(t);
                Some(*acc)
            })
            .collect::<Vec<f64>>()
    };
    let lp = |f: &dyn Fn(&GapTerm) -> f64| terms.iter().map(|t| f(t).powf(p)).sum::<f64>().powf(1.0 / p);
    Ok(SobolevGapReport {
        p,
        data_partial_sums: cumulative(&|t| t.norm_lap + t.norm_v),
        hessian_partial_sums: cumulative(&|t| t.norm_hess),
        harmonic_partial_sums: cumulative(&|t| 1.0 / t.j as f64),
        reference_data_sums: cumulative(&|t| 1.0 / (t.j * t.j) as f64),
        lp_norm_f: lp(&|t| t.norm_v),
        lp_norm_lap_f: lp(&|t| t.norm_lap),
        lp_norm_hess_f: lp(&|t| t.norm_hess),
        terms,
    })
}
