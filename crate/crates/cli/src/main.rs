mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use czlab::convexlab::{ball_samples, bump_ray_samples, certify_or_shrink, min_eigenvalue, GUARD_FACTOR};
use czlab::czexp::{records_to_csv, run_experiment, select_witnesses, sobolev_gap_series, SweepConfig};
use czlab::graphgeo::min_sectional_curvature;
use czlab::meshdisc::{field_to_csv, fmt17, lp_norm, read_field_binary, write_field_binary};
use czlab::poisson::{assemble_operator, build_source, solve, BoundaryCondition};
use czlab::warped::splice;
use czlab::{Ball, ChartGrid, Error, GridGeometry};
use serde::Serialize;
use serde_json::json;

use config::{load, BuildConfig, NormsConfig, PoissonConfig, WarpConfig};

#[derive(Parser)]
#[command(name = "czlab", version, about = "Singular convex graphs, Calderon-Zygmund ratio sweeps and warped splices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to rayon's choice.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a convex spec and certify convexity and positive curvature.
    Build(Common),
    /// Run the smoothing sweep and write CSV plus a JSON summary.
    Sweep(Common),
    /// Splice warping annuli and verify the curvature bound.
    Warp(Common),
    /// Single Laplace-Beltrami solve.
    Poisson(Common),
    /// L^p norms of a stored field.
    Norms(Common),
}

/// Exit codes: 2 validation, 3 solver, 4 convexity gate, 5 infeasible
/// splice, 1 anything else (including a failed bound check).
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::InvalidSpec(_)
            | Error::Precondition(_)
            | Error::InvalidExponent(_)
            | Error::EnumerationBudget { .. }
            | Error::Json(_)
            | Error::Format(_)
            | Error::EmptyMask
            | Error::SupportViolation(_)
            | Error::MeanViolation(_)
            | Error::OutOfDomain(_),
        ) => 2,
        Some(Error::NonConvergence { .. } | Error::Disconnected) => 3,
        Some(Error::ConvexityGate { .. }) => 4,
        Some(Error::Infeasible(_)) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Build(c) | Command::Sweep(c) | Command::Warp(c) | Command::Poisson(c) | Command::Norms(c) => c.clone(),
    };
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))
        .and_then(|_| match cli.command {
            Command::Build(c) => cmd_build(&c),
            Command::Sweep(c) => cmd_sweep(&c),
            Command::Warp(c) => cmd_warp(&c),
            Command::Poisson(c) => cmd_poisson(&c),
            Command::Norms(c) => cmd_norms(&c),
        });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_build(c: &Common) -> Result<u8> {
    let mut cfg: BuildConfig = load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let spec = cfg.spec()?;
    let ball = spec.ball.clone();
    let spacing = cfg.sample_spacing.unwrap_or(ball.radius / 64.0);
    if !(spacing > 0.0) {
        return Err(Error::InvalidSpec("sample_spacing must be positive".into()).into());
    }
    let mut samples = ball_samples(&ball, spacing);
    samples.extend(bump_ray_samples(&spec, 600));
    let (certified, lo) = certify_or_shrink(&spec, &samples, cfg.max_halvings)?;
    let factor = match (spec.bumps.first(), certified.bumps.first()) {
        (Some(a), Some(b)) => b.amplitude / a.amplitude,
        _ => 1.0,
    };

    let f = config::GraphSpec { surface: None, convex: Some(certified.clone()) }.function()?;
    let safe: Vec<Vec<f64>> = samples
        .iter()
        .filter(|x| certified.bumps.iter().all(|b| dist(x, &b.center) >= 2.0 * GUARD_FACTOR * b.radius))
        .cloned()
        .collect();
    let mut min_sect = f64::INFINITY;
    let mut argmin = ball.center.clone();
    let mut min_eig = f64::INFINITY;
    for x in &safe {
        let jet = f.jet(x)?;
        min_eig = min_eig.min(min_eigenvalue(&jet.hess_matrix()));
        let k = min_sectional_curvature(&jet);
        if k < min_sect {
            min_sect = k;
            argmin = x.clone();
        }
    }
    let profile: Vec<_> = (0..=8)
        .map(|i| {
            let r = ball.radius * i as f64 / 8.0;
            let mut x = ball.center.clone();
            x[0] += r;
            let k = f.jet(&x).map(|j| min_sectional_curvature(&j)).unwrap_or(f64::NAN);
            json!({ "r": r, "min_sectional_curvature": k })
        })
        .collect();
    let at_center = f.jet(&ball.center).map(|j| min_sectional_curvature(&j)).ok();

    write_json(&c.out.join("spec.json"), &certified)?;
    write_json(
        &c.out.join("certificate.json"),
        &json!({
            "min_eigenvalue": min_eig,
            "certificate_lower_bound": lo,
            "sample_spacing": spacing,
            "samples": safe.len(),
            "amplitude_factor": factor,
        }),
    )?;
    write_json(
        &c.out.join("curvature.json"),
        &json!({
            "min_sectional_curvature": min_sect,
            "argmin": argmin,
            "at_center": at_center,
            "radial_profile": profile,
            "positive": min_sect > 0.0,
        }),
    )?;
    if !(min_eig > 0.0) {
        return Err(Error::ConvexityGate { delta: certified.delta, min_eigenvalue: min_eig }.into());
    }
    Ok(if min_sect > 0.0 { 0 } else { 1 })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cmd_sweep(c: &Common) -> Result<u8> {
    let mut cfg: SweepConfig = load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let report = run_experiment(&cfg)?;
    write_text(&c.out.join("sweep.csv"), &records_to_csv(&report.records))?;
    let witnesses = select_witnesses(&report.records, 3);
    let sharp: Vec<_> = witnesses.iter().take_while(|w| !w.flagged).map(|w| w.record.clone()).collect();
    let gap = if sharp.is_empty() {
        json!({ "available": false, "reason": "no record reaches ratio >= 1" })
    } else {
        json!({ "available": true, "report": sobolev_gap_series(&sharp, cfg.p)? })
    };
    write_json(
        &c.out.join("summary.json"),
        &json!({
            "config": cfg,
            "report": report,
            "witnesses": witnesses,
            "sobolev_gap": gap,
        }),
    )?;
    Ok(0)
}

fn cmd_warp(c: &Common) -> Result<u8> {
    let cfg: WarpConfig = load(&c.config)?;
    let data = cfg.annuli()?;
    let spliced = splice(&data, &cfg.bound, &cfg.options)?;
    let report = spliced.verify_bound(&spliced.sample_grid(cfg.samples))?;
    write_json(&c.out.join("spliced.json"), &spliced)?;
    write_text(&c.out.join("bound.csv"), &report.to_csv())?;
    write_json(
        &c.out.join("summary.json"),
        &json!({
            "anchors": spliced.anchors(),
            "junctions": spliced.junctions(),
            "fillet_half_widths": spliced.fillet_half_widths(),
            "min_margin": report.min_margin,
            "argmin": report.argmin,
            "passed": report.passed,
        }),
    )?;
    Ok(if report.passed { 0 } else { 1 })
}

fn cmd_poisson(c: &Common) -> Result<u8> {
    let cfg: PoissonConfig = load(&c.config)?;
    let f = cfg.graph.function()?;
    let ball = Ball::new(cfg.grid.center.clone(), cfg.grid.radius);
    let grid = ChartGrid::ball(&ball.center, ball.radius, cfg.grid.h)?;
    let geom = GridGeometry::build(f.as_ref(), grid)?;
    let boundary = match cfg.boundary {
        BoundaryCondition::Dirichlet => Some(&ball),
        BoundaryCondition::Neumann => None,
    };
    let op = assemble_operator(&geom, cfg.boundary, boundary)?;
    let working = cfg.working_radius.map(|r| Ball::new(cfg.source.center.clone(), r));
    let source = build_source(&geom, &cfg.source, working.as_ref())?;
    let report = solve(&op, &source, &cfg.solver)?;
    let mut file = fs::File::create(c.out.join("solution.czf"))?;
    write_field_binary(&report.solution, &geom.grid, &mut file)?;
    write_text(&c.out.join("solution.csv"), &field_to_csv(&report.solution, &geom.grid))?;
    write_json(&c.out.join("report.json"), &report)?;
    Ok(0)
}

fn cmd_norms(c: &Common) -> Result<u8> {
    let cfg: NormsConfig = load(&c.config)?;
    let path = if cfg.field.is_relative() {
        c.config.parent().unwrap_or(Path::new(".")).join(&cfg.field)
    } else {
        cfg.field.clone()
    };
    let mut file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let (field, grid) = read_field_binary(&mut file)?;
    let f = cfg.graph.function()?;
    let geom = GridGeometry::build(f.as_ref(), grid)?;
    let mut csv = String::from("p,norm\n");
    for &p in &cfg.exponents {
        csv.push_str(&format!("{},{}\n", fmt17(p), fmt17(lp_norm(&field.values, &geom, p)?)));
    }
    write_text(&c.out.join("norms.csv"), &csv)?;
    Ok(0)
}
