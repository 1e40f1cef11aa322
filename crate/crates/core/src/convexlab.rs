//! Convex functions with cone-type singular points and their smooth convex
//! approximants.
//!
//! The base function is the paraboloid `|x|^2`. Each bump subtracts
//! `amplitude * p(|x - center| / radius)` where `p(s) = (s + s^2 - 1) psi(s)`
//! is a profile with a cone point at `s = 0`. Smoothing convolves the bump
//! terms with a compactly supported radial kernel of radius `delta`; the
//! quadratic part passes through unchanged because convolution with a
//! symmetric probability kernel maps `|x|^2` to `|x|^2 + m2`, and the constant
//! `m2` is subtracted.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::{radial_bump, smoothstep};

/// Profile equals `s + s^2 - 1` on `[0, TAPER_START]`.
pub const TAPER_START: f64 = 0.5;
/// Profile vanishes identically for `s >= TAPER_END`.
pub const TAPER_END: f64 = 0.6;
/// Singular evaluation is refused within `GUARD_FACTOR * radius` of a center.
pub const GUARD_FACTOR: f64 = 1e-6;
/// Mollifier quadrature cells per kernel radius.
pub const QUADRATURE_CELLS_PER_RADIUS: usize = 8;

/// Taper `psi`: 1 on `[0, 1/2]`, 0 on `[0.6, inf)`, smooth step between.
fn taper(s: f64) -> (f64, f64, f64) {
    let w = TAPER_END - TAPER_START;
    let (v, d1, d2) = smoothstep((TAPER_END - s) / w);
    (v, -d1 / w, d2 / (w * w))
}

/// Bump profile `p(s) = (s + s^2 - 1) psi(s)`.
pub fn bump_profile(s: f64) -> f64 {
    bump_profile_jet(s).0
}

/// `(p, p', p'')` at radial coordinate `s >= 0`.
pub fn bump_profile_jet(s: f64) -> (f64, f64, f64) {
    if s >= TAPER_END {
        return (0.0, 0.0, 0.0);
    }
    let q = s + s * s - 1.0;
    let q1 = 1.0 + 2.0 * s;
    let (t, t1, t2) = taper(s);
    (q * t, q1 * t + q * t1, 2.0 * t + 2.0 * q1 * t1 + q * t2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        dist(x, &self.center) < self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
}

/// Perturbation data for `f_K(x) = |x|^2 + sum_k eta_k p(|x - y_k| / eps_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexSpec {
    pub n: usize,
    pub ball: Ball,
    pub bumps: Vec<BumpSpec>,
    /// Mollification radius; `0` selects the singular function.
    pub delta: f64,
    pub eta0: f64,
    #[serde(default)]
    pub seed: u64,
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl ConvexSpec {
    /// Builds a spec with `count` bumps from [`choose_centers`].
    pub fn generate(
        n: usize,
        ball: Ball,
        count: usize,
        eta0: f64,
        delta: f64,
        min_radius: f64,
        seed: u64,
    ) -> Result<Self> {
        let bumps = choose_centers(&ball, count, eta0, min_radius)?;
        let spec = Self { n, ball, bumps, delta, eta0, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n < 2 {
            return bad(format!("dimension n = {} must be at least 2", self.n));
        }
        if self.ball.center.len() != self.n {
            return bad("perturbation ball center has wrong dimension".into());
        }
        if !(self.ball.radius > 0.0 && self.ball.radius.is_finite()) {
            return bad("perturbation ball radius must be positive".into());
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad("smoothing delta must be nonnegative".into());
        }
        if !(self.eta0 >= 0.0 && self.eta0.is_finite()) {
            return bad("eta0 must be nonnegative".into());
        }
        for (k, b) in self.bumps.iter().enumerate() {
            if b.center.len() != self.n {
                return bad(format!("bump {k}: center has wrong dimension"));
            }
            if !(b.radius > 0.0 && b.radius.is_finite()) {
                return bad(format!("bump {k}: radius must be positive"));
            }
            if !(b.amplitude > 0.0 && b.amplitude.is_finite()) {
                return bad(format!("bump {k}: amplitude must be positive"));
            }
            if dist(&b.center, &self.ball.center) + b.radius > self.ball.radius * (1.0 + 1e-12) {
                return bad(format!("bump {k}: support not contained in perturbation ball"));
            }
            if k > 0 && b.amplitude > self.bumps[k - 1].amplitude * (1.0 + 1e-12) {
                return bad(format!("bump {k}: amplitudes must be nonincreasing"));
            }
            for (j, o) in self.bumps[..k].iter().enumerate() {
                if dist(&b.center, &o.center) < (b.radius + o.radius) * (1.0 - 1e-12) {
                    return bad(format!("bumps {j} and {k}: supports overlap (bump supports must be pairwise disjoint)"));
                }
            }
        }
        Ok(())
    }

    pub fn min_radius(&self) -> Option<f64> {
        self.bumps.iter().map(|b| b.radius).reduce(f64::min)
    }

    /// Same bumps with every amplitude and `eta0` multiplied by `factor`.
    pub fn scaled_amplitudes(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.eta0 *= factor;
        for b in &mut out.bumps {
            b.amplitude *= factor;
        }
        out
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        Self { delta, ..self.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Candidate centers: the ball center, then points of the dyadic lattices
/// `center + radius * i / 2^level` (new points only), lexicographic within a
/// level.
fn dyadic_candidates(ball: &Ball, level: u32) -> Vec<Vec<f64>> {
    let n = ball.dim();
    if level == 0 {
        return vec![ball.center.clone()];
    }
    let m = 1i64 << level;
    let side = (2 * m + 1) as usize;
    let total = side.pow(n as u32);
    let mut out = Vec::new();
    let mut idx = vec![0i64; n];
    for lin in 0..total {
        let mut rem = lin;
        for d in (0..n).rev() {
            idx[d] = (rem % side) as i64 - m;
            rem /= side;
        }
        if idx.iter().all(|i| i % 2 == 0) {
            continue;
        }
        let p: Vec<f64> = idx
            .iter()
            .zip(&ball.center)
            .map(|(&i, &c)| c + ball.radius * i as f64 / m as f64)
            .collect();
        if ball.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Picks `count` bumps along a dense dyadic enumeration of `ball`.
///
/// Each radius is half the room left by the ball boundary and the supports
/// already placed, so `eps_k < min{boundary distance, pairwise distances} / 2`
/// and supports are disjoint. Candidates with radius below `min_radius` are
/// skipped. Amplitudes follow `eta0 * 2^-k`, `k = 1, 2, ...`.
pub fn choose_centers(ball: &Ball, count: usize, eta0: f64, min_radius: f64) -> Result<Vec<BumpSpec>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if !(min_radius > 0.0) {
        return Err(Error::Precondition("minimum radius floor must be positive".into()));
    }
    let mut bumps: Vec<BumpSpec> = Vec::with_capacity(count);
    let mut level = 0u32;
    // Beyond this level the lattice spacing is below the floor and no
    // candidate can host a bump.
    while bumps.len() < count && ball.radius / f64::from(1u32 << level.min(30)) >= min_radius {
        for y in dyadic_candidates(ball, level) {
            let mut room = ball.radius - dist(&y, &ball.center);
            for b in &bumps {
                room = room.min(dist(&y, &b.center) - b.radius);
            }
            let eps = 0.5 * room;
            if eps < min_radius {
                continue;
            }
            let k = bumps.len() as i32 + 1;
            bumps.push(BumpSpec { center: y, radius: eps, amplitude: eta0 * 2f64.powi(-k) });
            if bumps.len() == count {
                break;
            }
        }
        level += 1;
    }
    if bumps.len() < count {
        return Err(Error::EnumerationBudget { requested: count, found: bumps.len() });
    }
    Ok(bumps)
}

/// Value, gradient and row-major Hessian of a scalar function at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl Jet {
    pub fn zero(n: usize) -> Self {
        Self { value: 0.0, grad: vec![0.0; n], hess: vec![0.0; n * n] }
    }

    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn hess_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_row_slice(n, n, &self.hess)
    }
}

/// A function `f: R^n -> R` whose graph is studied; evaluators must be pure.
pub trait GraphFunction: Send + Sync {
    fn dim(&self) -> usize;
    fn jet(&self, x: &[f64]) -> Result<Jet>;
}

#[derive(Debug, Clone)]
struct Mollifier {
    delta: f64,
    offsets: Vec<f64>,
    w: Vec<f64>,
    wg: Vec<f64>,
    wh: Vec<f64>,
    second_moment: f64,
}

impl Mollifier {
    fn new(n: usize, delta: f64) -> Self {
        let cells = 2 * QUADRATURE_CELLS_PER_RADIUS;
        let step = delta / QUADRATURE_CELLS_PER_RADIUS as f64;
        let vol = step.powi(n as i32);
        let total = cells.pow(n as u32);
        let mut offsets = Vec::new();
        let mut raw = Vec::new();
        let mut z = vec![0.0; n];
        for lin in 0..total {
            let mut rem = lin;
            for d in (0..n).rev() {
                z[d] = -delta + (((rem % cells) as f64) + 0.5) * step;
                rem /= cells;
            }
            let q = z.iter().map(|v| v * v).sum::<f64>() / (delta * delta);
            if q >= 1.0 {
                continue;
            }
            offsets.extend_from_slice(&z);
            raw.push((q, z.clone()));
        }
        let mass: f64 = raw.iter().map(|(q, _)| radial_bump(*q).0 * vol).sum();
        let c = vol / mass;
        let d2 = delta * delta;
        let mut w = Vec::with_capacity(raw.len());
        let mut wg = Vec::with_capacity(raw.len() * n);
        let mut wh = Vec::with_capacity(raw.len() * n * n);
        let mut second_moment = 0.0;
        for (q, z) in &raw {
            let (b, b1, b2) = radial_bump(*q);
            w.push(c * b);
            second_moment += c * b * q * d2;
            for i in 0..n {
                wg.push(c * b1 * 2.0 * z[i] / d2);
            }
            for i in 0..n {
                for j in 0..n {
                    let mut v = b2 * 4.0 * z[i] * z[j] / (d2 * d2);
                    if i == j {
                        v += b1 * 2.0 / d2;
                    }
                    wh.push(c * v);
                }
            }
        }
        Self { delta, offsets, w, wg, wh, second_moment }
    }
}

/// The perturbed paraboloid, singular (`delta = 0`) or mollified.
#[derive(Debug, Clone)]
pub struct SmoothedFunction {
    n: usize,
    bumps: Vec<BumpSpec>,
    mollifier: Option<Mollifier>,
}

impl SmoothedFunction {
    pub fn delta(&self) -> f64 {
        self.mollifier.as_ref().map_or(0.0, |m| m.delta)
    }

    pub fn bumps(&self) -> &[BumpSpec] {
        &self.bumps
    }

    /// `m2(delta) = int |z|^2 rho_delta(z) dz` under the discrete kernel.
    pub fn kernel_second_moment(&self) -> f64 {
        self.mollifier.as_ref().map_or(0.0, |m| m.second_moment)
    }

    /// Value of the singular function `f_K`, defined everywhere.
    pub fn singular_value(&self, x: &[f64]) -> f64 {
        let mut v: f64 = x.iter().map(|t| t * t).sum();
        for b in &self.bumps {
            v += b.amplitude * bump_profile(dist(x, &b.center) / b.radius);
        }
        v
    }

    /// Value of the evaluator; for `delta > 0` this is the mollified value.
    pub fn value(&self, x: &[f64]) -> f64 {
        match &self.mollifier {
            None => self.singular_value(x),
            Some(_) => self.mollified_jet(x).value,
        }
    }

    fn singular_jet(&self, x: &[f64]) -> Result<Jet> {
        let n = self.n;
        let mut jet = quadratic_jet(x);
        for b in &self.bumps {
            let r = dist(x, &b.center);
            let s = r / b.radius;
            if s >= TAPER_END {
                continue;
            }
            if r < GUARD_FACTOR * b.radius {
                return Err(Error::Singular { center: b.center.clone(), distance: r });
            }
            let (p, p1, p2) = bump_profile_jet(s);
            let eta = b.amplitude;
            jet.value += eta * p;
            let u: Vec<f64> = x.iter().zip(&b.center).map(|(a, c)| (a - c) / r).collect();
            let radial = eta * p2 / (b.radius * b.radius);
            let tangential = eta * p1 / (b.radius * r);
            for i in 0..n {
                jet.grad[i] += eta * p1 / b.radius * u[i];
                for j in 0..n {
                    let uu = u[i] * u[j];
                    let id = if i == j { 1.0 } else { 0.0 };
                    jet.hess[i * n + j] += radial * uu + tangential * (id - uu);
                }
            }
        }
        Ok(jet)
    }

    fn mollified_jet(&self, x: &[f64]) -> Jet {
        let m = self.mollifier.as_ref().expect("mollified evaluator");
        let n = self.n;
        let mut jet = quadratic_jet(x);
        let mut pt = vec![0.0; n];
        for b in &self.bumps {
            if dist(x, &b.center) >= TAPER_END * b.radius + m.delta {
                continue;
            }
            for (k, &wk) in m.w.iter().enumerate() {
                let z = &m.offsets[k * n..(k + 1) * n];
                for d in 0..n {
                    pt[d] = x[d] - z[d];
                }
                let pv = b.amplitude * bump_profile(dist(&pt, &b.center) / b.radius);
                if pv == 0.0 {
                    continue;
                }
                jet.value += wk * pv;
                for d in 0..n {
                    jet.grad[d] += m.wg[k * n + d] * pv;
                }
                for d in 0..n * n {
                    jet.hess[d] += m.wh[k * n * n + d] * pv;
                }
            }
        }
        jet
    }
}

fn quadratic_jet(x: &[f64]) -> Jet {
    let n = x.len();
    let mut jet = Jet::zero(n);
    jet.value = x.iter().map(|t| t * t).sum();
    for i in 0..n {
        jet.grad[i] = 2.0 * x[i];
        jet.hess[i * n + i] = 2.0;
    }
    jet
}

impl GraphFunction for SmoothedFunction {
    fn dim(&self) -> usize {
        self.n
    }

    fn jet(&self, x: &[f64]) -> Result<Jet> {
        match self.mollifier {
            None => self.singular_jet(x),
            Some(_) => Ok(self.mollified_jet(x)),
        }
    }
}

/// `f_K(x) = |x|^2 + sum_k eta_k p(|x - y_k| / eps_k)`; derivatives refuse
/// evaluation inside the guard radius of each center.
pub fn assemble_singular(spec: &ConvexSpec) -> Result<SmoothedFunction> {
    spec.validate()?;
    if spec.delta != 0.0 {
        return Err(Error::Precondition(format!("singular assembly needs delta = 0, got {}", spec.delta)));
    }
    Ok(SmoothedFunction { n: spec.n, bumps: spec.bumps.clone(), mollifier: None })
}

/// Mollified approximant `(f_K * rho_delta) - m2(delta)` with the scale
/// precondition `0 < delta < min_k eps_k / 4`.
pub fn smooth_approximant(spec: &ConvexSpec) -> Result<SmoothedFunction> {
    if let Some(eps) = spec.min_radius() {
        if !(spec.delta < 0.25 * eps) {
            return Err(Error::Precondition(format!(
                "delta = {} must be below min_k eps_k / 4 = {}",
                spec.delta,
                0.25 * eps
            )));
        }
    }
    smooth_approximant_any_scale(spec)
}

/// Mollified approximant for any `delta > 0`. Convexity and exactness
/// outside the `delta`-fattened supports still hold; only the closeness to
/// `f_K` degrades once `delta` is comparable with the bump radii.
pub fn smooth_approximant_any_scale(spec: &ConvexSpec) -> Result<SmoothedFunction> {
    spec.validate()?;
    if !(spec.delta > 0.0) {
        return Err(Error::Precondition(format!("smoothing needs delta > 0, got {}", spec.delta)));
    }
    Ok(SmoothedFunction {
        n: spec.n,
        bumps: spec.bumps.clone(),
        mollifier: Some(Mollifier::new(spec.n, spec.delta)),
    })
}

pub fn min_eigenvalue(hess: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(hess.clone()).eigenvalues.min()
}

/// Minimum over `samples` of the smallest Hessian eigenvalue.
pub fn verify_convexity(f: &dyn GraphFunction, samples: &[Vec<f64>]) -> Result<f64> {
    let mut lo = f64::INFINITY;
    for x in samples {
        let jet = f.jet(x)?;
        lo = lo.min(min_eigenvalue(&jet.hess_matrix()));
    }
    Ok(lo)
}

/// Halves all amplitudes until the singular function certifies convex on
/// `samples` (points within the guard radius are skipped). Returns the
/// adjusted spec and its certificate.
pub fn certify_or_shrink(spec: &ConvexSpec, samples: &[Vec<f64>], max_halvings: usize) -> Result<(ConvexSpec, f64)> {
    let mut current = spec.with_delta(0.0);
    let safe: Vec<Vec<f64>> = samples
        .iter()
        .filter(|x| {
            spec.bumps
                .iter()
                .all(|b| dist(x, &b.center) >= 2.0 * GUARD_FACTOR * b.radius)
        })
        .cloned()
        .collect();
    for _ in 0..=max_halvings {
        let f = assemble_singular(&current)?;
        let lo = verify_convexity(&f, &safe)?;
        if lo > 0.0 {
            return Ok((current.with_delta(spec.delta), lo));
        }
        current = current.scaled_amplitudes(0.5);
    }
    Err(Error::ConvexityGate { delta: 0.0, min_eigenvalue: f64::NAN })
}

/// Points `y_k + eps_k s e_1` for `steps` values of `s` in `(0, TAPER_END]`.
///
/// The Hessian of a radial bump on top of `|x|^2` has the same spectrum in
/// every direction, so one ray per bump samples the whole support, including
/// the thin taper annulus a coarse grid can miss.
pub fn bump_ray_samples(spec: &ConvexSpec, steps: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(spec.bumps.len() * steps);
    for b in &spec.bumps {
        for i in 1..=steps {
            let s = TAPER_END * i as f64 / steps as f64;
            let mut x = b.center.clone();
            x[0] += b.radius * s;
            out.push(x);
        }
    }
    out
}

/// Regular sample grid of spacing `h` over the bounding box of `ball`,
/// restricted to the ball.
pub fn ball_samples(ball: &Ball, h: f64) -> Vec<Vec<f64>> {
    let n = ball.dim();
    let m = (ball.radius / h).floor() as i64;
    let side = (2 * m + 1) as usize;
    let mut out = Vec::new();
    for lin in 0..side.pow(n as u32) {
        let mut rem = lin;
        let mut p = vec![0.0; n];
        for d in (0..n).rev() {
            p[d] = ball.center[d] + h * ((rem % side) as i64 - m) as f64;
            rem /= side;
        }
        if ball.contains(&p) {
            out.push(p);
        }
    }
    out
}
