//! Warping functions of model manifolds `[0, ∞) × S^{n-1}` with metric
//! `dt² + σ(t)² g_S`, their curvature, and the annulus splice that keeps
//! sectional curvature above a growing bound `-λ(t)`.
//!
//! Curvature of a model metric:
//! `Sect_rad = -σ''/σ` for planes containing `∂_t`,
//! `Sect_tg = (1 - σ'²)/σ²` for planes tangent to the sphere.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meshdisc::fmt17;

/// `(σ, σ', σ'')`.
pub type Jet1 = (f64, f64, f64);

/// A closed-form law for `σ` on one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Law {
    /// `slope * t + intercept`.
    Affine { slope: f64, intercept: f64 },
    /// `amplitude * sin(rate * t + phase)`.
    Sine { amplitude: f64, rate: f64, phase: f64 },
    /// `amplitude * cosh(rate * t + phase)`.
    Cosh { amplitude: f64, rate: f64, phase: f64 },
    /// `amplitude * sinh(rate * t + phase)`.
    Sinh { amplitude: f64, rate: f64, phase: f64 },
    /// `amplitude * sin³(π cycles (t - start) / length)` on
    /// `[start, start + length]`, zero elsewhere. C² at both ends.
    Oscillation { start: f64, length: f64, amplitude: f64, cycles: f64 },
    /// Concave (or convex) C² quartic joining the line through
    /// `(center, center_value)` with slope `left_slope` to the line with slope
    /// `right_slope` through the same point, on `[center - w, center + w]`.
    Fillet { center: f64, half_width: f64, center_value: f64, left_slope: f64, right_slope: f64 },
    /// Quintic Hermite interpolation of sampled `(σ, σ', σ'')` on the nodes
    /// `t0 + i dt`.
    Sampled { t0: f64, dt: f64, values: Vec<f64>, first: Vec<f64>, second: Vec<f64> },
    Sum { terms: Vec<Law> },
    /// `law(t + offset)`.
    Shift { offset: f64, law: Box<Law> },
}

/// `r(u)` with `r(-1) = r'(-1) = r''(-1) = 0`, `r(1) = r'(1) = 1`,
/// `r''(1) = 0` and `r'' = 3(1 - u²)/4 ≥ 0`.
fn fillet_ramp(u: f64) -> Jet1 {
    let u2 = u * u;
    (
        3.0 / 16.0 + u / 2.0 + 3.0 * u2 / 8.0 - u2 * u2 / 16.0,
        0.5 + 0.75 * u - u2 * u / 4.0,
        0.75 * (1.0 - u2),
    )
}

fn hermite5(p0: f64, v0: f64, a0: f64, p1: f64, v1: f64, a1: f64, dt: f64, s: f64) -> Jet1 {
    let (v0, v1) = (v0 * dt, v1 * dt);
    let (a0, a1) = (a0 * dt * dt, a1 * dt * dt);
    let c = [
        p0,
        v0,
        a0 / 2.0,
        -10.0 * p0 - 6.0 * v0 - 1.5 * a0 + 0.5 * a1 - 4.0 * v1 + 10.0 * p1,
        15.0 * p0 + 8.0 * v0 + 1.5 * a0 - a1 + 7.0 * v1 - 15.0 * p1,
        -6.0 * p0 - 3.0 * v0 - 0.5 * a0 + 0.5 * a1 - 3.0 * v1 + 6.0 * p1,
    ];
    let mut v = 0.0;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for k in (0..6).rev() {
        v = v * s + c[k];
        if k >= 1 {
            d1 = d1 * s + k as f64 * c[k];
        }
        if k >= 2 {
            d2 = d2 * s + (k * (k - 1)) as f64 * c[k];
        }
    }
    (v, d1 / dt, d2 / (dt * dt))
}

impl Law {
    pub fn jet(&self, t: f64) -> Jet1 {
        match self {
            Law::Affine { slope, intercept } => (slope * t + intercept, *slope, 0.0),
            Law::Sine { amplitude, rate, phase } => {
                let (s, c) = (rate * t + phase).sin_cos();
                (amplitude * s, amplitude * rate * c, -amplitude * rate * rate * s)
            }
            Law::Cosh { amplitude, rate, phase } => {
                let x = rate * t + phase;
                (amplitude * x.cosh(), amplitude * rate * x.sinh(), amplitude * rate * rate * x.cosh())
            }
            Law::Sinh { amplitude, rate, phase } => {
                let x = rate * t + phase;
                (amplitude * x.sinh(), amplitude * rate * x.cosh(), amplitude * rate * rate * x.sinh())
            }
            Law::Oscillation { start, length, amplitude, cycles } => {
                if t <= *start || t >= start + length {
                    return (0.0, 0.0, 0.0);
                }
                let w = std::f64::consts::PI * cycles / length;
                let (s, c) = (w * (t - start)).sin_cos();
                (
                    amplitude * s * s * s,
                    amplitude * 3.0 * w * s * s * c,
                    amplitude * 3.0 * w * w * s * (2.0 * c * c - s * s),
                )
            }
            Law::Fillet { center, half_width, center_value, left_slope, right_slope } => {
                let dt = t - center;
                let (r, r1, r2) = fillet_ramp(dt / half_width);
                let jump = right_slope - left_slope;
                (
                    center_value + left_slope * dt + jump * half_width * r,
                    left_slope + jump * r1,
                    jump * r2 / half_width,
                )
            }
            Law::Sampled { t0, dt, values, first, second } => {
                let last = values.len().saturating_sub(2);
                let x = (t - t0) / dt;
                let i = (x.floor().max(0.0) as usize).min(last);
                let s = x - i as f64;
                hermite5(values[i], first[i], second[i], values[i + 1], first[i + 1], second[i + 1], *dt, s)
            }
            Law::Sum { terms } => terms.iter().fold((0.0, 0.0, 0.0), |acc, l| {
                let j = l.jet(t);
                (acc.0 + j.0, acc.1 + j.1, acc.2 + j.2)
            }),
            Law::Shift { offset, law } => law.jet(t + offset),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        match self {
            Law::Oscillation { length, .. } if !(*length > 0.0) => bad("oscillation length must be positive"),
            Law::Fillet { half_width, .. } if !(*half_width > 0.0) => bad("fillet half-width must be positive"),
            Law::Sampled { dt, values, first, second, .. } => {
                if !(*dt > 0.0) || values.len() < 2 || first.len() != values.len() || second.len() != values.len() {
                    bad("sampled law needs dt > 0 and at least two nodes with matching derivative arrays")
                } else {
                    Ok(())
                }
            }
            Law::Sum { terms } => terms.iter().try_for_each(Law::validate),
            Law::Shift { law, .. } => law.validate(),
            _ => Ok(()),
        }
    }
}

/// `σ` restricted to `[start, end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub start: f64,
    pub end: f64,
    pub law: Law,
}

/// Which side of a junction to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

/// Relative tolerance for value and slope continuity at junctions.
pub const JUNCTION_TOL: f64 = 1e-8;
/// Relative tolerance for `σ''` agreement at a C² junction.
pub const CURVATURE_JUMP_TOL: f64 = 1e-6;

/// Piecewise warping function on contiguous intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpingFunction {
    pub pieces: Vec<Piece>,
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

impl WarpingFunction {
    /// Checks contiguity and C¹ continuity across junctions.
    pub fn new(pieces: Vec<Piece>) -> Result<Self> {
        let w = Self { pieces };
        w.validate()?;
        Ok(w)
    }

    pub fn single(start: f64, end: f64, law: Law) -> Result<Self> {
        Self::new(vec![Piece { start, end, law }])
    }

    pub fn validate(&self) -> Result<()> {
        if self.pieces.is_empty() {
            return Err(Error::InvalidSpec("warping function has no pieces".into()));
        }
        for p in &self.pieces {
            if !(p.start < p.end) || !p.start.is_finite() || !p.end.is_finite() {
                return Err(Error::InvalidSpec(format!("bad piece interval [{}, {}]", p.start, p.end)));
            }
            p.law.validate()?;
        }
        for w in self.pieces.windows(2) {
            let t = w[0].end;
            if w[1].start != t {
                return Err(Error::InvalidSpec(format!("pieces not contiguous at {t} / {}", w[1].start)));
            }
            let (a, b) = (w[0].law.jet(t), w[1].law.jet(t));
            if !close(a.0, b.0, JUNCTION_TOL) || !close(a.1, b.1, JUNCTION_TOL) {
                return Err(Error::InvalidSpec(format!(
                    "value/slope discontinuity at t = {t}: ({}, {}) vs ({}, {})",
                    a.0, a.1, b.0, b.1
                )));
            }
        }
        Ok(())
    }

    pub fn start(&self) -> f64 {
        self.pieces[0].start
    }

    pub fn end(&self) -> f64 {
        self.pieces[self.pieces.len() - 1].end
    }

    pub fn junctions(&self) -> Vec<f64> {
        self.pieces.windows(2).map(|w| w[0].end).collect()
    }

    fn locate(&self, t: f64, side: Side) -> Result<usize> {
        if !(t >= self.start() && t <= self.end()) {
            return Err(Error::OutOfDomain(t));
        }
        let i = match side {
            Side::Right => self.pieces.partition_point(|p| p.end <= t),
            Side::Left => self.pieces.partition_point(|p| p.end < t),
        };
        Ok(i.min(self.pieces.len() - 1))
    }

    /// One-sided jet; `Left` uses the piece ending at a junction.
    pub fn jet_side(&self, t: f64, side: Side) -> Result<Jet1> {
        Ok(self.pieces[self.locate(t, side)?].law.jet(t))
    }

    /// Jet at `t`; at a junction both sides must agree to second order.
    pub fn jet(&self, t: f64) -> Result<Jet1> {
        let (l, r) = (self.jet_side(t, Side::Left)?, self.jet_side(t, Side::Right)?);
        if self.locate(t, Side::Left)? != self.locate(t, Side::Right)?
            && (!close(l.0, r.0, JUNCTION_TOL)
                || !close(l.1, r.1, JUNCTION_TOL)
                || !close(l.2, r.2, CURVATURE_JUMP_TOL))
        {
            return Err(Error::Corner(t));
        }
        Ok(r)
    }

    pub fn value(&self, t: f64) -> Result<f64> {
        Ok(self.jet_side(t, Side::Right)?.0)
    }

    /// Concatenates functions whose domains abut.
    pub fn concat(parts: Vec<WarpingFunction>) -> Result<Self> {
        Self::new(parts.into_iter().flat_map(|w| w.pieces).collect())
    }

    /// Pieces overlapping `[a, b]`, clipped, then moved by `shift`
    /// (`σ̃(t) = σ(t - shift)`).
    pub fn translated_window(&self, a: f64, b: f64, shift: f64) -> Result<Vec<Piece>> {
        if !(a >= self.start() && b <= self.end() && a < b) {
            return Err(Error::OutOfDomain(if a < self.start() { a } else { b }));
        }
        Ok(self
            .pieces
            .iter()
            .filter(|p| p.end > a && p.start < b)
            .map(|p| Piece {
                start: p.start.max(a) + shift,
                end: p.end.min(b) + shift,
                law: Law::Shift { offset: -shift, law: Box::new(p.law.clone()) },
            })
            .collect())
    }

    /// Polyline with slopes `slopes[i]` between `corners`, each corner rounded
    /// by a quartic fillet of half-width `half_width`.
    pub fn rounded_polyline(
        start: f64,
        end: f64,
        start_value: f64,
        corners: &[f64],
        slopes: &[f64],
        half_width: f64,
    ) -> Result<Self> {
        if slopes.len() != corners.len() + 1 {
            return Err(Error::InvalidSpec("need one more slope than corners".into()));
        }
        let mut edges = vec![start];
        for &c in corners {
            edges.push(c - half_width);
            edges.push(c + half_width);
        }
        edges.push(end);
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidSpec("corners too close for the fillet half-width".into()));
        }
        let mut pieces = Vec::new();
        let mut value = start_value;
        let mut t = start;
        for (i, &slope) in slopes.iter().enumerate() {
            let seg_end = edges[2 * i + 1];
            pieces.push(Piece { start: t, end: seg_end, law: Law::Affine { slope, intercept: value - slope * t } });
            if i < corners.len() {
                let c = corners[i];
                let center_value = value + slope * (c - t);
                pieces.push(Piece {
                    start: c - half_width,
                    end: c + half_width,
                    law: Law::Fillet {
                        center: c,
                        half_width,
                        center_value,
                        left_slope: slope,
                        right_slope: slopes[i + 1],
                    },
                });
                value = center_value + slopes[i + 1] * half_width;
                t = c + half_width;
            }
        }
        Self::new(pieces)
    }

    /// Adds `law` on `[a, b]`, splitting the piece that contains it.
    pub fn with_bump(&self, a: f64, b: f64, law: Law) -> Result<Self> {
        let idx = self
            .pieces
            .iter()
            .position(|p| p.start <= a && b <= p.end)
            .ok_or_else(|| Error::InvalidSpec(format!("[{a}, {b}] is not inside a single piece")))?;
        let p = &self.pieces[idx];
        let mut pieces = self.pieces[..idx].to_vec();
        if p.start < a {
            pieces.push(Piece { start: p.start, end: a, law: p.law.clone() });
        }
        pieces.push(Piece { start: a, end: b, law: Law::Sum { terms: vec![p.law.clone(), law] } });
        if b < p.end {
            pieces.push(Piece { start: b, end: p.end, law: p.law.clone() });
        }
        pieces.extend_from_slice(&self.pieces[idx + 1..]);
        Self::new(pieces)
    }
}

fn curvature_from_jet(t: f64, (s, s1, s2): Jet1) -> Result<(f64, f64)> {
    if !(s > 0.0) {
        return Err(Error::NonPositiveWarping { t, value: s });
    }
    Ok((-s2 / s, (1.0 - s1 * s1) / (s * s)))
}

/// `(Sect_rad, Sect_tg)` at `t`; refuses corners where `σ` is not C².
pub fn curvature_profile(sigma: &WarpingFunction, t: f64) -> Result<(f64, f64)> {
    curvature_from_jet(t, sigma.jet(t)?)
}

/// One-sided curvature pair.
pub fn curvature_profile_side(sigma: &WarpingFunction, t: f64, side: Side) -> Result<(f64, f64)> {
    curvature_from_jet(t, sigma.jet_side(t, side)?)
}

/// `max(0, -min Sect)` over `samples + 1` equispaced points of `[a, b]`,
/// both sides of every junction included.
pub fn kappa_estimate(sigma: &WarpingFunction, a: f64, b: f64, samples: usize) -> Result<f64> {
    let m = samples.max(1);
    let mut ts: Vec<f64> = (0..=m).map(|i| a + (b - a) * i as f64 / m as f64).collect();
    ts.extend(sigma.junctions().into_iter().filter(|&t| t >= a && t <= b));
    let worst = ts
        .par_iter()
        .map(|&t| {
            let mut lo = f64::INFINITY;
            for side in [Side::Left, Side::Right] {
                let (r, g) = curvature_profile_side(sigma, t, side)?;
                lo = lo.min(r).min(g);
            }
            Ok(lo)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    Ok((-worst).max(0.0))
}

/// Increasing bound `λ(t)` for `Sect ≥ -λ(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BoundFunction {
    Constant { value: f64 },
    /// `scale * ln(1 + t)`.
    Log1p { scale: f64 },
    Affine { slope: f64, intercept: f64 },
}

impl BoundFunction {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            BoundFunction::Constant { value } => *value,
            BoundFunction::Log1p { scale } => scale * t.ln_1p(),
            BoundFunction::Affine { slope, intercept } => slope * t + intercept,
        }
    }
}

/// Data of one annulus of the input warping function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annulus {
    /// Support `[a, b]` of the test function living on this annulus.
    pub a: f64,
    pub b: f64,
    /// `σ = alpha t + beta` on `[c, d]`, `alpha > 0`.
    pub c: f64,
    pub d: f64,
    pub alpha: f64,
    pub beta: f64,
    /// `σ = gamma t + delta` on `[e, f]`, `gamma < 0`.
    pub e: f64,
    pub f: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Curvature floor on `[e_{k-1}, d_k]` (`e_0` is the start of `σ`).
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnuliData {
    pub sigma: WarpingFunction,
    pub annuli: Vec<Annulus>,
}

impl AnnuliData {
    pub fn validate(&self) -> Result<()> {
        self.sigma.validate()?;
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.annuli.is_empty() {
            return bad("no annuli".into());
        }
        let mut prev_f = self.sigma.start();
        let mut prev_kappa = 0.0;
        for (k, an) in self.annuli.iter().enumerate() {
            let order = [prev_f, an.a, an.b, an.c, an.d, an.e, an.f];
            let strict = order.windows(2).enumerate().all(|(i, w)| if i == 0 && k == 0 { w[0] <= w[1] } else { w[0] < w[1] });
            if !strict {
                return bad(format!("annulus {}: need f_(k-1) < a < b < c < d < e < f", k + 1));
            }
            if an.f > self.sigma.end() {
                return bad(format!("annulus {}: f = {} beyond the domain of sigma", k + 1, an.f));
            }
            if !(an.alpha > 0.0) || !(an.gamma < 0.0) {
                return bad(format!("annulus {}: need alpha > 0 > gamma", k + 1));
            }
            if !(an.kappa >= prev_kappa) {
                return bad(format!("annulus {}: curvature floors must be nondecreasing", k + 1));
            }
            for (lo, hi, slope, icpt, name) in [(an.c, an.d, an.alpha, an.beta, "[c, d]"), (an.e, an.f, an.gamma, an.delta, "[e, f]")] {
                for i in 0..=8 {
                    let t = lo + (hi - lo) * i as f64 / 8.0;
                    let (v, d1, _) = self.sigma.jet_side(t, Side::Right)?;
                    if !close(v, slope * t + icpt, 1e-9) || !close(d1, slope, 1e-9) {
                        return bad(format!("annulus {}: sigma is not the declared line on {name} at t = {t}", k + 1));
                    }
                }
            }
            prev_f = an.f;
            prev_kappa = an.kappa;
        }
        Ok(())
    }

    /// Source interval `[e_{k-1}, d_k]` of piece `k` (0-based).
    pub fn piece_interval(&self, k: usize) -> (f64, f64) {
        let e_prev = if k == 0 { self.sigma.start() } else { self.annuli[k - 1].e };
        (e_prev, self.annuli[k].d)
    }

    /// Measured floors from [`kappa_estimate`], made nondecreasing.
    pub fn measured_kappas(&self, samples: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.annuli.len());
        let mut running: f64 = 0.0;
        for k in 0..self.annuli.len() {
            let (a, b) = self.piece_interval(k);
            running = running.max(kappa_estimate(&self.sigma, a, b, samples)?);
            out.push(running);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpliceOptions {
    /// Fillet half-width cap; the actual width is also limited to a quarter of
    /// the distance from the junction to either bridge end.
    pub fillet_half_width: f64,
    /// First candidate anchor.
    pub search_start: f64,
    /// Finest step of the anchor search.
    pub search_step: f64,
    /// Anchors beyond this are infeasible.
    pub search_horizon: f64,
}

impl Default for SpliceOptions {
    fn default() -> Self {
        Self { fillet_half_width: 0.5, search_start: 0.0, search_step: 1.0 / 64.0, search_horizon: 1e6 }
    }
}

/// A translated copy of `σ` on `[source_start, source_end]` placed at
/// `anchor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedPiece {
    pub anchor: f64,
    pub source_start: f64,
    pub source_end: f64,
}

impl PlacedPiece {
    pub fn end(&self) -> f64 {
        self.anchor + self.source_end - self.source_start
    }

    /// `σ̃(t) = σ(t + offset)` on the piece.
    pub fn offset(&self) -> f64 {
        self.source_start - self.anchor
    }
}

/// The concave bridge between two placed pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bridge {
    pub start: f64,
    pub end: f64,
    /// Corner `S_k` of the piecewise-linear bridge.
    pub junction: f64,
    pub half_width: f64,
    pub left_slope: f64,
    pub right_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplicedWarping {
    pub pieces: Vec<PlacedPiece>,
    pub bridges: Vec<Bridge>,
    pub kappas: Vec<f64>,
    pub warping: WarpingFunction,
    pub bound: BoundFunction,
}

impl SplicedWarping {
    pub fn anchors(&self) -> Vec<f64> {
        self.pieces.iter().map(|p| p.anchor).collect()
    }

    pub fn junctions(&self) -> Vec<f64> {
        self.bridges.iter().map(|b| b.junction).collect()
    }

    pub fn fillet_half_widths(&self) -> Vec<f64> {
        self.bridges.iter().map(|b| b.half_width).collect()
    }

    pub fn verify_bound(&self, samples: &[f64]) -> Result<BoundReport> {
        verify_bound(&self.warping, &self.bound, samples)
    }

    /// `count` equispaced samples over the spliced domain.
    pub fn sample_grid(&self, count: usize) -> Vec<f64> {
        let (a, b) = (self.warping.start(), self.warping.end());
        let m = count.max(2) - 1;
        (0..=m).map(|i| a + (b - a) * i as f64 / m as f64).collect()
    }
}

/// Left line of bridge `k` at `t` and the right line, both in spliced time.
struct BridgeLines {
    left: (f64, f64),
    right: (f64, f64),
}

impl BridgeLines {
    fn new(an: &Annulus, left_offset: f64, right_offset: f64) -> Self {
        // σ̃ = α (t + off_L) + β on the left, γ (t + off_R) + δ on the right.
        Self {
            left: (an.alpha, an.alpha * left_offset + an.beta),
            right: (an.gamma, an.gamma * right_offset + an.delta),
        }
    }

    fn left_at(&self, t: f64) -> f64 {
        self.left.0 * t + self.left.1
    }

    fn right_at(&self, t: f64) -> f64 {
        self.right.0 * t + self.right.1
    }

    fn corner(&self) -> f64 {
        (self.right.1 - self.left.1) / (self.left.0 - self.right.0)
    }
}

/// Whether anchor `next` for piece `k + 1` admits a concave bridge after
/// piece `k` placed at `anchor`.
fn bridge_ok(data: &AnnuliData, k: usize, anchor: f64, next: f64) -> bool {
    let (s0, s1) = data.piece_interval(k);
    let left_end = anchor + s1 - s0;
    if !(next > left_end) {
        return false;
    }
    let an = &data.annuli[k];
    let (n0, _) = data.piece_interval(k + 1);
    let lines = BridgeLines::new(an, s0 - anchor, n0 - next);
    let sigma_next = match data.sigma.value(n0) {
        Ok(v) => v,
        Err(_) => return false,
    };
    let sigma_end = match data.sigma.value(s1) {
        Ok(v) => v,
        Err(_) => return false,
    };
    // Gap condition: the rising line overtops the start of the next piece,
    // and the falling line overtops the end of this one.
    let s = lines.corner();
    lines.left_at(next) > sigma_next && lines.right_at(left_end) > sigma_end && s > left_end && s < next
}

fn search_anchor(lo: f64, opts: &SpliceOptions, ok: impl Fn(f64) -> bool) -> Result<f64> {
    let step = opts.search_step;
    let coarse = step * 64.0;
    let mut t = lo;
    while t <= opts.search_horizon {
        if ok(t) {
            let mut fine = (t - coarse).max(lo);
            while fine < t {
                if ok(fine) {
                    return Ok(fine);
                }
                fine += step;
            }
            return Ok(t);
        }
        t += coarse;
    }
    Err(Error::Infeasible(format!("no anchor found below the search horizon {}", opts.search_horizon)))
}

/// Places translated copies of `σ` on `[e_{k-1}, d_k]` at anchors `T_k` with
/// `λ(T_k) > κ_{k+1}` and bridges consecutive pieces by concave lines with a
/// quartic fillet at their corner.
pub fn splice(data: &AnnuliData, bound: &BoundFunction, opts: &SpliceOptions) -> Result<SplicedWarping> {
    data.validate()?;
    if !(opts.search_step > 0.0) || !(opts.fillet_half_width > 0.0) {
        return Err(Error::InvalidSpec("search step and fillet half-width must be positive".into()));
    }
    let m = data.annuli.len();
    let kappas: Vec<f64> = data.annuli.iter().map(|a| a.kappa).collect();
    let floor_after = |k: usize| kappas[(k + 1).min(m - 1)];

    let mut anchors = Vec::with_capacity(m);
    let first = search_anchor(opts.search_start, opts, |t| bound.eval(t) > floor_after(0))?;
    anchors.push(first);
    for k in 0..m - 1 {
        let prev = anchors[k];
        let (s0, s1) = data.piece_interval(k);
        let lo = prev + s1 - s0;
        let next = search_anchor(lo, opts, |t| bound.eval(t) > floor_after(k + 1) && bridge_ok(data, k, prev, t))?;
        anchors.push(next);
    }

    let placed: Vec<PlacedPiece> = anchors
        .iter()
        .enumerate()
        .map(|(k, &anchor)| {
            let (s0, s1) = data.piece_interval(k);
            PlacedPiece { anchor, source_start: s0, source_end: s1 }
        })
        .collect();

    let mut pieces = Vec::new();
    let mut bridges = Vec::new();
    for k in 0..m {
        let p = &placed[k];
        pieces.extend(data.sigma.translated_window(p.source_start, p.source_end, -p.offset())?);
        if k + 1 == m {
            break;
        }
        let q = &placed[k + 1];
        let an = &data.annuli[k];
        let lines = BridgeLines::new(an, p.offset(), q.offset());
        let (start, end) = (p.end(), q.anchor);
        let s = lines.corner();
        let w = opts.fillet_half_width.min(0.25 * (s - start)).min(0.25 * (end - s));
        if !(an.alpha > an.gamma) || !(w > 0.0) {
            return Err(Error::Infeasible(format!("bridge {} cannot carry a concave fillet", k + 1)));
        }
        let (ls, li) = lines.left;
        let (rs, ri) = lines.right;
        pieces.push(Piece { start, end: s - w, law: Law::Affine { slope: ls, intercept: li } });
        pieces.push(Piece {
            start: s - w,
            end: s + w,
            law: Law::Fillet {
                center: s,
                half_width: w,
                center_value: lines.left_at(s),
                left_slope: ls,
                right_slope: rs,
            },
        });
        pieces.push(Piece { start: s + w, end, law: Law::Affine { slope: rs, intercept: ri } });
        bridges.push(Bridge { start, end, junction: s, half_width: w, left_slope: ls, right_slope: rs });
    }
    let warping = WarpingFunction::new(pieces)?;
    for b in &bridges {
        for i in 0..=64 {
            let t = b.junction - b.half_width + 2.0 * b.half_width * i as f64 / 64.0;
            let d2 = warping.jet_side(t, Side::Right)?.2;
            assert!(d2 <= 1e-10, "fillet not concave at t = {t}: σ'' = {d2}");
        }
    }
    Ok(SplicedWarping { pieces: placed, bridges, kappas, warping, bound: bound.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub t: f64,
    pub sect_rad: f64,
    pub sect_tg: f64,
    pub lambda: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub min_margin: f64,
    pub argmin: f64,
    pub passed: bool,
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,sect_rad,sect_tg,lambda,margin\n");
        for r in &self.rows {
            let row = [r.t, r.sect_rad, r.sect_tg, r.lambda, r.margin];
            out.push_str(&row.iter().map(|v| fmt17(*v)).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

/// `min_t min(Sect_rad, Sect_tg) + λ(t)` over the samples. Samples at a
/// junction are evaluated from both sides and the worse row is kept.
pub fn verify_bound(sigma: &WarpingFunction, bound: &BoundFunction, samples: &[f64]) -> Result<BoundReport> {
    let rows = samples
        .par_iter()
        .map(|&t| {
            let mut worst: Option<BoundRow> = None;
            for side in [Side::Left, Side::Right] {
                let (sect_rad, sect_tg) = curvature_profile_side(sigma, t, side)?;
                let lambda = bound.eval(t);
                let margin = sect_rad.min(sect_tg) + lambda;
                if worst.is_none_or(|w| margin < w.margin) {
                    worst = Some(BoundRow { t, sect_rad, sect_tg, lambda, margin });
                }
            }
            Ok(worst.expect("two sides evaluated"))
        })
        .collect::<Result<Vec<BoundRow>>>()?;
    let (min_margin, argmin) = rows
        .iter()
        .map(|r| (r.margin, r.t))
        .fold((f64::INFINITY, f64::NAN), |acc, x| if x.0 < acc.0 { x } else { acc });
    Ok(BoundReport { min_margin, argmin, passed: min_margin >= 0.0, rows })
}

/// Three annuli on `[0, 36]`: flat level 4 carrying a `sin³` oscillation of
/// growing amplitude on `[a, b]`, rising with slope 3/2 on `[c, d]` and
/// falling with slope -3/2 on `[e, f]`. Declared floors are `κ = (1, 2, 3)`.
pub fn synthetic_annuli() -> Result<AnnuliData> {
    synthetic_with_kappas(&[1.0, 2.0, 3.0])
}

/// The synthetic fixture with a third floor no logarithmic bound reaches
/// before the default search horizon.
pub fn synthetic_infeasible() -> Result<AnnuliData> {
    synthetic_with_kappas(&[1.0, 2.0, 50.0])
}

const SYNTH_PERIOD: f64 = 12.0;
const SYNTH_LEVEL: f64 = 4.0;
const SYNTH_SLOPE: f64 = 1.5;
const SYNTH_FILLET: f64 = 0.5;
/// Oscillation amplitudes; measured floors stay below `κ = (1, 2, 3)`.
const SYNTH_AMPLITUDES: [f64; 3] = [0.12, 0.055, 0.037];

fn synthetic_with_kappas(kappas: &[f64]) -> Result<AnnuliData> {
    let count = kappas.len();
    let mut corners = Vec::new();
    let mut slopes = vec![0.0];
    for i in 0..count {
        let o = SYNTH_PERIOD * i as f64;
        corners.extend([o + 3.0, o + 5.0, o + 7.0]);
        slopes.extend([SYNTH_SLOPE, -SYNTH_SLOPE, 0.0]);
    }
    let end = SYNTH_PERIOD * count as f64;
    let mut sigma = WarpingFunction::rounded_polyline(0.0, end, SYNTH_LEVEL, &corners, &slopes, SYNTH_FILLET)?;
    let mut annuli = Vec::with_capacity(count);
    for (i, &kappa) in kappas.iter().enumerate() {
        let o = SYNTH_PERIOD * i as f64;
        let (a, b) = (o + 1.0, o + 2.0);
        let amp = SYNTH_AMPLITUDES[i.min(SYNTH_AMPLITUDES.len() - 1)];
        let cycles = (i + 1) as f64;
        sigma = sigma.with_bump(a, b, Law::Oscillation { start: a, length: b - a, amplitude: amp, cycles })?;
        let peak = SYNTH_LEVEL + 2.0 * SYNTH_SLOPE;
        annuli.push(Annulus {
            a,
            b,
            c: o + 3.5,
            d: o + 4.5,
            alpha: SYNTH_SLOPE,
            beta: SYNTH_LEVEL - SYNTH_SLOPE * (o + 3.0),
            e: o + 5.5,
            f: o + 6.5,
            gamma: -SYNTH_SLOPE,
            delta: peak + SYNTH_SLOPE * (o + 5.0),
            kappa,
        });
    }
    let data = AnnuliData { sigma, annuli };
    data.validate()?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn single(law: Law, a: f64, b: f64) -> WarpingFunction {
        WarpingFunction::single(a, b, law).unwrap()
    }

    fn line() -> Law {
        Law::Affine { slope: 1.0, intercept: 0.0 }
    }

    #[test]
    fn model_space_curvatures() {
        let flat = single(line(), 0.0, 10.0);
        assert_eq!(curvature_profile(&flat, 3.0).unwrap(), (0.0, 0.0));
        let sphere = single(Law::Sine { amplitude: 1.0, rate: 1.0, phase: 0.0 }, 0.0, PI);
        for t in [0.3, 1.0, 2.5] {
            let (r, g) = curvature_profile(&sphere, t).unwrap();
            assert!((r - 1.0).abs() < 1e-12 && (g - 1.0).abs() < 1e-12);
        }
        let hyp = single(Law::Sinh { amplitude: 1.0, rate: 1.0, phase: 0.0 }, 0.1, 5.0);
        let (r, g) = curvature_profile(&hyp, 2.0).unwrap();
        assert!((r + 1.0).abs() < 1e-12 && (g + 1.0).abs() < 1e-12);
        // σ = cosh has radial curvature -1 but tangential curvature
        // (1 - sinh²)/cosh² = 2/cosh² - 1, which is not -1.
        let cosh = single(Law::Cosh { amplitude: 1.0, rate: 1.0, phase: 0.0 }, 0.0, 5.0);
        let (r, g) = curvature_profile(&cosh, 2.0).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
        assert!((g - (2.0 / 2f64.cosh().powi(2) - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn domain_and_positivity_errors() {
        let sphere = single(Law::Sine { amplitude: 1.0, rate: 1.0, phase: 0.0 }, 0.0, 4.0);
        assert!(matches!(curvature_profile(&sphere, 3.5), Err(Error::NonPositiveWarping { .. })));
        assert!(matches!(curvature_profile(&sphere, 5.0), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn raw_corner_is_refused() {
        let w = WarpingFunction::new(vec![
            Piece { start: 0.0, end: 5.0, law: Law::Affine { slope: 1.0, intercept: 1.0 } },
            Piece { start: 5.0, end: 9.0, law: Law::Affine { slope: -1.0, intercept: 11.0 } },
        ]);
        // Slopes differ, so construction already rejects the C¹ break.
        assert!(w.is_err());
        let kink = WarpingFunction {
            pieces: vec![
                Piece { start: 0.0, end: 5.0, law: Law::Affine { slope: 1.0, intercept: 1.0 } },
                Piece { start: 5.0, end: 9.0, law: Law::Affine { slope: -1.0, intercept: 11.0 } },
            ],
        };
        assert!(matches!(curvature_profile(&kink, 5.0), Err(Error::Corner(_))));
        assert!(curvature_profile_side(&kink, 5.0, Side::Left).is_ok());
    }

    #[test]
    fn fillet_closed_form() {
        // Lines of slopes 1 and -1 meeting at S = 5 with value 5.
        let (s, w) = (5.0, 0.5);
        let fillet = Law::Fillet { center: s, half_width: w, center_value: 5.0, left_slope: 1.0, right_slope: -1.0 };
        let left = |t: f64| t;
        let right = |t: f64| 10.0 - t;
        let (v0, d0, a0) = fillet.jet(s - w);
        let (v1, d1, a1) = fillet.jet(s + w);
        assert!((v0 - left(s - w)).abs() < 1e-12 && (d0 - 1.0).abs() < 1e-12 && a0.abs() < 1e-8);
        assert!((v1 - right(s + w)).abs() < 1e-12 && (d1 + 1.0).abs() < 1e-12 && a1.abs() < 1e-8);
        // σ'' = -k (w² - (t - S)²) with k = 3(α - γ)/(4 w³).
        let k = 3.0 * 2.0 / (4.0 * w * w * w);
        for i in 0..=20 {
            let t = s - w + 2.0 * w * i as f64 / 20.0;
            let d2 = fillet.jet(t).2;
            assert!(d2 <= 1e-15);
            assert!((d2 + k * (w * w - (t - s) * (t - s))).abs() < 1e-12);
        }
        // Finite-difference consistency.
        let t = s + 0.13;
        let h = 1e-5;
        let fd1 = (fillet.jet(t + h).0 - fillet.jet(t - h).0) / (2.0 * h);
        let fd2 = (fillet.jet(t + h).1 - fillet.jet(t - h).1) / (2.0 * h);
        assert!((fd1 - fillet.jet(t).1).abs() < 1e-8 && (fd2 - fillet.jet(t).2).abs() < 1e-7);
    }

    #[test]
    fn oscillation_is_c2_at_ends() {
        let osc = Law::Oscillation { start: 1.0, length: 2.0, amplitude: 0.3, cycles: 3.0 };
        for t in [1.0, 3.0] {
            let j = osc.jet(t);
            let inner = osc.jet(if t == 1.0 { t + 1e-9 } else { t - 1e-9 });
            assert!(j.0.abs() < 1e-20 && inner.1.abs() < 1e-12 && inner.2.abs() < 1e-6);
        }
        let t = 1.37;
        let h = 1e-5;
        let fd2 = (osc.jet(t + h).1 - osc.jet(t - h).1) / (2.0 * h);
        assert!((fd2 - osc.jet(t).2).abs() < 1e-5 * (1.0 + fd2.abs()));
    }

    #[test]
    fn quintic_hermite_reproduces_quintics() {
        let p = |t: f64| (1.0 + t - 0.5 * t * t + 0.2 * t.powi(3) - 0.03 * t.powi(4) + 0.004 * t.powi(5),
            1.0 - t + 0.6 * t * t - 0.12 * t.powi(3) + 0.02 * t.powi(4),
            -1.0 + 1.2 * t - 0.36 * t * t + 0.08 * t.powi(3));
        let ts: Vec<f64> = (0..6).map(|i| 0.5 * i as f64).collect();
        let law = Law::Sampled {
            t0: 0.0,
            dt: 0.5,
            values: ts.iter().map(|&t| p(t).0).collect(),
            first: ts.iter().map(|&t| p(t).1).collect(),
            second: ts.iter().map(|&t| p(t).2).collect(),
        };
        for t in [0.1, 0.77, 1.5, 2.49] {
            let (a, b) = (law.jet(t), p(t));
            assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-11 && (a.2 - b.2).abs() < 1e-10);
        }
    }

    #[test]
    fn kappa_examples() {
        let sphere = single(Law::Sine { amplitude: 1.0, rate: 1.0, phase: 0.0 }, 0.1, 3.0);
        assert_eq!(kappa_estimate(&sphere, PI / 4.0, PI / 2.0, 200).unwrap(), 0.0);
        let hyp = single(Law::Cosh { amplitude: 1.0, rate: 1.0, phase: 0.0 }, 0.0, 2.0);
        assert!((kappa_estimate(&hyp, 0.0, 1.0, 200).unwrap() - 1.0).abs() < 1e-12);
        let wavy = single(
            Law::Sum { terms: vec![line(), Law::Sine { amplitude: 0.1, rate: 1.0, phase: 0.0 }] },
            0.5,
            11.0,
        );
        let coarse = kappa_estimate(&wavy, 1.0, 10.0, 1000).unwrap();
        let fine = kappa_estimate(&wavy, 1.0, 10.0, 10_000).unwrap();
        assert!(coarse > 0.0 && (coarse - fine).abs() <= 0.01 * fine, "{coarse} vs {fine}");
    }

    #[test]
    fn verify_bound_examples() {
        let ts: Vec<f64> = (1..=50).map(|i| 0.1 * i as f64).collect();
        let flat = single(line(), 0.0, 10.0);
        let r = verify_bound(&flat, &BoundFunction::Constant { value: 0.0 }, &ts).unwrap();
        assert_eq!(r.min_margin, 0.0);
        assert!(r.passed);
        let hyp = single(Law::Cosh { amplitude: 1.0, rate: 1.0, phase: 0.0 }, 0.0, 10.0);
        let r = verify_bound(&hyp, &BoundFunction::Constant { value: 2.0 }, &ts).unwrap();
        assert!((r.min_margin - 1.0).abs() < 1e-12 && r.passed);
        let r = verify_bound(&hyp, &BoundFunction::Constant { value: 0.5 }, &ts).unwrap();
        assert!((r.min_margin + 0.5).abs() < 1e-12 && !r.passed);
        let csv = r.to_csv();
        assert!(csv.starts_with("t,sect_rad,sect_tg,lambda,margin\n"));
        assert_eq!(csv.lines().count(), ts.len() + 1);
    }

    #[test]
    fn rounded_polyline_is_c2() {
        let w = WarpingFunction::rounded_polyline(0.0, 10.0, 2.0, &[3.0, 6.0], &[0.0, 1.0, -0.5], 0.5).unwrap();
        for t in w.junctions() {
            curvature_profile(&w, t).unwrap();
        }
        assert!((w.value(8.0).unwrap() - (2.0 + 3.0 - 1.0)).abs() < 1e-12);
    }

    fn synthetic() -> AnnuliData {
        synthetic_annuli().unwrap()
    }

    #[test]
    fn synthetic_fixture_floors() {
        let data = synthetic();
        let measured = data.measured_kappas(4000).unwrap();
        for (k, an) in data.annuli.iter().enumerate() {
            assert!(measured[k] <= an.kappa, "piece {k}: measured {} > declared {}", measured[k], an.kappa);
        }
        assert!(measured[2] > measured[0]);
    }

    #[test]
    fn identity_splice_single_annulus() {
        let mut data = synthetic();
        data.annuli.truncate(1);
        data.annuli[0].kappa = 0.0;
        let sp = splice(&data, &BoundFunction::Constant { value: 1.0 }, &SpliceOptions::default()).unwrap();
        assert_eq!(sp.anchors(), vec![0.0]);
        let (a, b) = data.piece_interval(0);
        for i in 0..=100 {
            let t = a + (b - a) * i as f64 / 100.0;
            assert_eq!(sp.warping.value(t).unwrap(), data.sigma.value(t).unwrap());
        }
    }

    #[test]
    fn synthetic_splice_conditions() {
        let data = synthetic();
        let bound = BoundFunction::Log1p { scale: 1.0 };
        let sp = splice(&data, &bound, &SpliceOptions::default()).unwrap();
        let t = sp.anchors();
        let m = data.annuli.len();
        for k in 0..m {
            assert!(bound.eval(t[k]) > data.annuli[(k + 1).min(m - 1)].kappa);
            if k + 1 < m {
                let (s0, s1) = data.piece_interval(k);
                let (n0, _) = data.piece_interval(k + 1);
                assert!(t[k + 1] > t[k] + s1 - s0);
                let an = &data.annuli[k];
                assert!(an.alpha * (t[k + 1] + s0 - t[k]) + an.beta > data.sigma.value(n0).unwrap());
            }
        }
        // Anchors are minimal on the search grid.
        let step = SpliceOptions::default().search_step;
        assert!(bound.eval(t[0] - step) <= data.annuli[1].kappa);
    }

    #[test]
    fn bridges_concave_and_slope_trapped() {
        let sp = splice(&synthetic(), &BoundFunction::Log1p { scale: 1.0 }, &SpliceOptions::default()).unwrap();
        for b in &sp.bridges {
            let mut prev = f64::INFINITY;
            for i in 0..=2000 {
                let t = b.start + (b.end - b.start) * i as f64 / 2000.0;
                let (_, d1, d2) = sp.warping.jet_side(t, Side::Right).unwrap();
                assert!(d2 <= 1e-10);
                assert!(d1 <= b.left_slope + 1e-12 && d1 >= b.right_slope - 1e-12);
                assert!(d1 <= prev + 1e-12);
                prev = d1;
            }
            for edge in [b.junction - b.half_width, b.junction + b.half_width] {
                let l = sp.warping.jet_side(edge, Side::Left).unwrap();
                let r = sp.warping.jet_side(edge, Side::Right).unwrap();
                assert!((l.0 - r.0).abs() <= 1e-8 && (l.1 - r.1).abs() <= 1e-8 && (l.2 - r.2).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn translation_isometry() {
        let data = synthetic();
        let sp = splice(&data, &BoundFunction::Log1p { scale: 1.0 }, &SpliceOptions::default()).unwrap();
        for p in &sp.pieces {
            for i in 1..200 {
                let t = p.anchor + (p.end() - p.anchor) * i as f64 / 200.0;
                let a = curvature_profile_side(&sp.warping, t, Side::Right).unwrap();
                let b = curvature_profile_side(&data.sigma, t + p.offset(), Side::Right).unwrap();
                assert!((a.0 - b.0).abs() <= 1e-12 && (a.1 - b.1).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn bound_holds_on_dense_grid() {
        let sp = splice(&synthetic(), &BoundFunction::Log1p { scale: 1.0 }, &SpliceOptions::default()).unwrap();
        let report = sp.verify_bound(&sp.sample_grid(10_000)).unwrap();
        assert!(report.passed, "margin {} at {}", report.min_margin, report.argmin);
    }

    #[test]
    fn fillet_shrinking_converges() {
        let data = synthetic();
        let bound = BoundFunction::Log1p { scale: 1.0 };
        let margins: Vec<f64> = [0.4, 0.2, 0.1]
            .iter()
            .map(|&w| {
                let opts = SpliceOptions { fillet_half_width: w, ..Default::default() };
                let sp = splice(&data, &bound, &opts).unwrap();
                sp.verify_bound(&sp.sample_grid(20_000)).unwrap().min_margin
            })
            .collect();
        assert!(margins.iter().all(|m| *m >= 0.0));
        assert!((margins[2] - margins[1]).abs() <= (margins[1] - margins[0]).abs() + 1e-12);
    }

    #[test]
    fn infeasible_fixture_errors() {
        let data = synthetic_infeasible().unwrap();
        let r = splice(&data, &BoundFunction::Log1p { scale: 1.0 }, &SpliceOptions::default());
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn serde_round_trip() {
        let sp = splice(&synthetic(), &BoundFunction::Log1p { scale: 1.0 }, &SpliceOptions::default()).unwrap();
        let s = serde_json::to_string(&sp).unwrap();
        assert!(s.contains("\"type\":\"fillet\""));
        let back: SplicedWarping = serde_json::from_str(&s).unwrap();
        assert_eq!(back, sp);
    }
}
