//! Scalar C-infinity building blocks shared by the taper, the cutoffs and the
//! mollifier.

/// `e(t) = exp(-1/t)` for `t > 0`, zero otherwise, with two derivatives.
fn flat_exp(t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let e = (-1.0 / t).exp();
    let t2 = t * t;
    let d1 = e / t2;
    let d2 = e * (1.0 / (t2 * t2) - 2.0 / (t2 * t));
    (e, d1, d2)
}

/// Smooth step `s(t) = e(t) / (e(t) + e(1 - t))`: 0 for `t <= 0`, 1 for
/// `t >= 1`, C-infinity everywhere. Returns `(s, s', s'')`.
pub fn smoothstep(t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if t >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let (a, a1, a2) = flat_exp(t);
    let (b, b1, b2) = flat_exp(1.0 - t);
    // b(t) := e(1 - t), so b' = -e'(1 - t), b'' = e''(1 - t).
    let (b1, b2) = (-b1, b2);
    let s = a + b;
    let s1 = a1 + b1;
    let s2 = a2 + b2;
    let v = a / s;
    let d1 = a1 / s - a * s1 / (s * s);
    let d2 = a2 / s - 2.0 * a1 * s1 / (s * s) - a * s2 / (s * s) + 2.0 * a * s1 * s1 / (s * s * s);
    (v, d1, d2)
}

/// Unnormalized radial bump `b(q) = exp(-1 / (1 - q))` for `q = |z|^2 / r^2 < 1`.
/// Returns `(b, db/dq, d2b/dq2)`.
pub fn radial_bump(q: f64) -> (f64, f64, f64) {
    if q >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let m = 1.0 - q;
    let b = (-1.0 / m).exp();
    let d1 = -b / (m * m);
    let d2 = b * (1.0 / (m * m * m * m) - 2.0 / (m * m * m));
    (b, d1, d2)
}
