#![allow(dead_code)]

use gpide::catalog::{PhiSpec, TestFunction};
use gpide::scheme::{Axis, Grid};
use gpide::step::{inner_expectation, ParamSearchConfig, StepContext, StepQuadrature, TailShape};
use gpide::uncertainty::{UncertaintyBox, WkLaw};

pub fn boxed(lambda: (f64, f64), gamma: (f64, f64), sigma2: (f64, f64), alpha: f64) -> UncertaintyBox {
    UncertaintyBox {
        lambda_lo: lambda.0,
        lambda_hi: lambda.1,
        gamma_lo: gamma.0,
        gamma_hi: gamma.1,
        sigma2_lo: sigma2.0,
        sigma2_hi: sigma2.1,
        alpha,
    }
}

pub fn default_box() -> UncertaintyBox {
    boxed((0.3, 0.35), (-0.2, 0.2), (0.8, 1.0), 1.5)
}

pub fn ctx(b: UncertaintyBox, h: f64, quad: StepQuadrature, search: ParamSearchConfig) -> StepContext {
    StepContext::new(h, b, TailShape::default(), quad, search).expect("valid context")
}

pub fn grid(x: (f64, f64, usize), y: (f64, f64, usize), z: (f64, f64, usize)) -> Grid {
    Grid::new(Axis::new(x.0, x.1, x.2), Axis::new(y.0, y.1, y.2), Axis::new(z.0, z.1, z.2)).expect("valid grid")
}

pub fn phi(spec: PhiSpec) -> TestFunction {
    spec.build().expect("valid phi")
}

/// Parameter grid with both endpoints.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if lo == hi {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// One step of the scheme by direct composition: the supremum over a
/// parameter grid of the linear expectations, with `v` evaluated anywhere.
pub fn brute_step(ctx: &StepContext, v: &dyn Fn(f64, f64, f64) -> f64, p: [f64; 3], grid_pts: usize) -> f64 {
    let b = &ctx.uncertainty;
    let mut best = f64::NEG_INFINITY;
    for c in 0..4 {
        for &q in &linspace(b.gamma_lo, b.gamma_hi, grid_pts) {
            for &s2 in &linspace(b.sigma2_lo, b.sigma2_hi, grid_pts) {
                best = best.max(inner_expectation(ctx, v, p, q, s2, c));
            }
        }
    }
    best
}

/// Gridless two-step recursion at the origin.
pub fn brute_two_steps(ctx: &StepContext, phi: &dyn Fn(f64, f64, f64) -> f64, grid_pts: usize) -> f64 {
    let u1 = |x: f64, y: f64, z: f64| brute_step(ctx, phi, [x, y, z], grid_pts);
    brute_step(ctx, &u1, [0.0; 3], grid_pts)
}

/// Adaptive Simpson on `[a, b]` to absolute tolerance `tol`.
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Unit-intensity half-line integrals `(left, right)` of
/// `∫ (φ(z ± λ) − φ(z) ∓ φ'(z)λ) λ^{-1-α} dλ` for `φ(z) = cos(ωz + c)`:
/// `ω^α Γ(−α) cos(ωz + c ± πα/2)`.
pub fn cos_halves(alpha: f64, omega: f64, phase: f64) -> (f64, f64) {
    let g = statrs::function::gamma::gamma(-alpha) * omega.abs().powf(alpha);
    let pa = std::f64::consts::PI * alpha / 2.0;
    (g * (phase + pa).cos(), g * (phase - pa).cos())
}

/// Derivatives `d^k/du^k tanh(u)` for `k = 0..=kmax` at `u`, via the
/// polynomial recursion `P_{k+1}(t) = P_k'(t)(1 − t²)`.
fn tanh_derivatives(u: f64, kmax: usize) -> Vec<f64> {
    let t = u.tanh();
    let mut p = vec![0.0, 1.0];
    let mut out = Vec::with_capacity(kmax + 1);
    for _ in 0..=kmax {
        out.push(p.iter().rev().fold(0.0, |acc, c| acc * t + c));
        let mut dp = vec![0.0; p.len().saturating_sub(1).max(1)];
        for (i, c) in p.iter().enumerate().skip(1) {
            dp[i - 1] = c * i as f64;
        }
        let mut next = vec![0.0; dp.len() + 2];
        for (i, c) in dp.iter().enumerate() {
            next[i] += c;
            next[i + 2] -= c;
        }
        p = next;
    }
    out
}

/// Half-line integrals `(left, right)` for `φ(z) = tanh(z / scale)` by a
/// Taylor series near zero, adaptive Simpson in `ln λ` up to saturation, and
/// the exact limit `±1` beyond.
pub fn tanh_halves(alpha: f64, scale: f64, z: f64) -> (f64, f64) {
    let kmax = 24;
    let d: Vec<f64> = tanh_derivatives(z / scale, kmax).iter().enumerate().map(|(k, v)| v / scale.powi(k as i32)).collect();
    let eps = 0.1 * scale;
    let far = 80.0 * scale + z.abs();
    let half = |sign: f64| {
        let mut fact = 1.0;
        let mut series = 0.0;
        for k in 2..=kmax {
            fact *= k as f64;
            series += sign.powi(k as i32) * d[k] / fact * eps.powf(k as f64 - alpha) / (k as f64 - alpha);
        }
        let g = |u: f64| {
            let lam = u.exp();
            let inc = ((z + sign * lam) / scale).tanh() - d[0] - sign * d[1] * lam;
            inc * lam.powf(-alpha)
        };
        let mut mid = 0.0;
        let mut a = eps.ln();
        while a < far.ln() {
            let b = (a + 0.25).min(far.ln());
            mid += simpson(&g, a, b, 1e-15);
            a = b;
        }
        let tail = (sign - d[0]) * far.powf(-alpha) / alpha - sign * d[1] * far.powf(1.0 - alpha) / (alpha - 1.0);
        series + mid + tail
    };
    (half(-1.0), half(1.0))
}

/// `∫ g(z) dz` over `[a, ∞)` for `a ≥ 1` where `g` decays like a power:
/// adaptive Simpson in `ln z` up to `z = 10^6`, then the power-law remainder
/// supplied by the caller.
pub fn log_integral(g: &dyn Fn(f64) -> f64, a: f64, remainder: f64) -> f64 {
    let f = |u: f64| {
        let z = u.exp();
        g(z) * z
    };
    let end = 1e6f64.ln();
    let mut s = 0.0;
    let mut u = a.ln();
    while u < end {
        let v = (u + 0.5).min(end);
        s += simpson(&f, u, v, 1e-15);
        u = v;
    }
    s + remainder
}

/// `E|W|^δ` by quadrature of the density.
pub fn fractional_moment_oracle(law: &WkLaw, delta: f64) -> f64 {
    let p = law.params;
    let big = 1e6f64;
    // ∫_R^∞ z^δ (k z^{-1-α} + a β z^{-1-β}) dz
    let rem = |k: f64, a: f64| k / (p.alpha - delta) * big.powf(delta - p.alpha) + a * p.beta_tail / (p.beta_tail - delta) * big.powf(delta - p.beta_tail);
    let inner = simpson(&|z| z.abs().powf(delta) * law.density(z), -1.0, 0.0, 1e-15)
        + simpson(&|z| z.powf(delta) * law.density(z), 0.0, 1.0, 1e-15);
    let right = log_integral(&|z| z.powf(delta) * law.density(z), 1.0, rem(p.k2, p.a2));
    let left = log_integral(&|z| z.powf(delta) * law.density(-z), 1.0, rem(p.k1, p.a1));
    inner + right + left
}
