//! Deterministic quadrature: Gauss–Hermite for the normal factor, a composite
//! rule for `W_k`, and the singular integral `∫ δ_λφ(z) F(dλ)` of the
//! α-stable Lévy measure.

use std::f64::consts::PI;

use serde::Serialize;

use crate::sum;
use crate::uncertainty::WkLaw;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuadratureError {
    #[error("quadrature order must be ≥ 1, got {0}")]
    InvalidOrder(usize),
    #[error("truncation radius R = {0} must be ≥ 1")]
    RadiusTooSmall(f64),
    #[error("Newton iteration for {rule} nodes did not converge at order {order}")]
    NoConvergence { rule: &'static str, order: usize },
    #[error("invalid split/cutoff ({split}, {cutoff}) for the generator integral")]
    InvalidSplit { split: f64, cutoff: f64 },
}

/// Nodes (strictly increasing), weights and the probability mass the rule
/// leaves out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub tail_remainder: f64,
    /// Mirror-symmetric nodes and weights: sums fold `i` with `n-1-i` first,
    /// so odd integrands integrate to exactly zero.
    pub symmetric: bool,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        sum::pairwise(&self.weights)
    }

    /// `Σ w_i g(x_i)` in a fixed order.
    pub fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        let n = self.len();
        if self.symmetric {
            let half = n / 2;
            let folded = sum::pairwise_map(half, |i| {
                let j = n - 1 - i;
                self.weights[i] * g(self.nodes[i]) + self.weights[j] * g(self.nodes[j])
            });
            if n % 2 == 1 {
                folded + self.weights[half] * g(self.nodes[half])
            } else {
                folded
            }
        } else {
            sum::pairwise_map(n, |i| self.weights[i] * g(self.nodes[i]))
        }
    }

    /// Same nodes, weights rescaled to sum to one. The discarded tail mass is
    /// kept in `tail_remainder` for error accounting.
    pub fn renormalized(&self) -> Self {
        let m = self.total_mass();
        Self {
            nodes: self.nodes.clone(),
            weights: self.weights.iter().map(|w| w / m).collect(),
            tail_remainder: self.tail_remainder,
            symmetric: self.symmetric,
        }
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Result<(Vec<f64>, Vec<f64>), QuadratureError> {
    if n == 0 {
        return Err(QuadratureError::InvalidOrder(n));
    }
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        let mut ok = false;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(QuadratureError::NoConvergence { rule: "Gauss-Legendre", order: n });
        }
        let wi = 2.0 / ((1.0 - z * z) * pp * pp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    Ok((x, w))
}

/// Gauss–Hermite rule for the standard normal law, weights summing to one.
pub fn gaussian_rule(order: usize) -> Result<QuadratureRule, QuadratureError> {
    if order == 0 {
        return Err(QuadratureError::InvalidOrder(order));
    }
    let n = order;
    let nf = n as f64;
    let pim4 = PI.powf(-0.25);
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * xs[0],
            3 => 1.91 * z - 0.91 * xs[1],
            _ => 2.0 * z - xs[i - 2],
        };
        let mut pp = 0.0;
        let mut ok = false;
        for _ in 0..200 {
            let (mut p1, mut p2) = (pim4, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-14 * z1.abs().max(1.0) {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(QuadratureError::NoConvergence { rule: "Gauss-Hermite", order: n });
        }
        // xs holds the physicists' nodes in decreasing order here
        xs[i] = z;
        xs[n - 1 - i] = -z;
        ws[i] = 2.0 / (pp * pp);
        ws[n - 1 - i] = ws[i];
    }
    if n % 2 == 1 {
        xs[n / 2] = 0.0;
    }
    xs.reverse();
    ws.reverse();
    let total = sum::pairwise(&ws);
    let nodes = xs.iter().map(|x| x * std::f64::consts::SQRT_2).collect();
    let weights = ws.iter().map(|w| w / total).collect();
    Ok(QuadratureRule { nodes, weights, tail_remainder: 0.0, symmetric: true })
}

/// Panel layout for the tail part of [`wk_rule_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WkRuleSpec {
    pub interior_order: usize,
    pub radius: f64,
    /// Gauss–Legendre points per tail panel.
    pub panel_order: usize,
    /// Maximal panel width in `ln λ`.
    pub max_du: f64,
    /// Maximal panel width in `λ` (resolves oscillating integrands).
    pub max_dlambda: f64,
}

impl WkRuleSpec {
    pub fn new(interior_order: usize, radius: f64) -> Self {
        Self { interior_order, radius, panel_order: 8, max_du: 0.5, max_dlambda: f64::INFINITY }
    }
}

/// Rule for `W_k`: Gauss–Legendre on `(-1, 1)` against the cubic density and
/// log-spaced Gauss–Legendre panels on `1 ≤ |z| ≤ R`.
pub fn wk_rule(law: &WkLaw, interior_order: usize, radius: f64) -> Result<QuadratureRule, QuadratureError> {
    wk_rule_with(law, &WkRuleSpec::new(interior_order, radius))
}

pub fn wk_rule_with(law: &WkLaw, spec: &WkRuleSpec) -> Result<QuadratureRule, QuadratureError> {
    if spec.interior_order == 0 {
        return Err(QuadratureError::InvalidOrder(spec.interior_order));
    }
    if spec.panel_order == 0 {
        return Err(QuadratureError::InvalidOrder(spec.panel_order));
    }
    if !(spec.radius >= 1.0) {
        return Err(QuadratureError::RadiusTooSmall(spec.radius));
    }
    // two halves so that kinks at the origin integrate exactly
    let half = spec.interior_order.div_ceil(2);
    let (hx, hw) = gauss_legendre(half)?;
    let gx: Vec<f64> = hx.iter().map(|t| 0.5 * t - 0.5).chain(hx.iter().map(|t| 0.5 * t + 0.5)).collect();
    let gw: Vec<f64> = hw.iter().chain(hw.iter()).map(|w| 0.5 * w).collect();
    let (px, pw) = gauss_legendre(spec.panel_order)?;
    let panels = panels_in_log(0.0, spec.radius.ln(), spec.max_du, spec.max_dlambda);

    // right-tail nodes u ↦ λ = e^u with weight f(λ) λ du
    let mut tail_nodes = Vec::new();
    let mut tail_right = Vec::new();
    let mut tail_left = Vec::new();
    for &(a, b) in &panels {
        let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
        for (t, w) in px.iter().zip(&pw) {
            let lam = (c + r * t).exp();
            tail_nodes.push(lam);
            tail_right.push(w * r * lam * law.params.right_tail_density(lam));
            tail_left.push(w * r * lam * law.params.left_tail_density(lam));
        }
    }

    let n = 2 * tail_nodes.len() + gx.len();
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in (0..tail_nodes.len()).rev() {
        nodes.push(-tail_nodes[i]);
        weights.push(tail_left[i]);
    }
    for (x, w) in gx.iter().zip(&gw) {
        nodes.push(*x);
        weights.push(w * law.interior_density(*x));
    }
    for i in 0..tail_nodes.len() {
        nodes.push(tail_nodes[i]);
        weights.push(tail_right[i]);
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        tail_remainder: law.two_sided_tail(spec.radius),
        symmetric: false,
    })
}

/// Split `[u0, u1]` into panels no wider than `max_du` in `u` and no wider
/// than `max_dl` in `λ = e^u`.
pub(crate) fn panels_in_log(u0: f64, u1: f64, max_du: f64, max_dl: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut a = u0;
    while a < u1 {
        let mut b = a + max_du;
        if max_dl.is_finite() {
            b = b.min((a.exp() + max_dl).ln());
        }
        let b = if b >= u1 - 1e-12 * u1.abs().max(1.0) { u1 } else { b };
        out.push((a, b));
        a = b;
    }
    out
}

/// A function of one variable with pointwise 0th–2nd derivatives and sup-norm
/// bounds `[‖φ‖, ‖φ'‖, ‖φ''‖, ‖φ'''‖]`.
pub trait Smooth1: Sync {
    fn value(&self, z: f64) -> f64;
    fn d1(&self, z: f64) -> f64;
    fn d2(&self, z: f64) -> f64;
    fn sup_norms(&self) -> [f64; 4];
}

/// Closure-backed [`Smooth1`].
pub struct FnSmooth1<F, D1, D2> {
    pub f: F,
    pub d1: D1,
    pub d2: D2,
    pub norms: [f64; 4],
}

impl<F, D1, D2> Smooth1 for FnSmooth1<F, D1, D2>
where
    F: Fn(f64) -> f64 + Sync,
    D1: Fn(f64) -> f64 + Sync,
    D2: Fn(f64) -> f64 + Sync,
{
    fn value(&self, z: f64) -> f64 {
        (self.f)(z)
    }
    fn d1(&self, z: f64) -> f64 {
        (self.d1)(z)
    }
    fn d2(&self, z: f64) -> f64 {
        (self.d2)(z)
    }
    fn sup_norms(&self) -> [f64; 4] {
        self.norms
    }
}

/// Truncation parameters of the generator integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StableIntegralSpec {
    /// Below this `|λ|` the increment is written as `∫₀^λ (λ − t) φ''(z ± t) dt`
    /// and integrated against the resulting kernel, which avoids cancellation.
    pub split: f64,
    /// Beyond this `|λ|` only the terms known in closed form are kept.
    pub cutoff: f64,
}

impl Default for StableIntegralSpec {
    fn default() -> Self {
        Self { split: 0.5, cutoff: 1e5 }
    }
}

/// Value of `∫ δ_λφ(z) ν_±(dλ)` for unit intensity on each half-line, plus a
/// bound on the discarded parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StableHalves {
    pub left: f64,
    pub right: f64,
    pub left_error: f64,
    pub right_error: f64,
}

impl StableHalves {
    pub fn combine(&self, k1: f64, k2: f64) -> GeneratorIntegral {
        GeneratorIntegral {
            value: k1 * self.left + k2 * self.right,
            error_estimate: k1 * self.left_error + k2 * self.right_error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorIntegral {
    pub value: f64,
    pub error_estimate: f64,
}

/// `∫ δ_λφ(z) F_k(dλ)` with `δ_λφ(z) = φ(z+λ) − φ(z) − φ'(z)λ` and
/// `F_k(dλ) = k1|λ|^{-α-1}dλ` on `λ < 0`, `k2 λ^{-α-1}dλ` on `λ > 0`.
pub fn stable_generator_integral(
    k: (f64, f64),
    alpha: f64,
    phi: &dyn Smooth1,
    z: f64,
    spec: &StableIntegralSpec,
) -> Result<GeneratorIntegral, QuadratureError> {
    Ok(stable_halves(alpha, phi, z, spec)?.combine(k.0, k.1))
}

/// The two half-line integrals with unit intensity; the integral for any `k`
/// is `k1·left + k2·right`.
pub fn stable_halves(
    alpha: f64,
    phi: &dyn Smooth1,
    z: f64,
    spec: &StableIntegralSpec,
) -> Result<StableHalves, QuadratureError> {
    let StableIntegralSpec { split, cutoff } = *spec;
    if !(split > 0.0 && cutoff > split && cutoff.is_finite()) {
        return Err(QuadratureError::InvalidSplit { split, cutoff });
    }
    let [n0, n1, n2, n3] = phi.sup_norms();
    if n1 == 0.0 {
        // constant φ: δ_λφ ≡ 0
        return Ok(StableHalves { left: 0.0, right: 0.0, left_error: 0.0, right_error: 0.0 });
    }
    let f0 = phi.value(z);
    let f1 = phi.d1(z);
    let f2 = phi.d2(z);
    let omega = if n2 > 0.0 { n2 / n1 } else { 1.0 };
    let (x8, w8) = gauss_legendre(8)?;
    let (x6, w6) = gauss_legendre(6)?;
    let gl = |g: &dyn Fn(f64) -> f64, panels: &[(f64, f64)]| {
        let panel = |xs: &[f64], ws: &[f64], a: f64, b: f64| {
            let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
            r * sum::pairwise_map(xs.len(), |i| ws[i] * g(c + r * xs[i]))
        };
        let hi = sum::pairwise_map(panels.len(), |p| panel(&x8, &w8, panels[p].0, panels[p].1));
        let lo = sum::pairwise_map(panels.len(), |p| panel(&x6, &w6, panels[p].0, panels[p].1));
        (hi, (hi - lo).abs())
    };

    // |λ| ≤ split: ∫₀^s δ_λφ λ^{-1-α} dλ = ∫₀^s φ''(z ± t) K(t) dt with
    // K(t) = ∫_t^s (λ − t) λ^{-1-α} dλ = a + b t + c t^{1-α}
    let ka = split.powf(1.0 - alpha) / (1.0 - alpha);
    let kb = split.powf(-alpha) / alpha;
    let kc = 1.0 / (alpha * (alpha - 1.0));
    let kernel = |t: f64| ka + kb * t + kc * t.powf(1.0 - alpha);
    let floor = split * 1e-10;
    let k_mass = ka * floor + 0.5 * kb * floor * floor + kc * floor.powf(2.0 - alpha) / (2.0 - alpha);
    let near_panels = panels_in_log(floor.ln(), split.ln(), 0.25, 2.0 / omega);
    let near = |sign: f64| {
        let g = |u: f64| {
            let t = u.exp();
            phi.d2(z + sign * t) * kernel(t) * t
        };
        let (v, e) = gl(&g, &near_panels);
        (v + f2 * k_mass, e + n3 * floor * k_mass)
    };
    let (near_r, near_err_r) = near(1.0);
    let (near_l, near_err_l) = near(-1.0);

    // split < |λ| < cutoff: composite Gauss–Legendre in u = ln λ
    let panels = panels_in_log(split.ln(), cutoff.ln(), 0.25, 2.0 / omega);
    let side = |sign: f64| {
        let g = |u: f64| {
            let lam = u.exp();
            (phi.value(z + sign * lam) - f0 - sign * f1 * lam) * lam.powf(-alpha)
        };
        gl(&g, &panels)
    };
    let (mid_r, err_r) = side(1.0);
    let (mid_l, err_l) = side(-1.0);

    // |λ| ≥ cutoff: the −φ(z) and −φ'(z)λ parts are exact; φ(z ± λ) is
    // replaced by its Hann-weighted mean over L/2 ≤ λ ≤ L, which tracks a
    // limit at infinity and averages out oscillation
    let lpow = cutoff.powf(-alpha) / alpha;
    let tail_const = -f0 * lpow;
    let tail_lin = f1 * cutoff.powf(1.0 - alpha) / (alpha - 1.0);
    let tail_err = (2.0 * n0 * lpow).min(n1 * cutoff.powf(1.0 - alpha) / (alpha * (alpha - 1.0)));
    let m = ((0.5 * cutoff * omega / 2.0).ceil() as usize).max(1);
    let mean = |sign: f64| {
        let r = 0.25 * cutoff / m as f64;
        let total = sum::pairwise_map(m, |p| {
            let c = 0.5 * cutoff + (2 * p + 1) as f64 * r;
            r * sum::pairwise_map(x8.len(), |i| {
                let lam = c + r * x8[i];
                let w = (std::f64::consts::PI * (2.0 * lam / cutoff - 1.0)).sin().powi(2);
                w8[i] * w * phi.value(z + sign * lam)
            })
        });
        // ∫ sin²(π(2λ/L − 1)) dλ over [L/2, L] is L/4
        total / (0.25 * cutoff)
    };
    let far_r = mean(1.0) * lpow;
    let far_l = mean(-1.0) * lpow;

    Ok(StableHalves {
        right: near_r + mid_r + tail_const + far_r - tail_lin,
        left: near_l + mid_l + tail_const + far_l + tail_lin,
        right_error: near_err_r + err_r + tail_err,
        left_error: near_err_l + err_l + tail_err,
    })
}
