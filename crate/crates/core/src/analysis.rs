//! Moment constants, the theoretical exponent Γ, the error budgets `E₁`/`E₂`,
//! the mollifier constant `K_ζ`, and empirical order fits.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::catalog::TestFunction;
use crate::quadrature::gauss_legendre;
use crate::scheme::{limit_functional, Axis, Grid, SchemeError, SolveOptions};
use crate::step::{ParamSearchConfig, StepContext, StepQuadrature, TailShape};
use crate::sum;
use crate::uncertainty::{corner_laws, wk_fractional_moment, ModelError, UncertaintyBox};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("delta = {delta} outside ({lo}, {hi})")]
    DeltaOutOfRange { delta: f64, lo: f64, hi: f64 },
    #[error("order fit needs at least 4 (n, value) pairs, got {0}")]
    TooFewPairs(usize),
    #[error("n values must be strictly increasing")]
    NotIncreasing,
    #[error("degenerate fit: only {usable} pairs above the noise floor")]
    DegenerateFit { usable: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Core(Box<crate::Error>),
}

/// `E|N|³` for a standard normal.
pub fn abs_normal_third_moment() -> f64 {
    2.0 * (2.0 / std::f64::consts::PI).sqrt()
}

/// Admissible window `(max(3α/4, 1), α)` for δ.
pub fn delta_window(alpha: f64) -> (f64, f64) {
    ((0.75 * alpha).max(1.0), alpha)
}

pub fn default_delta(alpha: f64) -> f64 {
    let (lo, hi) = delta_window(alpha);
    0.5 * (lo + hi)
}

fn check_delta(alpha: f64, delta: f64) -> Result<(), AnalysisError> {
    let (lo, hi) = delta_window(alpha);
    if delta > lo && delta < hi {
        Ok(())
    } else {
        Err(AnalysisError::DeltaOutOfRange { delta, lo, hi })
    }
}

/// `Γ(α, δ, q₀) = min{(4δ − 3α)/(2α(2δ + 3)), (2 − α)/(2α), q₀/2}`.
pub fn rate_exponent(alpha: f64, delta: f64, q0: f64) -> Result<f64, AnalysisError> {
    check_delta(alpha, delta)?;
    if !(q0 > 0.0) {
        return Err(AnalysisError::Invalid(format!("q0 = {q0} must be positive")));
    }
    let a = (4.0 * delta - 3.0 * alpha) / (2.0 * alpha * (2.0 * delta + 3.0));
    let b = (2.0 - alpha) / (2.0 * alpha);
    Ok(a.min(b).min(q0 / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub m_x2: f64,
    pub m_x3: f64,
    pub m_y1: f64,
    pub m_y2: f64,
    pub m_zdelta: f64,
    /// `sup_k E|W_k|`
    pub m_z1: f64,
    pub delta: f64,
    /// `max_{n ≤ N_max} Ê[n^{-1/α}|S_n³|]`: a finite-`n` proxy for the
    /// supremum over all `n`, hence possibly too small.
    pub m_z_proxy: f64,
    pub n_max: usize,
    pub c_phi: f64,
    pub c0: f64,
    pub m0: f64,
}

/// Settings of the `M_Z` proxy solve: a 1-D lattice in `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxySettings {
    pub z_half_width: f64,
    pub z_points: usize,
}

impl Default for ProxySettings {
    fn default() -> Self {
        Self { z_half_width: 400.0, z_points: 1601 }
    }
}

/// All moment constants for `φ` with Lipschitz constant `c_phi`.
pub fn compute_moments(
    b: &UncertaintyBox,
    tails: &TailShape,
    quad: &StepQuadrature,
    delta: f64,
    n_max: usize,
    c_phi: f64,
    proxy: &ProxySettings,
) -> Result<MomentSet, AnalysisError> {
    check_delta(b.alpha, delta)?;
    if n_max == 0 {
        return Err(AnalysisError::Invalid("N_max must be ≥ 1".into()));
    }
    let laws = corner_laws(b, tails.a1, tails.a2, tails.beta_tail)?;
    let mut m_zdelta = 0.0f64;
    let mut m_z1 = 0.0f64;
    for law in &laws {
        m_zdelta = m_zdelta.max(wk_fractional_moment(law, delta)?);
        m_z1 = m_z1.max(wk_fractional_moment(law, 1.0)?);
    }
    let s = b.sigma_hi();
    let m_x2 = b.sigma2_hi;
    let m_x3 = s * s * s * abs_normal_third_moment();
    let m_y1 = b.gamma_abs_max();
    let m_y2 = m_y1 * m_y1;
    let m_z_proxy = mz_proxy(b, tails, quad, n_max, proxy)?;
    let c0 = (c_phi * (m_x2.sqrt() + m_y1 + m_z_proxy)).max(c_phi);
    let m0 = m_x2
        + m_x3
        + m_y1
        + m_y2
        + m_x3.cbrt() * m_zdelta.powf(2.0 / 3.0)
        + m_y2.sqrt() * m_z1.sqrt()
        + m_z1;
    Ok(MomentSet { m_x2, m_x3, m_y1, m_y2, m_zdelta, m_z1, delta, m_z_proxy, n_max, c_phi, c0, m0 })
}

/// `max_{1 ≤ n ≤ N_max} Ê[n^{-1/α}|S_n|]`, computed as `u_{1/n}(1, 0, 0, 0)`
/// for `φ = |z|` on a lattice that is degenerate in `x` and `y`.
pub fn mz_proxy(
    b: &UncertaintyBox,
    tails: &TailShape,
    quad: &StepQuadrature,
    n_max: usize,
    proxy: &ProxySettings,
) -> Result<f64, AnalysisError> {
    // |z| ignores x and y, so drift and volatility are frozen
    let reduced = UncertaintyBox {
        gamma_lo: 0.0,
        gamma_hi: 0.0,
        sigma2_lo: b.sigma2_lo,
        sigma2_hi: b.sigma2_lo,
        ..*b
    };
    let ctx = StepContext::new(1.0, reduced, *tails, *quad, ParamSearchConfig::default())
        .map_err(|e| AnalysisError::Core(Box::new(e)))?;
    let zr = proxy.z_half_width;
    let grid = Grid::new(Axis::new(-1.0, 1.0, 2), Axis::new(-1.0, 1.0, 2), Axis::new(-zr, zr, proxy.z_points))?;
    let phi = TestFunction::new("|z|", zr, 1.0, |_, _, z: f64| z.abs());
    let opts = SolveOptions { boundary_tolerance: f64::INFINITY, time_constant: None };
    let mut best = 0.0f64;
    for n in 1..=n_max {
        best = best.max(limit_functional(&phi, n, &grid, &ctx, &opts)?);
    }
    Ok(best)
}

/// Inputs of the `l̂` part of the budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LhatTerms {
    pub c_alpha_beta: f64,
    pub q0: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorBudget {
    pub eps: f64,
    pub h: f64,
    pub k_zeta: f64,
    pub e1: f64,
    pub e2: f64,
    pub gamma: f64,
    pub c0: f64,
    pub m0: f64,
    /// `C₀h^{1/2} + 4C₀ε + E₂(ε, h)`, the bound on `u_h − u`.
    pub upper_total: f64,
    /// `2C₀h^{1/2} + 4C₀ε + E₁(ε, h)`, the bound on `u − u_h`.
    pub lower_total: f64,
}

/// `E₁`, `E₂` and the two one-sided totals at one `(ε, h)`.
pub fn error_budget(eps: f64, h: f64, m: &MomentSet, k_zeta: f64, l: &LhatTerms) -> Result<ErrorBudget, AnalysisError> {
    if !(eps > 0.0 && eps < 1.0 && h > 0.0 && h < 1.0) {
        return Err(AnalysisError::Invalid(format!("eps = {eps}, h = {h} must lie in (0, 1)")));
    }
    let (al, d) = (l.alpha, m.delta);
    let gamma = rate_exponent(al, d, l.q0)?;
    let p_mid = (4.0 * d - 3.0 * al) / (6.0 * al);
    let p_jump = 1.0 / (2.0 * al);
    let p_l = (2.0 - al) / al;
    let pre = 4.0 * m.c0 * k_zeta * m.m0;
    let lhat = 4.0 * l.c_alpha_beta * m.c0 * k_zeta;

    let e2 = pre
        * (2.0 * eps.powi(-3) * h
            + 5.0 * eps.powi(-2) * h.sqrt()
            + eps.powf(-2.0 * d / 3.0) * h.powf(p_mid)
            + eps.powf(-0.5) * h.powf(p_jump))
        + lhat * (h.powf(l.q0) + h.powf(p_l)) / eps;
    let e1 = pre
        * (eps + h.sqrt())
        * (2.0 * eps.powi(-4) * h
            + 5.0 * eps.powi(-3) * h.sqrt()
            + eps.powf(-(2.0 * d + 3.0) / 3.0) * h.powf(p_mid)
            + eps.powf(-1.5) * h.powf(p_jump))
        + lhat * (eps + h.sqrt()) * (h.powf(l.q0) + h.powf(p_l)) / (eps * eps);
    Ok(ErrorBudget {
        eps,
        h,
        k_zeta,
        e1,
        e2,
        gamma,
        c0: m.c0,
        m0: m.m0,
        upper_total: m.c0 * h.sqrt() + 4.0 * m.c0 * eps + e2,
        lower_total: 2.0 * m.c0 * h.sqrt() + 4.0 * m.c0 * eps + e1,
    })
}

/// Exponents `g` of the search grid `ε = h^g`: 64 steps over `(0, 1/2]`.
pub fn eps_exponent_grid() -> Vec<f64> {
    (1..=64).map(|i| i as f64 / 128.0).collect()
}

/// `min_ε` of the upper total over the log grid `ε = h^g`.
pub fn minimized_upper(h: f64, m: &MomentSet, k_zeta: f64, l: &LhatTerms) -> Result<ErrorBudget, AnalysisError> {
    let mut best: Option<ErrorBudget> = None;
    for g in eps_exponent_grid() {
        let b = error_budget(h.powf(g), h, m, k_zeta, l)?;
        if best.map_or(true, |x| b.upper_total < x.upper_total) {
            best = Some(b);
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// `ψ(x) = exp(−1/(1 − x²))` on `(−1, 1)` and its first three derivatives.
fn bump_derivatives(x: f64) -> [f64; 4] {
    if x.abs() >= 1.0 {
        return [0.0; 4];
    }
    let w = 1.0 - x * x;
    let psi = (-1.0 / w).exp();
    let g1 = -2.0 * x / (w * w);
    let g2 = -2.0 * (1.0 + 3.0 * x * x) / (w * w * w);
    let g3 = -24.0 * x * (1.0 + x * x) / (w * w * w * w);
    [psi, g1 * psi, (g2 + g1 * g1) * psi, (g3 + 3.0 * g1 * g2 + g1 * g1 * g1) * psi]
}

/// `∫|ψ^{(i)}|` for `i = 0..=3`; `i ≥ 1` is the total variation of
/// `ψ^{(i−1)}` between consecutive zeros of `ψ^{(i)}`.
pub fn bump_abs_integrals() -> [f64; 4] {
    let (gx, gw) = gauss_legendre(20).expect("fixed order");
    let panels = 400;
    let mass = sum::pairwise_map(panels, |p| {
        let a = -1.0 + 2.0 * p as f64 / panels as f64;
        let r = 1.0 / panels as f64;
        r * sum::pairwise_map(gx.len(), |i| gw[i] * bump_derivatives(a + r + r * gx[i])[0])
    });
    let mut out = [mass, 0.0, 0.0, 0.0];
    for i in 1..4 {
        let mut pts = vec![-1.0];
        let m = 20_000;
        let f = |x: f64| bump_derivatives(x)[i];
        let mut last = (-1.0 + 1.0 / m as f64, f(-1.0 + 1.0 / m as f64));
        for j in 2..m * 2 {
            let x = -1.0 + j as f64 / m as f64;
            let cur = f(x);
            if cur == 0.0 {
                continue;
            }
            if (last.1 < 0.0) != (cur < 0.0) {
                let (mut lo, mut hi) = (last.0, x);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    let fm = f(mid);
                    if fm == 0.0 {
                        lo = mid;
                        hi = mid;
                        break;
                    }
                    if (fm < 0.0) == (last.1 < 0.0) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                pts.push(0.5 * (lo + hi));
            }
            last = (x, cur);
        }
        pts.push(1.0);
        out[i] = pts.windows(2).map(|w| (bump_derivatives(w[1])[i - 1] - bump_derivatives(w[0])[i - 1]).abs()).sum();
    }
    out
}

/// Mixed derivative orders `(i, j)` of `∂_t^i D^j ζ` that enter the budgets.
pub const K_ZETA_ORDERS: [(u32, usize); 7] = [(0, 1), (0, 2), (0, 3), (1, 0), (1, 1), (1, 2), (2, 0)];

/// `K_ζ` for `ζ(τ, e) ∝ ψ(2τ + 1) ψ(e)` on `[−1, 0] × (−1, 1)`, unit mass:
/// `∫∫|∂_τ^i ∂_e^j ζ| = 2^i J_i J_j / J_0²` with `J_i = ∫|ψ^{(i)}|`.
pub fn bump_k_zeta() -> f64 {
    let j = bump_abs_integrals();
    K_ZETA_ORDERS
        .iter()
        .map(|&(i, k)| 2f64.powi(i as i32) * j[i as usize] * j[k] / (j[0] * j[0]))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub n_values: Vec<usize>,
    pub functional_values: Vec<f64>,
    pub reference: f64,
    pub fitted_order: f64,
    pub theory_order: f64,
    pub pass: bool,
    /// Every residual sits below the noise floor: the scheme is exact here.
    pub exact: bool,
    pub used_in_fit: Vec<bool>,
}

/// Least-squares slope of `log|value − reference|` against `log n`, negated.
pub fn fit_order(
    pairs: &[(usize, f64)],
    reference: f64,
    noise_floor: f64,
    theory_order: f64,
) -> Result<RateReport, AnalysisError> {
    if pairs.len() < 4 {
        return Err(AnalysisError::TooFewPairs(pairs.len()));
    }
    if pairs.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(AnalysisError::NotIncreasing);
    }
    if !reference.is_finite() {
        return Err(AnalysisError::Invalid("reference must be finite".into()));
    }
    let used: Vec<bool> = pairs.iter().map(|&(_, v)| (v - reference).abs() >= 10.0 * noise_floor && v != reference).collect();
    let pts: Vec<(f64, f64)> = pairs
        .iter()
        .zip(&used)
        .filter(|(_, u)| **u)
        .map(|(&(n, v), _)| ((n as f64).ln(), (v - reference).abs().ln()))
        .collect();
    if pts.len() < 3 {
        return Err(AnalysisError::DegenerateFit { usable: pts.len() });
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let fitted = -sxy / sxx;
    Ok(RateReport {
        n_values: pairs.iter().map(|p| p.0).collect(),
        functional_values: pairs.iter().map(|p| p.1).collect(),
        reference,
        fitted_order: fitted,
        theory_order,
        pass: fitted.is_finite() && fitted >= theory_order - 0.02,
        exact: false,
        used_in_fit: used,
    })
}

impl RateReport {
    /// Report for a configuration where every value must equal the reference.
    pub fn exact_case(pairs: &[(usize, f64)], reference: f64, tolerance: f64) -> Self {
        let ok = pairs.iter().all(|&(_, v)| (v - reference).abs() <= tolerance);
        Self {
            n_values: pairs.iter().map(|p| p.0).collect(),
            functional_values: pairs.iter().map(|p| p.1).collect(),
            reference,
            fitted_order: f64::INFINITY,
            theory_order: f64::INFINITY,
            pass: ok,
            exact: true,
            used_in_fit: vec![false; pairs.len()],
        }
    }

    /// CSV with columns `n,value,abs_residual,log_residual`.
    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "n,value,abs_residual,log_residual")?;
        for (n, v) in self.n_values.iter().zip(&self.functional_values) {
            let r = (v - self.reference).abs();
            writeln!(w, "{n},{v},{r},{}", r.ln())?;
        }
        Ok(())
    }

    /// JSON summary with the caller's configuration echoed back.
    pub fn summary_json(&self, config: &serde_json::Value) -> serde_json::Value {
        let num = |x: f64| if x.is_finite() { serde_json::json!(x) } else { serde_json::Value::Null };
        serde_json::json!({
            "fitted_order": num(self.fitted_order),
            "theory_order": num(self.theory_order),
            "pass": self.pass,
            "exact": self.exact,
            "reference": self.reference,
            "n_values": self.n_values,
            "functional_values": self.functional_values,
            "config": config,
        })
    }
}
