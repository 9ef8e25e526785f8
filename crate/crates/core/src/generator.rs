//! The nonlinear generator
//! `G(p, A, φ) = sup_Θ { ∫ δ_λφ(z) F_k(dλ) + p q + ½ A σ² }`
//! and the one-step consistency residual.

use serde::{Deserialize, Serialize};

use crate::quadrature::{
    gaussian_rule, stable_halves, wk_rule_with, QuadratureError, Smooth1, StableIntegralSpec, WkRuleSpec,
};
use crate::step::TailShape;
use crate::uncertainty::{corner_laws, ModelError, UncertaintyBox};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeneratorError {
    #[error("beta_tail = {beta} must exceed alpha = {alpha}")]
    BetaOutOfRange { alpha: f64, beta: f64 },
    #[error("invalid generator input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Arguments of `G`: `p` multiplies `D_y u`, `A` multiplies `D_x² u`, and
/// `phi` is the nonlocal argument `λ ↦ u(z + λ)` evaluated around `z`.
#[derive(Clone, Copy)]
pub struct GeneratorInput<'a> {
    pub p: f64,
    pub a: f64,
    pub phi: &'a dyn Smooth1,
    pub z: f64,
}

impl GeneratorInput<'_> {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        let n = self.phi.sup_norms();
        if n.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(GeneratorError::InvalidInput(format!("derivative bounds {n:?}")));
        }
        if !(self.p.is_finite() && self.a.is_finite() && self.z.is_finite()) {
            return Err(GeneratorError::InvalidInput("non-finite p, A or z".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorValue {
    pub value: f64,
    pub error_estimate: f64,
    /// Index of the maximising `(k1, k2)` corner.
    pub corner: usize,
    pub jump_part: f64,
    pub drift_part: f64,
    pub diffusion_part: f64,
}

/// `G(p, A, φ)` over the product box: the three suprema separate.
pub fn eval_g(
    inp: &GeneratorInput<'_>,
    b: &UncertaintyBox,
    spec: &StableIntegralSpec,
) -> Result<GeneratorValue, GeneratorError> {
    inp.validate()?;
    let halves = stable_halves(b.alpha, inp.phi, inp.z, spec)?;
    let mut corner = 0;
    let mut best = halves.combine(b.corners()[0].0, b.corners()[0].1);
    for (c, &(k1, k2)) in b.corners().iter().enumerate().skip(1) {
        let v = halves.combine(k1, k2);
        if v.value > best.value {
            best = v;
            corner = c;
        }
    }
    let drift = (b.gamma_hi * inp.p).max(b.gamma_lo * inp.p);
    let diffusion = 0.5 * (b.sigma2_hi * inp.a).max(b.sigma2_lo * inp.a);
    Ok(GeneratorValue {
        value: best.value + drift + diffusion,
        error_estimate: best.error_estimate,
        corner,
        jump_part: best.value,
        drift_part: drift,
        diffusion_part: diffusion,
    })
}

/// `q₀` of the heavy-tail perturbation: `min{(β−α)/α, (2−α)/α}`, or
/// `(2−α)/α − ε₀` when `β = 2`.
pub fn q0_from_beta(alpha: f64, beta: f64, eps0: f64) -> Result<f64, GeneratorError> {
    if !(beta > alpha) {
        return Err(GeneratorError::BetaOutOfRange { alpha, beta });
    }
    if beta == 2.0 {
        Ok((2.0 - alpha) / alpha - eps0)
    } else {
        Ok(((beta - alpha) / alpha).min((2.0 - alpha) / alpha))
    }
}

/// `l̂_φ(s) = C[(‖Dφ‖ + ‖D²φ‖) s^{q₀} + ‖D²φ‖ s^{(2−α)/α}]`.
pub fn lhat_bound(norms: (f64, f64), s: f64, q0: f64, c_alpha_beta: f64, alpha: f64) -> f64 {
    let (d1, d2) = norms;
    c_alpha_beta * ((d1 + d2) * s.powf(q0) + d2 * s.powf((2.0 - alpha) / alpha))
}

/// Quadrature settings of the consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyQuadrature {
    pub gauss_order: usize,
    pub wk_interior_order: usize,
    pub wk_radius: f64,
    pub integral: StableIntegralSpec,
}

impl Default for ConsistencyQuadrature {
    fn default() -> Self {
        Self { gauss_order: 16, wk_interior_order: 64, wk_radius: 1e6, integral: StableIntegralSpec::default() }
    }
}

/// `(1/s)·|Ê[φ(z + s^{1/α}Z) − φ(z) + s p Y + ½ A s X²] − s G(p, A, φ)|`.
///
/// Both terms are suprema over the product box, so the expectation is
/// assembled as `sup_k E_k[φ(z + s^{1/α}W) − φ(z)] + s·sup_q pq + ½ s·sup_σ A σ² E[N²]`
/// with the jump expectation computed per corner (it is affine in `k`).
#[allow(clippy::too_many_arguments)]
pub fn consistency_residual(
    phi: &dyn Smooth1,
    z: f64,
    s: f64,
    p: f64,
    a: f64,
    b: &UncertaintyBox,
    tails: &TailShape,
    quad: &ConsistencyQuadrature,
) -> Result<f64, GeneratorError> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(GeneratorError::InvalidInput(format!("s = {s} outside (0, 1]")));
    }
    let g = eval_g(&GeneratorInput { p, a, phi, z }, b, &quad.integral)?;
    let expectation = jump_increment_sup(phi, z, s, b, tails, quad)?;
    let gauss = gaussian_rule(quad.gauss_order)?;
    let second = gauss.expect(|x| x * x);
    let drift = s * (b.gamma_hi * p).max(b.gamma_lo * p);
    let diffusion = 0.5 * s * (b.sigma2_hi * a * second).max(b.sigma2_lo * a * second);
    Ok(((expectation + drift + diffusion) - s * g.value).abs() / s)
}

/// `sup_k E_k[φ(z + s^{1/α}W) − φ(z)]`.
pub fn jump_increment_sup(
    phi: &dyn Smooth1,
    z: f64,
    s: f64,
    b: &UncertaintyBox,
    tails: &TailShape,
    quad: &ConsistencyQuadrature,
) -> Result<f64, GeneratorError> {
    let laws = corner_laws(b, tails.a1, tails.a2, tails.beta_tail)?;
    let c = s.powf(1.0 / b.alpha);
    let [_, n1, n2, _] = phi.sup_norms();
    let omega = if n1 > 0.0 && n2 > 0.0 { n2 / n1 } else { 1.0 };
    let f0 = phi.value(z);
    let mut best = f64::NEG_INFINITY;
    for law in &laws {
        let spec = WkRuleSpec {
            interior_order: quad.wk_interior_order,
            radius: quad.wk_radius,
            panel_order: 8,
            max_du: 0.25,
            max_dlambda: 2.0 / (c * omega),
        };
        let rule = wk_rule_with(law, &spec)?;
        // the increment beyond the radius is dropped: it is bounded by
        // 2‖φ‖·tail_remainder either way
        let v = rule.expect(|w| phi.value(z + c * w) - f0);
        if v > best {
            best = v;
        }
    }
    Ok(best)
}

/// Largest ratio `residual / l̂_φ(s)` with unit constant.
pub fn fit_c_alpha_beta(s: &[f64], residuals: &[f64], norms: (f64, f64), q0: f64, alpha: f64) -> f64 {
    s.iter()
        .zip(residuals)
        .map(|(&s, &r)| {
            let l = lhat_bound(norms, s, q0, 1.0, alpha);
            if l > 0.0 {
                r / l
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}
