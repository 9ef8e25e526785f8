//! The uncertainty set Θ = 𝓛 × Γ × Σ and the heavy-tailed laws `W_k`.
//!
//! `W_k` has exact power tails `(k/α)|z|^{-α} + a|z|^{-β}` outside `[-1, 1]`
//! and a cubic density on `(-1, 1)`. The four cubic coefficients are fixed by
//! total mass one, mean zero and continuity of the density at `±1`; they are
//! affine in `(k1, k2)`, which keeps every expectation under `W_k` affine in `k`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of equispaced points on `[-1, 1]` used to certify a nonnegative
/// interior density.
pub const FEASIBILITY_GRID: usize = 1024;

/// One violated invariant of a raw parameter box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BoxViolation {
    MissingKey(String),
    UnknownKey(String),
    NonFinite { key: String, value: f64 },
    NonPositive { key: String, value: f64 },
    OrderViolation { lo: String, hi: String, lo_value: f64, hi_value: f64 },
    AlphaOutOfRange(f64),
}

impl fmt::Display for BoxViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MissingKey(k) => write!(f, "missing key `{k}`"),
            Self::UnknownKey(k) => write!(f, "unknown key `{k}`"),
            Self::NonFinite { key, value } => write!(f, "`{key}` = {value} is not finite"),
            Self::NonPositive { key, value } => write!(f, "`{key}` = {value} must be > 0"),
            Self::OrderViolation { lo, hi, lo_value, hi_value } => {
                write!(f, "order violation: `{lo}` = {lo_value} vs `{hi}` = {hi_value}")
            }
            Self::AlphaOutOfRange(a) => write!(f, "alpha = {a} outside (1, 2)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid uncertainty box: {}", join(.0))]
    InvalidBox(Vec<BoxViolation>),
    #[error("invalid stable parameters: {0}")]
    InvalidParams(String),
    #[error("infeasible interior completion for k = ({k1}, {k2}): {reason}")]
    InfeasibleCompletion { k1: f64, k2: f64, reason: String },
    #[error("delta = {delta} outside the admissible interval ({lo}, {hi})")]
    DeltaOutOfRange { delta: f64, lo: f64, hi: f64 },
}

fn join(v: &[BoxViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Rectangular uncertainty set for `(k1, k2, q, σ²)`.
///
/// The jump-intensity set is the closed square `[lambda_lo, lambda_hi]²`; the
/// solver only ever visits its four corners because every expectation is
/// affine in `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyBox {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub sigma2_lo: f64,
    pub sigma2_hi: f64,
    pub alpha: f64,
}

const BOX_KEYS: [&str; 7] =
    ["lambda_lo", "lambda_hi", "gamma_lo", "gamma_hi", "sigma2_lo", "sigma2_hi", "alpha"];

impl UncertaintyBox {
    /// Validate an already-typed box, collecting every violation.
    pub fn validated(self) -> Result<Self, ModelError> {
        let mut raw = BTreeMap::new();
        for (k, v) in BOX_KEYS.iter().zip(self.as_array()) {
            raw.insert((*k).to_string(), v);
        }
        validate_box(&raw)
    }

    fn as_array(&self) -> [f64; 7] {
        [
            self.lambda_lo,
            self.lambda_hi,
            self.gamma_lo,
            self.gamma_hi,
            self.sigma2_lo,
            self.sigma2_hi,
            self.alpha,
        ]
    }

    /// Corners of the intensity square in lexicographic order.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (lo, hi) = (self.lambda_lo, self.lambda_hi);
        [(lo, lo), (lo, hi), (hi, lo), (hi, hi)]
    }

    pub fn sigma_hi(&self) -> f64 {
        self.sigma2_hi.sqrt()
    }

    pub fn gamma_abs_max(&self) -> f64 {
        self.gamma_lo.abs().max(self.gamma_hi.abs())
    }

    pub fn contains_k(&self, k1: f64, k2: f64) -> bool {
        let r = self.lambda_lo..=self.lambda_hi;
        r.contains(&k1) && r.contains(&k2)
    }
}

/// Build an [`UncertaintyBox`] from a raw key/value map.
///
/// All violations are reported together rather than failing on the first.
pub fn validate_box(raw: &BTreeMap<String, f64>) -> Result<UncertaintyBox, ModelError> {
    let mut bad = Vec::new();
    for k in raw.keys() {
        if !BOX_KEYS.contains(&k.as_str()) {
            bad.push(BoxViolation::UnknownKey(k.clone()));
        }
    }
    let mut get = |key: &str| match raw.get(key) {
        None => {
            bad.push(BoxViolation::MissingKey(key.into()));
            None
        }
        Some(v) if !v.is_finite() => {
            bad.push(BoxViolation::NonFinite { key: key.into(), value: *v });
            None
        }
        Some(v) => Some(*v),
    };
    let vals: Vec<Option<f64>> = BOX_KEYS.iter().map(|k| get(k)).collect();
    let [l_lo, l_hi, g_lo, g_hi, s_lo, s_hi, alpha] = vals[..] else { unreachable!() };

    let mut positive = |key: &str, v: Option<f64>| {
        if let Some(v) = v {
            if v <= 0.0 {
                bad.push(BoxViolation::NonPositive { key: key.into(), value: v });
            }
        }
    };
    positive("lambda_lo", l_lo);
    positive("sigma2_lo", s_lo);

    let mut order = |lo: &str, hi: &str, a: Option<f64>, b: Option<f64>, strict: bool| {
        if let (Some(a), Some(b)) = (a, b) {
            if (strict && a >= b) || a > b {
                bad.push(BoxViolation::OrderViolation {
                    lo: lo.into(),
                    hi: hi.into(),
                    lo_value: a,
                    hi_value: b,
                });
            }
        }
    };
    order("lambda_lo", "lambda_hi", l_lo, l_hi, true);
    order("gamma_lo", "gamma_hi", g_lo, g_hi, false);
    order("sigma2_lo", "sigma2_hi", s_lo, s_hi, false);

    if let Some(a) = alpha {
        if !(a > 1.0 && a < 2.0) {
            bad.push(BoxViolation::AlphaOutOfRange(a));
        }
    }

    if !bad.is_empty() {
        return Err(ModelError::InvalidBox(bad));
    }
    Ok(UncertaintyBox {
        lambda_lo: l_lo.unwrap(),
        lambda_hi: l_hi.unwrap(),
        gamma_lo: g_lo.unwrap(),
        gamma_hi: g_hi.unwrap(),
        sigma2_lo: s_lo.unwrap(),
        sigma2_hi: s_hi.unwrap(),
        alpha: alpha.unwrap(),
    })
}

/// Shape parameters of one law `W_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StableParams {
    pub alpha: f64,
    pub k1: f64,
    pub k2: f64,
    pub a1: f64,
    pub a2: f64,
    pub beta_tail: f64,
}

impl StableParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut why = Vec::new();
        let all = [self.alpha, self.k1, self.k2, self.a1, self.a2, self.beta_tail];
        if all.iter().any(|v| !v.is_finite()) {
            why.push("non-finite parameter".to_string());
        }
        if !(self.alpha > 1.0 && self.alpha < 2.0) {
            why.push(format!("alpha = {} outside (1, 2)", self.alpha));
        }
        if self.k1 <= 0.0 || self.k2 <= 0.0 {
            why.push(format!("k = ({}, {}) must be positive", self.k1, self.k2));
        }
        if self.a1 <= 0.0 || self.a2 <= 0.0 {
            why.push(format!("a = ({}, {}) must be positive", self.a1, self.a2));
        }
        if self.beta_tail <= self.alpha || self.beta_tail > 2.0 {
            why.push(format!("beta = {} outside (alpha, 2]", self.beta_tail));
        }
        if why.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidParams(why.join("; ")))
        }
    }

    pub fn with_k(self, k1: f64, k2: f64) -> Self {
        Self { k1, k2, ..self }
    }

    /// `P(W ≤ -1)` from the left-tail formula alone.
    pub fn tail_mass_left(&self) -> f64 {
        self.k1 / self.alpha + self.a1
    }

    /// `P(W ≥ 1)` from the right-tail formula alone.
    pub fn tail_mass_right(&self) -> f64 {
        self.k2 / self.alpha + self.a2
    }

    /// Tail CDF for `z ≤ -1`: `(k1/α)|z|^{-α} + a1|z|^{-β}`.
    pub fn left_tail_cdf(&self, z: f64) -> f64 {
        let u = -z;
        self.k1 / self.alpha * u.powf(-self.alpha) + self.a1 * u.powf(-self.beta_tail)
    }

    /// Tail survival for `z ≥ 1`: `(k2/α)z^{-α} + a2 z^{-β}`.
    pub fn right_tail_survival(&self, z: f64) -> f64 {
        self.k2 / self.alpha * z.powf(-self.alpha) + self.a2 * z.powf(-self.beta_tail)
    }

    /// Density at `u ≥ 1` of the right tail.
    pub fn right_tail_density(&self, u: f64) -> f64 {
        tail_density(self.k2, self.a2, self.alpha, self.beta_tail, u)
    }

    /// Density at `-u` (`u ≥ 1`) of the left tail.
    pub fn left_tail_density(&self, u: f64) -> f64 {
        tail_density(self.k1, self.a1, self.alpha, self.beta_tail, u)
    }
}

fn tail_density(k: f64, a: f64, alpha: f64, beta: f64, u: f64) -> f64 {
    k * u.powf(-alpha - 1.0) + a * beta * u.powf(-beta - 1.0)
}

/// A fully specified law `W_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WkLaw {
    pub params: StableParams,
    /// Interior density `c0 + c1 z + c2 z² + c3 z³` on `(-1, 1)`.
    pub interior_coeffs: [f64; 4],
    pub tail_mass_left: f64,
    pub tail_mass_right: f64,
}

/// Cubic interior coefficients without any feasibility check.
pub fn interior_coefficients(p: &StableParams) -> [f64; 4] {
    let (al, be) = (p.alpha, p.beta_tail);
    let m0 = 1.0 - p.tail_mass_left() - p.tail_mass_right();
    let mu_r = p.k2 / (al - 1.0) + p.a2 * be / (be - 1.0);
    let mu_l = p.k1 / (al - 1.0) + p.a1 * be / (be - 1.0);
    let mean = -(mu_r - mu_l);
    let pl = p.k1 + p.a1 * be;
    let pr = p.k2 + p.a2 * be;
    let even = 0.5 * (pl + pr);
    let odd = 0.5 * (pr - pl);
    // ∫p = 2c0 + 2c2/3 = m0, p(1)+p(-1) = 2(c0 + c2)
    let c2 = 0.75 * (2.0 * even - m0);
    let c0 = even - c2;
    // ∫z p = 2c1/3 + 2c3/5 = mean, p(1)-p(-1) = 2(c1 + c3)
    let c3 = 3.75 * (2.0 * odd / 3.0 - mean);
    let c1 = odd - c3;
    [c0, c1, c2, c3]
}

/// Build and certify `W_k`.
pub fn build_wk_law(p: StableParams) -> Result<WkLaw, ModelError> {
    p.validate()?;
    let ml = p.tail_mass_left();
    let mr = p.tail_mass_right();
    let infeasible = |reason: String| ModelError::InfeasibleCompletion { k1: p.k1, k2: p.k2, reason };
    if ml + mr >= 1.0 {
        return Err(infeasible(format!("tail mass {} ≥ 1", ml + mr)));
    }
    let c = interior_coefficients(&p);
    let step = 2.0 / (FEASIBILITY_GRID - 1) as f64;
    for i in 0..FEASIBILITY_GRID {
        let z = -1.0 + step * i as f64;
        let d = cubic(&c, z);
        if d < 0.0 {
            return Err(infeasible(format!("interior density {d:.3e} < 0 at z = {z:.4}")));
        }
    }
    Ok(WkLaw { params: p, interior_coeffs: c, tail_mass_left: ml, tail_mass_right: mr })
}

/// Build all four corner laws of a box.
pub fn corner_laws(b: &UncertaintyBox, a1: f64, a2: f64, beta: f64) -> Result<[WkLaw; 4], ModelError> {
    let mk = |(k1, k2): (f64, f64)| {
        build_wk_law(StableParams { alpha: b.alpha, k1, k2, a1, a2, beta_tail: beta })
    };
    let c = b.corners();
    Ok([mk(c[0])?, mk(c[1])?, mk(c[2])?, mk(c[3])?])
}

fn cubic(c: &[f64; 4], z: f64) -> f64 {
    c[0] + z * (c[1] + z * (c[2] + z * c[3]))
}

fn cubic_antiderivative(c: &[f64; 4], z: f64) -> f64 {
    z * (c[0] + z * (c[1] / 2.0 + z * (c[2] / 3.0 + z * c[3] / 4.0)))
}

impl WkLaw {
    pub fn alpha(&self) -> f64 {
        self.params.alpha
    }

    pub fn interior_density(&self, z: f64) -> f64 {
        cubic(&self.interior_coeffs, z)
    }

    pub fn interior_mass(&self) -> f64 {
        1.0 - self.tail_mass_left - self.tail_mass_right
    }

    pub fn density(&self, z: f64) -> f64 {
        if z <= -1.0 {
            self.params.left_tail_density(-z)
        } else if z >= 1.0 {
            self.params.right_tail_density(z)
        } else {
            self.interior_density(z)
        }
    }

    pub fn cdf(&self, z: f64) -> f64 {
        if z <= -1.0 {
            self.params.left_tail_cdf(z)
        } else if z >= 1.0 {
            1.0 - self.params.right_tail_survival(z)
        } else {
            let c = &self.interior_coeffs;
            self.tail_mass_left + cubic_antiderivative(c, z) - cubic_antiderivative(c, -1.0)
        }
    }

    /// `P(W < -r) + P(W > r)` for `r ≥ 1`.
    pub fn two_sided_tail(&self, r: f64) -> f64 {
        self.params.left_tail_cdf(-r) + self.params.right_tail_survival(r)
    }

    /// Analytic mean (zero up to rounding by construction).
    pub fn mean(&self) -> f64 {
        let p = &self.params;
        let c = &self.interior_coeffs;
        let interior = 2.0 * c[1] / 3.0 + 2.0 * c[3] / 5.0;
        let mu_r = p.k2 / (p.alpha - 1.0) + p.a2 * p.beta_tail / (p.beta_tail - 1.0);
        let mu_l = p.k1 / (p.alpha - 1.0) + p.a1 * p.beta_tail / (p.beta_tail - 1.0);
        interior + mu_r - mu_l
    }

    /// `(E[W 1{|W| ≤ t}], E[W² 1{|W| ≤ t}])` for `t ≥ 1`, in closed form.
    pub fn truncated_moments(&self, t: f64) -> (f64, f64) {
        let p = &self.params;
        let c = &self.interior_coeffs;
        let (al, be) = (p.alpha, p.beta_tail);
        let t = t.max(1.0);
        // ∫_1^t r^m r^{-1-e} dr
        let pw = |m: f64, e: f64| if m == e { t.ln() } else { (t.powf(m - e) - 1.0) / (m - e) };
        let first = |k: f64, a: f64| k * pw(1.0, al) + a * be * pw(1.0, be);
        let second = |k: f64, a: f64| k * pw(2.0, al) + a * be * pw(2.0, be);
        let m1 = 2.0 * c[1] / 3.0 + 2.0 * c[3] / 5.0 + first(p.k2, p.a2) - first(p.k1, p.a1);
        let m2 = 2.0 * c[0] / 3.0 + 2.0 * c[2] / 5.0 + second(p.k2, p.a2) + second(p.k1, p.a1);
        (m1, m2)
    }

    /// Minimum of the interior density on the certification grid.
    pub fn interior_min(&self) -> f64 {
        let step = 2.0 / (FEASIBILITY_GRID - 1) as f64;
        (0..FEASIBILITY_GRID)
            .map(|i| self.interior_density(-1.0 + step * i as f64))
            .fold(f64::INFINITY, f64::min)
    }
}

/// `E|W|^δ` for `δ ∈ (0, α)`.
///
/// Computed from `∫₀^∞ P(|W| > r^{1/δ}) dr`. After the substitution `r = t^δ`
/// the piece `t ∈ [0, 1]` is a polynomial integral and the piece `t > 1` is a
/// sum of power laws, so both are evaluated in closed form and the truncation
/// remainder is zero.
pub fn wk_fractional_moment(law: &WkLaw, delta: f64) -> Result<f64, ModelError> {
    let p = &law.params;
    if !(delta > 0.0 && delta < p.alpha) {
        return Err(ModelError::DeltaOutOfRange { delta, lo: 0.0, hi: p.alpha });
    }
    let (al, be) = (p.alpha, p.beta_tail);
    // r ≥ 1: P(|W| > r^{1/δ}) = ((k1+k2)/α) r^{-α/δ} + (a1+a2) r^{-β/δ}
    let outer = (p.k1 + p.k2) / al / (al / delta - 1.0) + (p.a1 + p.a2) / (be / delta - 1.0);
    // t ∈ [0, 1]: P(|W| > t) = mL + mR + ∫_{t<|z|<1} p = 1 - ∫_{-t}^{t} p
    // ∫_{-t}^{t} p = 2 c0 t + 2 c2 t³/3, integrated against δ t^{δ-1}
    let c = &law.interior_coeffs;
    let inner = 1.0 - 2.0 * c[0] * delta / (delta + 1.0) - 2.0 * c[2] / 3.0 * delta / (delta + 3.0);
    Ok(inner + outer)
}
