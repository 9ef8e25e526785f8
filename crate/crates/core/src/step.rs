//! One step of the sublinear expectation:
//! `Ê[v(x + √h X, y + hY, z + h^{1/α}Z)] = sup_{k,q,σ²} E[v(x + √(hσ²) N, y + hq, z + h^{1/α} W_k)]`.

use serde::{Deserialize, Serialize};

use crate::quadrature::{gaussian_rule, wk_rule, QuadratureRule};
use crate::sum;
use crate::uncertainty::{corner_laws, ModelError, UncertaintyBox, WkLaw};
use crate::Error;

/// Coarse grid plus golden-section refinement over `(q, σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamSearchConfig {
    /// Points per nondegenerate axis of the coarse grid.
    pub coarse_grid: usize,
    /// Target bracket width of the golden-section sweeps.
    pub refine_tol: f64,
    /// Alternating sweeps over the two axes.
    pub sweeps: usize,
    pub tie_break: TieBreak,
    /// Largest crossing grid the lattice step enumerates exactly.
    pub exact_limit: usize,
}

/// Which maximiser wins among equal values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    SmallestParameter,
    LargestParameter,
}

impl TieBreak {
    /// Whether a candidate met later in increasing parameter order replaces
    /// the incumbent.
    pub fn replaces(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            TieBreak::SmallestParameter => candidate > incumbent,
            TieBreak::LargestParameter => candidate >= incumbent,
        }
    }
}

impl Default for ParamSearchConfig {
    fn default() -> Self {
        Self { coarse_grid: 9, refine_tol: 1e-8, sweeps: 2, tie_break: TieBreak::SmallestParameter, exact_limit: 256 }
    }
}

/// Quadrature orders of a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepQuadrature {
    pub gauss_order: usize,
    pub wk_interior_order: usize,
    pub wk_radius: f64,
}

impl Default for StepQuadrature {
    fn default() -> Self {
        Self { gauss_order: 16, wk_interior_order: 32, wk_radius: 1e4 }
    }
}

/// Shape of the jump laws beyond the intensities: `a1, a2, β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailShape {
    pub a1: f64,
    pub a2: f64,
    pub beta_tail: f64,
}

impl Default for TailShape {
    fn default() -> Self {
        Self { a1: 0.01, a2: 0.01, beta_tail: 1.8 }
    }
}

/// Everything needed to evaluate one step: `h`, the box, mass-renormalised
/// rules for the normal factor and for each corner law.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub h: f64,
    pub uncertainty: UncertaintyBox,
    pub laws: [WkLaw; 4],
    pub gaussian: QuadratureRule,
    pub wk_rules: [QuadratureRule; 4],
    pub search: ParamSearchConfig,
}

impl StepContext {
    pub fn new(
        h: f64,
        uncertainty: UncertaintyBox,
        tails: TailShape,
        quad: StepQuadrature,
        search: ParamSearchConfig,
    ) -> Result<Self, Error> {
        let uncertainty = uncertainty.validated()?;
        if !(h > 0.0 && h.is_finite()) {
            return Err(ModelError::InvalidParams(format!("step size h = {h} must be > 0")).into());
        }
        if search.coarse_grid < 2 || !(search.refine_tol > 0.0) {
            return Err(ModelError::InvalidParams(format!("bad search config {search:?}")).into());
        }
        let laws = corner_laws(&uncertainty, tails.a1, tails.a2, tails.beta_tail)?;
        let gaussian = gaussian_rule(quad.gauss_order)?;
        let mk = |l: &WkLaw| wk_rule(l, quad.wk_interior_order, quad.wk_radius).map(|r| r.renormalized());
        let wk_rules = [mk(&laws[0])?, mk(&laws[1])?, mk(&laws[2])?, mk(&laws[3])?];
        Ok(Self { h, uncertainty, laws, gaussian, wk_rules, search })
    }

    /// Same rules and box with a different step size.
    pub fn with_h(&self, h: f64) -> Self {
        Self { h, ..self.clone() }
    }

    pub fn jump_scale(&self) -> f64 {
        self.h.powf(1.0 / self.uncertainty.alpha)
    }

    /// Largest probability mass dropped by any corner rule.
    pub fn max_tail_remainder(&self) -> f64 {
        self.wk_rules.iter().map(|r| r.tail_remainder).fold(0.0, f64::max)
    }
}

/// Maximiser of a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Argmax {
    pub k1: f64,
    pub k2: f64,
    pub q: f64,
    pub sigma2: f64,
    pub corner: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepResult {
    pub value: f64,
    pub argmax: Argmax,
}

/// Linear expectation for one parameter `(k = corner, q, σ²)`.
pub fn inner_expectation<V>(ctx: &StepContext, v: &V, point: [f64; 3], q: f64, sigma2: f64, corner: usize) -> f64
where
    V: Fn(f64, f64, f64) -> f64 + ?Sized,
{
    let [x, y, z] = point;
    let sx = (ctx.h * sigma2).sqrt();
    let yy = y + ctx.h * q;
    let sz = ctx.jump_scale();
    let wk = &ctx.wk_rules[corner];
    ctx.gaussian.expect(|xi| {
        let xx = x + sx * xi;
        sum::pairwise_map(wk.len(), |j| wk.weights[j] * v(xx, yy, z + sz * wk.nodes[j]))
    })
}

/// `Ê[v(point + increment)]` and its maximiser.
pub fn sup_step<V>(ctx: &StepContext, v: &V, point: [f64; 3]) -> StepResult
where
    V: Fn(f64, f64, f64) -> f64 + Sync + ?Sized,
{
    maximize(ctx, |corner, q, s2| inner_expectation(ctx, v, point, q, s2, corner))
}

/// Maximise `f(corner, q, σ²)` over the four corners and the `(q, σ²)` box.
///
/// Corners are scanned in lexicographic order; ties follow `search.tie_break`.
pub fn maximize(ctx: &StepContext, mut f: impl FnMut(usize, f64, f64) -> f64) -> StepResult {
    let b = &ctx.uncertainty;
    let corners = b.corners();
    let mut best: Option<StepResult> = None;
    for (c, &(k1, k2)) in corners.iter().enumerate() {
        let (v, q, s2) = search_2d(
            |q, s2| f(c, q, s2),
            (b.gamma_lo, b.gamma_hi),
            (b.sigma2_lo, b.sigma2_hi),
            &ctx.search,
        );
        if best.map_or(true, |bst| ctx.search.tie_break.replaces(v, bst.value)) {
            best = Some(StepResult { value: v, argmax: Argmax { k1, k2, q, sigma2: s2, corner: c } });
        }
    }
    best.expect("four corners")
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if lo == hi {
        return vec![lo];
    }
    (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Coarse grid then alternating golden-section sweeps; returns `(max, q, σ²)`.
pub fn search_2d(
    mut f: impl FnMut(f64, f64) -> f64,
    qr: (f64, f64),
    sr: (f64, f64),
    cfg: &ParamSearchConfig,
) -> (f64, f64, f64) {
    let qs = axis(qr.0, qr.1, cfg.coarse_grid);
    let ss = axis(sr.0, sr.1, cfg.coarse_grid);
    let mut best = (f64::NEG_INFINITY, qs[0], ss[0]);
    for &q in &qs {
        for &s in &ss {
            let v = f(q, s);
            if best.0 == f64::NEG_INFINITY || cfg.tie_break.replaces(v, best.0) {
                best = (v, q, s);
            }
        }
    }
    if qs.len() == 1 && ss.len() == 1 {
        return best;
    }
    let dq = if qs.len() > 1 { qs[1] - qs[0] } else { 0.0 };
    let ds = if ss.len() > 1 { ss[1] - ss[0] } else { 0.0 };
    for _ in 0..cfg.sweeps {
        if dq > 0.0 {
            let s = best.2;
            let lo = (best.1 - dq).max(qr.0);
            let hi = (best.1 + dq).min(qr.1);
            let (v, q) = golden(|q| f(q, s), lo, hi, cfg.refine_tol, cfg.tie_break);
            if v > best.0 {
                best = (v, q, s);
            }
        }
        if ds > 0.0 {
            let q = best.1;
            let lo = (best.2 - ds).max(sr.0);
            let hi = (best.2 + ds).min(sr.1);
            let (v, s) = golden(|s| f(q, s), lo, hi, cfg.refine_tol, cfg.tie_break);
            if v > best.0 {
                best = (v, q, s);
            }
        }
    }
    best
}

/// Golden-section maximisation on `[a, b]`, returning the best value seen.
fn golden(mut f: impl FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64, tie: TieBreak) -> (f64, f64) {
    let wins = |v: f64, x: f64, best: (f64, f64)| {
        v > best.0 || (v == best.0 && (x < best.1) == (tie == TieBreak::SmallestParameter))
    };
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut best = (fc, c);
    if wins(fd, d, best) {
        best = (fd, d);
    }
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
            if wins(fc, c, best) {
                best = (fc, c);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
            if wins(fd, d, best) {
                best = (fd, d);
            }
        }
    }
    best
}
