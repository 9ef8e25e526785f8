//! Built-in test functions `φ(x, y, z)` with exact derivative bounds.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::quadrature::Smooth1;

/// `max |tanh''|`, attained at `tanh(u) = ±1/√3`.
pub const TANH_D2_MAX: f64 = 0.769_800_358_919_501;

type Eval = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;
type Jet = dyn Fn(usize, [f64; 3]) -> [f64; 3] + Send + Sync;

/// A bounded Lipschitz function on ℝ³ with the norms the solver and the
/// error budgets need.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    /// `‖φ‖∞`
    pub sup_norm: f64,
    /// `C_φ`: bound on every first partial derivative, so that
    /// `|φ(a) − φ(b)| ≤ C_φ·‖a − b‖₁`.
    pub lipschitz: f64,
    /// `axis_bounds[i][j-1] = ‖∂_i^j φ‖∞` for `j = 1, 2, 3`.
    pub axis_bounds: [[f64; 3]; 3],
    eval: Arc<Eval>,
    jet: Option<Arc<Jet>>,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("sup_norm", &self.sup_norm)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl TestFunction {
    /// A function known only through its values and its bounds.
    pub fn new(
        name: impl Into<String>,
        sup_norm: f64,
        lipschitz: f64,
        f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            sup_norm,
            lipschitz,
            axis_bounds: [[lipschitz, f64::INFINITY, f64::INFINITY]; 3],
            eval: Arc::new(f),
            jet: None,
        }
    }

    fn smooth(
        name: String,
        sup_norm: f64,
        axis_bounds: [[f64; 3]; 3],
        f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        jet: impl Fn(usize, [f64; 3]) -> [f64; 3] + Send + Sync + 'static,
    ) -> Self {
        let lipschitz = axis_bounds.iter().map(|b| b[0]).fold(0.0, f64::max);
        Self { name, sup_norm, lipschitz, axis_bounds, eval: Arc::new(f), jet: Some(Arc::new(jet)) }
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64, z: f64) -> f64 {
        (self.eval)(x, y, z)
    }

    /// `(φ, ∂_axis φ, ∂²_axis φ)` at `p`, when the function carries derivatives.
    pub fn axis_jet(&self, axis: usize, p: [f64; 3]) -> Option<[f64; 3]> {
        self.jet.as_ref().map(|j| j(axis, p))
    }

    /// `λ ↦ φ(p + λ e_axis)` as a [`Smooth1`], if derivatives are known.
    pub fn section(&self, axis: usize, p: [f64; 3]) -> Option<Section> {
        self.jet.as_ref()?;
        Some(Section { phi: self.clone(), axis, base: p })
    }

    /// `‖Dφ‖∞` and `‖D²φ‖∞` as used by the consistency bound, taken along `z`.
    pub fn z_norms(&self) -> (f64, f64) {
        (self.axis_bounds[2][0], self.axis_bounds[2][1])
    }

    /// `[‖φ‖, ‖∂φ‖, ‖∂²φ‖, ‖∂³φ‖]` along one axis.
    pub fn axis_norms(&self, axis: usize) -> [f64; 4] {
        let b = self.axis_bounds[axis];
        [self.sup_norm, b[0], b[1], b[2]]
    }

    pub fn scaled(&self, c: f64) -> Self {
        let f = self.eval.clone();
        let jet = self.jet.clone();
        let mut out = self.clone();
        out.name = format!("{c}*{}", self.name);
        out.sup_norm *= c.abs();
        out.lipschitz *= c.abs();
        for b in &mut out.axis_bounds {
            for v in b.iter_mut() {
                *v *= c.abs();
            }
        }
        out.eval = Arc::new(move |x, y, z| c * f(x, y, z));
        out.jet = jet.map(|j| {
            Arc::new(move |a: usize, p: [f64; 3]| j(a, p).map(|v| c * v)) as Arc<Jet>
        });
        out
    }
}

/// One-dimensional section of a [`TestFunction`].
pub struct Section {
    phi: TestFunction,
    axis: usize,
    base: [f64; 3],
}

impl Section {
    fn at(&self, l: f64) -> [f64; 3] {
        let mut p = self.base;
        p[self.axis] += l;
        self.phi.axis_jet(self.axis, p).expect("section built only for smooth functions")
    }
}

impl Smooth1 for Section {
    fn value(&self, l: f64) -> f64 {
        let mut p = self.base;
        p[self.axis] += l;
        self.phi.eval(p[0], p[1], p[2])
    }
    fn d1(&self, l: f64) -> f64 {
        self.at(l)[1]
    }
    fn d2(&self, l: f64) -> f64 {
        self.at(l)[2]
    }
    fn sup_norms(&self) -> [f64; 4] {
        self.phi.axis_norms(self.axis)
    }
}

/// Serializable name of a built-in test function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiSpec {
    Constant { value: f64 },
    /// `tanh(coordinate / scale)`, axis 0, 1 or 2.
    Tanh { axis: usize, scale: f64 },
    /// `cos(freq · x)`
    CosX { freq: f64 },
    /// `cos(freq · z)`
    CosZ { freq: f64 },
    /// `cos(x + y + z)`
    CosSum,
    /// `tanh(x) tanh(y) tanh(z)`
    TanhProduct,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid test function {spec:?}: {reason}")]
pub struct PhiError {
    pub spec: PhiSpec,
    pub reason: String,
}

impl PhiSpec {
    pub fn build(&self) -> Result<TestFunction, PhiError> {
        let bad = |reason: &str| PhiError { spec: *self, reason: reason.into() };
        Ok(match *self {
            PhiSpec::Constant { value } => {
                if !value.is_finite() {
                    return Err(bad("value must be finite"));
                }
                TestFunction::smooth(
                    format!("constant({value})"),
                    value.abs(),
                    [[0.0; 3]; 3],
                    move |_, _, _| value,
                    move |_, _| [value, 0.0, 0.0],
                )
            }
            PhiSpec::Tanh { axis, scale } => {
                if axis > 2 {
                    return Err(bad("axis must be 0, 1 or 2"));
                }
                if !(scale > 0.0 && scale.is_finite()) {
                    return Err(bad("scale must be positive"));
                }
                let mut b = [[0.0; 3]; 3];
                b[axis] = [1.0 / scale, TANH_D2_MAX / scale.powi(2), 2.0 / scale.powi(3)];
                TestFunction::smooth(
                    format!("tanh({}/{scale})", ["x", "y", "z"][axis]),
                    1.0,
                    b,
                    move |x, y, z| ([x, y, z][axis] / scale).tanh(),
                    move |a, p| {
                        let t = (p[axis] / scale).tanh();
                        if a == axis {
                            let s = 1.0 - t * t;
                            [t, s / scale, -2.0 * t * s / (scale * scale)]
                        } else {
                            [t, 0.0, 0.0]
                        }
                    },
                )
            }
            PhiSpec::CosX { freq } | PhiSpec::CosZ { freq } => {
                if !freq.is_finite() {
                    return Err(bad("freq must be finite"));
                }
                let axis = if matches!(self, PhiSpec::CosX { .. }) { 0 } else { 2 };
                let f = freq.abs();
                let mut b = [[0.0; 3]; 3];
                b[axis] = [f, f * f, f * f * f];
                TestFunction::smooth(
                    format!("cos({freq}*{})", ["x", "y", "z"][axis]),
                    1.0,
                    b,
                    move |x, y, z| (freq * [x, y, z][axis]).cos(),
                    move |a, p| {
                        let (s, c) = (freq * p[axis]).sin_cos();
                        if a == axis {
                            [c, -freq * s, -freq * freq * c]
                        } else {
                            [c, 0.0, 0.0]
                        }
                    },
                )
            }
            PhiSpec::CosSum => TestFunction::smooth(
                "cos(x+y+z)".into(),
                1.0,
                [[1.0; 3]; 3],
                |x, y, z| (x + y + z).cos(),
                |_, p| {
                    let (s, c) = (p[0] + p[1] + p[2]).sin_cos();
                    [c, -s, -c]
                },
            ),
            PhiSpec::TanhProduct => TestFunction::smooth(
                "tanh(x)tanh(y)tanh(z)".into(),
                1.0,
                [[1.0, TANH_D2_MAX, 2.0]; 3],
                |x, y, z| x.tanh() * y.tanh() * z.tanh(),
                |a, p| {
                    let t = p.map(f64::tanh);
                    let other: f64 = (0..3).filter(|&i| i != a).map(|i| t[i]).product();
                    let s = 1.0 - t[a] * t[a];
                    [t[a] * other, s * other, -2.0 * t[a] * s * other]
                },
            ),
        })
    }
}
