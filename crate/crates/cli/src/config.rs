//! The experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use gpide::analysis::{default_delta, delta_window, ProxySettings};
use gpide::catalog::{PhiSpec, TestFunction};
use gpide::generator::{q0_from_beta, ConsistencyQuadrature};
use gpide::quadrature::StableIntegralSpec;
use gpide::scheme::{Axis, Grid, MeshScaling, SolveOptions};
use gpide::step::{ParamSearchConfig, StepContext, StepQuadrature, TailShape};
use gpide::UncertaintyBox;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub scheme: SchemeConfig,
    pub analysis: AnalysisConfig,
    pub phi: PhiSpec,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            scheme: SchemeConfig::default(),
            analysis: AnalysisConfig::default(),
            phi: PhiSpec::CosZ { freq: 1.0 },
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub sigma2_lo: f64,
    pub sigma2_hi: f64,
    pub alpha: f64,
    pub a1: f64,
    pub a2: f64,
    pub beta_tail: f64,
    /// Only used when `beta_tail = 2`.
    pub eps0: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = TailShape::default();
        Self {
            lambda_lo: 0.3,
            lambda_hi: 0.35,
            gamma_lo: -0.2,
            gamma_hi: 0.2,
            sigma2_lo: 0.8,
            sigma2_hi: 1.0,
            alpha: 1.5,
            a1: t.a1,
            a2: t.a2,
            beta_tail: t.beta_tail,
            eps0: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn uncertainty(&self) -> UncertaintyBox {
        UncertaintyBox {
            lambda_lo: self.lambda_lo,
            lambda_hi: self.lambda_hi,
            gamma_lo: self.gamma_lo,
            gamma_hi: self.gamma_hi,
            sigma2_lo: self.sigma2_lo,
            sigma2_hi: self.sigma2_hi,
            alpha: self.alpha,
        }
    }

    pub fn tails(&self) -> TailShape {
        TailShape { a1: self.a1, a2: self.a2, beta_tail: self.beta_tail }
    }
}

/// What the functional values of a rate study are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reference {
    /// The largest `n` of the list; the others are fitted.
    #[default]
    Finest,
    /// `E cos(ω√σ² N) = exp(−ω²σ²/2)` for `φ = cos(ωx)` with a single variance.
    Gaussian,
    /// `tanh(γ̄/scale)` for `φ = tanh(y/scale)`; every `n` must hit it exactly.
    Drift,
    /// A value supplied by hand.
    Value { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeConfig {
    /// Step counts; `h = 1/n`.
    pub n: Vec<usize>,
    pub grid: Grid,
    pub mesh_scaling: MeshScaling,
    pub quadrature: StepQuadrature,
    pub search: ParamSearchConfig,
    pub solve: SolveOptions,
    pub reference: Reference,
    /// Residuals below ten times this are left out of the fit.
    pub noise_floor: f64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            n: vec![4, 8, 16, 32, 64],
            grid: Grid { x: Axis::new(-6.0, 6.0, 2), y: Axis::new(-1.0, 1.0, 2), z: Axis::new(-16.0, 16.0, 801) },
            mesh_scaling: MeshScaling::Fixed,
            quadrature: StepQuadrature { gauss_order: 8, ..Default::default() },
            search: ParamSearchConfig::default(),
            solve: SolveOptions::default(),
            reference: Reference::Finest,
            noise_floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Defaults to the middle of the admissible window.
    pub delta: Option<f64>,
    pub n_max: usize,
    /// Overrides the computed mollifier constant.
    pub k_zeta: Option<f64>,
    /// Overrides `Γ(α, δ, q₀)` as the order a rate study must reach.
    pub theory_order: Option<f64>,
    pub proxy: ProxySettings,
    pub consistency: ConsistencyQuadrature,
    /// `s = 2^{-k}` for `k` in this inclusive range.
    pub s_exponents: (i32, i32),
    /// `(p, A)` pairs of the consistency sweep.
    pub consistency_pa: Vec<(f64, f64)>,
    /// Point `z` at which the consistency residual and `G` are evaluated.
    pub z: f64,
    /// `(p, A, z)` triples for `generator-eval`.
    pub generator_points: Vec<(f64, f64, f64)>,
    pub integral: StableIntegralSpec,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            delta: None,
            n_max: 32,
            k_zeta: None,
            theory_order: None,
            proxy: ProxySettings::default(),
            consistency: ConsistencyQuadrature::default(),
            s_exponents: (4, 12),
            consistency_pa: vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (-1.0, -1.0)],
            z: 0.0,
            generator_points: vec![(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.5), (-1.0, -1.0, 1.0)],
            integral: StableIntegralSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
    /// Dump every layer of a solve, not only the last.
    pub all_layers: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), formats: vec![Format::Csv, Format::Json, Format::Binary], all_layers: false }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

/// A checked configuration with every derived object built.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub uncertainty: UncertaintyBox,
    pub tails: TailShape,
    pub phi: TestFunction,
    /// Step context with `h = 1`; rescaled per `n`.
    pub ctx: StepContext,
    pub delta: f64,
    pub q0: f64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Validate every block with its owning module and build the derived objects.
    pub fn prepare(&self) -> Result<Prepared, CliError> {
        let cfg = self.clone();
        let uncertainty = cfg.model.uncertainty().validated().map_err(|e| CliError::Config(e.to_string()))?;
        let tails = cfg.model.tails();
        let phi = cfg.phi.build().map_err(|e| CliError::Config(e.to_string()))?;
        Grid::new(cfg.scheme.grid.x, cfg.scheme.grid.y, cfg.scheme.grid.z).map_err(|e| CliError::Config(e.to_string()))?;
        let ns = &cfg.scheme.n;
        if ns.is_empty() || ns[0] == 0 || ns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Config(format!("scheme.n must be positive and strictly increasing, got {ns:?}")));
        }
        if !(cfg.scheme.noise_floor >= 0.0) {
            return Err(CliError::Config("scheme.noise_floor must be ≥ 0".into()));
        }
        if !(cfg.scheme.solve.boundary_tolerance > 0.0) {
            return Err(CliError::Config("scheme.solve.boundary_tolerance must be > 0".into()));
        }
        let ctx = StepContext::new(1.0, uncertainty, tails, cfg.scheme.quadrature, cfg.scheme.search)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let q0 = q0_from_beta(uncertainty.alpha, tails.beta_tail, cfg.model.eps0).map_err(|e| CliError::Config(e.to_string()))?;
        let delta = cfg.analysis.delta.unwrap_or_else(|| default_delta(uncertainty.alpha));
        let (lo, hi) = delta_window(uncertainty.alpha);
        if !(delta > lo && delta < hi) {
            return Err(CliError::Config(format!("analysis.delta = {delta} outside ({lo}, {hi})")));
        }
        if cfg.analysis.n_max == 0 {
            return Err(CliError::Config("analysis.n_max must be ≥ 1".into()));
        }
        if let Some(k) = cfg.analysis.k_zeta {
            if !(k > 0.0 && k.is_finite()) {
                return Err(CliError::Config(format!("analysis.k_zeta = {k} must be positive")));
            }
        }
        let (s_lo, s_hi) = cfg.analysis.s_exponents;
        if !(0 <= s_lo && s_lo + 2 <= s_hi && s_hi <= 60) {
            return Err(CliError::Config(format!("analysis.s_exponents ({s_lo}, {s_hi}) must span ≥ 3 values in 0..=60")));
        }
        if cfg.analysis.consistency_pa.is_empty() {
            return Err(CliError::Config("analysis.consistency_pa is empty".into()));
        }
        if cfg.output.formats.is_empty() {
            return Err(CliError::Config("output.formats is empty".into()));
        }
        Ok(Prepared { config: cfg, uncertainty, tails, phi, ctx, delta, q0 })
    }
}
