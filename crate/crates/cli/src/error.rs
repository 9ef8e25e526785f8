use gpide::analysis::AnalysisError;
use gpide::generator::GeneratorError;
use gpide::scheme::SchemeError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerics: {0}")]
    Numerics(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("output: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration and output problems, 3 for infeasible numerics,
    /// 4 for failed checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Output(_) => 2,
            CliError::Numerics(_) => 3,
            CliError::Check(_) => 4,
        }
    }
}

impl From<SchemeError> for CliError {
    fn from(e: SchemeError) -> Self {
        match e {
            SchemeError::GridTooNarrow { .. } | SchemeError::StepMismatch { .. } => CliError::Numerics(e.to_string()),
            SchemeError::Io(io) => CliError::Output(io),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::DegenerateFit { .. } => CliError::Check(e.to_string()),
            AnalysisError::Scheme(s) => s.into(),
            AnalysisError::Core(c) => (*c).into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<gpide::Error> for CliError {
    fn from(e: gpide::Error) -> Self {
        match e {
            gpide::Error::Scheme(s) => s.into(),
            gpide::Error::Analysis(a) => a.into(),
            gpide::Error::Quadrature(q) => CliError::Numerics(q.to_string()),
            gpide::Error::Model(m) => CliError::Config(m.to_string()),
        }
    }
}

impl From<GeneratorError> for CliError {
    fn from(e: GeneratorError) -> Self {
        match e {
            GeneratorError::Quadrature(_) => CliError::Numerics(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}
