use thiserror::Error;

/// A state/time location used as a witness in error reports.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Witness {
    pub state: Vec<f64>,
    pub time: f64,
}

impl Witness {
    pub fn new(state: &nalgebra::DVector<f64>, time: f64) -> Self {
        Self {
            state: state.iter().copied().collect(),
            time,
        }
    }
}

impl std::fmt::Display for Witness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "x={:?}, t={}", self.state, self.time)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("stencil point left the domain at {0}")]
    DomainExit(Witness),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("matrix is not positive semidefinite (jitter would exceed {max_jitter:e})")]
    NotPsd { max_jitter: f64 },
    #[error("diffusion rank mismatch: declared {declared}, found {found} at {witness}")]
    RankMismatch {
        declared: usize,
        found: usize,
        witness: Witness,
    },
    #[error("singular Jacobian (|det| = {det:e}) at {witness}")]
    SingularJacobian { det: f64, witness: Witness },
    #[error("no generator solves the drift commutator condition (residual {residual:e} at {witness})")]
    NoSolution { residual: f64, witness: Witness },
    #[error("drift is not affine in the Gaussian block (deviation {deviation:e} at {witness})")]
    NotAffine { deviation: f64, witness: Witness },
    #[error("deterministic drift depends on the Gaussian block (derivative {derivative:e} at {witness})")]
    TildeDriftDependsOnBar { derivative: f64, witness: Witness },
    #[error("kappa depends on the Gaussian block (derivative {derivative:e} at {witness})")]
    KappaDependsOnBar { derivative: f64, witness: Witness },
    #[error("transformed diffusion is not canonical (worst entry {worst:e} at {witness})")]
    NotCanonical { worst: f64, witness: Witness },
    #[error("no column ordering gives a nonvanishing pivot at stage {stage}")]
    PermutationExhausted { stage: usize },
    #[error("flow left the domain before reaching its target at {0}")]
    FlowEscape(Witness),
    #[error("deterministic component left its box at t = {time}")]
    OdeEscape { time: f64 },
    #[error("unknown model id `{0}`")]
    UnknownModel(String),
    #[error("noise is not commutative (residual {residual:e})")]
    NonCommutative { residual: f64 },
    #[error("no surviving paths at t = {time}")]
    NoSurvivors { time: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
