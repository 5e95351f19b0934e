use thiserror::Error;

pub type Result<T> = std::result::Result<T, FoodError>;

#[derive(Debug, Error)]
pub enum FoodError {
    #[error("vector norm below 1e-12")]
    ZeroVector,
    #[error("empty input")]
    EmptyInput,
    #[error("sigmoid slope must be positive, got {0}")]
    NonPositiveSlope(f64),
    #[error("subset size {n} out of range for population {total}")]
    NOutOfRange { n: usize, total: usize },
    #[error("invalid probability {0}")]
    InvalidProbability(f64),
    #[error("feature vector has zero norm")]
    ZeroFeature,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} output slots")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("unknown sampling rule `{0}`")]
    UnknownRule(String),
    #[error("held-out unknown proposal reached a training batch")]
    UnknownLabelInTraining,
    #[error("shape mismatch in parameter group `{0}`")]
    ShapeMismatch(&'static str),
    #[error("invalid classifier weights: {0}")]
    InvalidWeights(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("finetune requires a base-stage checkpoint, got stage `{0}`")]
    StageOrder(String),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("benchmark spec error: {0}")]
    Spec(String),
    #[error("split is empty or lacks the requested proposals: {0}")]
    EmptySplit(String),
    #[error("degenerate box [{0}, {1}, {2}, {3}]")]
    DegenerateBox(f64, f64, f64, f64),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite value during {0}")]
    NumericFailure(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<FoodError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FoodError {
    pub fn in_stage(self, stage: &'static str) -> Self {
        FoodError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &FoodError {
        match self {
            FoodError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit status used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            FoodError::Config(_) | FoodError::UnknownRule(_) | FoodError::StageOrder(_) => 2,
            FoodError::NumericFailure(_) => 4,
            _ => 3,
        }
    }
}
