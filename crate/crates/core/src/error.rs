use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("user id must be non-empty")]
    EmptyUserId,
    #[error("label must name at least one reader")]
    EmptyLabel,
    #[error("principal must contain at least one user")]
    EmptyPrincipal,
    #[error("no user may read the composed output")]
    EmptyIntersection,
    #[error("cannot revoke a reader from a public label")]
    RevokeOnPublic,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("document {0:?} has neither authors nor an explicit label")]
    MissingAuthorsAndLabel(String),
    #[error("document {0:?} has an empty body")]
    EmptyBody(String),
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
    #[error("max chunk tokens must be at least 8, got {0}")]
    InvalidChunkLimit(usize),
    #[error("journal {path}: line {line}: {message}")]
    Journal { path: String, line: usize, message: String },
    #[error("journal has no version {0}")]
    UnknownVersion(u64),
    #[error("store is locked by another writer ({0})")]
    Locked(String),
    #[error(transparent)]
    Label(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LmError {
    #[error("model order must be in 1..=5, got {0}")]
    InvalidOrder(usize),
    #[error("interpolation weight must be in [0, 1), got {0}")]
    InvalidInterpolation(f64),
    #[error("invalid privacy budget: {0}")]
    InvalidBudget(String),
    #[error("per-user contribution cap must be at least 1")]
    InvalidCap,
    #[error("kNN interpolation weight must be in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("continuation must contain at least one token")]
    EmptyContinuation,
    #[error("group size must be at least 1")]
    InvalidGroupSize,
    #[error("model format: {0}")]
    Format(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("delivery refused: {0}")]
    DeliveryRefused(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("pretrain model must be public, got {0}")]
    PrivatePretrainModel(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("principal can read the whole corpus; nothing to mutate")]
    NothingToMutate,
    #[error("mutation changed the projection: {0}")]
    ProjectionChanged(String),
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("source resolution: {0}")]
    SourceResolution(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("abstract needs at least 2 tokens, got {0}")]
    TooShort(usize),
    #[error("prompt fraction must be in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("K must be at least 1")]
    InvalidK,
    #[error("no zero-shot row for document {0:?}")]
    MissingBaselineRows(String),
    #[error("cannot split {docs} documents into {groups} groups")]
    InsufficientRows { docs: usize, groups: usize },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
