use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix contains non-finite values")]
    NotFinite,

    #[error("eigen iteration did not converge after {sweeps} sweeps")]
    EigFailure { sweeps: usize },

    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:e}, max {max:e})")]
    NotPositiveSemidefinite { eigenvalue: f64, max: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown task {0}")]
    UnknownTask(u32),

    #[error("batch of {0} sample(s) cannot use batch statistics")]
    SingularBatch(usize),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("k_percent must be in (0, 100], got {0}")]
    InvalidK(f64),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("task {got} trained out of order (expected {expected})")]
    OutOfOrderTask { expected: u32, got: u32 },

    #[error("accuracy matrix is incomplete: {0}")]
    IncompleteMatrix(String),

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("need {needed} classes but found {found}")]
    InsufficientClasses { needed: usize, found: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
