use thiserror::Error;

/// Errors produced anywhere in the stitching engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point maps to infinity (denominator {0:e})")]
    PointAtInfinity(f64),
    #[error("homography is singular")]
    SingularHomography,
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("warp is affine, no projective component")]
    AffineWarp,
    #[error("images overlap completely")]
    NoNonOverlap,
    #[error("constraint lines are parallel")]
    ParallelConstraintLines,
    #[error("point ({x}, {y}) is out of bounds")]
    OutOfBounds { x: f64, y: f64 },
    #[error("too few samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("insufficient inliers: {0}")]
    InsufficientInliers(usize),
    #[error("empty point set")]
    EmptySet,
    #[error("empty overlap region")]
    EmptyOverlap,
    #[error("too few correspondences: {0}")]
    TooFew(usize),
    #[error("match graph is disconnected, unreachable images: {0:?}")]
    DisconnectedGraph(Vec<usize>),
    #[error("linear system could not be factorized")]
    RankDeficient,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{step}: {source}")]
    Step {
        step: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Tags an error with the pipeline step that produced it.
    pub fn in_step(self, step: &'static str) -> Error {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
