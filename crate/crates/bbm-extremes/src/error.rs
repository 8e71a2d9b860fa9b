use thiserror::Error;

/// Crate-wide error type. Exit-code mapping for the CLI lives in the binary.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid horizon {0}: must be finite and >= 0")]
    InvalidHorizon(f64),
    #[error("invalid barrier slack {0}: must be finite and >= 0")]
    InvalidSlack(f64),
    #[error("particle budget exceeded: cap is {cap} particles (expected population ~2*e^t)")]
    BudgetExceeded { cap: usize },
    #[error("unknown particle id {0}")]
    UnknownParticle(u32),
    #[error("particle {0} is not alive at the horizon")]
    NotAliveAtHorizon(u32),
    #[error("radius {r} out of range [0, {t}]")]
    RadiusOutOfRange { r: f64, t: f64 },
    #[error("time {s} out of range [0, {t}]")]
    TimeOutOfRange { s: f64, t: f64 },
    #[error("population is empty")]
    EmptyPopulation,
    #[error("need at least {need} leaves, population has {have}")]
    TooFewLeaves { need: usize, have: usize },
    #[error("need at least {need} replicas, got {have}")]
    InsufficientReplicas { need: usize, have: usize },
    #[error("need at least {need} samples, got {have}")]
    InsufficientSamples { need: usize, have: usize },
    #[error("derivative martingale on a pruned population is biased low (the barrier removes \
             low particles that carry most of the sum); pass acknowledge_pruned_bias=true \
             to compute it anyway")]
    PrunedMartingaleBias,
    #[error("log-slope fit needs strictly positive values (got {0})")]
    NonPositiveValue(f64),
    #[error("degenerate fit grid: all abscissae equal")]
    DegenerateGrid,
    #[error(
        "rejection sampler gave up after {attempts} attempts (estimated acceptance rate {rate:.2e})"
    )]
    AcceptanceStarved { attempts: u64, rate: f64 },
    #[error("manifest hash mismatch: artifact was built from {expected}, directory has {found}")]
    ManifestMismatch { expected: String, found: String },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
