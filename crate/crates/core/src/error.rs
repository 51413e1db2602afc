use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("window exceeded: {0}")]
    WindowExceeded(String),
    #[error("beyond calibration range: theta {theta} >= pi*R_N = {limit}")]
    BeyondCalibration { theta: f64, limit: f64 },
    #[error("range error: {0}")]
    Range(String),
    #[error("memory cap exceeded: need {needed_bytes} bytes, cap is {cap_bytes} bytes")]
    MemoryCap { needed_bytes: u64, cap_bytes: u64 },
    #[error("parity violation: {0}")]
    Parity(String),
    #[error("strips too thin: width {width} < 4")]
    StripsTooThin { width: usize },
    #[error("tilted mean not positive: {0}")]
    TiltedMeanNotPositive(f64),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
