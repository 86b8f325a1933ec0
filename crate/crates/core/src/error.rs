use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("calibration panel mean is {value} in band {band} ({wavelength_nm} nm); must be > 0")]
    Calibration {
        band: usize,
        wavelength_nm: f64,
        value: f64,
    },

    #[error("wavelength {wavelength_nm} nm lies outside the source range [{min_nm}, {max_nm}] nm")]
    OutOfRange {
        wavelength_nm: f64,
        min_nm: f64,
        max_nm: f64,
    },

    #[error("degenerate vector: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("layer state error: {0}")]
    State(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("training diverged in {stage} at epoch {epoch}: non-finite loss")]
    Divergence { stage: String, epoch: usize },

    #[error("cluster {cluster} has {available} members; {requested} were requested")]
    Extraction {
        cluster: usize,
        available: usize,
        requested: usize,
    },

    #[error("transfer error: {0}")]
    Transfer(String),

    #[error("stage `{stage}` needs {artifact}; run stage `{run_first}` first")]
    Dependency {
        stage: String,
        artifact: String,
        run_first: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
