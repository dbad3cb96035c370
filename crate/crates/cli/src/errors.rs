use std::path::Path;

use strokedetect_core::dataset::DatasetError;
use strokedetect_core::detector::DetectError;
use strokedetect_core::flow::FlowError;
use strokedetect_core::metrics::MetricsError;
use strokedetect_core::model::ModelError;
use strokedetect_core::synth::SynthError;
use strokedetect_core::trainer::TrainError;
use strokedetect_core::video_io::VideoIoError;
use thiserror::Error;

/// Exit code 1: the OS refused a read or write.
pub const EXIT_IO: u8 = 1;
/// Exit code 2: a config or input file violates its schema.
pub const EXIT_CONFIG: u8 = 2;
/// Exit code 3: training aborted on a non-finite loss.
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => EXIT_IO,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Diverged(_) => EXIT_DIVERGED,
        }
    }

    pub fn missing_path(path: &Path) -> CliError {
        CliError::Io(format!("{}: no such file or directory", path.display()))
    }
}

impl From<VideoIoError> for CliError {
    fn from(e: VideoIoError) -> Self {
        match e {
            VideoIoError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Flow(inner) => inner.into(),
            DatasetError::VideoIo(inner) => inner.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::Dataset(inner) => inner.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::Io { .. } => CliError::Io(e.to_string()),
            DetectError::Dataset(inner) => inner.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::VideoIo(inner) => inner.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Config(e.to_string())
    }
}

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
