use zeus_core::checkpoint::CheckpointError;
use zeus_core::cluster::ClusterError;
use zeus_core::config::ConfigError;
use zeus_core::datagen::DatagenError;
use zeus_core::dataset::DatasetError;
use zeus_core::encoder::EncoderError;
use zeus_core::metrics::MetricsError;
use zeus_core::tensor::TensorError;
use zeus_core::trainer::TrainError;

/// Every failure the binary reports, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Numeric(_) => 3,
            Self::Io(_) => 4,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            Self::Io(e.to_string())
        } else {
            Self::Usage(e.to_string())
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Self::Io(e.to_string())
        } else {
            Self::Usage(e.to_string())
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => Self::Numeric(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Tensor(t) => t.into(),
            other => Self::Usage(other.to_string()),
        }
    }
}

impl From<ClusterError> for CliError {
    fn from(e: ClusterError) -> Self {
        match e {
            ClusterError::Usage(m) => Self::Usage(m),
            ClusterError::Numeric(m) => Self::Numeric(m),
            ClusterError::Tensor(t) => t.into(),
            ClusterError::Encoder(t) => t.into(),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(e) => e.into(),
            DatasetError::Csv(e) => e.into(),
            DatasetError::Json(e) => e.into(),
            DatasetError::Invalid(m) => Self::Usage(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(e) => Self::Io(format!("cannot read config: {e}")),
            other => Self::Usage(other.to_string()),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Config(m) => Self::Usage(m),
            DatagenError::Cluster(c) => c.into(),
            other => Self::Numeric(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Usage(m) => Self::Usage(m),
            MetricsError::Csv(e) => e.into(),
            MetricsError::Json(e) => e.into(),
            MetricsError::Io(e) => e.into(),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Encoder(e) => e.into(),
            other => Self::Io(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => Self::Usage(m),
            TrainError::NonFinite { .. } => Self::Numeric(e.to_string()),
            TrainError::Tensor(e) => e.into(),
            TrainError::Encoder(e) => e.into(),
            TrainError::Objective(e) => Self::Numeric(e.to_string()),
            TrainError::Cluster(e) => e.into(),
            TrainError::Datagen(e) => e.into(),
            TrainError::Metrics(e) => e.into(),
        }
    }
}
