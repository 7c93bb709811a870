use anastomosis_core::config::ConfigError;
use anastomosis_core::controller::ControllerError;
use anastomosis_core::metrics::MetricsError;
use anastomosis_core::oct::io::AScanIoError;
use anastomosis_core::oct::OctError;
use anastomosis_core::vision::VisionError;

/// Every failure maps onto one of three exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Io(_) => 3,
            Self::Runtime(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::Io(format!("{}: {e}", path.display()))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Self::Io(e.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<ControllerError> for CliError {
    fn from(e: ControllerError) -> Self {
        match e {
            ControllerError::Config(m) => Self::Config(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<VisionError> for CliError {
    fn from(e: VisionError) -> Self {
        match e {
            VisionError::Io { .. } => Self::Io(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<AScanIoError> for CliError {
    fn from(e: AScanIoError) -> Self {
        match e {
            AScanIoError::Io { .. } => Self::Io(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<OctError> for CliError {
    fn from(e: OctError) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_class() {
        let parse = anastomosis_core::config::GlobalConfig::from_json_str("{ \"seed\": }").unwrap_err();
        assert_eq!(CliError::from(parse).exit_code(), 2);
        assert_eq!(CliError::from(ControllerError::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(ControllerError::Replay("x".into())).exit_code(), 4);
        assert_eq!(CliError::io(std::path::Path::new("f"), "gone").exit_code(), 3);
    }
}
