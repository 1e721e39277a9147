use std::fmt;

use ovs_core::ablation::AblationError;
use ovs_core::config::ConfigError;
use ovs_core::expand::ExpandError;
use ovs_core::io::IoError;
use ovs_core::metrics::MetricError;
use ovs_core::stabilizer::StabilizeError;
use ovs_core::synth::SynthError;

/// A failed run: a short machine-readable kind, a one-line message and the
/// exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub code: u8,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage",
            message: message.into(),
            code: 2,
        }
    }

    fn processing(kind: &'static str, message: impl fmt::Display) -> Self {
        Self {
            kind,
            message: message.to_string().replace('\n', " "),
            code: 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ovs: error[{}]: {}", self.kind, self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self {
            kind: "config",
            message: e.to_string(),
            code: 2,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        Self::processing("io", e)
    }
}

impl From<ExpandError> for CliError {
    fn from(e: ExpandError) -> Self {
        Self::processing("expand", e)
    }
}

impl From<StabilizeError> for CliError {
    fn from(e: StabilizeError) -> Self {
        Self::processing("stabilize", e)
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        Self::processing("metric", e)
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        Self::processing("synth", e)
    }
}

impl From<AblationError> for CliError {
    fn from(e: AblationError) -> Self {
        Self::processing("ablate", e)
    }
}

impl From<ovs_core::RasterError> for CliError {
    fn from(e: ovs_core::RasterError) -> Self {
        Self::processing("raster", e)
    }
}
