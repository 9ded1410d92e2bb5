//! Exit codes and the machine-readable error line.

use std::process::ExitCode;

use forest_browning::error::{
    AnomalyError, BaselineError, CurveError, FeatureError, FormatError, MetricsError, NetError, SynthError, TrainError,
};
use serde_json::json;
use thiserror::Error;

pub const EXIT_TABLE: &str = "\
Exit codes:
  0  success
  1  unexpected failure
  2  usage error
  3  file cannot be read or written
  4  required column missing from an input table
  5  schema version mismatch in an input file
  6  dimension mismatch between checkpoint and features
  7  invalid input data or configuration
  8  training diverged (non-finite loss, gradient or output)

On failure one JSON line is written to stderr:
  {\"error\":{\"code\":<n>,\"kind\":\"<kind>\",\"message\":\"<text>\"}}";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    General,
    Io,
    MissingColumn,
    Schema,
    Dimension,
    Invalid,
    Diverged,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::General => 1,
            Kind::Io => 3,
            Kind::MissingColumn => 4,
            Kind::Schema => 5,
            Kind::Dimension => 6,
            Kind::Invalid => 7,
            Kind::Diverged => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::General => "general",
            Kind::Io => "io",
            Kind::MissingColumn => "missing_column",
            Kind::Schema => "schema_version",
            Kind::Dimension => "dimension",
            Kind::Invalid => "invalid_input",
            Kind::Diverged => "diverged",
        }
    }
}

fn net_kind(e: &NetError) -> Kind {
    match e {
        NetError::Dimension(_) | NetError::IndexOutOfBounds { .. } => Kind::Dimension,
        NetError::NonFiniteOutput { .. } => Kind::Diverged,
        NetError::Architecture(_) => Kind::Invalid,
    }
}

pub fn classify(err: &anyhow::Error) -> Kind {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<FormatError>() {
            return match e {
                FormatError::Io { .. } => Kind::Io,
                FormatError::MissingColumn { .. } => Kind::MissingColumn,
                FormatError::SchemaVersion { .. } => Kind::Schema,
                FormatError::Dimension(_) => Kind::Dimension,
                FormatError::Parse { .. } | FormatError::Checkpoint(_) => Kind::Invalid,
            };
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => Kind::Diverged,
                TrainError::Net(n) => net_kind(n),
                _ => Kind::Invalid,
            };
        }
        if let Some(e) = cause.downcast_ref::<NetError>() {
            return net_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<FeatureError>() {
            return match e {
                FeatureError::Dimension { .. } => Kind::Dimension,
                _ => Kind::Invalid,
            };
        }
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Io(_) => Kind::Io,
                CliError::Config(_) | CliError::Invalid(_) => Kind::Invalid,
            };
        }
        if cause.is::<SynthError>()
            || cause.is::<MetricsError>()
            || cause.is::<AnomalyError>()
            || cause.is::<BaselineError>()
            || cause.is::<CurveError>()
        {
            return Kind::Invalid;
        }
        if cause.is::<std::io::Error>() {
            return Kind::Io;
        }
    }
    Kind::General
}

/// Prints the error line and returns the exit code.
pub fn report(err: &anyhow::Error) -> ExitCode {
    let kind = classify(err);
    let message = format!("{err:#}");
    let line = json!({ "error": { "code": kind.code(), "kind": kind.name(), "message": message } });
    eprintln!("{line}");
    ExitCode::from(kind.code())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct() {
        let kinds = [
            Kind::General,
            Kind::Io,
            Kind::MissingColumn,
            Kind::Schema,
            Kind::Dimension,
            Kind::Invalid,
            Kind::Diverged,
        ];
        let mut codes: Vec<u8> = kinds.iter().map(|k| k.code()).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), kinds.len());
        assert!(!codes.contains(&2));
    }

    #[test]
    fn context_does_not_hide_the_cause() {
        let e = anyhow::Error::new(FormatError::MissingColumn { path: "x".into(), column: "ndvi".into() })
            .context("reading observations");
        assert_eq!(classify(&e), Kind::MissingColumn);
        let e = anyhow::Error::new(TrainError::Net(NetError::Dimension("w".into())));
        assert_eq!(classify(&e), Kind::Dimension);
        let e = anyhow::Error::new(CliError::Io("gone".into()));
        assert_eq!(classify(&e), Kind::Io);
    }
}
