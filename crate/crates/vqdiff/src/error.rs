use std::path::PathBuf;

use thiserror::Error;

use crate::midi::MidiError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] vqdiff_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Midi {
        path: PathBuf,
        #[source]
        source: MidiError,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no parsable MIDI files under {path}:\n{details}")]
    NothingParsed { path: PathBuf, details: String },
    #[error("missing {stage} output {path}; run `{stage}` first")]
    MissingStage { stage: &'static str, path: PathBuf },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// 2 for usage and configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Core(vqdiff_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}
