use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Where in an input document a parse failure was detected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Byte(usize),
    Line(usize),
    Unknown,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Byte(offset) => write!(f, "byte {offset}"),
            Location::Line(line) => write!(f, "line {line}"),
            Location::Unknown => f.write_str("unknown position"),
        }
    }
}

/// A 16-bit partial sum left the representable range during integer convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverflowReport {
    /// Model layer index, filled in once the error crosses a layer boundary.
    pub layer: Option<usize>,
    pub channel: usize,
    pub y: usize,
    pub x: usize,
    /// The out-of-range partial sum.
    pub partial: i64,
    pub bound: (i64, i64),
}

impl fmt::Display for OverflowReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(layer) => write!(f, "layer {layer}, ")?,
            None => f.write_str("unknown layer, ")?,
        }
        write!(
            f,
            "output (c={}, y={}, x={}): partial sum {} outside [{}, {}]",
            self.channel, self.y, self.x, self.partial, self.bound.0, self.bound.1
        )
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes or an invalid model description.
    #[error("configuration error: {0}")]
    Config(String),

    /// Out-of-range quantization parameter (scale, bit width, search setting).
    #[error("parameter error: {0}")]
    Param(String),

    /// Bad input values, e.g. NaN, or an unusable calibration set.
    #[error("data error: {0}")]
    Data(String),

    #[error("accumulator overflow at {0}")]
    Overflow(OverflowReport),

    #[error("parse error in {}: {location}: {message}", path.display())]
    Parse {
        path: PathBuf,
        location: Location,
        message: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a layer index to an overflow report that does not carry one yet.
    pub fn at_layer(self, layer: usize) -> Self {
        match self {
            Error::Overflow(mut report) if report.layer.is_none() => {
                report.layer = Some(layer);
                Error::Overflow(report)
            }
            other => other,
        }
    }
}
