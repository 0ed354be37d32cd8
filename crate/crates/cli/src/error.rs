use std::fmt;

use icm_core::Error;

/// Exit statuses are part of the scripting contract.
pub const EXIT_IO: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_CORRUPT: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    /// Flag combinations clap cannot express.
    Usage(String),
    Core(Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e {
                Error::Shape { .. }
                | Error::Contract(_)
                | Error::Structure(_)
                | Error::Validation(_) => EXIT_USAGE,
                Error::Numeric(_) => EXIT_NUMERIC,
                Error::Parse { .. } | Error::Format(_) | Error::Decode { .. } => EXIT_CORRUPT,
                Error::Io { .. } => EXIT_IO,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let c = |e: Error| CliError::from(e).exit_code();
        assert_eq!(c(Error::Contract("x".into())), 2);
        assert_eq!(c(Error::Numeric("x".into())), 3);
        assert_eq!(c(Error::Format("x".into())), 4);
        assert_eq!(c(Error::Parse { offset: 0, msg: "x".into() }), 4);
        assert_eq!(c(Error::Decode { symbol_index: 3, msg: "x".into() }), 4);
        assert_eq!(CliError::usage("x").exit_code(), 2);
    }
}
