use std::fmt;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_PARTIAL: u8 = 4;

/// A failure carrying its exit status and the stage it happened in.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError { code: EXIT_INPUT, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError { code: EXIT_NUMERIC, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Tags a library error with the stage name and the matching exit status.
pub trait Stage<T> {
    fn input(self, stage: &str) -> CliResult<T>;
    fn numeric(self, stage: &str) -> CliResult<T>;
}

impl<T, E: fmt::Display> Stage<T> for Result<T, E> {
    fn input(self, stage: &str) -> CliResult<T> {
        self.map_err(|e| CliError::input(format!("{stage}: {e}")))
    }

    fn numeric(self, stage: &str) -> CliResult<T> {
        self.map_err(|e| CliError::numeric(format!("{stage}: {e}")))
    }
}
