//! Command implementations behind the `mechemu` binary.

pub mod commands;
pub mod config;
pub mod report;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mechemu_core::{Error, SimulatorError};

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("simulator failure: {0}")]
    Simulator(#[from] SimulatorError),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Simulator(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Simulator(s) => CliError::Simulator(s),
            Error::Numerical(_) | Error::EstimationFailed { .. } => CliError::Numerical(e.to_string()),
            Error::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Exclusive lock on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub const FILE: &'static str = ".mechemu.lock";

    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(Self::FILE);
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    CliError::Config(format!(
                        "run directory {} is locked by another process (remove {} if stale)",
                        dir.display(),
                        path.display()
                    ))
                } else {
                    io_err(&path, e)
                }
            })?;
        let _ = writeln!(file, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::from(Error::InvalidArgument("x".into())).exit_code(), 2);
        assert_eq!(
            CliError::from(Error::Simulator(SimulatorError::Unstable("x".into()))).exit_code(),
            3
        );
        assert_eq!(CliError::from(Error::Numerical("x".into())).exit_code(), 4);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(CliError::Config(_))));
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }
}
