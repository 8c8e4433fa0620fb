//! File-based adapter for external simulators.
//!
//! Each run gets a private temporary directory. The parameter vector is written
//! as `name,value` CSV, the command template is expanded with the parameter
//! and output paths and run through `sh -c`, and the output time series is read
//! back and checked against the expected grid.

use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SimulatorError};
use crate::series::TimeSeries;

use super::Simulator;

pub const PARAMS_PLACEHOLDER: &str = "{params}";
pub const OUTPUT_PLACEHOLDER: &str = "{output}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSimulatorSpec {
    /// Shell command containing `{params}` and `{output}` exactly once each.
    pub command: String,
    #[serde(default)]
    pub working_dir: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_timeout() -> f64 {
    600.0
}

fn shell_quote(path: &Path) -> String {
    format!("'{}'", path.display().to_string().replace('\'', r"'\''"))
}

impl ExternalSimulatorSpec {
    pub fn validate(&self) -> Result<()> {
        for p in [PARAMS_PLACEHOLDER, OUTPUT_PLACEHOLDER] {
            let count = self.command.matches(p).count();
            if count != 1 {
                return Err(Error::invalid(format!(
                    "simulator command must contain {p} exactly once, found {count}"
                )));
            }
        }
        if !(self.timeout_s > 0.0) {
            return Err(Error::invalid("simulator timeout must be positive"));
        }
        Ok(())
    }
}

/// An external simulator bound to parameter names and an output grid.
#[derive(Debug, Clone)]
pub struct ExternalSimulator {
    spec: ExternalSimulatorSpec,
    names: Vec<String>,
    grid: TimeSeries,
}

impl ExternalSimulator {
    /// `grid` supplies the expected start, step and length of every output.
    pub fn new(spec: ExternalSimulatorSpec, names: Vec<String>, grid: TimeSeries) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, names, grid })
    }
}

fn failed(message: impl Into<String>) -> SimulatorError {
    SimulatorError::Failed {
        message: message.into(),
        output: String::new(),
    }
}

fn drain(mut pipe: impl Read + Send + 'static) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

fn kill_group(pid: u32) {
    let _ = Command::new("kill")
        .args(["-s", "KILL", "--"])
        .arg(format!("-{pid}"))
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status();
}

/// Run the external simulator once.
pub fn run_external(
    spec: &ExternalSimulatorSpec,
    names: &[String],
    theta: &[f64],
    grid: &TimeSeries,
) -> std::result::Result<TimeSeries, SimulatorError> {
    spec.validate().map_err(|e| SimulatorError::Protocol(e.to_string()))?;
    if names.len() != theta.len() {
        return Err(SimulatorError::Protocol(format!(
            "{} parameter names for {} values",
            names.len(),
            theta.len()
        )));
    }
    let dir = tempfile::tempdir().map_err(|e| failed(format!("cannot create run directory: {e}")))?;
    let params = dir.path().join("params.csv");
    let output = dir.path().join("output.csv");
    let mut text = String::from("name,value\n");
    for (n, v) in names.iter().zip(theta) {
        text.push_str(&format!("{n},{v}\n"));
    }
    std::fs::write(&params, text).map_err(|e| failed(format!("cannot write parameter file: {e}")))?;

    let command = spec
        .command
        .replace(PARAMS_PLACEHOLDER, &shell_quote(&params))
        .replace(OUTPUT_PLACEHOLDER, &shell_quote(&output));
    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(&command)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    cmd.current_dir(spec.working_dir.as_deref().unwrap_or(dir.path()));
    // own process group, so a timeout also reaches grandchildren holding the pipes
    cmd.process_group(0);
    let mut child = cmd
        .spawn()
        .map_err(|e| failed(format!("cannot start `{command}`: {e}")))?;
    let stdout = drain(child.stdout.take().expect("piped stdout"));
    let stderr = drain(child.stderr.take().expect("piped stderr"));

    let deadline = Instant::now() + Duration::from_secs_f64(spec.timeout_s);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if Instant::now() >= deadline => {
                kill_group(child.id());
                let _ = child.kill();
                let _ = child.wait();
                break None;
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(failed(format!("waiting for simulator: {e}"))),
        }
    };
    let captured = format!(
        "{}{}",
        stdout.join().unwrap_or_default(),
        stderr.join().unwrap_or_default()
    );
    let Some(status) = status else {
        return Err(SimulatorError::Timeout {
            seconds: spec.timeout_s,
            output: captured,
        });
    };
    if !status.success() {
        return Err(SimulatorError::Failed {
            message: format!("`{command}` exited with {status}"),
            output: captured,
        });
    }
    let text = std::fs::read_to_string(&output)
        .map_err(|e| SimulatorError::Protocol(format!("cannot read simulator output: {e}")))?;
    let series =
        TimeSeries::from_csv_str(&text).map_err(|e| SimulatorError::Protocol(format!("simulator output: {e}")))?;
    if series.len() != grid.len() {
        return Err(SimulatorError::Protocol(format!(
            "simulator output has {} rows, expected {}",
            series.len(),
            grid.len()
        )));
    }
    if !series.same_grid(grid) {
        return Err(SimulatorError::Protocol(format!(
            "simulator output grid (start {}, step {}) differs from expected (start {}, step {})",
            series.start(),
            series.step(),
            grid.start(),
            grid.step()
        )));
    }
    Ok(series)
}

impl Simulator for ExternalSimulator {
    fn simulate(&self, theta: &[f64]) -> std::result::Result<TimeSeries, SimulatorError> {
        run_external(&self.spec, &self.names, theta, &self.grid)
    }
}
