//! Command execution on the target.
//!
//! Backends implement [`CommandExecutor`]. The simulated backend lives here; the
//! secure-shell backend lives in the `privesc-net` crate behind the same trait.

mod simulated;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use simulated::{Responder, SimulatedTarget, SimulatedTargetSpec, SpecError, ROOT_ID_LINE};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub stdout: String,
    pub stderr: String,
    /// Absent when the command timed out.
    pub exit_status: Option<i32>,
    pub timed_out: bool,
    pub duration_ms: u64,
}

impl ExecutionResult {
    pub fn ok(stdout: impl Into<String>) -> Self {
        ExecutionResult {
            stdout: stdout.into(),
            exit_status: Some(0),
            ..Default::default()
        }
    }

    pub fn timed_out(duration_ms: u64) -> Self {
        ExecutionResult {
            timed_out: true,
            duration_ms,
            ..Default::default()
        }
    }

    pub fn succeeded(&self) -> bool {
        !self.timed_out && self.exit_status == Some(0)
    }

    /// stdout and stderr joined by a newline, the text inspected for root evidence.
    pub fn combined_output(&self) -> String {
        match (self.stdout.is_empty(), self.stderr.is_empty()) {
            (_, true) => self.stdout.clone(),
            (true, false) => self.stderr.clone(),
            (false, false) => format!("{}\n{}", self.stdout, self.stderr),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("authentication to the target failed: {0}")]
    AuthFailure(String),
    #[error("target unreachable: {0}")]
    Unreachable(String),
    #[error("bad simulated target spec: {0}")]
    BadSpec(String),
    #[error("command channel broken: {0}")]
    ChannelBroken(String),
    #[error("empty command")]
    EmptyCommand,
}

/// One in-flight command at a time; implementations never allocate a terminal.
pub trait CommandExecutor: Send {
    fn run_command(&mut self, command: &str, timeout: Duration) -> Result<ExecutionResult, ExecError>;

    /// Short backend description for logs.
    fn describe(&self) -> String;
}

impl<T: CommandExecutor + ?Sized> CommandExecutor for Box<T> {
    fn run_command(&mut self, command: &str, timeout: Duration) -> Result<ExecutionResult, ExecError> {
        (**self).run_command(command, timeout)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// The probe commands run before the first prompt, in execution order.
pub const RECON_COMMANDS: [&str; 18] = [
    "whoami",
    "id",
    "hostname",
    "uname -a",
    "cat /etc/os-release",
    "uptime",
    "df -h",
    "free -m",
    "ps aux --sort=-%mem | head -n 10",
    "ss -tulnp",
    "ls -la /home",
    "sudo -l",
    "cat /etc/passwd",
    "cat /etc/group",
    "env",
    "ls -la /tmp",
    "ls -la /var/tmp",
    "find / -perm -4000 -type f 2>/dev/null",
];

pub type ReconPair = (String, ExecutionResult);

/// Runs every probe in order. Only a broken channel aborts; other failures are
/// recorded in the result's stderr.
pub fn run_recon_suite(
    executor: &mut dyn CommandExecutor,
    timeout: Duration,
) -> Result<Vec<ReconPair>, ExecError> {
    let mut pairs = Vec::with_capacity(RECON_COMMANDS.len());
    for cmd in RECON_COMMANDS {
        let result = match executor.run_command(cmd, timeout) {
            Ok(r) => r,
            Err(ExecError::ChannelBroken(why)) => return Err(ExecError::ChannelBroken(why)),
            Err(other) => ExecutionResult {
                stderr: other.to_string(),
                exit_status: None,
                ..Default::default()
            },
        };
        pairs.push((cmd.to_string(), result));
    }
    Ok(pairs)
}
