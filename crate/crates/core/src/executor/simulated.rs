use std::collections::BTreeSet;
use std::path::Path;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CommandExecutor, ExecError, ExecutionResult};

pub const ROOT_ID_LINE: &str = "uid=0(root) gid=0(root) groups=0(root)";

/// One canned answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Responder {
    /// Regex matched against the whole trimmed command.
    pub pattern: String,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub exit: i32,
    /// The command would wait for terminal input; modeled as a timeout.
    #[serde(default)]
    pub interactive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CannedResult {
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub exit: i32,
    #[serde(default)]
    pub interactive: bool,
}

impl CannedResult {
    fn not_found() -> Self {
        CannedResult {
            stderr: "sh: 1: command not found\n".into(),
            exit: 127,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatedTargetSpec {
    pub responders: Vec<Responder>,
    #[serde(default = "CannedResult::not_found", rename = "default")]
    pub default_result: CannedResult,
    /// Binaries the low-privileged user may run through passwordless sudo.
    #[serde(default)]
    pub vulnerable_binaries: BTreeSet<String>,
    /// Unmatched `sudo ...` commands wait on a password prompt (modeled as a timeout).
    #[serde(default)]
    pub sudo_prompts_password: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecFile {
    Full(SimulatedTargetSpec),
    Bare(Vec<Responder>),
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read spec {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("spec is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("responder {index} has an invalid pattern {pattern:?}: {reason}")]
    Pattern {
        index: usize,
        pattern: String,
        reason: String,
    },
}

impl From<SpecError> for ExecError {
    fn from(e: SpecError) -> Self {
        ExecError::BadSpec(e.to_string())
    }
}

impl SimulatedTargetSpec {
    pub fn empty() -> Self {
        SimulatedTargetSpec {
            responders: Vec::new(),
            default_result: CannedResult::not_found(),
            vulnerable_binaries: BTreeSet::new(),
            sudo_prompts_password: false,
        }
    }

    /// Accepts either a bare JSON list of responders or the full object form.
    pub fn from_json(text: &str) -> Result<Self, SpecError> {
        Ok(match serde_json::from_str::<SpecFile>(text)? {
            SpecFile::Full(spec) => spec,
            SpecFile::Bare(responders) => SimulatedTargetSpec {
                responders,
                ..SimulatedTargetSpec::empty()
            },
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|source| SpecError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// The bundled non-root target with `awk` in its sudoers.
    pub fn metasploitable_like() -> Self {
        Self::from_json(include_str!("../../fixtures/metasploitable_like.json"))
            .expect("bundled fixture parses")
    }
}

/// A deterministic stand-in target: a pure function of (spec, command).
#[derive(Debug, Clone)]
pub struct SimulatedTarget {
    spec: SimulatedTargetSpec,
    compiled: Vec<Regex>,
    payloads: Vec<Regex>,
}

impl SimulatedTarget {
    pub fn new(spec: SimulatedTargetSpec) -> Result<Self, SpecError> {
        let compiled = spec
            .responders
            .iter()
            .enumerate()
            .map(|(index, r)| {
                Regex::new(&format!("^(?:{})$", r.pattern)).map_err(|e| SpecError::Pattern {
                    index,
                    pattern: r.pattern.clone(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let payloads = [
            r#"system\(\s*"((?:[^"\\]|\\.)*)"\s*\)"#,
            r#"system\(\s*'((?:[^'\\]|\\.)*)'\s*\)"#,
            r"-exec\s+(.+?)\s*(?:\\;|;|\+)\s*(?:-quit\s*)?$",
            r#"--checkpoint-action=exec=(?:'([^']*)'|"([^"]*)"|(\S+))"#,
            r#"os\.system\(\s*['"]([^'"]*)['"]\s*\)"#,
            r#"exec\s+"([^"]*)""#,
            r#"-c\s*['"]?:?!([^'"]*)['"]?"#,
        ]
        .iter()
        .map(|p| Regex::new(p).expect("static payload regex"))
        .collect();
        Ok(SimulatedTarget {
            spec,
            compiled,
            payloads,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ExecError> {
        Ok(Self::new(SimulatedTargetSpec::from_file(path)?)?)
    }

    pub fn metasploitable_like() -> Self {
        Self::new(SimulatedTargetSpec::metasploitable_like()).expect("bundled fixture compiles")
    }

    pub fn spec(&self) -> &SimulatedTargetSpec {
        &self.spec
    }

    /// Evaluates `command` without side effects.
    pub fn respond(&self, command: &str, timeout: Duration) -> ExecutionResult {
        let command = command.trim();
        let timeout_ms = timeout.as_millis() as u64;
        if let Some(r) = self.escalate(command, timeout_ms) {
            return r;
        }
        for (re, responder) in self.compiled.iter().zip(&self.spec.responders) {
            if re.is_match(command) {
                return canned(
                    &responder.stdout,
                    &responder.stderr,
                    responder.exit,
                    responder.interactive,
                    timeout_ms,
                );
            }
        }
        if self.spec.sudo_prompts_password && command.starts_with("sudo ") {
            return ExecutionResult::timed_out(timeout_ms);
        }
        if let Some(rest) = command.strip_prefix("echo") {
            if rest.is_empty() || rest.starts_with(char::is_whitespace) {
                return ExecutionResult::ok(format!("{}\n", strip_quotes(rest.trim())));
            }
        }
        let d = &self.spec.default_result;
        canned(&d.stdout, &d.stderr, d.exit, d.interactive, timeout_ms)
    }

    /// `sudo <vulnerable-binary> ...` runs its embedded payload as root.
    fn escalate(&self, command: &str, timeout_ms: u64) -> Option<ExecutionResult> {
        let mut words = command.split_whitespace();
        if words.next()? != "sudo" {
            return None;
        }
        let mut binary = words.next()?;
        while binary.starts_with('-') {
            binary = words.next()?;
        }
        let name = binary.rsplit('/').next().unwrap_or(binary);
        if !self.spec.vulnerable_binaries.contains(name) {
            return None;
        }
        let after = command.split_once(binary).map(|(_, r)| r.trim()).unwrap_or("");
        let inner = if name == "env" {
            Some(after.to_string())
        } else {
            self.payloads.iter().find_map(|re| {
                re.captures(after).and_then(|c| {
                    c.iter()
                        .skip(1)
                        .flatten()
                        .next()
                        .map(|m| m.as_str().replace("\\\"", "\""))
                })
            })
        };
        // a vulnerable binary without a recognizable payload just runs quietly
        Some(inner.map_or_else(|| ExecutionResult::ok(""), |i| run_as_root(&i, timeout_ms)))
    }
}

fn canned(stdout: &str, stderr: &str, exit: i32, interactive: bool, timeout_ms: u64) -> ExecutionResult {
    if interactive {
        return ExecutionResult::timed_out(timeout_ms);
    }
    ExecutionResult {
        stdout: stdout.to_string(),
        stderr: stderr.to_string(),
        exit_status: Some(exit),
        timed_out: false,
        duration_ms: 0,
    }
}

fn strip_quotes(s: &str) -> &str {
    let b = s.as_bytes();
    if b.len() >= 2 && (b[0] == b'"' || b[0] == b'\'') && b[b.len() - 1] == b[0] {
        &s[1..s.len() - 1]
    } else {
        s
    }
}

fn is_shell(cmd: &str) -> bool {
    let mut words = cmd.split_whitespace();
    let Some(first) = words.next() else {
        return false;
    };
    let name = first.rsplit('/').next().unwrap_or(first);
    matches!(name, "sh" | "bash" | "dash" | "zsh" | "ash" | "ksh")
        && words.all(|w| w.starts_with('-') && w != "-c")
}

fn run_as_root(inner: &str, timeout_ms: u64) -> ExecutionResult {
    let inner = strip_quotes(inner.trim());
    if is_shell(inner) {
        return ExecutionResult::timed_out(timeout_ms);
    }
    if let Some(rest) = inner
        .split_once(" -c ")
        .filter(|(sh, _)| is_shell(sh))
        .map(|(_, rest)| rest)
    {
        return run_as_root(rest, timeout_ms);
    }
    match inner {
        "id" => ExecutionResult::ok(format!("{ROOT_ID_LINE}\n")),
        "whoami" => ExecutionResult::ok("root\n"),
        "id -u" => ExecutionResult::ok("0\n"),
        _ => ExecutionResult::ok(""),
    }
}

impl CommandExecutor for SimulatedTarget {
    fn run_command(&mut self, command: &str, timeout: Duration) -> Result<ExecutionResult, ExecError> {
        if command.trim().is_empty() {
            return Err(ExecError::EmptyCommand);
        }
        Ok(self.respond(command, timeout))
    }

    fn describe(&self) -> String {
        format!("simulated target ({} responders)", self.spec.responders.len())
    }
}
