//! Run configuration: a flat `KEY=value` file plus command-line flag overrides.

use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Optional prompt enhancements, one per command-line flag.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureFlags {
    pub cot: bool,
    pub hint: bool,
    pub rag: bool,
    pub rag_online: bool,
    pub ptt: bool,
}

impl FeatureFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rag_online && !self.rag {
            return Err(ConfigError::FlagConflict(
                "rag_online requires rag to be enabled".into(),
            ));
        }
        Ok(())
    }

    /// The flag spelling used on the command line, e.g. `--cot --hint`, or `No flags`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.cot {
            parts.push("--cot");
        }
        if self.hint {
            parts.push("--hint");
        }
        if self.rag {
            parts.push("--rag");
        }
        if self.rag_online {
            parts.push("--rag-online");
        }
        if self.ptt {
            parts.push("--ptt");
        }
        if parts.is_empty() {
            "No flags".to_string()
        } else {
            parts.join(" ")
        }
    }

    /// All 16 combinations of the four prompt-shaping flags (online retrieval off).
    pub fn all_combinations() -> Vec<FeatureFlags> {
        (0u8..16)
            .map(|bits| FeatureFlags {
                cot: bits & 1 != 0,
                hint: bits & 2 != 0,
                rag: bits & 4 != 0,
                rag_online: false,
                ptt: bits & 8 != 0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalMode {
    #[default]
    Interactive,
    AutoApprove,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RagQueryMode {
    #[default]
    LlmQuery,
    LastCommand,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    RemoteShell,
    #[default]
    Simulated,
}

/// An opaque handle naming where the target secret lives (`env:VAR`,
/// `password-file:/path`, `key:/path`). Never serialized, never printed.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct CredentialRef(String);

impl CredentialRef {
    pub fn new(handle: impl Into<String>) -> Self {
        CredentialRef(handle.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for CredentialRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CredentialRef(<redacted>)")
    }
}

pub const DEFAULT_HISTORY_CAP: usize = 15;
pub const DEFAULT_COMMAND_TIMEOUT_S: u64 = 30;
pub const DEFAULT_MAX_TURNS: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub target_host: String,
    pub target_user: String,
    #[serde(skip)]
    pub credential_ref: CredentialRef,
    pub model_id: String,
    pub max_turns: u32,
    pub flags: FeatureFlags,
    pub approval_mode: ApprovalMode,
    pub history_cap: usize,
    pub command_timeout_s: u64,
    pub rag_query_mode: RagQueryMode,
    pub executor_kind: ExecutorKind,
    /// Responder file for the simulated target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulated_spec: Option<PathBuf>,
    /// Markdown corpus for offline retrieval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rag_corpus: Option<PathBuf>,
    /// Extra model price table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates_file: Option<PathBuf>,
    /// Directory holding `base_prompt.txt` / `cot_exemplars.txt` overrides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    /// Parent of the `sessions/` tree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_root: Option<PathBuf>,
    /// Count a trailing `user@host#` prompt line as root evidence.
    #[serde(default)]
    pub hash_prompt_counts: bool,
    /// Pinned `SHA256:` fingerprint of the remote host key. Unset means the
    /// key is accepted and its fingerprint logged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host_key_fingerprint: Option<String>,
}

impl SessionConfig {
    /// A valid configuration against the simulated target, for tests and demos.
    pub fn simulated(model_id: &str, max_turns: u32, flags: FeatureFlags) -> Self {
        SessionConfig {
            target_host: "simulated".into(),
            target_user: String::new(),
            credential_ref: CredentialRef::default(),
            model_id: model_id.into(),
            max_turns,
            flags,
            approval_mode: ApprovalMode::AutoApprove,
            history_cap: DEFAULT_HISTORY_CAP,
            command_timeout_s: DEFAULT_COMMAND_TIMEOUT_S,
            rag_query_mode: RagQueryMode::LlmQuery,
            executor_kind: ExecutorKind::Simulated,
            simulated_spec: None,
            rag_corpus: None,
            rates_file: None,
            prompts_dir: None,
            log_root: None,
            hash_prompt_counts: false,
            host_key_fingerprint: None,
        }
    }

    pub fn command_timeout(&self) -> Duration {
        Duration::from_secs(self.command_timeout_s)
    }

    pub fn is_headless(&self) -> bool {
        self.approval_mode == ApprovalMode::AutoApprove
    }

    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut errors = Vec::new();
        if self.target_host.trim().is_empty() {
            errors.push(ConfigError::MissingKey("TARGET_HOST"));
        }
        if self.model_id.trim().is_empty() {
            errors.push(ConfigError::MissingKey("MODEL_ID"));
        }
        if self.max_turns == 0 {
            errors.push(ConfigError::InvalidValue {
                key: "MAX_TURNS",
                value: "0".into(),
                reason: "must be at least 1".into(),
            });
        }
        if self.history_cap == 0 {
            errors.push(ConfigError::InvalidValue {
                key: "HISTORY_CAP",
                value: "0".into(),
                reason: "must be at least 1".into(),
            });
        }
        if let Err(e) = self.flags.validate() {
            errors.push(e);
        }
        ConfigErrors::result(errors)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("missing required key {0}")]
    MissingKey(&'static str),
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue {
        key: &'static str,
        value: String,
        reason: String,
    },
    #[error("flag conflict: {0}")]
    FlagConflict(String),
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
}

/// Every problem found in one pass over the config.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl ConfigErrors {
    fn result(errors: Vec<ConfigError>) -> Result<(), ConfigErrors> {
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errors))
        }
    }

    pub fn contains(&self, pred: impl Fn(&ConfigError) -> bool) -> bool {
        self.0.iter().any(pred)
    }
}

/// Command-line overrides. `Some(true)` forces a flag on; `None` keeps the file value.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub cot: Option<bool>,
    pub hint: Option<bool>,
    pub rag: Option<bool>,
    pub rag_online: Option<bool>,
    pub ptt: Option<bool>,
    pub auto_approve: Option<bool>,
}

pub fn load_config(source: &str) -> Result<SessionConfig, ConfigErrors> {
    load_config_with(source, &ConfigOverrides::default())
}

pub fn load_config_with(
    source: &str,
    overrides: &ConfigOverrides,
) -> Result<SessionConfig, ConfigErrors> {
    let mut errors = Vec::new();
    let mut cfg = SessionConfig::simulated("", DEFAULT_MAX_TURNS, FeatureFlags::none());
    cfg.target_host.clear();
    cfg.approval_mode = ApprovalMode::Interactive;

    for (idx, raw_line) in source.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(ConfigError::Syntax {
                line: idx + 1,
                reason: format!("expected KEY=value, got {line:?}"),
            });
            continue;
        };
        let key = key.trim().to_ascii_uppercase();
        let value = unquote(value.trim());
        if let Err(e) = apply_key(&mut cfg, &key, value) {
            errors.push(e);
        }
    }

    let flag = |slot: &mut bool, o: Option<bool>| {
        if let Some(v) = o {
            *slot = v;
        }
    };
    flag(&mut cfg.flags.cot, overrides.cot);
    flag(&mut cfg.flags.hint, overrides.hint);
    flag(&mut cfg.flags.rag, overrides.rag);
    flag(&mut cfg.flags.rag_online, overrides.rag_online);
    flag(&mut cfg.flags.ptt, overrides.ptt);
    if overrides.auto_approve == Some(true) {
        cfg.approval_mode = ApprovalMode::AutoApprove;
    }

    if let Err(ConfigErrors(more)) = cfg.validate() {
        for e in more {
            // a bad MAX_TURNS string is already reported; skip the derived zero
            if !errors.contains(&e) && !duplicate_key_error(&errors, &e) {
                errors.push(e);
            }
        }
    }
    ConfigErrors::result(errors).map(|()| cfg)
}

fn duplicate_key_error(existing: &[ConfigError], e: &ConfigError) -> bool {
    let ConfigError::InvalidValue { key, .. } = e else {
        return false;
    };
    existing
        .iter()
        .any(|x| matches!(x, ConfigError::InvalidValue { key: k, .. } if k == key))
}

fn unquote(v: &str) -> &str {
    let b = v.as_bytes();
    if b.len() >= 2 && (b[0] == b'"' || b[0] == b'\'') && b[b.len() - 1] == b[0] {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

fn apply_key(cfg: &mut SessionConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    match key {
        "TARGET_HOST" => cfg.target_host = value.to_string(),
        "TARGET_USER" => cfg.target_user = value.to_string(),
        "CREDENTIAL_REF" => cfg.credential_ref = CredentialRef::new(value),
        "MODEL_ID" => cfg.model_id = value.to_string(),
        "MAX_TURNS" => cfg.max_turns = positive(key_name(key), value)?,
        "HISTORY_CAP" => cfg.history_cap = positive::<usize>(key_name(key), value)?,
        "COMMAND_TIMEOUT_S" => cfg.command_timeout_s = positive(key_name(key), value)?,
        "APPROVAL_MODE" => {
            cfg.approval_mode = match value.to_ascii_lowercase().as_str() {
                "interactive" => ApprovalMode::Interactive,
                "auto_approve" | "auto" => ApprovalMode::AutoApprove,
                _ => return Err(invalid("APPROVAL_MODE", value, "expected interactive|auto_approve")),
            }
        }
        "RAG_QUERY_MODE" => {
            cfg.rag_query_mode = match value.to_ascii_lowercase().as_str() {
                "llm_query" => RagQueryMode::LlmQuery,
                "last_command" => RagQueryMode::LastCommand,
                _ => return Err(invalid("RAG_QUERY_MODE", value, "expected llm_query|last_command")),
            }
        }
        "EXECUTOR" => {
            cfg.executor_kind = match value.to_ascii_lowercase().as_str() {
                "remote_shell" | "ssh" => ExecutorKind::RemoteShell,
                "simulated" => ExecutorKind::Simulated,
                _ => return Err(invalid("EXECUTOR", value, "expected remote_shell|simulated")),
            }
        }
        "COT" => cfg.flags.cot = boolean("COT", value)?,
        "HINT" => cfg.flags.hint = boolean("HINT", value)?,
        "RAG" => cfg.flags.rag = boolean("RAG", value)?,
        "RAG_ONLINE" => cfg.flags.rag_online = boolean("RAG_ONLINE", value)?,
        "PTT" => cfg.flags.ptt = boolean("PTT", value)?,
        "HASH_PROMPT_ROOT" => cfg.hash_prompt_counts = boolean("HASH_PROMPT_ROOT", value)?,
        "SIMULATED_SPEC" => cfg.simulated_spec = Some(PathBuf::from(value)),
        "RAG_CORPUS" => cfg.rag_corpus = Some(PathBuf::from(value)),
        "RATES_FILE" => cfg.rates_file = Some(PathBuf::from(value)),
        "PROMPTS_DIR" => cfg.prompts_dir = Some(PathBuf::from(value)),
        "LOG_ROOT" => cfg.log_root = Some(PathBuf::from(value)),
        "HOST_KEY_FINGERPRINT" => cfg.host_key_fingerprint = Some(value.to_string()),
        other => return Err(ConfigError::UnknownKey(other.to_string())),
    }
    Ok(())
}

fn key_name(key: &str) -> &'static str {
    match key {
        "MAX_TURNS" => "MAX_TURNS",
        "HISTORY_CAP" => "HISTORY_CAP",
        _ => "COMMAND_TIMEOUT_S",
    }
}

fn invalid(key: &'static str, value: &str, reason: &str) -> ConfigError {
    ConfigError::InvalidValue {
        key,
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn positive<T>(key: &'static str, value: &str) -> Result<T, ConfigError>
where
    T: std::str::FromStr + PartialOrd + Default,
{
    match value.parse::<T>() {
        Ok(v) if v > T::default() => Ok(v),
        Ok(_) => Err(invalid(key, value, "must be at least 1")),
        Err(_) => Err(invalid(key, value, "expected a positive integer")),
    }
}

fn boolean(key: &'static str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(invalid(key, value, "expected true|false")),
    }
}
