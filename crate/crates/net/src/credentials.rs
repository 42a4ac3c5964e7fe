//! Resolution of credential handles. A handle names where a secret lives; the
//! secret itself never enters configuration files or logs.
//!
//! Handles: `env:VAR` (password in an environment variable),
//! `password-file:/path` (first line of a file) and `key:/path` (OpenSSH
//! private key, unencrypted).

use std::path::PathBuf;
use std::sync::Arc;

use privesc_core::config::CredentialRef;
use russh::keys::PrivateKey;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CredentialError {
    #[error("credential handle is empty")]
    Empty,
    #[error("unknown credential handle scheme in {0:?}; expected env:, password-file: or key:")]
    UnknownScheme(String),
    #[error("credential handle has no scheme; expected env:, password-file: or key:")]
    NoScheme,
    #[error("environment variable {0} is not set")]
    MissingEnv(String),
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("{0} is not a usable private key")]
    BadKey(PathBuf),
}

pub enum Secret {
    Password(String),
    Key(Arc<PrivateKey>),
}

impl std::fmt::Debug for Secret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Secret::Password(_) => f.write_str("Secret::Password(<redacted>)"),
            Secret::Key(_) => f.write_str("Secret::Key(<redacted>)"),
        }
    }
}

/// The scheme part of a handle, safe to log.
pub fn handle_scheme(credential: &CredentialRef) -> &str {
    credential.expose().split_once(':').map(|(s, _)| s).unwrap_or("")
}

pub fn resolve_credential(credential: &CredentialRef) -> Result<Secret, CredentialError> {
    let handle = credential.expose().trim();
    if handle.is_empty() {
        return Err(CredentialError::Empty);
    }
    let (scheme, rest) = handle
        .split_once(':')
        .ok_or(CredentialError::NoScheme)?;
    match scheme {
        "env" => std::env::var(rest)
            .map(Secret::Password)
            .map_err(|_| CredentialError::MissingEnv(rest.to_string())),
        "password-file" => {
            let path = PathBuf::from(rest);
            let text = std::fs::read_to_string(&path).map_err(|e| CredentialError::Unreadable {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            Ok(Secret::Password(text.lines().next().unwrap_or("").to_string()))
        }
        "key" => {
            let path = PathBuf::from(rest);
            if !path.exists() {
                return Err(CredentialError::Unreadable {
                    path,
                    reason: "no such file".into(),
                });
            }
            russh::keys::load_secret_key(&path, None)
                .map(|k| Secret::Key(Arc::new(k)))
                .map_err(|_| CredentialError::BadKey(path))
        }
        other => Err(CredentialError::UnknownScheme(other.to_string())),
    }
}
