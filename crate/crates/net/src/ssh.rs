//! Secure-shell executor for user-owned lab hosts.
//!
//! Each command runs on a fresh exec channel with no terminal and stdin closed,
//! so anything that waits for input runs into the timeout instead of hanging.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use privesc_core::config::SessionConfig;
use privesc_core::executor::{CommandExecutor, ExecError, ExecutionResult};
use russh::client;
use russh::keys::{HashAlg, PrivateKeyWithHashAlg, PublicKeyOrCertificate};
use russh::{ChannelMsg, Disconnect};
use tokio::runtime::Runtime;

use crate::credentials::{handle_scheme, resolve_credential, Secret};

pub const DEFAULT_SSH_PORT: u16 = 22;
pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(15);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostKeyPolicy {
    /// Trust on first use; the fingerprint goes to the log.
    AcceptAndLog,
    /// Only a host key with this `SHA256:...` fingerprint is accepted.
    Fingerprint(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SshTarget {
    pub host: String,
    pub port: u16,
    pub user: String,
    pub host_key: HostKeyPolicy,
}

impl SshTarget {
    /// `TARGET_HOST` may carry a `:port` suffix.
    pub fn from_config(config: &SessionConfig) -> Result<Self, ExecError> {
        let raw = config.target_host.trim();
        let (host, port) = match raw.rsplit_once(':') {
            Some((h, p)) if !h.contains(':') => {
                let port = p
                    .parse()
                    .map_err(|_| ExecError::Unreachable(format!("bad port in target host {raw:?}")))?;
                (h.to_string(), port)
            }
            _ => (raw.to_string(), DEFAULT_SSH_PORT),
        };
        if config.target_user.trim().is_empty() {
            return Err(ExecError::AuthFailure("TARGET_USER is not set".into()));
        }
        let host_key = match &config.host_key_fingerprint {
            Some(fp) => HostKeyPolicy::Fingerprint(fp.trim().to_string()),
            None => HostKeyPolicy::AcceptAndLog,
        };
        Ok(SshTarget {
            host,
            port,
            user: config.target_user.trim().to_string(),
            host_key,
        })
    }
}

struct ClientHandler {
    policy: HostKeyPolicy,
    seen: Arc<Mutex<Option<String>>>,
}

impl client::Handler for ClientHandler {
    type Error = russh::Error;

    async fn check_server_key(&mut self, key: &PublicKeyOrCertificate) -> Result<bool, Self::Error> {
        let fingerprint = match key {
            PublicKeyOrCertificate::PublicKey { key, .. } => key.fingerprint(HashAlg::Sha256).to_string(),
            PublicKeyOrCertificate::Certificate(c) => c.public_key().fingerprint(HashAlg::Sha256).to_string(),
        };
        *self.seen.lock().unwrap_or_else(|p| p.into_inner()) = Some(fingerprint.clone());
        match &self.policy {
            HostKeyPolicy::AcceptAndLog => {
                log::warn!("accepting unpinned host key {fingerprint}");
                Ok(true)
            }
            HostKeyPolicy::Fingerprint(want) => Ok(*want == fingerprint),
        }
    }
}

pub struct SshExecutor {
    runtime: Runtime,
    handle: client::Handle<ClientHandler>,
    target: SshTarget,
    host_fingerprint: String,
}

impl std::fmt::Debug for SshExecutor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SshExecutor").field("target", &self.target).finish_non_exhaustive()
    }
}

impl SshExecutor {
    pub fn connect(target: SshTarget, secret: &Secret, connect_timeout: Duration) -> Result<Self, ExecError> {
        let runtime = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .map_err(|e| ExecError::Unreachable(format!("cannot start runtime: {e}")))?;
        let seen = Arc::new(Mutex::new(None));
        let handler = ClientHandler {
            policy: target.host_key.clone(),
            seen: seen.clone(),
        };
        let config = Arc::new(client::Config {
            inactivity_timeout: None,
            ..Default::default()
        });
        let addr = (target.host.clone(), target.port);
        let handle = runtime.block_on(async {
            let mut handle = tokio::time::timeout(connect_timeout, client::connect(config, addr, handler))
                .await
                .map_err(|_| ExecError::Unreachable(format!("connect to {}:{} timed out", target.host, target.port)))?
                .map_err(|e| match e {
                    russh::Error::UnknownKey => ExecError::Unreachable("host key does not match the pinned fingerprint".into()),
                    other => ExecError::Unreachable(format!("{}:{}: {other}", target.host, target.port)),
                })?;
            let auth = match secret {
                Secret::Password(pw) => handle.authenticate_password(&target.user, pw).await,
                Secret::Key(key) => {
                    let hash = handle.best_supported_rsa_hash().await.map_err(auth_err)?.flatten();
                    handle
                        .authenticate_publickey(&target.user, PrivateKeyWithHashAlg::new(Arc::clone(key), hash))
                        .await
                }
            }
            .map_err(auth_err)?;
            if !auth.success() {
                return Err(ExecError::AuthFailure(format!("{}@{} rejected the credentials", target.user, target.host)));
            }
            Ok(handle)
        })?;
        let host_fingerprint = seen.lock().unwrap_or_else(|p| p.into_inner()).clone().unwrap_or_default();
        log::info!("connected to {}@{}:{}", target.user, target.host, target.port);
        Ok(SshExecutor {
            runtime,
            handle,
            target,
            host_fingerprint,
        })
    }

    /// Resolves the credential handle and connects.
    pub fn from_config(config: &SessionConfig) -> Result<Self, ExecError> {
        let target = SshTarget::from_config(config)?;
        let secret = resolve_credential(&config.credential_ref).map_err(|e| {
            ExecError::AuthFailure(format!("credential ({} scheme): {e}", handle_scheme(&config.credential_ref)))
        })?;
        Self::connect(target, &secret, CONNECT_TIMEOUT)
    }

    pub fn host_fingerprint(&self) -> &str {
        &self.host_fingerprint
    }

    pub fn target(&self) -> &SshTarget {
        &self.target
    }
}

fn auth_err(e: russh::Error) -> ExecError {
    ExecError::AuthFailure(e.to_string())
}

impl CommandExecutor for SshExecutor {
    fn run_command(&mut self, command: &str, timeout: Duration) -> Result<ExecutionResult, ExecError> {
        if command.trim().is_empty() {
            return Err(ExecError::EmptyCommand);
        }
        if self.handle.is_closed() {
            return Err(ExecError::ChannelBroken("session closed".into()));
        }
        let started = Instant::now();
        let handle = &self.handle;
        self.runtime.block_on(async {
            let mut channel = handle
                .channel_open_session()
                .await
                .map_err(|e| ExecError::ChannelBroken(e.to_string()))?;
            let collect = async {
                let broken = |e: russh::Error| ExecError::ChannelBroken(e.to_string());
                channel.exec(true, command).await.map_err(broken)?;
                channel.eof().await.map_err(broken)?;
                let mut stdout = Vec::new();
                let mut stderr = Vec::new();
                let mut exit_status = None;
                let mut closed = false;
                while let Some(msg) = channel.wait().await {
                    match msg {
                        ChannelMsg::Data { data } => stdout.extend_from_slice(&data),
                        ChannelMsg::ExtendedData { data, .. } => stderr.extend_from_slice(&data),
                        ChannelMsg::ExitStatus { exit_status: s } => exit_status = Some(s as i32),
                        ChannelMsg::ExitSignal { signal_name, .. } => {
                            stderr.extend_from_slice(format!("terminated by signal {signal_name:?}").as_bytes());
                        }
                        ChannelMsg::Close => {
                            closed = true;
                            break;
                        }
                        _ => {}
                    }
                }
                if !closed && exit_status.is_none() {
                    return Err(ExecError::ChannelBroken("connection lost while the command ran".into()));
                }
                Ok((stdout, stderr, exit_status))
            };
            match tokio::time::timeout(timeout, collect).await {
                Ok(Ok((stdout, stderr, exit_status))) => Ok(ExecutionResult {
                    stdout: String::from_utf8_lossy(&stdout).into_owned(),
                    stderr: String::from_utf8_lossy(&stderr).into_owned(),
                    exit_status,
                    timed_out: false,
                    duration_ms: started.elapsed().as_millis() as u64,
                }),
                Ok(Err(e)) => Err(e),
                Err(_) => {
                    let _ = channel.close().await;
                    Ok(ExecutionResult::timed_out(started.elapsed().as_millis() as u64))
                }
            }
        })
    }

    fn describe(&self) -> String {
        format!("ssh {}@{}:{}", self.target.user, self.target.host, self.target.port)
    }
}

impl Drop for SshExecutor {
    fn drop(&mut self) {
        let handle = &self.handle;
        let _ = self
            .runtime
            .block_on(async { handle.disconnect(Disconnect::ByApplication, "", "English").await });
    }
}
