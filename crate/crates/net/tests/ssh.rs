//! The secure-shell executor against an in-process lab server.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use privesc_core::config::{CredentialRef, ExecutorKind};
use privesc_core::executor::{run_recon_suite, CommandExecutor, ExecError, RECON_COMMANDS};
use privesc_core::{FeatureFlags, SessionConfig};
use privesc_net::credentials::{resolve_credential, CredentialError, Secret};
use privesc_net::ssh::{HostKeyPolicy, SshExecutor, SshTarget};
use russh::keys::{HashAlg, PublicKey};
use russh::server::{self, Auth, Msg, Server as _, Session};
use russh::{Channel, ChannelId};

const USER: &str = "naif";
const PASSWORD: &str = "lab-only";

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[derive(Clone, Default)]
struct Journal(Arc<Mutex<Vec<String>>>);

impl Journal {
    fn push(&self, s: impl Into<String>) {
        self.0.lock().unwrap().push(s.into());
    }

    fn entries(&self) -> Vec<String> {
        self.0.lock().unwrap().clone()
    }
}

#[derive(Clone)]
struct LabServer {
    journal: Journal,
    client_key: PublicKey,
}

impl server::Server for LabServer {
    type Handler = LabServer;

    fn new_client(&mut self, _: Option<std::net::SocketAddr>) -> LabServer {
        self.clone()
    }
}

impl server::Handler for LabServer {
    type Error = russh::Error;

    async fn auth_password(&mut self, user: &str, password: &str) -> Result<Auth, Self::Error> {
        Ok(if user == USER && password == PASSWORD {
            Auth::Accept
        } else {
            Auth::reject()
        })
    }

    async fn auth_publickey(&mut self, user: &str, key: &PublicKey) -> Result<Auth, Self::Error> {
        Ok(if user == USER && key.key_data() == self.client_key.key_data() {
            Auth::Accept
        } else {
            Auth::reject()
        })
    }

    async fn channel_open_session(
        &mut self,
        _channel: Channel<Msg>,
        reply: server::ChannelOpenHandle,
        _session: &mut Session,
    ) -> Result<(), Self::Error> {
        reply.accept().await;
        Ok(())
    }

    async fn pty_request(
        &mut self,
        channel: ChannelId,
        _term: &str,
        _col_width: u32,
        _row_height: u32,
        _pix_width: u32,
        _pix_height: u32,
        _modes: &[(russh::Pty, u32)],
        session: &mut Session,
    ) -> Result<(), Self::Error> {
        self.journal.push("pty");
        session.channel_failure(channel)
    }

    async fn exec_request(&mut self, channel: ChannelId, data: &[u8], session: &mut Session) -> Result<(), Self::Error> {
        let cmd = String::from_utf8_lossy(data).into_owned();
        self.journal.push(format!("exec {cmd}"));
        session.channel_success(channel)?;
        let finish = |session: &mut Session, out: &str, err: &str, code: u32| -> Result<(), russh::Error> {
            if !out.is_empty() {
                session.data(channel, out.as_bytes().to_vec())?;
            }
            if !err.is_empty() {
                session.extended_data(channel, 1, err.as_bytes().to_vec())?;
            }
            session.exit_status_request(channel, code)?;
            session.eof(channel)?;
            session.close(channel)
        };
        match cmd.as_str() {
            "whoami" => finish(session, "naif\n", "", 0),
            "id" => finish(session, "uid=1000(naif) gid=1000(naif) groups=1000(naif)\n", "", 0),
            "cat /nope" => finish(session, "", "cat: /nope: No such file or directory\n", 1),
            "drop-connection" => Err(russh::Error::Disconnect),
            c if c.starts_with("sleep") || c.starts_with("sudo awk") => Ok(()),
            _ => finish(session, "", "", 0),
        }
    }
}

struct Lab {
    port: u16,
    journal: Journal,
    host_fingerprint: String,
}

fn start_lab() -> Lab {
    let host_key = russh::keys::load_secret_key(fixture("host_ed25519"), None).unwrap();
    let host_fingerprint = host_key.public_key().fingerprint(HashAlg::Sha256).to_string();
    let client_key = russh::keys::load_secret_key(fixture("client_ed25519"), None)
        .unwrap()
        .public_key()
        .clone();
    let journal = Journal::default();
    let mut lab = LabServer {
        journal: journal.clone(),
        client_key,
    };
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap().port()).unwrap();
            let config = Arc::new(server::Config {
                keys: vec![host_key],
                auth_rejection_time: Duration::from_millis(10),
                auth_rejection_time_initial: Some(Duration::ZERO),
                inactivity_timeout: None,
                ..Default::default()
            });
            let _ = lab.run_on_socket(config, &listener).await;
        });
    });
    Lab {
        port: rx.recv().unwrap(),
        journal,
        host_fingerprint,
    }
}

fn target(lab: &Lab, policy: HostKeyPolicy) -> SshTarget {
    SshTarget {
        host: "127.0.0.1".into(),
        port: lab.port,
        user: USER.into(),
        host_key: policy,
    }
}

fn password() -> Secret {
    Secret::Password(PASSWORD.into())
}

fn connect(lab: &Lab) -> SshExecutor {
    SshExecutor::connect(target(lab, HostKeyPolicy::AcceptAndLog), &password(), Duration::from_secs(5)).unwrap()
}

#[test]
fn password_login_runs_commands_without_a_terminal() {
    let lab = start_lab();
    let mut ex = connect(&lab);
    assert_eq!(ex.host_fingerprint(), lab.host_fingerprint);
    let r = ex.run_command("whoami", Duration::from_secs(5)).unwrap();
    assert_eq!(r.stdout, "naif\n");
    assert_eq!(r.exit_status, Some(0));
    assert!(!r.timed_out);

    let r = ex.run_command("cat /nope", Duration::from_secs(5)).unwrap();
    assert_eq!(r.exit_status, Some(1));
    assert!(r.stderr.contains("No such file"));
    assert!(!r.succeeded());

    let journal = lab.journal.entries();
    assert!(!journal.iter().any(|e| e == "pty"), "{journal:?}");
    assert_eq!(journal, ["exec whoami", "exec cat /nope"]);
    assert!(ex.describe().contains("naif@127.0.0.1"));
}

#[test]
fn wrong_password_is_an_auth_failure() {
    let lab = start_lab();
    let err = SshExecutor::connect(
        target(&lab, HostKeyPolicy::AcceptAndLog),
        &Secret::Password("guess".into()),
        Duration::from_secs(5),
    )
    .unwrap_err();
    assert!(matches!(err, ExecError::AuthFailure(_)), "{err:?}");
    assert!(!err.to_string().contains("guess"));
}

#[test]
fn key_login_is_accepted() {
    let lab = start_lab();
    let Secret::Key(key) = resolve_credential(&CredentialRef::new(format!("key:{}", fixture("client_ed25519").display()))).unwrap()
    else {
        panic!("expected a key secret");
    };
    let mut ex = SshExecutor::connect(target(&lab, HostKeyPolicy::AcceptAndLog), &Secret::Key(key), Duration::from_secs(5)).unwrap();
    assert_eq!(ex.run_command("id", Duration::from_secs(5)).unwrap().stdout, "uid=1000(naif) gid=1000(naif) groups=1000(naif)\n");
}

#[test]
fn pinned_host_key_must_match() {
    let lab = start_lab();
    let good = HostKeyPolicy::Fingerprint(lab.host_fingerprint.clone());
    SshExecutor::connect(target(&lab, good), &password(), Duration::from_secs(5)).unwrap();

    let bad = HostKeyPolicy::Fingerprint("SHA256:AAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAA".into());
    let err = SshExecutor::connect(target(&lab, bad), &password(), Duration::from_secs(5)).unwrap_err();
    assert!(matches!(err, ExecError::Unreachable(_)), "{err:?}");
}

#[test]
fn silent_commands_time_out_within_slack_and_the_session_survives() {
    let lab = start_lab();
    let mut ex = connect(&lab);
    let started = Instant::now();
    let r = ex
        .run_command("sudo awk 'BEGIN {system(\"/bin/sh\")}'", Duration::from_millis(300))
        .unwrap();
    let took = started.elapsed();
    assert!(r.timed_out);
    assert_eq!(r.exit_status, None);
    assert!(r.stdout.is_empty());
    assert!(took < Duration::from_millis(800), "{took:?}");
    assert_eq!(ex.run_command("whoami", Duration::from_secs(5)).unwrap().stdout, "naif\n");
}

#[test]
fn dropped_connection_is_a_broken_channel() {
    let lab = start_lab();
    let mut ex = connect(&lab);
    let err = ex.run_command("drop-connection", Duration::from_secs(5)).unwrap_err();
    assert!(matches!(err, ExecError::ChannelBroken(_)), "{err:?}");
    let err = ex.run_command("whoami", Duration::from_secs(5)).unwrap_err();
    assert!(matches!(err, ExecError::ChannelBroken(_)), "{err:?}");
}

#[test]
fn recon_suite_runs_every_probe_in_order() {
    let lab = start_lab();
    let mut ex = connect(&lab);
    let pairs = run_recon_suite(&mut ex, Duration::from_secs(5)).unwrap();
    assert_eq!(pairs.len(), 18);
    let execs: Vec<String> = lab.journal.entries();
    let want: Vec<String> = RECON_COMMANDS.iter().map(|c| format!("exec {c}")).collect();
    assert_eq!(execs, want);
}

#[test]
fn unreachable_host() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let t = SshTarget {
        host: "127.0.0.1".into(),
        port,
        user: USER.into(),
        host_key: HostKeyPolicy::AcceptAndLog,
    };
    let err = SshExecutor::connect(t, &password(), Duration::from_secs(5)).unwrap_err();
    assert!(matches!(err, ExecError::Unreachable(_)), "{err:?}");
}

fn remote_config(lab_port: u16, credential: &str) -> SessionConfig {
    let mut c = SessionConfig::simulated("gpt-4o-mini", 3, FeatureFlags::none());
    c.executor_kind = ExecutorKind::RemoteShell;
    c.target_host = format!("127.0.0.1:{lab_port}");
    c.target_user = USER.into();
    c.credential_ref = CredentialRef::new(credential);
    c
}

#[test]
fn config_driven_connect_with_a_password_file() {
    let lab = start_lab();
    let dir = tempfile::tempdir().unwrap();
    let pw = dir.path().join("pw");
    std::fs::write(&pw, format!("{PASSWORD}\nignored\n")).unwrap();
    let mut cfg = remote_config(lab.port, &format!("password-file:{}", pw.display()));
    cfg.host_key_fingerprint = Some(lab.host_fingerprint.clone());
    let mut ex = SshExecutor::from_config(&cfg).unwrap();
    assert_eq!(ex.run_command("whoami", Duration::from_secs(5)).unwrap().stdout, "naif\n");

    let serialized = serde_json::to_string(&cfg).unwrap();
    assert!(!serialized.contains("password-file"));
    assert!(!format!("{cfg:?}").contains("password-file"));
}

#[test]
fn target_parsing() {
    let cfg = remote_config(2222, "env:X");
    let t = SshTarget::from_config(&cfg).unwrap();
    assert_eq!((t.host.as_str(), t.port), ("127.0.0.1", 2222));

    let mut cfg = remote_config(22, "env:X");
    cfg.target_host = "lab.local".into();
    assert_eq!(SshTarget::from_config(&cfg).unwrap().port, 22);

    cfg.target_host = "lab.local:http".into();
    assert!(SshTarget::from_config(&cfg).is_err());

    cfg.target_host = "lab.local".into();
    cfg.target_user.clear();
    assert!(matches!(SshTarget::from_config(&cfg), Err(ExecError::AuthFailure(_))));
}

#[test]
fn credential_handles() {
    std::env::set_var("PRIVESC_NET_TEST_PW", "s3cret");
    match resolve_credential(&CredentialRef::new("env:PRIVESC_NET_TEST_PW")).unwrap() {
        Secret::Password(p) => assert_eq!(p, "s3cret"),
        other => panic!("{other:?}"),
    }
    let debug = format!("{:?}", resolve_credential(&CredentialRef::new("env:PRIVESC_NET_TEST_PW")).unwrap());
    assert!(!debug.contains("s3cret"));

    let err = |h: &str| resolve_credential(&CredentialRef::new(h)).unwrap_err();
    assert_eq!(err(""), CredentialError::Empty);
    assert_eq!(err("hunter2"), CredentialError::NoScheme);
    assert_eq!(err("vault:x"), CredentialError::UnknownScheme("vault".into()));
    assert_eq!(err("env:PRIVESC_NET_TEST_UNSET_VAR"), CredentialError::MissingEnv("PRIVESC_NET_TEST_UNSET_VAR".into()));
    assert!(matches!(err("password-file:/no/such/file"), CredentialError::Unreadable { .. }));
    assert!(matches!(err("key:/no/such/key"), CredentialError::Unreadable { .. }));
    let not_a_key = fixture("client_ed25519.pub");
    assert_eq!(err(&format!("key:{}", not_a_key.display())), CredentialError::BadKey(not_a_key));
}
