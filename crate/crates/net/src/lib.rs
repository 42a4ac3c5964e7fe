//! Network backends for `privesc-core`: a secure-shell executor for lab hosts,
//! an HTTP chat-completion transport, a technique-page fetcher and the
//! operator control API.

pub mod control;
pub mod credentials;
pub mod http;
pub mod ssh;

pub use control::{control_token_from_env, router, ControlServer};
pub use credentials::{resolve_credential, CredentialError, Secret};
pub use http::{HttpFetcher, HttpTransport, RemoteEmbedder};
pub use ssh::{HostKeyPolicy, SshExecutor, SshTarget};
