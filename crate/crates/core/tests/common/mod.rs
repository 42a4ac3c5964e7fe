#![allow(dead_code)]

use std::path::{Path, PathBuf};

use privesc_core::approval::{ApprovalGate, ApproveAll};
use privesc_core::executor::SimulatedTarget;
use privesc_core::gateway::ScriptedTransport;
use privesc_core::orchestrator::{run_session, LoopIo, LoopResult, NoInbox, NullSink, OperatorInbox, Toolkit};
use privesc_core::session::{open_session, FixedClock};
use privesc_core::{FeatureFlags, SessionConfig};

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn test_data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join(rel)
}

pub fn flags(spec: &str) -> FeatureFlags {
    let mut f = FeatureFlags::none();
    for w in spec.split_whitespace() {
        match w {
            "cot" => f.cot = true,
            "hint" => f.hint = true,
            "rag" => f.rag = true,
            "online" => f.rag_online = true,
            "ptt" => f.ptt = true,
            other => panic!("unknown flag {other}"),
        }
    }
    f
}

pub fn config(f: FeatureFlags, max_turns: u32) -> SessionConfig {
    let mut c = SessionConfig::simulated("gpt-4o-mini", max_turns, f);
    if f.rag {
        c.rag_corpus = Some(fixture("corpus"));
    }
    c
}

pub struct Run {
    pub result: LoopResult,
    pub transport: ScriptedTransport,
    pub logs: tempfile::TempDir,
}

pub fn run_with(
    config: SessionConfig,
    mut transport: ScriptedTransport,
    gate: &mut dyn ApprovalGate,
    inbox: &mut dyn OperatorInbox,
) -> Run {
    let logs = tempfile::tempdir().unwrap();
    let clock = FixedClock::at_unix(1_700_000_000);
    let kit = Toolkit::from_config(&config).unwrap();
    let mut session = open_session(logs.path(), config, &clock).unwrap();
    let mut target = SimulatedTarget::metasploitable_like();
    let result = {
        let mut io = LoopIo {
            transport: &mut transport,
            executor: &mut target,
            gate,
            inbox,
            events: &NullSink,
            clock: &clock,
        };
        run_session(&mut session, &kit, &mut io).unwrap()
    };
    Run {
        result,
        transport,
        logs,
    }
}

pub fn run_transcript(flag_spec: &str, transcript: &str, max_turns: u32) -> Run {
    let transport = ScriptedTransport::from_file(&fixture(&format!("transcripts/{transcript}"))).unwrap();
    run_with(config(flags(flag_spec), max_turns), transport, &mut ApproveAll::default(), &mut NoInbox)
}

/// Every file under `dir`, relative path and bytes, sorted.
pub fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push((p.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
