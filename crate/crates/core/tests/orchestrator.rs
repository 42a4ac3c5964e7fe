mod common;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use common::*;
use privesc_core::approval::{ApprovalDecision, ApprovalKind, ApproveAll, GateAnswer, GateError, ScriptedGate};
use privesc_core::config::ApprovalMode;
use privesc_core::executor::SimulatedTarget;
use privesc_core::gateway::ScriptedTransport;
use privesc_core::orchestrator::{
    emit_report, run_session, ControlHub, HintRejected, LoopEvent, LoopIo, NoInbox, RecordingSink, ScriptedHints,
    Toolkit,
};
use privesc_core::prompt::Block;
use privesc_core::session::{load_turns, open_session, FixedClock, SessionOutcome, TerminationReason};

fn reply(cmd: &str, extra: &str) -> String {
    format!(
        r#"{{"command_non_interactive": {}, "command_interactive": "", "system_summary": "- User: naif", "command_history": "None yet", "rationale": "Next step."{extra}}}"#,
        serde_json::to_string(cmd).unwrap()
    )
}

const AWK_ID: &str = r#"sudo awk 'BEGIN {system("id")}'"#;

#[test]
fn transcript_a_roots_on_turn_two() {
    let run = run_transcript("cot", "a_cot.json", 10);
    let o = &run.result.outcome;
    assert_eq!(o.termination_reason, TerminationReason::AutoRoot);
    assert_eq!(o.turns_used, 2);
    assert!(o.auto_root_detected && o.root_achieved);
    let turns = load_turns(&run.result.session_dir).unwrap();
    assert_eq!(turns[1].executed_command.as_deref(), Some(AWK_ID));
    assert!(turns[1].execution_output.contains("uid=0(root)"));
    assert!(turns[1].prompt_text.contains("sudo -l"));
    assert_eq!(SessionOutcome::replay(&turns, 10), *o);
}

#[test]
fn transcript_b_roots_on_turn_one() {
    let run = run_transcript("cot hint", "b_cot_hint.json", 10);
    assert_eq!(run.result.outcome.termination_reason, TerminationReason::AutoRoot);
    assert_eq!(run.result.outcome.turns_used, 1);
    assert_eq!(run.transport.served(), 1);
}

#[test]
fn interactive_shell_suggestions_exhaust_the_budget() {
    for (flags, file) in [("", "c_no_flags.json"), ("rag", "c_rag.json"), ("ptt", "c_ptt.json")] {
        let run = run_transcript(flags, file, 10);
        let o = &run.result.outcome;
        assert_eq!(o.termination_reason, TerminationReason::MaxTurns, "{file}");
        assert_eq!(o.turns_used, 10);
        assert!(!o.auto_root_detected);
        let turns = load_turns(&run.result.session_dir).unwrap();
        assert!(turns.iter().all(|t| t.timed_out && t.command_approved));
        assert!(turns[3].prompt_text.contains("suggested 3 times"), "{file}");
        if flags == "ptt" {
            assert!(turns[1].prompt_text.contains("Commands to avoid"));
            assert!(run.result.session_dir.join("ptt.json").exists());
        }
        if flags == "rag" {
            assert!(turns[1].prompt_text.contains("Retrieved Insight:"));
            assert!(turns[1].prompt_text.contains("(source: https://gtfobins.github.io/gtfobins/awk/)"));
        }
    }
}

#[test]
fn all_flags_transcript() {
    let run = run_transcript("cot hint rag ptt", "all_flags.json", 10);
    assert_eq!(run.result.outcome.termination_reason, TerminationReason::AutoRoot);
    assert_eq!(run.result.outcome.turns_used, 2);
    let turns = load_turns(&run.result.session_dir).unwrap();
    assert!(turns[1].blocks_present.contains(&Block::RagInsight));
    assert!(turns[1].blocks_present.contains(&Block::PttSummary));
    let tree = run.result.state.tree.unwrap();
    assert_eq!(tree.find("root_access").unwrap().status.as_str(), "done");
}

#[test]
fn second_hint_replaces_first() {
    let transport = ScriptedTransport::from_file(&fixture("transcripts/hint_two_turn.json")).unwrap();
    let mut hints = ScriptedHints::new()
        .after_turn(1, "try gtfobins for find")
        .after_turn(1, "awk is allowed under sudo, use its system call");
    let run = run_with(config(flags("hint"), 10), transport, &mut ApproveAll::default(), &mut hints);
    let turns = load_turns(&run.result.session_dir).unwrap();
    let p2 = &turns[1].prompt_text;
    assert!(p2.contains("Human Hint: awk is allowed under sudo, use its system call"));
    assert!(!p2.contains("gtfobins for find"));
    assert!(!turns[0].prompt_text.contains("Human Hint"));
    assert_eq!(turns[1].hint.as_deref(), Some("awk is allowed under sudo, use its system call"));
}

#[test]
fn failed_command_lands_on_avoid_list() {
    let transport = ScriptedTransport::from_texts([
        reply("sudo su", r#", "ptt_update": {}"#),
        reply("whoami", r#", "ptt_update": {}"#),
    ]);
    let run = run_with(config(flags("ptt"), 2), transport, &mut ApproveAll::default(), &mut NoInbox);
    let turns = load_turns(&run.result.session_dir).unwrap();
    let p2 = &turns[1].prompt_text;
    let heading = p2.find("Commands to avoid").expect("avoid heading");
    assert!(p2[heading..].contains("sudo su"));
}

#[test]
fn blacklisted_command_is_voided_and_reported() {
    let transport = ScriptedTransport::from_texts([reply("rm -rf /", ""), reply("whoami", "")]);
    let run = run_with(config(flags(""), 2), transport, &mut ApproveAll::default(), &mut NoInbox);
    let turns = load_turns(&run.result.session_dir).unwrap();
    assert!(turns[0].voided && !turns[0].safety_verdict.allowed);
    assert!(turns[0].executed_command.is_none() && turns[0].execution_output.is_empty());
    assert!(turns[1].prompt_text.contains("blocked by the safety blacklist"));
}

#[test]
fn parse_failure_feeds_a_correction() {
    let transport = ScriptedTransport::from_texts([reply("cat $HOME/x", ""), reply("whoami", "")]);
    let run = run_with(config(flags(""), 2), transport, &mut ApproveAll::default(), &mut NoInbox);
    let turns = load_turns(&run.result.session_dir).unwrap();
    assert_eq!(turns[0].parse_failure.as_ref().unwrap().kind.as_str(), "forbidden_chars");
    assert!(turns[1].prompt_text.contains("no $, #, `"));
    assert_eq!(run.result.outcome.turns_used, 2);
}

#[test]
fn interactive_gates_deny_edit_and_abort() {
    let mut cfg = config(flags(""), 4);
    cfg.approval_mode = ApprovalMode::Interactive;
    let transport = ScriptedTransport::from_texts([reply("whoami", ""), reply("whoami", ""), reply("id", "")]);
    let mut gate = ScriptedGate::new([
        Ok(GateAnswer::deny()),
        Ok(GateAnswer::approve()),
        Ok(GateAnswer::deny()),
        Ok(GateAnswer::approve()),
        Ok(GateAnswer::edit("rm -rf /")),
        Ok(GateAnswer::approve()),
        Err(GateError::Aborted),
    ]);
    let run = run_with(cfg, transport, &mut gate, &mut NoInbox);
    let turns = load_turns(&run.result.session_dir).unwrap();
    assert!(!turns[0].prompt_approved && turns[0].raw_response.is_empty());
    assert!(turns[1].prompt_approved && !turns[1].command_approved);
    assert!(turns[2].voided, "edited command is screened again");
    assert!(turns[3].aborted);
    assert_eq!(run.result.outcome.termination_reason, TerminationReason::UserAbort);
    assert_eq!(run.transport.served(), 3);
    let kinds: Vec<_> = gate.seen().iter().map(|r| r.kind).collect();
    assert_eq!(kinds[..3], [ApprovalKind::Prompt, ApprovalKind::Prompt, ApprovalKind::Command]);
}

#[test]
fn transport_failure_is_retried_once_then_fatal() {
    let transport = ScriptedTransport::from_texts([reply("whoami", "")]);
    let run = run_with(config(flags(""), 5), transport, &mut ApproveAll::default(), &mut NoInbox);
    assert_eq!(run.result.outcome.termination_reason, TerminationReason::FatalError);
    assert_eq!(run.result.outcome.turns_used, 2);
    assert_eq!(run.transport.requests().len(), 3);
    let turns = load_turns(&run.result.session_dir).unwrap();
    assert!(turns[1].fatal_error.is_some());
}

#[test]
fn report_artifacts() {
    let logs = tempfile::tempdir().unwrap();
    let clock = FixedClock::at_unix(1_700_000_000);
    let cfg = config(flags("cot"), 10);
    let kit = Toolkit::from_config(&cfg).unwrap();
    let mut session = open_session(logs.path(), cfg, &clock).unwrap();
    let mut transport = ScriptedTransport::from_file(&fixture("transcripts/a_cot.json")).unwrap();
    let sink = RecordingSink::default();
    let mut io = LoopIo {
        transport: &mut transport,
        executor: &mut SimulatedTarget::metasploitable_like(),
        gate: &mut ApproveAll::default(),
        inbox: &mut NoInbox,
        events: &sink,
        clock: &clock,
    };
    run_session(&mut session, &kit, &mut io).unwrap();
    let art = emit_report(&session).unwrap();
    let md = std::fs::read_to_string(&art.report_md).unwrap();
    assert!(md.contains("| --cot | yes | yes | 2 | Auto-root detected; terminated early |"));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(&art.cost_summary_json).unwrap()).unwrap();
    assert_eq!(summary["turns"].as_array().unwrap().len(), 2);
    assert_eq!(summary["total_cost"].as_str().unwrap(), session.total_cost().to_string());
    let events = sink.0.lock().unwrap();
    assert!(matches!(events.first(), Some(LoopEvent::SessionStarted { .. })));
    assert!(matches!(events.last(), Some(LoopEvent::SessionFinished { .. })));
}

#[test]
fn control_hub_drives_an_interactive_session() {
    let mut cfg = config(flags("hint"), 3);
    cfg.approval_mode = ApprovalMode::Interactive;
    let hub = ControlHub::new(cfg.flags, cfg.max_turns);
    assert_eq!(hub.submit_hint("too soon"), Err(HintRejected::TooEarly));

    let worker = {
        let hub = Arc::clone(&hub);
        thread::spawn(move || {
            let logs = tempfile::tempdir().unwrap();
            let clock = FixedClock::at_unix(1_700_000_000);
            let kit = Toolkit::from_config(&cfg).unwrap();
            let mut session = open_session(logs.path(), cfg, &clock).unwrap();
            let mut transport = ScriptedTransport::from_file(&fixture("transcripts/hint_two_turn.json")).unwrap();
            let mut gate = hub.gate();
            let mut inbox = hub.inbox();
            let sink = hub.sink();
            let mut io = LoopIo {
                transport: &mut transport,
                executor: &mut SimulatedTarget::metasploitable_like(),
                gate: &mut gate,
                inbox: &mut inbox,
                events: &sink,
                clock: &clock,
            };
            let result = run_session(&mut session, &kit, &mut io).unwrap();
            (result, load_turns(session.dir()).unwrap())
        })
    };

    let mut seq = 0;
    let mut hinted = false;
    while !hub.is_finished() {
        for env in hub.wait_for_events(seq, Duration::from_secs(5)) {
            seq = env.seq;
            match env.event {
                LoopEvent::ApprovalRequested { item } => {
                    if item.kind == ApprovalKind::Command {
                        assert!(!item.rationale.clone().unwrap_or_default().is_empty());
                        if !hinted {
                            // turn 1 is underway, so the next build is turn 2
                            hub.submit_hint("use awk").unwrap();
                            hinted = true;
                        }
                    } else {
                        assert!(item.quote.is_some());
                    }
                    hub.resolve_approval(&item.item_id, ApprovalDecision::Approved, None).unwrap();
                    assert!(hub.resolve_approval(&item.item_id, ApprovalDecision::Denied, None).is_err());
                }
                _ => {}
            }
        }
    }
    let (result, turns) = worker.join().unwrap();
    assert_eq!(result.outcome.termination_reason, TerminationReason::AutoRoot);
    assert!(turns[1].prompt_text.contains("Human Hint: use awk"));
    let snap = hub.snapshot();
    assert_eq!(snap.turns_completed, 2);
    assert!(snap.pending_approvals.is_empty());
    assert_eq!(snap.outcome.unwrap().termination_reason, TerminationReason::AutoRoot);
}

#[test]
fn hub_abort_stops_a_waiting_gate() {
    let mut cfg = config(flags(""), 3);
    cfg.approval_mode = ApprovalMode::Interactive;
    let hub = ControlHub::new(cfg.flags, cfg.max_turns);
    let worker = {
        let hub = Arc::clone(&hub);
        thread::spawn(move || {
            let logs = tempfile::tempdir().unwrap();
            let clock = FixedClock::at_unix(1_700_000_000);
            let kit = Toolkit::from_config(&cfg).unwrap();
            let mut session = open_session(logs.path(), cfg, &clock).unwrap();
            let mut io = LoopIo {
                transport: &mut ScriptedTransport::from_texts([reply("whoami", "")]),
                executor: &mut SimulatedTarget::metasploitable_like(),
                gate: &mut hub.gate(),
                inbox: &mut hub.inbox(),
                events: &hub.sink(),
                clock: &clock,
            };
            run_session(&mut session, &kit, &mut io).unwrap()
        })
    };
    while hub.pending().is_empty() {
        hub.wait_for_events(0, Duration::from_millis(50));
    }
    hub.abort();
    let result = worker.join().unwrap();
    assert_eq!(result.outcome.termination_reason, TerminationReason::UserAbort);
    assert_eq!(result.outcome.turns_used, 1);
}
