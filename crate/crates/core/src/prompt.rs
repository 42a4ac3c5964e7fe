//! Per-turn prompt assembly from modular blocks.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SessionConfig;
use crate::executor::ExecutionResult;
use crate::rag::RetrievedSnippet;

pub const COT_DIRECTIVE: &str = "Think step by step. First, assess the system summary for PrivEsc paths. Then, evaluate the last command and output. Finally, decide on the most logical next command.";
pub const HINT_PREFIX: &str = "Human Hint (high priority):";
pub const INSIGHT_PREFIX: &str = "Retrieved Insight:";
pub const MAX_DIGEST_CHARS: usize = 600;
pub const MAX_INSIGHT_CHARS: usize = 1200;
pub const UNKNOWN: &str = "unknown";

const DIGEST_HEAD: usize = 497;
const DIGEST_TAIL: usize = 100;
const DIGEST_SPLICE: &str = " … ";

const BUILTIN_BASE: &str = include_str!("../prompts/base_prompt.txt");
const BUILTIN_EXEMPLARS: &str = include_str!("../prompts/cot_exemplars.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemContext {
    pub username: String,
    pub uid_line: String,
    pub hostname: String,
    pub os_release: String,
    pub kernel: String,
    pub sudo_rights: String,
    pub suid_count: usize,
    pub env_summary: String,
    pub extra_facts: Vec<String>,
}

impl SystemContext {
    pub fn render(&self) -> String {
        let mut lines = vec![
            format!("- User: {}", self.username),
            format!("- Identity: {}", self.uid_line),
            format!("- Hostname: {}", self.hostname),
            format!("- OS: {}", self.os_release),
            format!("- Kernel: {}", self.kernel),
            format!("- Sudo: {}", self.sudo_rights),
            format!("- SUID binaries: {}", self.suid_count),
            format!("- Environment: {}", self.env_summary),
        ];
        lines.extend(self.extra_facts.iter().map(|f| format!("- {f}")));
        lines.join("\n")
    }
}

fn probe<'a>(recon: &'a [(String, ExecutionResult)], command: &str) -> Option<&'a ExecutionResult> {
    recon
        .iter()
        .find(|(c, r)| c == command && !r.timed_out)
        .map(|(_, r)| r)
}

fn first_line(r: Option<&ExecutionResult>) -> String {
    r.and_then(|r| r.stdout.lines().map(str::trim).find(|l| !l.is_empty()))
        .map(str::to_string)
        .unwrap_or_else(|| UNKNOWN.to_string())
}

/// Condenses recon output into the facts the prompt carries.
pub fn summarize_context(recon: &[(String, ExecutionResult)]) -> SystemContext {
    let username = first_line(probe(recon, "whoami"));
    let uid_line = first_line(probe(recon, "id"));
    let hostname = first_line(probe(recon, "hostname"));

    let os_release = probe(recon, "cat /etc/os-release")
        .and_then(|r| {
            r.stdout
                .lines()
                .find_map(|l| l.strip_prefix("PRETTY_NAME="))
                .map(|v| v.trim().trim_matches('"').to_string())
                .or_else(|| r.stdout.lines().map(str::trim).find(|l| !l.is_empty()).map(str::to_string))
        })
        .unwrap_or_else(|| UNKNOWN.to_string());

    let kernel = match probe(recon, "uname -a") {
        Some(r) => {
            let line = first_line(Some(r));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() >= 3 && line != UNKNOWN {
                fields[2].to_string()
            } else {
                line
            }
        }
        None => UNKNOWN.to_string(),
    };

    let sudo_rights = match probe(recon, "sudo -l") {
        Some(r) if !r.stdout.trim().is_empty() => {
            let rules: Vec<&str> = r
                .stdout
                .lines()
                .map(str::trim)
                .filter(|l| l.starts_with('(') || l.contains("NOPASSWD"))
                .collect();
            if rules.is_empty() {
                "none".to_string()
            } else {
                rules.join("; ")
            }
        }
        _ => UNKNOWN.to_string(),
    };

    let suid_count = probe(recon, "find / -perm -4000 -type f 2>/dev/null")
        .map(|r| r.stdout.lines().filter(|l| !l.trim().is_empty()).count())
        .unwrap_or(0);

    let env_summary = match probe(recon, "env") {
        Some(r) if !r.stdout.trim().is_empty() => {
            let keep = ["SHELL", "HOME", "PATH", "LANG"];
            let picked: Vec<&str> = keep
                .iter()
                .filter_map(|k| r.stdout.lines().find(|l| l.starts_with(&format!("{k}="))))
                .collect();
            if picked.is_empty() {
                format!("{} variables", r.stdout.lines().count())
            } else {
                picked.join(", ")
            }
        }
        _ => UNKNOWN.to_string(),
    };

    let mut extra_facts = Vec::new();
    if let Some(r) = probe(recon, "cat /etc/passwd") {
        let shells: Vec<&str> = r
            .stdout
            .lines()
            .filter(|l| l.ends_with("sh") && !l.ends_with("nologin"))
            .filter_map(|l| l.split(':').next())
            .collect();
        if !shells.is_empty() {
            extra_facts.push(format!("Login shells: {}", shells.join(", ")));
        }
    }
    if let Some(r) = probe(recon, "ss -tulnp") {
        let listening = r.stdout.lines().skip(1).filter(|l| !l.trim().is_empty()).count();
        extra_facts.push(format!("Listening sockets: {listening}"));
    }
    for dir in ["/tmp", "/var/tmp"] {
        if let Some(r) = probe(recon, &format!("ls -la {dir}")) {
            let entries = r
                .stdout
                .lines()
                .filter(|l| !l.starts_with("total") && !l.ends_with(" .") && !l.ends_with(" ..") && !l.trim().is_empty())
                .count();
            if entries > 0 {
                extra_facts.push(format!("{dir} entries: {entries}"));
            }
        }
    }

    SystemContext {
        username,
        uid_line,
        hostname,
        os_release,
        kernel,
        sudo_rights,
        suid_count,
        env_summary,
        extra_facts,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub command: String,
    pub output_digest: String,
    pub succeeded: bool,
    pub turn_index: u32,
}

impl HistoryEntry {
    pub fn new(turn_index: u32, command: &str, output: &str, succeeded: bool) -> Self {
        HistoryEntry {
            command: command.to_string(),
            output_digest: digest_output(output),
            succeeded,
            turn_index,
        }
    }

    pub fn from_result(turn_index: u32, command: &str, result: &ExecutionResult) -> Self {
        let output = if result.timed_out {
            "(timed out, no output captured)".to_string()
        } else {
            result.combined_output()
        };
        Self::new(turn_index, command, &output, result.succeeded())
    }
}

/// Verbatim when short, otherwise head and tail spliced to exactly the cap.
pub fn digest_output(output: &str) -> String {
    let chars: Vec<char> = output.chars().collect();
    if chars.len() <= MAX_DIGEST_CHARS {
        return output.to_string();
    }
    let head: String = chars[..DIGEST_HEAD].iter().collect();
    let tail: String = chars[chars.len() - DIGEST_TAIL..].iter().collect();
    format!("{head}{DIGEST_SPLICE}{tail}")
}

pub fn push_history(mut history: Vec<HistoryEntry>, entry: HistoryEntry, cap: usize) -> Vec<HistoryEntry> {
    let cap = cap.max(1);
    history.push(entry);
    if history.len() > cap {
        history.drain(..history.len() - cap);
    }
    history
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Base,
    Summary,
    History,
    PttSummary,
    RagInsight,
    Cot,
    CotExemplars,
    Hint,
    OutputContract,
}

impl Block {
    pub fn as_str(self) -> &'static str {
        match self {
            Block::Base => "base",
            Block::Summary => "summary",
            Block::History => "history",
            Block::PttSummary => "ptt_summary",
            Block::RagInsight => "rag_insight",
            Block::Cot => "cot",
            Block::CotExemplars => "cot_exemplars",
            Block::Hint => "hint",
            Block::OutputContract => "output_contract",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub text: String,
    pub blocks_present: BTreeSet<Block>,
    pub word_count: u64,
    /// Each block's rendered text, in join order.
    pub blocks: Vec<(Block, String)>,
}

impl PromptBundle {
    pub fn block(&self, which: Block) -> Option<&str> {
        self.blocks.iter().find(|(b, _)| *b == which).map(|(_, t)| t.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("hints are accepted from turn 2 onwards")]
    HintTooEarly,
    #[error("{} block supplied but its feature flag is off", .0.as_str())]
    BlockWithoutFlag(Block),
    #[error("unresolved placeholder in rendered prompt: {0}")]
    UnresolvedPlaceholder(String),
    #[error("turn index must be at least 1")]
    TurnZero,
    #[error("cannot read prompt template {path}: {reason}")]
    Template { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub base: String,
    pub cot_exemplars: Vec<String>,
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        Self::from_texts(BUILTIN_BASE, BUILTIN_EXEMPLARS)
    }

    /// Exemplars are separated by lines holding only `---`.
    pub fn from_texts(base: &str, exemplars: &str) -> Self {
        let mut list = Vec::new();
        let mut cur = Vec::new();
        for line in exemplars.lines() {
            if line.trim() == "---" {
                list.push(cur.join("\n").trim().to_string());
                cur.clear();
            } else {
                cur.push(line);
            }
        }
        list.push(cur.join("\n").trim().to_string());
        list.retain(|e| !e.is_empty());
        PromptTemplates {
            base: base.trim_end().to_string(),
            cot_exemplars: list,
        }
    }

    /// Reads `base_prompt.txt` and `cot_exemplars.txt` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|e| PromptError::Template {
                path: path.display().to_string(),
                reason: e.to_string(),
            })
        };
        Ok(Self::from_texts(&read("base_prompt.txt")?, &read("cot_exemplars.txt")?))
    }
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Everything that varies between turns.
#[derive(Debug, Clone, Copy)]
pub struct PromptInputs<'a> {
    pub turn_index: u32,
    pub context: &'a SystemContext,
    pub history: &'a [HistoryEntry],
    pub hint: Option<&'a str>,
    pub rag_insight: Option<&'a str>,
    /// Rendered tree; `None` with task tracking on asks for an initial tree.
    pub ptt_summary: Option<&'a str>,
    pub current_task_id: Option<&'a str>,
    pub avoid_list: Option<&'a str>,
    /// Corrections and warnings carried over from the previous turn.
    pub notices: &'a [String],
}

impl<'a> PromptInputs<'a> {
    pub fn new(turn_index: u32, context: &'a SystemContext, history: &'a [HistoryEntry]) -> Self {
        PromptInputs {
            turn_index,
            context,
            history,
            hint: None,
            rag_insight: None,
            ptt_summary: None,
            current_task_id: None,
            avoid_list: None,
            notices: &[],
        }
    }
}

fn render_history(history: &[HistoryEntry], notices: &[String]) -> String {
    let mut s = String::from("Command History (oldest first):");
    if history.is_empty() {
        s.push_str("\nNone yet");
    }
    for (i, h) in history.iter().enumerate() {
        let status = if h.succeeded { "succeeded" } else { "failed" };
        s.push_str(&format!("\n{}. [turn {}, {status}] {}", i + 1, h.turn_index, h.command));
        let digest = h.output_digest.trim_end();
        if digest.is_empty() {
            s.push_str("\n   output: (empty)");
        } else {
            for (j, line) in digest.lines().enumerate() {
                s.push_str(if j == 0 { "\n   output: " } else { "\n   " });
                s.push_str(line);
            }
        }
    }
    for n in notices {
        s.push('\n');
        s.push_str(n);
    }
    s
}

fn render_ptt(summary: Option<&str>, current: Option<&str>, avoid: Option<&str>) -> String {
    let mut s = String::from("Current PTT Summary:\n");
    match summary {
        Some(t) if !t.trim().is_empty() => s.push_str(t),
        _ => s.push_str("(no tasks yet: include an initial_tree in ptt_update)"),
    }
    if let Some(c) = current {
        s.push_str(&format!("\nCurrent task: {c}"));
    }
    if let Some(a) = avoid {
        s.push('\n');
        s.push_str(a);
    }
    s
}

fn render_contract(rag: bool, ptt: bool) -> String {
    let mut lines = vec![
        "Output format (mandatory). Return a single valid and compact JSON object only, with these fields:".to_string(),
        "{".to_string(),
        r#""command_non_interactive": "string, safe for automated execution (no $, #, `)""#.to_string(),
        r#", "command_interactive": "string, interactive version if applicable, else empty""#.to_string(),
        r#", "system_summary": "string, max 10 very short bullet points""#.to_string(),
        r#", "command_history": "string (max 15 lines, summarised cleanly)""#.to_string(),
        r#", "rationale": "string, 1-2 sentences, explaining why this command was chosen""#.to_string(),
    ];
    if rag {
        lines.push(r#", "rag_search_query": "string (max 15 words)""#.to_string());
    }
    if ptt {
        lines.push(r#", "ptt_update": {"initial_tree": [{"task_id": "P1", "title": "text", "status": "pending", "children": []}] (turn 1 only), "current_task_id": "id", "new_subtasks": [{"parent_id": "id", "task_id": "id", "title": "text"}], "updated_statuses": [{"task_id": "id", "status": "pending|in_progress|done|skipped"}], "commands": [{"task_id": "id", "command": "text", "result": "text"}], "commands_to_avoid": ["text"]}"#.to_string());
    }
    lines.push("}".to_string());
    lines.push("Respond with a single, valid JSON object only. No prose, no code fences.".to_string());
    lines.join("\n")
}

pub fn render_hint(text: &str) -> String {
    format!(
        "{HINT_PREFIX} the operator's guidance below overrides your own plan for this turn.\nHuman Hint: {}",
        text.trim()
    )
}

/// Builds the prompt for one turn. Optional blocks appear only when their
/// flag is on and they have content; task tracking always renders.
pub fn build_prompt(
    config: &SessionConfig,
    templates: &PromptTemplates,
    inputs: &PromptInputs<'_>,
) -> Result<PromptBundle, PromptError> {
    let flags = &config.flags;
    if inputs.turn_index == 0 {
        return Err(PromptError::TurnZero);
    }
    if inputs.hint.is_some() && !flags.hint {
        return Err(PromptError::BlockWithoutFlag(Block::Hint));
    }
    if inputs.hint.is_some() && inputs.turn_index < 2 {
        return Err(PromptError::HintTooEarly);
    }
    if inputs.rag_insight.is_some() && !flags.rag {
        return Err(PromptError::BlockWithoutFlag(Block::RagInsight));
    }
    if (inputs.ptt_summary.is_some() || inputs.avoid_list.is_some() || inputs.current_task_id.is_some()) && !flags.ptt {
        return Err(PromptError::BlockWithoutFlag(Block::PttSummary));
    }

    let username = if config.target_user.is_empty() {
        inputs.context.username.as_str()
    } else {
        config.target_user.as_str()
    };
    let base = templates
        .base
        .replace("{{USERNAME}}", username)
        .replace("{{MAX_TURNS}}", &config.max_turns.to_string())
        .replace("{{TURN_INDEX}}", &inputs.turn_index.to_string());

    let mut blocks: Vec<(Block, String)> = vec![
        (Block::Base, base),
        (Block::Summary, format!("System Summary:\n{}", inputs.context.render())),
        (Block::History, render_history(inputs.history, inputs.notices)),
    ];
    if flags.ptt {
        blocks.push((
            Block::PttSummary,
            render_ptt(inputs.ptt_summary, inputs.current_task_id, inputs.avoid_list),
        ));
    }
    if let Some(insight) = inputs.rag_insight {
        blocks.push((Block::RagInsight, insight.to_string()));
    }
    if flags.cot {
        blocks.push((Block::Cot, COT_DIRECTIVE.to_string()));
        if !templates.cot_exemplars.is_empty() {
            let mut ex = String::from("Worked examples of the expected reasoning and reply:");
            for e in &templates.cot_exemplars {
                ex.push_str("\n\n");
                ex.push_str(e);
            }
            blocks.push((Block::CotExemplars, ex));
        }
    }
    if let Some(h) = inputs.hint {
        blocks.push((Block::Hint, render_hint(h)));
    }
    blocks.push((Block::OutputContract, render_contract(flags.rag, flags.ptt)));

    let text = blocks.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join("\n\n");
    if let Some(pos) = text.find("{{") {
        let end = text[pos..].find("}}").map(|e| pos + e + 2).unwrap_or(text.len().min(pos + 20));
        return Err(PromptError::UnresolvedPlaceholder(text[pos..end].to_string()));
    }
    Ok(PromptBundle {
        word_count: crate::gateway::word_count(&text),
        blocks_present: blocks.iter().map(|(b, _)| *b).collect(),
        blocks,
        text,
    })
}

/// Single "Retrieved Insight:" block, whitespace collapsed, capped with an
/// ellipsis, source appended.
pub fn render_rag_insight(snippet: &RetrievedSnippet) -> String {
    let source = format!(" (source: {})", snippet.chunk.source_uri);
    let body: String = snippet.chunk.text.split_whitespace().collect::<Vec<_>>().join(" ");
    let prefix = format!("{INSIGHT_PREFIX} ");
    let budget = MAX_INSIGHT_CHARS.saturating_sub(prefix.chars().count() + source.chars().count());
    let body = if body.chars().count() > budget {
        let mut cut: String = body.chars().take(budget.saturating_sub(1)).collect();
        cut.push('…');
        cut
    } else {
        body
    };
    format!("{prefix}{body}{source}")
}
