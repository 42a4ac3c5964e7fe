//! Command screening against the dangerous-command blacklist, and root
//! detection on command output.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RULES: &str = include_str!("../prompts/blacklist.rules");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Destructive,
    ResourceExhaustion,
    Traversal,
    None,
}

impl Severity {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "destructive" => Some(Severity::Destructive),
            "resource_exhaustion" => Some(Severity::ResourceExhaustion),
            "traversal" => Some(Severity::Traversal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub allowed: bool,
    pub matched_rule: Option<String>,
    pub severity: Severity,
}

impl SafetyVerdict {
    pub fn allowed() -> Self {
        SafetyVerdict {
            allowed: true,
            matched_rule: None,
            severity: Severity::None,
        }
    }

    fn blocked(rule: String, severity: Severity) -> Self {
        SafetyVerdict {
            allowed: false,
            matched_rule: Some(rule),
            severity,
        }
    }
}

#[derive(Debug, Clone)]
enum Matcher {
    Literal(String),
    Pattern(Regex),
}

#[derive(Debug, Clone)]
pub struct Rule {
    source: String,
    matcher: Matcher,
    severity: Severity,
}

impl Rule {
    /// The rule as written in the file, e.g. `regex: ^rm\s+...`.
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn severity(&self) -> Severity {
        self.severity
    }

    fn matches(&self, normalized: &str) -> bool {
        match &self.matcher {
            Matcher::Literal(l) => l == normalized,
            Matcher::Pattern(re) => re.is_match(normalized),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RuleError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("cannot read rule file: {0}")]
    Io(String),
}

#[derive(Debug, Clone)]
pub struct Blacklist {
    rules: Vec<Rule>,
}

impl Blacklist {
    pub fn parse(text: &str) -> Result<Self, RuleError> {
        let mut rules = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| RuleError::Parse {
                line: idx + 1,
                reason,
            };
            let (head, body) = line
                .split_once(':')
                .ok_or_else(|| err("expected `literal:` or `regex:` prefix".into()))?;
            let body = body.trim();
            if body.is_empty() {
                return Err(err("empty rule".into()));
            }
            let (kind, severity) = match head.split_once('(') {
                Some((kind, rest)) => {
                    let sev = rest
                        .strip_suffix(')')
                        .and_then(Severity::parse)
                        .ok_or_else(|| err(format!("unknown severity in {head:?}")))?;
                    (kind.trim(), sev)
                }
                None => (head.trim(), Severity::Destructive),
            };
            let matcher = match kind {
                "literal" => Matcher::Literal(normalize(body)),
                "regex" => Matcher::Pattern(Regex::new(body).map_err(|e| err(e.to_string()))?),
                other => return Err(err(format!("unknown rule kind {other:?}"))),
            };
            rules.push(Rule {
                source: format!("{kind}: {body}"),
                matcher,
                severity,
            });
        }
        Ok(Blacklist { rules })
    }

    pub fn from_file(path: &Path) -> Result<Self, RuleError> {
        let text = std::fs::read_to_string(path).map_err(|e| RuleError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    /// The rule file shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_RULES).expect("shipped blacklist parses")
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// First matching rule wins. Matching is case-sensitive on the
    /// whitespace-normalized command.
    pub fn screen(&self, command: &str) -> SafetyVerdict {
        let normalized = normalize(command);
        if normalized.is_empty() {
            return SafetyVerdict::blocked("empty command".into(), Severity::None);
        }
        self.rules
            .iter()
            .find(|r| r.matches(&normalized))
            .map(|r| SafetyVerdict::blocked(r.source.clone(), r.severity))
            .unwrap_or_else(SafetyVerdict::allowed)
    }
}

impl Default for Blacklist {
    fn default() -> Self {
        Self::builtin()
    }
}

pub fn screen(command: &str, blacklist: &Blacklist) -> SafetyVerdict {
    blacklist.screen(command)
}

fn normalize(command: &str) -> String {
    command.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootSignal {
    Uid0,
    WhoamiRoot,
    Euid0,
    HashPrompt,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RootEvidence {
    pub is_root: bool,
    pub signals: BTreeSet<RootSignal>,
    pub matched_text: Option<String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RootDetector {
    /// Count the `user@host ... #` prompt heuristic toward `is_root`.
    pub hash_prompt_counts: bool,
}

fn uid0_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\buid=0\([^)\n]*\)").unwrap())
}

fn euid0_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\beuid=0\([^)\n]*\)").unwrap())
}

fn prompt_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\S+@[\w.-]+(:\S*)?\s*#\s*$").unwrap())
}

impl RootDetector {
    pub fn detect(&self, output: &str) -> RootEvidence {
        let mut signals = BTreeSet::new();
        let mut matched = None;
        let mut note = |sig: RootSignal, text: &str, signals: &mut BTreeSet<RootSignal>| {
            signals.insert(sig);
            matched.get_or_insert_with(|| text.to_string());
        };
        if let Some(m) = uid0_re().find(output) {
            note(RootSignal::Uid0, m.as_str(), &mut signals);
        }
        if let Some(m) = euid0_re().find(output) {
            note(RootSignal::Euid0, m.as_str(), &mut signals);
        }
        if output.lines().any(|l| l.trim() == "root") {
            note(RootSignal::WhoamiRoot, "root", &mut signals);
        }
        let hash_prompt = output
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .filter(|l| prompt_re().is_match(l.trim_end()));
        if let Some(line) = hash_prompt {
            if self.hash_prompt_counts {
                note(RootSignal::HashPrompt, line.trim_end(), &mut signals);
            } else {
                log::debug!("hash prompt seen but not counted: {line:?}");
            }
        }
        RootEvidence {
            is_root: !signals.is_empty(),
            signals,
            matched_text: matched,
        }
    }
}

pub fn detect_root(output: &str) -> RootEvidence {
    RootDetector::default().detect(output)
}
