//! Approvals and hints typed at the terminal.

use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex};

use privesc_core::approval::{ApprovalGate, ApprovalKind, ApprovalRequest, GateAnswer, GateError};
use privesc_core::orchestrator::OperatorInbox;

/// Hints typed at a gate, picked up when the turn ends.
#[derive(Debug, Clone, Default)]
pub struct HintBox(Arc<Mutex<Vec<String>>>);

impl HintBox {
    fn push(&self, text: String) {
        self.0.lock().unwrap_or_else(|p| p.into_inner()).push(text);
    }
}

impl OperatorInbox for HintBox {
    fn take_hints(&mut self, _turns_completed: u32) -> Vec<String> {
        std::mem::take(&mut *self.0.lock().unwrap_or_else(|p| p.into_inner()))
    }
}

pub struct TerminalGate<R, W> {
    input: R,
    output: W,
    hints: Option<HintBox>,
}

impl<R: BufRead + Send, W: Write + Send> TerminalGate<R, W> {
    /// `hints` is present when hint injection is enabled.
    pub fn new(input: R, output: W, hints: Option<HintBox>) -> Self {
        TerminalGate { input, output, hints }
    }

    fn read_line(&mut self) -> Result<String, GateError> {
        let mut line = String::new();
        match self.input.read_line(&mut line) {
            Ok(0) | Err(_) => Err(GateError::Closed),
            Ok(_) => Ok(line.trim().to_string()),
        }
    }

    fn show(&mut self, req: &ApprovalRequest) -> std::io::Result<()> {
        let out = &mut self.output;
        match req.kind {
            ApprovalKind::Prompt => {
                writeln!(out, "\n== {} : send prompt to {} ==", req.item_id, req.model_id)?;
                if let Some(table) = &req.preview {
                    writeln!(out, "{table}")?;
                }
            }
            ApprovalKind::Command => {
                writeln!(out, "\n== {} : run command ==", req.item_id)?;
                writeln!(out, "  command:   {}", req.payload)?;
                if let Some(v) = req.interactive_variant.as_deref().filter(|v| !v.is_empty()) {
                    writeln!(out, "  (interactive variant, not run: {v})")?;
                }
                if let Some(r) = &req.rationale {
                    writeln!(out, "  rationale: {r}")?;
                }
            }
        }
        Ok(())
    }

    fn menu(&self, kind: ApprovalKind) -> String {
        let mut opts = vec!["[y]es", "[n]o"];
        if kind == ApprovalKind::Command {
            opts.push("[e]dit");
        }
        if self.hints.is_some() {
            opts.push("[h]int <text>");
        }
        opts.push("[q]uit");
        format!("{} > ", opts.join(" / "))
    }
}

impl<R: BufRead + Send, W: Write + Send> ApprovalGate for TerminalGate<R, W> {
    fn decide(&mut self, request: &ApprovalRequest) -> Result<GateAnswer, GateError> {
        let _ = self.show(request);
        loop {
            let menu = self.menu(request.kind);
            let _ = write!(self.output, "{menu}");
            let _ = self.output.flush();
            let line = self.read_line()?;
            let (word, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            match word.to_ascii_lowercase().as_str() {
                "y" | "yes" => return Ok(GateAnswer::approve()),
                "n" | "no" => return Ok(GateAnswer::deny()),
                "q" | "quit" => return Err(GateError::Aborted),
                "e" | "edit" if request.kind == ApprovalKind::Command => {
                    let edited = if rest.trim().is_empty() {
                        let _ = write!(self.output, "replacement command > ");
                        let _ = self.output.flush();
                        self.read_line()?
                    } else {
                        rest.trim().to_string()
                    };
                    if edited.is_empty() {
                        continue;
                    }
                    return Ok(GateAnswer::edit(edited));
                }
                "h" | "hint" if self.hints.is_some() && !rest.trim().is_empty() => {
                    if let Some(h) = &self.hints {
                        h.push(rest.trim().to_string());
                    }
                    let _ = writeln!(self.output, "hint queued for the next prompt");
                }
                _ => {
                    let _ = writeln!(self.output, "unrecognized answer {line:?}");
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn command_request() -> ApprovalRequest {
        ApprovalRequest::command("t1-command", "sudo -l", "check sudo", "", "m")
    }

    fn gate(input: &str) -> TerminalGate<&[u8], Vec<u8>> {
        TerminalGate::new(input.as_bytes(), Vec::new(), Some(HintBox::default()))
    }

    #[test]
    fn answers() {
        assert_eq!(gate("y\n").decide(&command_request()).unwrap(), GateAnswer::approve());
        assert_eq!(gate("no\n").decide(&command_request()).unwrap(), GateAnswer::deny());
        assert_eq!(gate("q\n").decide(&command_request()), Err(GateError::Aborted));
        assert_eq!(gate("").decide(&command_request()), Err(GateError::Closed));
        assert_eq!(gate("wat\ny\n").decide(&command_request()).unwrap(), GateAnswer::approve());
    }

    #[test]
    fn edits_inline_or_on_the_next_line() {
        assert_eq!(gate("e id\n").decide(&command_request()).unwrap(), GateAnswer::edit("id"));
        assert_eq!(gate("e\nwhoami\n").decide(&command_request()).unwrap(), GateAnswer::edit("whoami"));
    }

    #[test]
    fn prompt_items_cannot_be_edited() {
        let req = ApprovalRequest::prompt("t1-prompt", "text", None, None, "m");
        let mut g = gate("e id\nn\n");
        assert_eq!(g.decide(&req).unwrap(), GateAnswer::deny());
        let shown = String::from_utf8(g.output).unwrap();
        assert!(!shown.contains("[e]dit"));
    }

    #[test]
    fn hints_go_to_the_box() {
        let hints = HintBox::default();
        let mut g = TerminalGate::new("h try awk\ny\n".as_bytes(), Vec::new(), Some(hints.clone()));
        assert_eq!(g.decide(&command_request()).unwrap(), GateAnswer::approve());
        let mut inbox = hints;
        assert_eq!(inbox.take_hints(1), vec!["try awk".to_string()]);
        assert!(inbox.take_hints(1).is_empty());
    }
}
