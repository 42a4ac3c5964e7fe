//! Task tree tracked across turns.
//!
//! The model owns the plan: it proposes the initial tree on turn 1 and sends
//! incremental updates afterwards. This module only validates and applies
//! them. Updates are atomic: a rejected update leaves the tree untouched.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    #[default]
    Pending,
    InProgress,
    Done,
    Skipped,
}

impl TaskStatus {
    /// pending → in_progress → {done, skipped}, or pending → {done, skipped}.
    /// Re-asserting the current status is a no-op.
    pub fn can_become(self, next: TaskStatus) -> bool {
        use TaskStatus::*;
        self == next
            || matches!(
                (self, next),
                (Pending, InProgress) | (Pending, Done) | (Pending, Skipped) | (InProgress, Done) | (InProgress, Skipped)
            )
    }

    pub fn is_open(self) -> bool {
        matches!(self, TaskStatus::Pending | TaskStatus::InProgress)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::Pending => "pending",
            TaskStatus::InProgress => "in_progress",
            TaskStatus::Done => "done",
            TaskStatus::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCommand {
    pub command: String,
    #[serde(default)]
    pub result: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PttNode {
    pub task_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<PttNode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub commands: Vec<TaskCommand>,
}

impl PttNode {
    pub fn new(task_id: impl Into<String>, title: impl Into<String>) -> Self {
        PttNode {
            task_id: task_id.into(),
            title: title.into(),
            status: TaskStatus::Pending,
            children: Vec::new(),
            commands: Vec::new(),
        }
    }

    pub fn with_children(mut self, children: Vec<PttNode>) -> Self {
        self.children = children;
        self
    }

    fn walk<'a>(&'a self, out: &mut Vec<(usize, &'a PttNode)>, depth: usize) {
        out.push((depth, self));
        for c in &self.children {
            c.walk(out, depth + 1);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewSubtask {
    /// `None` attaches at the top level (or under the dotted-prefix parent).
    #[serde(default)]
    pub parent_id: Option<String>,
    #[serde(flatten)]
    pub node: PttNode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusUpdate {
    pub task_id: String,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandLogEntry {
    pub task_id: String,
    pub command: String,
    #[serde(default)]
    pub result: String,
}

/// The `ptt_update` object a model reply carries.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PttUpdate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_tree: Option<Vec<PttNode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub new_subtasks: Vec<NewSubtask>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub updated_statuses: Vec<StatusUpdate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub commands: Vec<CommandLogEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub commands_to_avoid: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PttError {
    #[error("unknown task id {0:?}")]
    UnknownTaskId(String),
    #[error("illegal transition for {task_id}: {from} -> {to}")]
    IllegalTransition {
        task_id: String,
        from: &'static str,
        to: &'static str,
    },
    #[error("initial_tree is only accepted on turn 1 (got turn {0})")]
    InitialTreeAfterTurn1(u32),
    #[error("duplicate task id {0:?}")]
    DuplicateTaskId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PttTree {
    pub roots: Vec<PttNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_task_id: Option<String>,
}

impl PttTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    /// Depth-first `(depth, node)` listing.
    pub fn nodes(&self) -> Vec<(usize, &PttNode)> {
        let mut out = Vec::new();
        for r in &self.roots {
            r.walk(&mut out, 0);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.nodes().len()
    }

    pub fn find(&self, task_id: &str) -> Option<&PttNode> {
        self.nodes().into_iter().map(|(_, n)| n).find(|n| n.task_id == task_id)
    }

    pub fn contains(&self, task_id: &str) -> bool {
        self.find(task_id).is_some()
    }

    fn find_mut(&mut self, task_id: &str) -> Option<&mut PttNode> {
        fn go<'a>(nodes: &'a mut [PttNode], id: &str) -> Option<&'a mut PttNode> {
            for n in nodes {
                if n.task_id == id {
                    return Some(n);
                }
                if let Some(hit) = go(&mut n.children, id) {
                    return Some(hit);
                }
            }
            None
        }
        go(&mut self.roots, task_id)
    }

    fn ids(&self) -> HashSet<String> {
        self.nodes().into_iter().map(|(_, n)| n.task_id.clone()).collect()
    }

    /// Inserts under `parent_id`, or under the nearest existing dotted prefix
    /// (`P1.3` goes below `P1`), or at the top level.
    fn insert(&mut self, parent_id: Option<&str>, node: PttNode) -> Result<(), PttError> {
        let mut seen = self.ids();
        let mut incoming = Vec::new();
        node.walk(&mut incoming, 0);
        for (_, n) in incoming {
            if !seen.insert(n.task_id.clone()) {
                return Err(PttError::DuplicateTaskId(n.task_id.clone()));
            }
        }
        let parent = match parent_id {
            Some(p) => Some(p.to_string()),
            None => dotted_parent(&node.task_id).filter(|p| self.contains(p)),
        };
        match parent {
            Some(p) => {
                let target = self
                    .find_mut(&p)
                    .ok_or_else(|| PttError::UnknownTaskId(p.clone()))?;
                target.children.push(node);
            }
            None => self.roots.push(node),
        }
        Ok(())
    }

    fn set_status(&mut self, task_id: &str, status: TaskStatus) -> Result<(), PttError> {
        let node = self
            .find_mut(task_id)
            .ok_or_else(|| PttError::UnknownTaskId(task_id.to_string()))?;
        if !node.status.can_become(status) {
            return Err(PttError::IllegalTransition {
                task_id: task_id.to_string(),
                from: node.status.as_str(),
                to: status.as_str(),
            });
        }
        node.status = status;
        Ok(())
    }
}

fn dotted_parent(id: &str) -> Option<String> {
    id.rsplit_once('.').map(|(p, _)| p.to_string()).filter(|p| !p.is_empty())
}

/// Applies `update` on a copy of `tree`; the input is never modified.
///
/// Order: initial tree, new subtasks, statuses, command log, current task.
pub fn apply_update(tree: &PttTree, update: &PttUpdate, turn_index: u32) -> Result<PttTree, PttError> {
    let mut next = tree.clone();
    if let Some(initial) = &update.initial_tree {
        if turn_index != 1 {
            return Err(PttError::InitialTreeAfterTurn1(turn_index));
        }
        for node in initial {
            next.insert(None, node.clone())?;
        }
    }
    for sub in &update.new_subtasks {
        next.insert(sub.parent_id.as_deref(), sub.node.clone())?;
    }
    for s in &update.updated_statuses {
        next.set_status(&s.task_id, s.status)?;
    }
    for c in &update.commands {
        let node = next
            .find_mut(&c.task_id)
            .ok_or_else(|| PttError::UnknownTaskId(c.task_id.clone()))?;
        node.commands.push(TaskCommand {
            command: c.command.clone(),
            result: c.result.clone(),
        });
    }
    if let Some(cur) = &update.current_task_id {
        if !next.contains(cur) {
            return Err(PttError::UnknownTaskId(cur.clone()));
        }
        next.current_task_id = Some(cur.clone());
    }
    Ok(next)
}

/// Open tasks first, then closed ones, each group depth-first. Cut on a line
/// boundary so the result never exceeds `max_chars`.
pub fn summarize_tree(tree: &PttTree, max_chars: usize) -> String {
    let nodes = tree.nodes();
    let lines = nodes
        .iter()
        .filter(|(_, n)| n.status.is_open())
        .chain(nodes.iter().filter(|(_, n)| !n.status.is_open()))
        .map(|(depth, n)| {
            format!(
                "{}{}: {} [{}]",
                "  ".repeat(*depth),
                n.task_id,
                n.title,
                n.status.as_str()
            )
        });
    let mut out = String::new();
    for line in lines {
        let extra = if out.is_empty() { line.chars().count() } else { line.chars().count() + 1 };
        if out.chars().count() + extra > max_chars {
            break;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&line);
    }
    out
}

/// Commands the model should not suggest again.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommandsToAvoid {
    pub entries: Vec<String>,
}

impl CommandsToAvoid {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `true` if the command was newly added.
    pub fn note(&mut self, command: &str) -> bool {
        let command = command.trim();
        if command.is_empty() || self.entries.iter().any(|e| e == command) {
            return false;
        }
        self.entries.push(command.to_string());
        true
    }

    pub fn contains(&self, command: &str) -> bool {
        self.entries.iter().any(|e| e == command.trim())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `None` when empty so the prompt block is elided.
    pub fn render(&self) -> Option<String> {
        if self.entries.is_empty() {
            return None;
        }
        let mut s = String::from("Commands to avoid (already failed or repeated):");
        for e in &self.entries {
            s.push_str("\n- ");
            s.push_str(e);
        }
        Some(s)
    }
}

pub fn note_avoided_command(mut avoid: CommandsToAvoid, command: &str) -> CommandsToAvoid {
    avoid.note(command);
    avoid
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_strategies() -> PttUpdate {
        PttUpdate {
            initial_tree: Some(vec![
                PttNode::new("P1", "Sudo exploitation")
                    .with_children(vec![PttNode::new("P1.1", "Examine sudo privileges")]),
                PttNode::new("P2", "SUID binaries"),
            ]),
            ..Default::default()
        }
    }

    #[test]
    fn initial_tree_on_turn_one_is_all_pending() {
        let t = apply_update(&PttTree::new(), &two_strategies(), 1).unwrap();
        assert_eq!(t.roots.len(), 2);
        assert!(t.nodes().iter().all(|(_, n)| n.status == TaskStatus::Pending));
        assert_eq!(
            apply_update(&PttTree::new(), &two_strategies(), 2),
            Err(PttError::InitialTreeAfterTurn1(2))
        );
    }

    #[test]
    fn flat_root_access_goes_done() {
        let tree = PttTree {
            roots: vec![PttNode::new("root_access", "Obtain root")],
            current_task_id: None,
        };
        let u = PttUpdate {
            updated_statuses: vec![StatusUpdate {
                task_id: "root_access".into(),
                status: TaskStatus::Done,
            }],
            ..Default::default()
        };
        let t = apply_update(&tree, &u, 2).unwrap();
        assert_eq!(t.find("root_access").unwrap().status, TaskStatus::Done);
    }

    #[test]
    fn unknown_id_leaves_tree_unchanged() {
        let tree = apply_update(&PttTree::new(), &two_strategies(), 1).unwrap();
        let u = PttUpdate {
            new_subtasks: vec![NewSubtask {
                parent_id: Some("P2".into()),
                node: PttNode::new("P2.1", "Check find"),
            }],
            updated_statuses: vec![StatusUpdate {
                task_id: "P9.9".into(),
                status: TaskStatus::Done,
            }],
            ..Default::default()
        };
        let before = tree.clone();
        assert_eq!(apply_update(&tree, &u, 2), Err(PttError::UnknownTaskId("P9.9".into())));
        assert_eq!(tree, before);
    }

    #[test]
    fn illegal_and_duplicate_updates() {
        let mut tree = apply_update(&PttTree::new(), &two_strategies(), 1).unwrap();
        let done = PttUpdate {
            updated_statuses: vec![StatusUpdate { task_id: "P1.1".into(), status: TaskStatus::Done }],
            ..Default::default()
        };
        tree = apply_update(&tree, &done, 2).unwrap();
        let back = PttUpdate {
            updated_statuses: vec![StatusUpdate { task_id: "P1.1".into(), status: TaskStatus::Pending }],
            ..Default::default()
        };
        assert!(matches!(apply_update(&tree, &back, 3), Err(PttError::IllegalTransition { .. })));
        let dup = PttUpdate {
            new_subtasks: vec![NewSubtask { parent_id: None, node: PttNode::new("P1", "again") }],
            ..Default::default()
        };
        assert_eq!(apply_update(&tree, &dup, 3), Err(PttError::DuplicateTaskId("P1".into())));
        let dangling = PttUpdate { current_task_id: Some("P7".into()), ..Default::default() };
        assert_eq!(apply_update(&tree, &dangling, 3), Err(PttError::UnknownTaskId("P7".into())));
    }

    #[test]
    fn skipped_is_terminal() {
        assert!(!TaskStatus::Skipped.can_become(TaskStatus::InProgress));
        assert!(!TaskStatus::Done.can_become(TaskStatus::Skipped));
        assert!(TaskStatus::Pending.can_become(TaskStatus::Skipped));
    }

    #[test]
    fn dotted_ids_nest_under_their_prefix() {
        let tree = apply_update(&PttTree::new(), &two_strategies(), 1).unwrap();
        let u = PttUpdate {
            new_subtasks: vec![NewSubtask { parent_id: None, node: PttNode::new("P2.4", "Check awk SUID") }],
            current_task_id: Some("P2.4".into()),
            commands: vec![CommandLogEntry {
                task_id: "P2.4".into(),
                command: "ls -la /usr/bin/awk".into(),
                result: "-rwxr-xr-x".into(),
            }],
            ..Default::default()
        };
        let t = apply_update(&tree, &u, 2).unwrap();
        assert_eq!(t.roots[1].children[0].task_id, "P2.4");
        assert_eq!(t.roots[1].children[0].commands.len(), 1);
        assert_eq!(t.current_task_id.as_deref(), Some("P2.4"));
    }

    #[test]
    fn summary_lists_open_tasks_first() {
        let tree = PttTree {
            roots: vec![
                PttNode { status: TaskStatus::Done, ..PttNode::new("S0", "Enumerate users") },
                PttNode::new("S1", "Examine sudo privileges"),
                PttNode::new("S2", "Identify potential misconfigurations in awk"),
            ],
            current_task_id: None,
        };
        let s = summarize_tree(&tree, 500);
        let sudo = s.find("sudo privileges").unwrap();
        let awk = s.find("awk").unwrap();
        let done = s.find("Enumerate").unwrap();
        assert!(sudo < awk && awk < done, "{s}");
        assert!(s.lines().next().unwrap().contains("S1") && s.contains("pending"));
    }

    #[test]
    fn summary_respects_cap_on_line_boundary() {
        let roots = (0..100).map(|i| PttNode::new(format!("P{i}"), format!("Task number {i}"))).collect();
        let tree = PttTree { roots, current_task_id: None };
        let s = summarize_tree(&tree, 800);
        assert!(s.chars().count() <= 800);
        let full = summarize_tree(&tree, usize::MAX);
        assert!(full.starts_with(&s));
        assert!(full[s.len()..].starts_with('\n'));
    }

    #[test]
    fn avoid_list_dedups_and_elides_when_empty() {
        let a = note_avoided_command(CommandsToAvoid::new(), "sudo su");
        let a = note_avoided_command(a, "sudo su ");
        assert_eq!(a.entries, vec!["sudo su"]);
        assert!(a.render().unwrap().contains("sudo su"));
        assert_eq!(CommandsToAvoid::new().render(), None);
    }

    fn status_strategy() -> impl Strategy<Value = TaskStatus> {
        prop_oneof![
            Just(TaskStatus::Pending),
            Just(TaskStatus::InProgress),
            Just(TaskStatus::Done),
            Just(TaskStatus::Skipped)
        ]
    }

    fn update_strategy() -> impl Strategy<Value = PttUpdate> {
        let ids = prop::sample::select(vec!["P1", "P1.1", "P1.2", "P2", "P2.1", "P3", "root_access", "X9"]);
        (
            prop::collection::vec((ids.clone(), status_strategy()), 0..4),
            prop::collection::vec(ids.clone(), 0..2),
            prop::option::of(ids),
        )
            .prop_map(|(statuses, subs, cur)| PttUpdate {
                updated_statuses: statuses
                    .into_iter()
                    .map(|(id, status)| StatusUpdate { task_id: id.to_string(), status })
                    .collect(),
                new_subtasks: subs
                    .into_iter()
                    .map(|id| NewSubtask { parent_id: None, node: PttNode::new(id, "sub") })
                    .collect(),
                current_task_id: cur.map(str::to_string),
                ..Default::default()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn random_update_streams_respect_transition_order(stream in prop::collection::vec(update_strategy(), 1..12)) {
            let mut tree = apply_update(&PttTree::new(), &two_strategies(), 1).unwrap();
            for (i, u) in stream.iter().enumerate() {
                let before = tree.clone();
                match apply_update(&tree, u, i as u32 + 2) {
                    Ok(next) => {
                        for (_, old) in before.nodes() {
                            let new = next.find(&old.task_id).expect("nodes never disappear");
                            prop_assert!(old.status.can_become(new.status));
                        }
                        let ids: Vec<_> = next.nodes().iter().map(|(_, n)| n.task_id.clone()).collect();
                        let uniq: HashSet<_> = ids.iter().collect();
                        prop_assert_eq!(ids.len(), uniq.len());
                        tree = next;
                    }
                    Err(_) => prop_assert_eq!(&tree, &before),
                }
            }
        }

        #[test]
        fn tree_serialization_round_trips(stream in prop::collection::vec(update_strategy(), 0..8)) {
            let mut tree = apply_update(&PttTree::new(), &two_strategies(), 1).unwrap();
            for (i, u) in stream.iter().enumerate() {
                if let Ok(next) = apply_update(&tree, u, i as u32 + 2) {
                    tree = next;
                }
            }
            let json = serde_json::to_string(&tree).unwrap();
            let back: PttTree = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, tree);
        }
    }
}
