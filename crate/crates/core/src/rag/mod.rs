//! Retrieval over an exploitation-technique corpus: an exact flat vector
//! index offline, and a live page lookup online.

mod embed;
mod index;
mod online;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RagQueryMode;

pub use embed::{fnv1a64, tokenize, Embedder, Embedding, HashedBagOfWords, HASHED_DIMENSION};
pub use index::{FlatIndex, INDEX_VERSION};
pub use online::{
    extract_sudo_section, gtfobins_url, online_retrieve, BinaryLexicon, CannedFetcher, FetchedPage, PageFetcher,
};

pub const MAX_CHUNK_CHARS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CorpusChunk {
    pub doc_id: String,
    pub section: String,
    pub text: String,
    pub source_uri: String,
}

impl CorpusChunk {
    pub fn chunk_id(&self) -> String {
        format!("{}#{}", self.doc_id, self.section)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Offline,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSnippet {
    pub chunk: CorpusChunk,
    pub score: f64,
    pub mode: RetrievalMode,
}

#[derive(Debug, Error)]
pub enum RagError {
    #[error("corpus at {0} holds no usable markdown")]
    EmptyCorpus(PathBuf),
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("no retrieval query available")]
    NoQueryAvailable,
    #[error("index version {found} does not match supported version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error("index i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RetrievalFailure {
    #[error("fetch failed: {0}")]
    FetchFailure(String),
    #[error("no known binary named in query {0:?}")]
    NoBinaryInQuery(String),
}

fn heading_text(line: &str) -> Option<&str> {
    let t = line.trim_start();
    let hashes = t.chars().take_while(|c| *c == '#').count();
    if (1..=6).contains(&hashes) && t[hashes..].starts_with(' ') {
        Some(t[hashes..].trim())
    } else {
        None
    }
}

fn split_capped(text: &str, cap: usize) -> Vec<String> {
    let mut pieces = Vec::new();
    let mut cur = String::new();
    let mut cur_len = 0;
    for line in text.lines() {
        let line_len = line.chars().count();
        if line_len > cap {
            if !cur.is_empty() {
                pieces.push(std::mem::take(&mut cur));
                cur_len = 0;
            }
            let chars: Vec<char> = line.chars().collect();
            pieces.extend(chars.chunks(cap).map(|c| c.iter().collect::<String>()));
            continue;
        }
        let extra = if cur.is_empty() { line_len } else { line_len + 1 };
        if cur_len + extra > cap {
            pieces.push(std::mem::take(&mut cur));
            cur_len = 0;
        }
        if !cur.is_empty() {
            cur.push('\n');
            cur_len += 1;
        }
        cur.push_str(line);
        cur_len += line_len;
    }
    if !cur.is_empty() {
        pieces.push(cur);
    }
    pieces.into_iter().map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

/// One chunk per heading section (plus any preamble), each at most `cap`
/// characters. A `<!-- source: URI -->` comment overrides `default_source`.
pub fn chunk_markdown(doc_id: &str, markdown: &str, default_source: &str, cap: usize) -> Vec<CorpusChunk> {
    let cap = cap.clamp(1, MAX_CHUNK_CHARS);
    let mut source = default_source.to_string();
    let mut sections: Vec<(String, Vec<&str>)> = vec![("preamble".to_string(), Vec::new())];
    let mut in_fence = false;
    for line in markdown.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("<!-- source:") {
            source = rest.trim_end_matches("-->").trim().to_string();
            continue;
        }
        if trimmed.starts_with("```") {
            in_fence = !in_fence;
        }
        match heading_text(line).filter(|_| !in_fence) {
            Some(h) => sections.push((h.to_string(), vec![line])),
            None => sections.last_mut().expect("preamble").1.push(line),
        }
    }

    let mut used = BTreeSet::new();
    let mut chunks = Vec::new();
    for (name, lines) in sections {
        let body = lines.join("\n");
        let has_body = lines.iter().skip(1).any(|l| !l.trim().is_empty()) || name == "preamble";
        if body.trim().is_empty() || !has_body {
            continue;
        }
        for (i, piece) in split_capped(&body, cap).into_iter().enumerate() {
            let base = if i == 0 { name.clone() } else { format!("{name} (part {})", i + 1) };
            let mut section = base.clone();
            let mut n = 2;
            while !used.insert(section.clone()) {
                section = format!("{base} ({n})");
                n += 1;
            }
            chunks.push(CorpusChunk {
                doc_id: doc_id.to_string(),
                section,
                text: piece,
                source_uri: source.clone(),
            });
        }
    }
    chunks
}

/// Markdown files of `dir`, sorted by file name.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>, RagError> {
    let entries = std::fs::read_dir(dir).map_err(|e| RagError::UnreadableFile {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "md"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_corpus(dir: &Path, chunk_limit: usize) -> Result<Vec<CorpusChunk>, RagError> {
    let mut chunks = Vec::new();
    for path in corpus_files(dir)? {
        let text = std::fs::read_to_string(&path).map_err(|e| RagError::UnreadableFile {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let doc_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        chunks.extend(chunk_markdown(&doc_id, &text, &format!("file:{file_name}"), chunk_limit));
    }
    if chunks.is_empty() {
        return Err(RagError::EmptyCorpus(dir.to_path_buf()));
    }
    Ok(chunks)
}

/// Chunks, embeds and indexes every markdown file in `dir`.
pub fn ingest(dir: &Path, chunk_limit: usize) -> Result<FlatIndex<f32>, RagError> {
    ingest_with(dir, chunk_limit, &HashedBagOfWords::default())
}

pub fn ingest_with<T: num_traits::Float>(
    dir: &Path,
    chunk_limit: usize,
    embedder: &dyn Embedder<T>,
) -> Result<FlatIndex<T>, RagError> {
    let index = FlatIndex::build(load_corpus(dir, chunk_limit)?, embedder);
    if index.is_empty() {
        return Err(RagError::EmptyCorpus(dir.to_path_buf()));
    }
    Ok(index)
}

fn present(s: Option<&str>) -> Option<&str> {
    s.map(str::trim).filter(|s| !s.is_empty())
}

/// Picks the retrieval query; each mode falls back to the other source.
pub fn choose_query(mode: RagQueryMode, llm_query: Option<&str>, last_command: Option<&str>) -> Result<String, RagError> {
    let (first, second) = match mode {
        RagQueryMode::LastCommand => (present(last_command), present(llm_query)),
        RagQueryMode::LlmQuery => (present(llm_query), present(last_command)),
    };
    first.or(second).map(str::to_string).ok_or(RagError::NoQueryAvailable)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headings_split_and_cap() {
        let body = "word ".repeat(340);
        let md = format!("# One\n{body}\n## Two\n{body}\n## Three\n{body}\n");
        assert!(md.len() >= 5000);
        let chunks = chunk_markdown("doc", &md, "file:doc.md", 2000);
        assert!(chunks.len() >= 3);
        assert!(chunks.iter().all(|c| c.text.chars().count() <= 2000 && !c.text.is_empty()));
        let long = format!("# Big\n{}", "line of text here\n".repeat(400));
        let parts = chunk_markdown("d", &long, "s", 2000);
        assert!(parts.len() >= 4);
        let ids: BTreeSet<_> = parts.iter().map(|c| c.section.clone()).collect();
        assert_eq!(ids.len(), parts.len());
    }

    #[test]
    fn source_comment_and_fences() {
        let md = "<!-- source: https://example.test/awk/ -->\n# awk\nintro\n## Shell\n```\n# not a heading\nawk 'BEGIN {system(\"/bin/sh\")}'\n```\n";
        let chunks = chunk_markdown("awk", md, "file:awk.md", 2000);
        assert_eq!(chunks.len(), 2);
        assert!(chunks.iter().all(|c| c.source_uri == "https://example.test/awk/"));
        assert!(chunks[1].text.contains("# not a heading"));
    }

    #[test]
    fn duplicate_sections_get_suffixes() {
        let chunks = chunk_markdown("x", "# A\none\n# A\ntwo\n", "s", 2000);
        assert_eq!(chunks[0].section, "A");
        assert_eq!(chunks[1].section, "A (2)");
    }

    #[test]
    fn query_choice() {
        use RagQueryMode::*;
        assert_eq!(choose_query(LastCommand, Some("sudo awk PrivEsc GTFOBins"), None).unwrap(), "sudo awk PrivEsc GTFOBins");
        assert_eq!(choose_query(LastCommand, Some("q"), Some("sudo -l")).unwrap(), "sudo -l");
        assert_eq!(choose_query(LlmQuery, Some("q"), Some("sudo -l")).unwrap(), "q");
        assert_eq!(choose_query(LlmQuery, Some("  "), Some("sudo -l")).unwrap(), "sudo -l");
        assert!(matches!(choose_query(LlmQuery, None, None), Err(RagError::NoQueryAvailable)));
    }

    #[test]
    fn empty_dir_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest(dir.path(), 2000), Err(RagError::EmptyCorpus(_))));
    }
}
