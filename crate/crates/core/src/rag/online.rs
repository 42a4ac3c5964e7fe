//! Live technique-page lookup.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use super::{chunk_markdown, CorpusChunk, RetrievalFailure, RetrievalMode, RetrievedSnippet, MAX_CHUNK_CHARS};

const BUILTIN_LEXICON: &str = include_str!("../../prompts/known_binaries.txt");

pub fn gtfobins_url(binary: &str) -> String {
    format!("https://gtfobins.github.io/gtfobins/{binary}/")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchedPage {
    pub status: u16,
    pub body: String,
}

pub trait PageFetcher: Send + Sync {
    /// Transport-level failures are `Err`; HTTP errors come back as a status.
    fn fetch(&self, url: &str) -> Result<FetchedPage, String>;
}

/// Serves fixed pages by URL; unknown URLs answer 404.
#[derive(Debug, Clone, Default)]
pub struct CannedFetcher {
    pages: BTreeMap<String, FetchedPage>,
}

impl CannedFetcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_page(mut self, url: &str, status: u16, body: &str) -> Self {
        self.pages.insert(
            url.to_string(),
            FetchedPage {
                status,
                body: body.to_string(),
            },
        );
        self
    }
}

impl PageFetcher for CannedFetcher {
    fn fetch(&self, url: &str) -> Result<FetchedPage, String> {
        Ok(self.pages.get(url).cloned().unwrap_or(FetchedPage {
            status: 404,
            body: String::new(),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryLexicon {
    names: BTreeSet<String>,
}

impl BinaryLexicon {
    pub fn builtin() -> Self {
        Self::from_text(BUILTIN_LEXICON)
    }

    pub fn from_text(text: &str) -> Self {
        BinaryLexicon {
            names: text
                .lines()
                .map(|l| l.split('#').next().unwrap_or("").trim().to_ascii_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        }
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::from_text(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    /// First whitespace token that names a known binary, after stripping any
    /// directory part and surrounding punctuation.
    pub fn find_in(&self, query: &str) -> Option<String> {
        query.split_whitespace().find_map(|tok| {
            let tok = tok.rsplit('/').next().unwrap_or(tok);
            let tok = tok
                .trim_matches(|c: char| !c.is_ascii_alphanumeric() && c != '-' && c != '_')
                .to_ascii_lowercase();
            self.names.contains(&tok).then_some(tok)
        })
    }
}

impl Default for BinaryLexicon {
    fn default() -> Self {
        Self::builtin()
    }
}

fn re(cell: &'static OnceLock<Regex>, pat: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pat).expect("static regex"))
}

fn decode_entities(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&#x27;", "'")
        .replace("&nbsp;", " ")
        .replace("&amp;", "&")
}

/// Text of the first sudo-related section of a technique page, HTML or
/// markdown.
pub fn extract_sudo_section(body: &str) -> Option<(String, String)> {
    static HEADING: OnceLock<Regex> = OnceLock::new();
    static NEXT: OnceLock<Regex> = OnceLock::new();
    static TAG: OnceLock<Regex> = OnceLock::new();
    if body.trim_start().starts_with('<') {
        let heading = re(&HEADING, r#"(?is)<h([1-6])[^>]*>\s*([^<]*sudo[^<]*?)\s*</h[1-6]>"#);
        let caps = heading.captures(body)?;
        let title = caps.get(2)?.as_str().trim().to_string();
        let rest = &body[caps.get(0)?.end()..];
        let next = re(&NEXT, r"(?i)<h[1-3][\s>]");
        let section = match next.find(rest) {
            Some(m) => &rest[..m.start()],
            None => rest,
        };
        let text = re(&TAG, r"(?s)<[^>]+>").replace_all(section, "\n");
        let text = decode_entities(&text);
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if lines.is_empty() {
            return None;
        }
        return Some((title, lines.join("\n")));
    }
    chunk_markdown("page", body, "", MAX_CHUNK_CHARS)
        .into_iter()
        .find(|c| c.section.to_ascii_lowercase().contains("sudo"))
        .map(|c| (c.section, c.text))
}

pub fn online_retrieve(
    query: &str,
    fetcher: &dyn PageFetcher,
    lexicon: &BinaryLexicon,
) -> Result<RetrievedSnippet, RetrievalFailure> {
    let binary = lexicon
        .find_in(query)
        .ok_or_else(|| RetrievalFailure::NoBinaryInQuery(query.to_string()))?;
    let url = gtfobins_url(&binary);
    let page = fetcher.fetch(&url).map_err(RetrievalFailure::FetchFailure)?;
    if !(200..300).contains(&page.status) {
        return Err(RetrievalFailure::FetchFailure(format!("{url} answered status {}", page.status)));
    }
    let (section, text) = extract_sudo_section(&page.body)
        .ok_or_else(|| RetrievalFailure::FetchFailure(format!("{url} has no sudo section")))?;
    let text: String = text.chars().take(MAX_CHUNK_CHARS).collect();
    Ok(RetrievedSnippet {
        chunk: CorpusChunk {
            doc_id: binary,
            section,
            text,
            source_uri: url,
        },
        score: 1.0,
        mode: RetrievalMode::Online,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TAR_PAGE: &str = r#"<html><body><h1>tar</h1>
<h2 id="shell" class="function-name">Shell</h2><pre><code>tar -cf /dev/null /dev/null --checkpoint=1 --checkpoint-action=exec=/bin/sh</code></pre>
<h2 id="sudo" class="function-name">Sudo</h2>
<p>If the binary is allowed to run as superuser by <code>sudo</code>, it does not drop the elevated privileges.</p>
<pre><code>sudo tar -cf /dev/null /dev/null --checkpoint=1 --checkpoint-action=exec=/bin/sh</code></pre>
<h2 id="limited-suid">Limited SUID</h2><p>other</p></body></html>"#;

    #[test]
    fn tar_page_yields_checkpoint_snippet() {
        let f = CannedFetcher::new().with_page(&gtfobins_url("tar"), 200, TAR_PAGE);
        let s = online_retrieve("sudo tar escalation", &f, &BinaryLexicon::builtin()).unwrap();
        assert_eq!(s.mode, RetrievalMode::Online);
        assert!(s.chunk.text.contains("--checkpoint-action"));
        assert!(s.chunk.text.starts_with("If the binary"));
        assert!(!s.chunk.text.contains("other"));
    }

    #[test]
    fn lexicon_miss_and_http_error() {
        let lex = BinaryLexicon::builtin();
        assert!(!lex.contains("sudo"));
        assert_eq!(
            online_retrieve("frobnicate magic", &CannedFetcher::new(), &lex),
            Err(RetrievalFailure::NoBinaryInQuery("frobnicate magic".into()))
        );
        let f = CannedFetcher::new().with_page(&gtfobins_url("awk"), 500, "oops");
        assert!(matches!(
            online_retrieve("sudo awk", &f, &lex),
            Err(RetrievalFailure::FetchFailure(_))
        ));
    }

    #[test]
    fn binary_from_path_or_command() {
        let lex = BinaryLexicon::builtin();
        assert_eq!(lex.find_in("sudo /usr/bin/awk 'BEGIN'").as_deref(), Some("awk"));
        assert_eq!(lex.find_in("Sudo AWK PrivEsc GTFOBins").as_deref(), Some("awk"));
    }

    #[test]
    fn markdown_pages_work_too() {
        let (section, text) = extract_sudo_section("# vim\n## Shell\nvim -c ':!/bin/sh'\n## Sudo\nsudo vim -c ':!/bin/sh'\n").unwrap();
        assert_eq!(section, "Sudo");
        assert!(text.contains("sudo vim"));
    }
}
