//! Lexical source indexing and retrieval.
//!
//! Scans a C source snapshot without preprocessing or type resolution: a
//! function definition is a top-level `<return-type tokens> name(args)`
//! header followed by `{` at brace depth zero, a structure is a top-level
//! `struct`/`union`/`enum` tag followed by a braced body and `;`. Brace
//! depth is tracked outside comments and string/char literals.
//!
//! Deliberate corner cases of the heuristic:
//! * duplicate definitions (`#if` arms, same name in several files) are all
//!   retained and flagged ambiguous on retrieval;
//! * macro-defined functions (`DEFINE_X(name)` with no return-type tokens)
//!   are not indexed — lookups surface `NotFound`, never a wrong body;
//! * K&R definitions without return-type tokens are not found.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use globset::{Glob, GlobSet, GlobSetBuilder};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

pub const DEFAULT_FILE_GLOBS: &[&str] = &["**/*.c", "**/*.h"];

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("root not found: {0}")]
    RootNotFound(PathBuf),
    #[error("invalid glob pattern {pattern}: {source}")]
    BadGlob {
        pattern: String,
        source: globset::Error,
    },
    #[error("file not in index: {0}")]
    FileNotInIndex(String),
    #[error("line {line} out of range for {file} ({lines} lines)")]
    OutOfRange { file: String, line: u32, lines: u32 },
    #[error("cache unusable: {0}")]
    CacheInvalid(String),
    #[error("cache stale: {0}")]
    CacheStale(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefKind {
    Function,
    Structure,
}

/// Where one definition lives. Lines are 1-based and inclusive; slicing
/// `start_line..=end_line` out of the file yields text that begins with
/// `signature`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionLocation {
    pub name: String,
    pub kind: DefKind,
    pub file: String,
    pub start_line: u32,
    pub end_line: u32,
    pub signature: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub files_scanned: u64,
    pub functions: u64,
    pub structures: u64,
    pub warnings: Vec<String>,
}

/// One retrieved definition: the exact source slice plus the same slice
/// annotated one `file:line: text` header per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedDefinition {
    pub location: DefinitionLocation,
    pub text: String,
    pub annotated: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RetrievedSource {
    Found {
        definitions: Vec<RetrievedDefinition>,
        /// More than one definition matched the name.
        ambiguous: bool,
    },
    NotFound,
}

impl RetrievedSource {
    pub fn first(&self) -> Option<&RetrievedDefinition> {
        match self {
            RetrievedSource::Found { definitions, .. } => definitions.first(),
            RetrievedSource::NotFound => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileMeta {
    sha256: String,
    lines: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceIndex {
    root: PathBuf,
    globs: Vec<String>,
    files: BTreeMap<String, FileMeta>,
    definitions: BTreeMap<String, Vec<DefinitionLocation>>,
    stats: BuildStats,
}

const CACHE_SCHEMA: &str = "index.v1";

#[derive(Serialize, Deserialize)]
struct CacheFile {
    schema: String,
    #[serde(flatten)]
    index: SourceIndex,
}

impl SourceIndex {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stats(&self) -> &BuildStats {
        &self.stats
    }

    /// All definitions recorded for `name`, ordered by (file, start line).
    pub fn definitions(&self, name: &str) -> &[DefinitionLocation] {
        self.definitions.get(name).map_or(&[], Vec::as_slice)
    }

    pub fn contains_file(&self, file: &str) -> bool {
        self.files.contains_key(file)
    }

    /// Exact text of one line (1-based) of an indexed file.
    pub fn line_text(&self, file: &str, line: u32) -> Result<String, RetrievalError> {
        let meta = self
            .files
            .get(file)
            .ok_or_else(|| RetrievalError::FileNotInIndex(file.to_string()))?;
        if line == 0 || line > meta.lines {
            return Err(RetrievalError::OutOfRange {
                file: file.to_string(),
                line,
                lines: meta.lines,
            });
        }
        let lines = self.read_lines(file)?;
        Ok(lines[(line - 1) as usize].clone())
    }

    /// Retrieve the definitions for each requested name. Names with several
    /// definitions return all of them with `ambiguous` set; unknown names
    /// map to [`RetrievedSource::NotFound`].
    pub fn retrieve(&self, names: &[&str]) -> BTreeMap<String, RetrievedSource> {
        let mut out = BTreeMap::new();
        for &name in names {
            out.insert(name.to_string(), self.retrieve_one(name));
        }
        out
    }

    pub fn retrieve_one(&self, name: &str) -> RetrievedSource {
        let locations = self.definitions(name);
        if locations.is_empty() {
            return RetrievedSource::NotFound;
        }
        let mut definitions = Vec::with_capacity(locations.len());
        for location in locations {
            match self.slice(location) {
                Ok(def) => definitions.push(def),
                // The snapshot changed under us; surface what remains.
                Err(_) => continue,
            }
        }
        if definitions.is_empty() {
            return RetrievedSource::NotFound;
        }
        let ambiguous = definitions.len() > 1;
        RetrievedSource::Found {
            definitions,
            ambiguous,
        }
    }

    fn slice(&self, location: &DefinitionLocation) -> Result<RetrievedDefinition, RetrievalError> {
        let lines = self.read_lines(&location.file)?;
        let start = (location.start_line - 1) as usize;
        let end = location.end_line as usize;
        if end > lines.len() {
            return Err(RetrievalError::OutOfRange {
                file: location.file.clone(),
                line: location.end_line,
                lines: lines.len() as u32,
            });
        }
        let slice = &lines[start..end];
        let text = slice.join("\n");
        let annotated = slice
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{}:{}: {}", location.file, location.start_line as usize + i, l))
            .collect::<Vec<_>>()
            .join("\n");
        Ok(RetrievedDefinition {
            location: location.clone(),
            text,
            annotated,
        })
    }

    fn read_lines(&self, file: &str) -> Result<Vec<String>, RetrievalError> {
        let path = self.root.join(file);
        let content = fs::read_to_string(&path).map_err(|source| RetrievalError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(split_lines(&content))
    }

    /// Persist as an `index.v1` cache file.
    pub fn save_cache(&self, path: &Path) -> Result<(), RetrievalError> {
        let cache = CacheFile {
            schema: CACHE_SCHEMA.to_string(),
            index: self.clone(),
        };
        let json =
            serde_json::to_string_pretty(&cache).expect("index serializes");
        fs::write(path, json).map_err(|source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Load an `index.v1` cache and validate it against the current snapshot
    /// (same root and globs, no changed/added/removed files). A stale cache
    /// is an error so the caller can rebuild.
    pub fn load_cache(path: &Path, root: &Path, globs: &[&str]) -> Result<SourceIndex, RetrievalError> {
        let raw = fs::read_to_string(path).map_err(|source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cache: CacheFile = serde_json::from_str(&raw)
            .map_err(|e| RetrievalError::CacheInvalid(e.to_string()))?;
        if cache.schema != CACHE_SCHEMA {
            return Err(RetrievalError::CacheInvalid(format!(
                "schema {} (want {CACHE_SCHEMA})",
                cache.schema
            )));
        }
        let index = cache.index;
        let root = canonical_root(root)?;
        if index.root != root {
            return Err(RetrievalError::CacheStale(format!(
                "cache root {} differs from {}",
                index.root.display(),
                root.display()
            )));
        }
        if index.globs != globs {
            return Err(RetrievalError::CacheStale("glob set changed".into()));
        }
        let current = walk_files(&root, globs)?;
        if current.len() != index.files.len() {
            return Err(RetrievalError::CacheStale(format!(
                "file count changed: {} on disk, {} cached",
                current.len(),
                index.files.len()
            )));
        }
        for rel in &current {
            let meta = index
                .files
                .get(rel)
                .ok_or_else(|| RetrievalError::CacheStale(format!("new file {rel}")))?;
            let content = fs::read(root.join(rel)).map_err(|source| RetrievalError::Io {
                path: root.join(rel),
                source,
            })?;
            if sha256_hex(&content) != meta.sha256 {
                return Err(RetrievalError::CacheStale(format!("{rel} changed")));
            }
        }
        Ok(index)
    }
}

/// Build an index over `root` with the default `*.c` / `*.h` globs.
pub fn build_index(root: &Path) -> Result<SourceIndex, RetrievalError> {
    build_index_with(root, DEFAULT_FILE_GLOBS)
}

pub fn build_index_with(root: &Path, globs: &[&str]) -> Result<SourceIndex, RetrievalError> {
    let root = canonical_root(root)?;
    let rels = walk_files(&root, globs)?;

    let mut files = BTreeMap::new();
    let mut definitions: BTreeMap<String, Vec<DefinitionLocation>> = BTreeMap::new();
    let mut stats = BuildStats::default();

    for rel in rels {
        let path = root.join(&rel);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                stats.warnings.push(format!("{rel}: read failed: {e}"));
                continue;
            }
        };
        let content = match String::from_utf8(bytes.clone()) {
            Ok(s) => s,
            Err(_) => {
                stats.warnings.push(format!("{rel}: not UTF-8, skipped"));
                continue;
            }
        };
        let lines = split_lines(&content);
        files.insert(
            rel.clone(),
            FileMeta {
                sha256: sha256_hex(&bytes),
                lines: lines.len() as u32,
            },
        );
        stats.files_scanned += 1;
        scan_file(&rel, &lines, &mut definitions, &mut stats);
    }

    for defs in definitions.values_mut() {
        defs.sort_by(|a, b| (&a.file, a.start_line).cmp(&(&b.file, b.start_line)));
    }

    Ok(SourceIndex {
        root,
        globs: globs.iter().map(|g| g.to_string()).collect(),
        files,
        definitions,
        stats,
    })
}

fn canonical_root(root: &Path) -> Result<PathBuf, RetrievalError> {
    if !root.is_dir() {
        return Err(RetrievalError::RootNotFound(root.to_path_buf()));
    }
    root.canonicalize().map_err(|source| RetrievalError::Io {
        path: root.to_path_buf(),
        source,
    })
}

fn walk_files(root: &Path, globs: &[&str]) -> Result<Vec<String>, RetrievalError> {
    let set = glob_set(globs)?;
    let mut rels = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(_) => continue,
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("walk stays under root")
            .to_string_lossy()
            .replace('\\', "/");
        if set.is_match(&rel) {
            rels.push(rel);
        }
    }
    rels.sort();
    Ok(rels)
}

fn glob_set(globs: &[&str]) -> Result<GlobSet, RetrievalError> {
    let mut builder = GlobSetBuilder::new();
    for pattern in globs {
        let glob = Glob::new(pattern).map_err(|source| RetrievalError::BadGlob {
            pattern: pattern.to_string(),
            source,
        })?;
        builder.add(glob);
    }
    builder.build().map_err(|source| RetrievalError::BadGlob {
        pattern: globs.join(","),
        source,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Split keeping CRLF tolerable: lines are `\n`-separated, a trailing `\r`
/// is stripped. A trailing newline does not create a final empty line.
fn split_lines(content: &str) -> Vec<String> {
    let mut lines: Vec<String> = content
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect();
    if content.ends_with('\n') {
        lines.pop();
    }
    lines
}

fn is_c_keyword(word: &str) -> bool {
    matches!(
        word,
        "if" | "else"
            | "for"
            | "while"
            | "do"
            | "switch"
            | "return"
            | "sizeof"
            | "int"
            | "char"
            | "void"
            | "long"
            | "short"
            | "unsigned"
            | "signed"
            | "float"
            | "double"
            | "const"
            | "static"
            | "inline"
            | "struct"
            | "union"
            | "enum"
            | "typedef"
    )
}

fn struct_head_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?:typedef\s+)?(?:struct|union|enum)\s+([A-Za-z_][A-Za-z0-9_]*)\s*$").unwrap()
    })
}

fn ident_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"([A-Za-z_][A-Za-z0-9_]*)\s*$").unwrap())
}

/// Strip comments and literals from one line, tracking block-comment state.
fn strip_noise(line: &str, in_block_comment: &mut bool) -> String {
    let bytes: Vec<char> = line.chars().collect();
    let mut out = String::with_capacity(line.len());
    let mut i = 0;
    while i < bytes.len() {
        if *in_block_comment {
            if bytes[i] == '*' && i + 1 < bytes.len() && bytes[i + 1] == '/' {
                *in_block_comment = false;
                i += 2;
            } else {
                i += 1;
            }
            continue;
        }
        match bytes[i] {
            '/' if i + 1 < bytes.len() && bytes[i + 1] == '/' => break,
            '/' if i + 1 < bytes.len() && bytes[i + 1] == '*' => {
                *in_block_comment = true;
                i += 2;
            }
            '"' | '\'' => {
                let quote = bytes[i];
                i += 1;
                while i < bytes.len() {
                    if bytes[i] == '\\' {
                        i += 2;
                        continue;
                    }
                    if bytes[i] == quote {
                        i += 1;
                        break;
                    }
                    i += 1;
                }
                out.push(if quote == '"' { '"' } else { '\'' });
            }
            c => {
                out.push(c);
                i += 1;
            }
        }
    }
    out
}

fn scan_file(
    rel: &str,
    lines: &[String],
    definitions: &mut BTreeMap<String, Vec<DefinitionLocation>>,
    stats: &mut BuildStats,
) {
    let mut depth: i64 = 0;
    let mut in_block_comment = false;
    let mut directive_continues = false;
    // Pending definition header collected at depth 0: (start line, text).
    let mut header: Option<(u32, String)> = None;
    // Definition whose body is currently open.
    let mut open: Option<DefinitionLocation> = None;

    for (idx, raw_line) in lines.iter().enumerate() {
        let line_no = (idx + 1) as u32;
        let was_in_comment = in_block_comment;
        let code = strip_noise(raw_line, &mut in_block_comment);
        let trimmed = code.trim();

        // Preprocessor directives (and their continuations) do not affect
        // brace depth; multi-line macro bodies are opaque to the scanner.
        let is_directive = directive_continues || (!was_in_comment && trimmed.starts_with('#'));
        directive_continues = is_directive && trimmed.ends_with('\\');
        if is_directive {
            continue;
        }

        // Grow the candidate header with this line's text before any brace.
        if depth == 0 && open.is_none() {
            let pre = code[..code.find('{').unwrap_or(code.len())].trim();
            if !pre.is_empty() {
                match &mut header {
                    Some((_, text)) => {
                        text.push(' ');
                        text.push_str(pre);
                    }
                    None => header = Some((line_no, pre.to_string())),
                }
            }
        }

        let mut line_touched_top_level_brace = false;
        for ch in code.chars() {
            match ch {
                '{' => {
                    if depth == 0 {
                        line_touched_top_level_brace = true;
                        let (start, head) = header.take().unwrap_or((line_no, String::new()));
                        open = classify_header(&head, rel, start);
                    }
                    depth += 1;
                }
                '}' => {
                    depth -= 1;
                    if depth < 0 {
                        stats
                            .warnings
                            .push(format!("{rel}:{line_no}: unbalanced closing brace"));
                        depth = 0;
                    }
                    if depth == 0 {
                        line_touched_top_level_brace = true;
                        if let Some(mut loc) = open.take() {
                            loc.end_line = if loc.kind == DefKind::Structure {
                                // Span through the terminating `;` (possibly
                                // a typedef alias on a later line).
                                find_terminator(lines, idx, in_block_comment)
                            } else {
                                line_no
                            };
                            loc.signature = lines[(loc.start_line - 1) as usize].clone();
                            match loc.kind {
                                DefKind::Function => stats.functions += 1,
                                DefKind::Structure => stats.structures += 1,
                            }
                            definitions.entry(loc.name.clone()).or_default().push(loc);
                        }
                    }
                }
                _ => {}
            }
        }

        // Reset the header at statement and block boundaries.
        if depth == 0
            && (line_touched_top_level_brace || trimmed.is_empty() || trimmed.ends_with(';'))
        {
            header = None;
        }
    }

    if depth != 0 {
        stats
            .warnings
            .push(format!("{rel}: unbalanced braces at end of file (depth {depth})"));
    }
}

/// Find the line of the `;` that terminates a struct/union/enum body,
/// starting from the closing-brace line (typedef aliases may follow).
fn find_terminator(lines: &[String], close_idx: usize, comment_state: bool) -> u32 {
    let mut in_comment = comment_state;
    for (off, line) in lines[close_idx..].iter().take(4).enumerate() {
        let code = strip_noise(line, &mut in_comment);
        let after = if off == 0 {
            // Only text after the last closing brace counts.
            match code.rfind('}') {
                Some(pos) => &code[pos + 1..],
                None => code.as_str(),
            }
        } else {
            code.as_str()
        };
        if after.contains(';') {
            return (close_idx + off + 1) as u32;
        }
    }
    (close_idx + 1) as u32
}

/// Decide whether a top-level header opens a function or structure body.
fn classify_header(head: &str, rel: &str, start: u32) -> Option<DefinitionLocation> {
    if head.is_empty() {
        return None;
    }
    if let Some(caps) = struct_head_re().captures(head) {
        return Some(DefinitionLocation {
            name: caps[1].to_string(),
            kind: DefKind::Structure,
            file: rel.to_string(),
            start_line: start,
            end_line: start,
            signature: String::new(),
        });
    }
    // `name(args...)`: identifier immediately before the first `(`, with at
    // least one return-type token before it. `DEFINE_X(name)` headers have
    // nothing before the identifier and are skipped on purpose.
    let paren = head.find('(')?;
    let before = &head[..paren];
    let caps = ident_re().captures(before)?;
    let name = caps[1].to_string();
    let qualifier = before[..before.len() - caps[0].len()].trim();
    if qualifier.is_empty() {
        return None; // macro invocation or K&R style: not indexed
    }
    if qualifier.ends_with('=') || qualifier.ends_with(',') || is_c_keyword(&name) {
        return None;
    }
    Some(DefinitionLocation {
        name,
        kind: DefKind::Function,
        file: rel.to_string(),
        start_line: start,
        end_line: start,
        signature: String::new(),
    })
}
