//! Improve-region span anchors.
//!
//! The plan agent returns the full source with one or more regions wrapped in
//! comment markers:
//!
//! ```text
//!     // <<<IMPROVE BEGIN>>>
//!     ...
//!     // <<<IMPROVE END>>>
//! ```
//!
//! A marker line is optional indentation, a comment leader (`//`, `##` or
//! `#`), one space and the marker token. Both `BEGIN`/`END` and
//! `BEGINS`/`ENDS` spellings are accepted; `BEGIN`/`END` is what we emit.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BEGIN: &str = "<<<IMPROVE BEGIN>>>";
pub const END: &str = "<<<IMPROVE END>>>";
const BEGIN_ALT: &str = "<<<IMPROVE BEGINS>>>";
const END_ALT: &str = "<<<IMPROVE ENDS>>>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageZone {
    Python,
    CppCuda,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedRegion {
    pub start_line: usize,
    pub end_line: usize,
    pub language_zone: LanguageZone,
    pub begin_marker_text: String,
    pub end_marker_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchoredScaffold {
    pub text: String,
    pub regions: Vec<MarkedRegion>,
    pub advice: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScaffoldError {
    #[error("unbalanced markers: BEGIN on line {0} has no END")]
    Unbalanced(usize),
    #[error("END marker on line {0} before any BEGIN")]
    EndBeforeBegin(usize),
    #[error("nested BEGIN marker on line {0}")]
    NestedBegin(usize),
    #[error("no improve region marked")]
    NoRegions,
    #[error("no code block in response")]
    NoCodeBlock,
    #[error("no valid region: {0}")]
    NoValidRegion(String),
    #[error("no advice in response")]
    NoAdvice,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StyleViolation {
    NotAComment {
        line: usize,
    },
    WrongLeader {
        line: usize,
        leader: String,
        zone: LanguageZone,
    },
}

impl fmt::Display for StyleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StyleViolation::NotAComment { line } => write!(f, "line {line}: marker not a comment"),
            StyleViolation::WrongLeader { line, leader, zone } => {
                write!(
                    f,
                    "line {line}: wrong comment leader '{leader}' for {zone:?} code"
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MarkerKind {
    Begin,
    End,
}

/// Recognize a marker line, returning its kind and comment leader ("" when
/// bare).
fn marker(line: &str) -> Option<(MarkerKind, &'static str)> {
    let t = line.trim();
    for leader in ["//", "##", "#", ""] {
        let Some(rest) = t.strip_prefix(leader) else {
            continue;
        };
        let rest = rest.trim_start();
        // a bare marker must not be preceded by anything
        if leader.is_empty() && rest.len() != t.len() {
            continue;
        }
        let kind = match rest {
            BEGIN | BEGIN_ALT => MarkerKind::Begin,
            END | END_ALT => MarkerKind::End,
            _ => continue,
        };
        return Some((kind, leader));
    }
    None
}

pub fn is_marker_line(line: &str) -> bool {
    marker(line).is_some()
}

/// Zone of every line (index = line number - 1). A line is C++/CUDA when it
/// sits inside a triple-quoted string assigned to a name ending in
/// `_source`.
pub fn line_zones(text: &str) -> Vec<LanguageZone> {
    let mut zones = Vec::new();
    let mut open: Option<&'static str> = None;
    for line in text.lines() {
        if let Some(delim) = open {
            if line.contains(delim) {
                open = None;
                zones.push(LanguageZone::Python);
            } else {
                zones.push(LanguageZone::CppCuda);
            }
            continue;
        }
        zones.push(LanguageZone::Python);
        if let Some((lhs, rhs)) = line.split_once('=') {
            let name = lhs.trim();
            let is_ident =
                !name.is_empty() && name.chars().all(|c| c.is_alphanumeric() || c == '_');
            if !is_ident || !name.ends_with("_source") {
                continue;
            }
            let rhs = rhs
                .trim_start()
                .trim_start_matches(['r', 'R', 'f', 'F', 'b', 'B']);
            for delim in ["\"\"\"", "'''"] {
                if let Some(after) = rhs.strip_prefix(delim) {
                    if !after.contains(delim) {
                        open = Some(delim);
                    }
                    break;
                }
            }
        }
    }
    zones
}

pub fn parse_scaffold(text: &str) -> Result<Vec<MarkedRegion>, ScaffoldError> {
    let zones = line_zones(text);
    let mut regions = Vec::new();
    let mut begin: Option<(usize, String)> = None;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        match (marker(line).map(|m| m.0), &begin) {
            (Some(MarkerKind::Begin), None) => begin = Some((lineno, line.to_string())),
            (Some(MarkerKind::Begin), Some(_)) => return Err(ScaffoldError::NestedBegin(lineno)),
            (Some(MarkerKind::End), None) => return Err(ScaffoldError::EndBeforeBegin(lineno)),
            (Some(MarkerKind::End), Some((start, begin_text))) => {
                regions.push(MarkedRegion {
                    start_line: *start,
                    end_line: lineno,
                    language_zone: zones[*start - 1],
                    begin_marker_text: begin_text.clone(),
                    end_marker_text: line.to_string(),
                });
                begin = None;
            }
            (None, _) => {}
        }
    }
    if let Some((start, _)) = begin {
        return Err(ScaffoldError::Unbalanced(start));
    }
    if regions.is_empty() {
        return Err(ScaffoldError::NoRegions);
    }
    Ok(regions)
}

/// Both marker lines must use the comment leader of the region's zone:
/// `//` inside kernel strings, `#` or `##` in Python.
pub fn validate_comment_style(region: &MarkedRegion, _text: &str) -> Result<(), StyleViolation> {
    for (line, marker_text) in [
        (region.start_line, &region.begin_marker_text),
        (region.end_line, &region.end_marker_text),
    ] {
        let leader = marker(marker_text).map_or("", |m| m.1);
        let ok = match (leader, region.language_zone) {
            ("", _) => return Err(StyleViolation::NotAComment { line }),
            ("//", LanguageZone::CppCuda) => true,
            ("#" | "##", LanguageZone::Python) => true,
            _ => false,
        };
        if !ok {
            return Err(StyleViolation::WrongLeader {
                line,
                leader: leader.to_string(),
                zone: region.language_zone,
            });
        }
    }
    Ok(())
}

/// Remove every marker line and keep all other bytes.
pub fn strip_markers(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for piece in text.split_inclusive('\n') {
        if !is_marker_line(piece) {
            out.push_str(piece);
        } else if !piece.ends_with('\n') && out.ends_with('\n') {
            // unterminated final marker line: its separator goes too
            out.pop();
            if out.ends_with('\r') {
                out.pop();
            }
        }
    }
    out
}

/// Wrap lines `start..=end` (1-based) in marker comments using `leader`.
/// Inverse of [`strip_markers`] for sources without marker lines.
pub fn insert_markers(text: &str, start: usize, end: usize, leader: &str) -> String {
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let indent_of = |l: &str| l[..l.len() - l.trim_start_matches([' ', '\t']).len()].to_string();
    let mut out = String::with_capacity(text.len() + 64);
    for (idx, line) in lines.iter().enumerate() {
        let lineno = idx + 1;
        if lineno == start {
            out.push_str(&format!("{}{leader} {BEGIN}\n", indent_of(line)));
        }
        out.push_str(line);
        if lineno == end {
            if !line.ends_with('\n') {
                out.push('\n');
                out.push_str(&format!("{}{leader} {END}", indent_of(line)));
            } else {
                out.push_str(&format!("{}{leader} {END}\n", indent_of(line)));
            }
        }
    }
    out
}

/// Bodies of all fenced code blocks, in order. An unterminated final fence
/// runs to the end of the text.
pub fn fenced_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<String> = None;
    for piece in text.split_inclusive('\n') {
        let fence = piece.trim_start().starts_with("```");
        match (&mut current, fence) {
            (None, true) => current = Some(String::new()),
            (Some(buf), true) => {
                blocks.push(std::mem::take(buf));
                current = None;
            }
            (Some(buf), false) => buf.push_str(piece),
            (None, false) => {}
        }
    }
    if let Some(buf) = current {
        blocks.push(buf);
    }
    blocks
}

/// Text before the first fence.
pub fn prose_before_first_fence(text: &str) -> &str {
    let mut offset = 0;
    for piece in text.split_inclusive('\n') {
        if piece.trim_start().starts_with("```") {
            return &text[..offset];
        }
        offset += piece.len();
    }
    text
}

/// Split a plan-agent response into advice and the annotated scaffold.
pub fn parse_plan_response(llm_text: &str) -> Result<AnchoredScaffold, ScaffoldError> {
    let blocks = fenced_blocks(llm_text);
    let scaffold = blocks.last().ok_or(ScaffoldError::NoCodeBlock)?.clone();
    let regions = parse_scaffold(&scaffold)?;
    let mut violations = Vec::new();
    let valid: Vec<MarkedRegion> = regions
        .into_iter()
        .filter(|r| match validate_comment_style(r, &scaffold) {
            Ok(()) => true,
            Err(v) => {
                violations.push(v.to_string());
                false
            }
        })
        .collect();
    if valid.is_empty() {
        return Err(ScaffoldError::NoValidRegion(violations.join("; ")));
    }
    let mut advice = prose_before_first_fence(llm_text).trim().to_string();
    if advice.is_empty() {
        advice = inline_advice(&scaffold, &valid);
    }
    if advice.is_empty() {
        return Err(ScaffoldError::NoAdvice);
    }
    Ok(AnchoredScaffold {
        text: scaffold,
        regions: valid,
        advice,
    })
}

/// Comment lines inside the marked regions, leaders removed.
fn inline_advice(text: &str, regions: &[MarkedRegion]) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let mut advice = Vec::new();
    for r in regions {
        for line in &lines[r.start_line..r.end_line - 1] {
            let t = line.trim_start();
            for leader in ["//", "##", "#"] {
                if let Some(rest) = t.strip_prefix(leader) {
                    let rest = rest.trim();
                    if !rest.is_empty() {
                        advice.push(rest.to_string());
                    }
                    break;
                }
            }
        }
    }
    advice.join("\n")
}
