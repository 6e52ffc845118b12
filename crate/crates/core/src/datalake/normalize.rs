//! Staging-layer text cleaning.

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

pub const STAGE_LINE_BREAKS: &str = "line_breaks";
pub const STAGE_NON_INFORMATIVE: &str = "non_informative_chars";
pub const STAGE_WHITESPACE: &str = "whitespace_collapse";
pub const STAGE_TOKENIZE: &str = "tokenize";

/// Cleaned text of one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedText {
    pub doc_id: String,
    pub clean_text: String,
    /// Diagnostic only; chunking and embedding work on `clean_text`.
    pub tokens: Vec<String>,
    pub normalization_log: Vec<String>,
    /// Character offsets of spaces in `clean_text` that replaced a line break.
    #[serde(default)]
    pub line_breaks: Vec<usize>,
}

impl StagedText {
    pub fn with_doc_id(mut self, doc_id: impl Into<String>) -> Self {
        self.doc_id = doc_id.into();
        self
    }

    pub fn char_len(&self) -> usize {
        self.clean_text.chars().count()
    }
}

// (character, came from a line break)
type Marked = Vec<(char, bool)>;

fn is_zero_width_removable(c: char) -> bool {
    matches!(
        c,
        '\u{00AD}' | '\u{200C}' | '\u{200D}' | '\u{2060}' | '\u{FEFF}' | '\u{180E}'
    )
}

fn stage_line_breaks(text: &str) -> Marked {
    let mut out = Vec::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\r' => {
                if chars.peek() == Some(&'\n') {
                    chars.next();
                }
                out.push((' ', true));
            }
            '\n' | '\u{2028}' | '\u{2029}' | '\u{0085}' => out.push((' ', true)),
            other => out.push((other, false)),
        }
    }
    out
}

fn stage_non_informative(input: Marked) -> Marked {
    input
        .into_iter()
        .filter_map(|(c, nl)| {
            if c == '\u{200B}' || c == '\t' || c == '\u{000B}' || c == '\u{000C}' {
                // separators without visible width become plain spaces
                Some((' ', nl))
            } else if c.is_control() || is_zero_width_removable(c) {
                None
            } else {
                Some((c, nl))
            }
        })
        .collect()
}

fn stage_whitespace(input: Marked) -> Marked {
    let mut out: Marked = Vec::with_capacity(input.len());
    let mut pending: Option<bool> = None;
    for (c, nl) in input {
        if c.is_whitespace() {
            pending = Some(pending.unwrap_or(false) || nl);
        } else {
            if let Some(flag) = pending.take() {
                if !out.is_empty() {
                    out.push((' ', flag));
                }
            }
            out.push((c, false));
        }
    }
    out
}

/// Cleans `text` in four logged stages: line breaks to spaces, removal of
/// control and zero-width characters, whitespace collapse with trim, and
/// Unicode word tokenisation.
pub fn normalize(text: &str) -> StagedText {
    let mut log = Vec::with_capacity(4);
    let marked = stage_line_breaks(text);
    log.push(STAGE_LINE_BREAKS.to_string());
    let marked = stage_non_informative(marked);
    log.push(STAGE_NON_INFORMATIVE.to_string());
    let marked = stage_whitespace(marked);
    log.push(STAGE_WHITESPACE.to_string());

    let clean_text: String = marked.iter().map(|(c, _)| *c).collect();
    let line_breaks = marked
        .iter()
        .enumerate()
        .filter(|(_, (_, nl))| *nl)
        .map(|(i, _)| i)
        .collect();
    let tokens = clean_text.unicode_words().map(str::to_string).collect();
    log.push(STAGE_TOKENIZE.to_string());

    StagedText {
        doc_id: String::new(),
        clean_text,
        tokens,
        normalization_log: log,
        line_breaks,
    }
}
