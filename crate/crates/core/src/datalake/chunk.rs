//! Sliding-window chunking of staged text.

use serde::{Deserialize, Serialize};

use super::normalize::StagedText;
use super::DataLakeError;

pub const DEFAULT_MAX_CHARS: usize = 800;
pub const DEFAULT_OVERLAP_CHARS: usize = 200;

/// A span-addressed fragment of a document's clean text. Offsets count
/// Unicode scalar values, `end` exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub case_id: String,
    pub ordinal: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl Chunk {
    pub fn char_span(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

pub fn chunk_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}:{ordinal:05}")
}

/// Splits `staged.clean_text` into windows of at most `max_chars` characters
/// advancing by `max_chars - overlap_chars`. A window that does not reach the
/// end of the text is cut back to the last sentence boundary found in its
/// final fifth, if any.
pub fn chunk_text(
    staged: &StagedText,
    case_id: &str,
    max_chars: usize,
    overlap_chars: usize,
) -> Result<Vec<Chunk>, DataLakeError> {
    if overlap_chars == 0 || overlap_chars >= max_chars {
        return Err(DataLakeError::InvalidChunkParams {
            max_chars,
            overlap_chars,
        });
    }
    let chars: Vec<char> = staged.clean_text.chars().collect();
    let n = chars.len();
    let mut chunks = Vec::new();
    let mut start = 0usize;
    while start < n {
        let window_end = (start + max_chars).min(n);
        let end = if window_end == n {
            n
        } else {
            snap_to_boundary(&chars, &staged.line_breaks, start, window_end, max_chars, overlap_chars)
        };
        let ordinal = chunks.len();
        chunks.push(Chunk {
            chunk_id: chunk_id(&staged.doc_id, ordinal),
            doc_id: staged.doc_id.clone(),
            case_id: case_id.to_string(),
            ordinal,
            start,
            end,
            text: chars[start..end].iter().collect(),
        });
        if end == n {
            break;
        }
        start = end - overlap_chars;
    }
    Ok(chunks)
}

fn snap_to_boundary(
    chars: &[char],
    line_breaks: &[usize],
    start: usize,
    window_end: usize,
    max_chars: usize,
    overlap_chars: usize,
) -> usize {
    let lowest = (start + max_chars - max_chars / 5).max(start + overlap_chars + 1);
    let mut e = window_end;
    while e >= lowest {
        let after_punct = e < chars.len()
            && chars[e] == ' '
            && matches!(chars[e - 1], '.' | '?' | '!');
        if after_punct || line_breaks.binary_search(&e).is_ok() {
            return e;
        }
        e -= 1;
    }
    window_end
}
