//! Pluggable text extraction per document format.

use std::collections::HashMap;
use std::sync::Arc;

use super::{DataLakeError, DocFormat, RawDocument};

pub trait TextExtractor: Send + Sync {
    fn format(&self) -> DocFormat;
    fn extract(&self, doc: &RawDocument, bytes: &[u8]) -> Result<String, DataLakeError>;
}

/// UTF-8 plain text, returned unchanged.
pub struct PlainTextExtractor;

impl TextExtractor for PlainTextExtractor {
    fn format(&self) -> DocFormat {
        DocFormat::PlainText
    }

    fn extract(&self, doc: &RawDocument, bytes: &[u8]) -> Result<String, DataLakeError> {
        String::from_utf8(bytes.to_vec()).map_err(|e| DataLakeError::DecodeFailure {
            doc_id: doc.doc_id.clone(),
            detail: e.to_string(),
        })
    }
}

#[derive(Clone)]
pub struct ExtractorRegistry {
    by_format: HashMap<DocFormat, Arc<dyn TextExtractor>>,
}

impl Default for ExtractorRegistry {
    /// Plain text only; PDF and DOCX report `ExtractorUnavailable`.
    fn default() -> Self {
        let mut r = Self {
            by_format: HashMap::new(),
        };
        r.register(Arc::new(PlainTextExtractor));
        r
    }
}

impl ExtractorRegistry {
    pub fn register(&mut self, extractor: Arc<dyn TextExtractor>) {
        self.by_format.insert(extractor.format(), extractor);
    }

    pub fn extract(&self, doc: &RawDocument, bytes: &[u8]) -> Result<String, DataLakeError> {
        self.by_format
            .get(&doc.format)
            .ok_or(DataLakeError::ExtractorUnavailable(doc.format))?
            .extract(doc, bytes)
    }
}
