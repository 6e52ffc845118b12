//! Layered data lake: landing (verbatim bytes), staging (clean text) and the
//! refined chunk file.
//!
//! Layout under the root:
//!
//! ```text
//! landing/<case_id>/<checksum>__<original-name>
//! staging/<doc_id>.clean.txt
//! staging/<doc_id>.meta.json
//! refined/chunks.jsonl
//! manifests/<run_id>.json
//! ```

mod chunk;
mod extract;
mod normalize;

pub use chunk::{chunk_id, chunk_text, Chunk, DEFAULT_MAX_CHARS, DEFAULT_OVERLAP_CHARS};
pub use extract::{ExtractorRegistry, PlainTextExtractor, TextExtractor};
pub use normalize::{normalize, StagedText};

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::{is_safe_id, write_atomic};
use crate::text::sha256_hex;

#[derive(Debug, Error)]
pub enum DataLakeError {
    #[error("unsupported format: {path}")]
    UnsupportedFormat { path: PathBuf },
    #[error("empty file: {path}")]
    EmptyFile { path: PathBuf },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("document {doc_id} is not valid UTF-8: {detail}")]
    DecodeFailure { doc_id: String, detail: String },
    #[error("no text extractor configured for {0:?} documents")]
    ExtractorUnavailable(DocFormat),
    #[error("invalid chunk parameters: max_chars={max_chars}, overlap_chars={overlap_chars} (need 0 < overlap < max)")]
    InvalidChunkParams {
        max_chars: usize,
        overlap_chars: usize,
    },
    #[error("invalid case id {0:?}")]
    InvalidCaseId(String),
    #[error("no case id for top-level file {path}")]
    NoCaseId { path: PathBuf },
    #[error("another pipeline run holds {0}")]
    Locked(PathBuf),
    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error("corrupt data-lake record {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("downstream load failed: {0}")]
    Sink(String),
}

impl DataLakeError {
    /// Short reason code recorded in manifests.
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnsupportedFormat { .. } => "UnsupportedFormat",
            Self::EmptyFile { .. } => "EmptyFile",
            Self::Io { .. } => "IoFailure",
            Self::DecodeFailure { .. } => "DecodeFailure",
            Self::ExtractorUnavailable(_) => "ExtractorUnavailable",
            Self::InvalidChunkParams { .. } => "InvalidChunkParams",
            Self::InvalidCaseId(_) => "InvalidCaseId",
            Self::NoCaseId { .. } => "NoCaseId",
            Self::Locked(_) => "Locked",
            Self::UnknownDocument(_) => "UnknownDocument",
            Self::Corrupt { .. } => "Corrupt",
            Self::Sink(_) => "SinkFailure",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataLakeError + '_ {
    move |source| DataLakeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocFormat {
    PlainText,
    Pdf,
    Docx,
}

impl DocFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_lowercase();
        match ext.as_str() {
            "txt" => Some(Self::PlainText),
            "pdf" => Some(Self::Pdf),
            "docx" => Some(Self::Docx),
            _ => None,
        }
    }
}

/// A document preserved verbatim in the landing layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub case_id: String,
    /// Relative to the landing layer: `<case_id>/<checksum>__<name>`.
    pub source_path: String,
    pub format: DocFormat,
    pub byte_size: u64,
    /// Hex SHA-256 of the file bytes.
    pub checksum: String,
    pub received_at: DateTime<Utc>,
}

/// Document id derived from the owning case and the content checksum, so the
/// same bytes ingested for the same case always map to one document.
pub fn doc_id_for(case_id: &str, checksum: &str) -> String {
    let digest = sha256_hex(format!("{case_id}\u{0}{checksum}").as_bytes());
    format!("doc-{}", &digest[..20])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagingInfo {
    pub normalization_log: Vec<String>,
    pub token_count: usize,
    pub chunk_count: usize,
    pub max_chars: usize,
    pub overlap_chars: usize,
}

/// Contents of `staging/<doc_id>.meta.json`. `staging` is set once the
/// document has been fully processed and loaded downstream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentMeta {
    pub document: RawDocument,
    #[serde(default)]
    pub staging: Option<StagingInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub path: String,
    pub reason: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub run_id: String,
    pub started_at: DateTime<Utc>,
    pub ingested: Vec<String>,
    pub rejected: Vec<Rejection>,
    pub chunk_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub max_chars: usize,
    pub overlap_chars: usize,
    /// Case for files placed directly in the source directory.
    #[serde(default)]
    pub default_case: Option<String>,
    /// File names skipped silently (e.g. ground-truth sidecars).
    #[serde(default = "default_ignore_names")]
    pub ignore_names: Vec<String>,
}

fn default_ignore_names() -> Vec<String> {
    vec!["truth.json".to_string()]
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_chars: DEFAULT_MAX_CHARS,
            overlap_chars: DEFAULT_OVERLAP_CHARS,
            default_case: None,
            ignore_names: default_ignore_names(),
        }
    }
}

/// Receives the chunks of each newly staged document (vector index load and
/// structured record keeping).
pub trait ChunkSink {
    fn accept(&mut self, doc: &RawDocument, chunks: &[Chunk]) -> Result<(), String>;
}

/// Sink that drops everything; useful when only the lake layers are wanted.
pub struct NullSink;

impl ChunkSink for NullSink {
    fn accept(&mut self, _doc: &RawDocument, _chunks: &[Chunk]) -> Result<(), String> {
        Ok(())
    }
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct DataLake {
    root: PathBuf,
    extractors: ExtractorRegistry,
}

impl DataLake {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, DataLakeError> {
        let root = root.into();
        for sub in ["landing", "staging", "refined", "manifests"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(Self {
            root,
            extractors: ExtractorRegistry::default(),
        })
    }

    pub fn with_extractors(mut self, extractors: ExtractorRegistry) -> Self {
        self.extractors = extractors;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn landing_dir(&self) -> PathBuf {
        self.root.join("landing")
    }

    pub fn chunks_path(&self) -> PathBuf {
        self.root.join("refined").join("chunks.jsonl")
    }

    fn meta_path(&self, doc_id: &str) -> PathBuf {
        self.root.join("staging").join(format!("{doc_id}.meta.json"))
    }

    fn clean_path(&self, doc_id: &str) -> PathBuf {
        self.root.join("staging").join(format!("{doc_id}.clean.txt"))
    }

    pub fn landing_path(&self, doc: &RawDocument) -> PathBuf {
        self.landing_dir().join(&doc.source_path)
    }

    pub fn document_meta(&self, doc_id: &str) -> Result<DocumentMeta, DataLakeError> {
        let path = self.meta_path(doc_id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(DataLakeError::UnknownDocument(doc_id.to_string()))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        serde_json::from_slice(&bytes).map_err(|e| DataLakeError::Corrupt {
            path,
            detail: e.to_string(),
        })
    }

    fn write_meta(&self, meta: &DocumentMeta) -> Result<(), DataLakeError> {
        let path = self.meta_path(&meta.document.doc_id);
        let mut bytes = serde_json::to_vec_pretty(meta).expect("meta serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes).map_err(io_err(&path))
    }

    /// Copies `path` verbatim into the landing layer under a content-addressed
    /// name and records its technical metadata. Re-ingesting identical bytes
    /// for the same case returns the existing document.
    pub fn ingest_document(&self, path: &Path, case_id: &str) -> Result<RawDocument, DataLakeError> {
        self.land(path, case_id).map(|(doc, _)| doc)
    }

    fn land(&self, path: &Path, case_id: &str) -> Result<(RawDocument, DocumentMeta), DataLakeError> {
        if !is_safe_id(case_id) {
            return Err(DataLakeError::InvalidCaseId(case_id.to_string()));
        }
        let format = DocFormat::from_path(path).ok_or_else(|| DataLakeError::UnsupportedFormat {
            path: path.to_path_buf(),
        })?;
        let bytes = fs::read(path).map_err(io_err(path))?;
        if bytes.is_empty() {
            return Err(DataLakeError::EmptyFile {
                path: path.to_path_buf(),
            });
        }
        let checksum = sha256_hex(&bytes);
        let doc_id = doc_id_for(case_id, &checksum);
        match self.document_meta(&doc_id) {
            Ok(meta) => return Ok((meta.document.clone(), meta)),
            Err(DataLakeError::UnknownDocument(_)) => {}
            Err(e) => return Err(e),
        }

        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("document")
            .replace(['/', '\\'], "_");
        let source_path = format!("{case_id}/{checksum}__{name}");
        let dest = self.landing_dir().join(&source_path);
        write_atomic(&dest, &bytes).map_err(io_err(&dest))?;

        let doc = RawDocument {
            doc_id,
            case_id: case_id.to_string(),
            source_path,
            format,
            byte_size: bytes.len() as u64,
            checksum,
            received_at: Utc::now(),
        };
        let meta = DocumentMeta {
            document: doc.clone(),
            staging: None,
        };
        self.write_meta(&meta)?;
        Ok((doc, meta))
    }

    /// Reads the landed bytes of `doc` back as text.
    pub fn extract_text(&self, doc: &RawDocument) -> Result<String, DataLakeError> {
        let path = self.landing_path(doc);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        self.extractors.extract(doc, &bytes)
    }

    pub fn staged_text(&self, doc_id: &str) -> Result<String, DataLakeError> {
        let path = self.clean_path(doc_id);
        fs::read_to_string(&path).map_err(io_err(&path))
    }

    /// All chunks in the refined layer, ordered by chunk id. Later records
    /// for an already-seen chunk id replace earlier ones.
    pub fn load_chunks(&self) -> Result<Vec<Chunk>, DataLakeError> {
        let path = self.chunks_path();
        let content = match fs::read_to_string(&path) {
            Ok(c) => c,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let mut by_id = BTreeMap::new();
        for line in content.split_inclusive('\n') {
            // an unterminated last line is a torn append
            if !line.ends_with('\n') || line.trim().is_empty() {
                continue;
            }
            let chunk: Chunk = serde_json::from_str(line).map_err(|e| DataLakeError::Corrupt {
                path: path.clone(),
                detail: e.to_string(),
            })?;
            by_id.insert(chunk.chunk_id.clone(), chunk);
        }
        Ok(by_id.into_values().collect())
    }

    fn append_chunks(&self, chunks: &[Chunk]) -> Result<(), DataLakeError> {
        if chunks.is_empty() {
            return Ok(());
        }
        let path = self.chunks_path();
        let mut buf = Vec::new();
        for c in chunks {
            serde_json::to_writer(&mut buf, c).expect("chunk serializes");
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        f.write_all(&buf).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))
    }

    fn acquire_lock(&self) -> Result<LockGuard, DataLakeError> {
        let path = self.root.join(".pipeline.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(DataLakeError::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Full ETL for one file. Returns `None` when the document was already
    /// staged by an earlier run.
    fn process_one(
        &self,
        path: &Path,
        case_id: &str,
        config: &PipelineConfig,
        sink: &mut dyn ChunkSink,
    ) -> Result<Option<(RawDocument, usize)>, DataLakeError> {
        let (doc, meta) = self.land(path, case_id)?;
        if meta.staging.is_some() {
            return Ok(None);
        }
        let text = self.extract_text(&doc)?;
        let staged = normalize(&text).with_doc_id(&doc.doc_id);
        let clean = self.clean_path(&doc.doc_id);
        write_atomic(&clean, staged.clean_text.as_bytes()).map_err(io_err(&clean))?;
        let chunks = chunk_text(&staged, case_id, config.max_chars, config.overlap_chars)?;
        sink.accept(&doc, &chunks).map_err(DataLakeError::Sink)?;
        self.append_chunks(&chunks)?;
        self.write_meta(&DocumentMeta {
            document: doc.clone(),
            staging: Some(StagingInfo {
                normalization_log: staged.normalization_log.clone(),
                token_count: staged.tokens.len(),
                chunk_count: chunks.len(),
                max_chars: config.max_chars,
                overlap_chars: config.overlap_chars,
            }),
        })?;
        Ok(Some((doc, chunks.len())))
    }

    /// Ingests explicit files for one case.
    pub fn ingest_paths(
        &self,
        case_id: &str,
        paths: &[PathBuf],
        config: &PipelineConfig,
        sink: &mut dyn ChunkSink,
    ) -> Result<IngestManifest, DataLakeError> {
        let jobs = paths.iter().map(|p| (p.clone(), Ok(case_id.to_string()))).collect();
        self.run_jobs(jobs, config, sink)
    }

    /// Runs the ETL over a source directory. Each immediate subdirectory is a
    /// case whose files are its documents; top-level files belong to
    /// `config.default_case`. Per-file failures land in `rejected` and never
    /// abort the run; documents staged by earlier runs are skipped.
    pub fn run_pipeline(
        &self,
        source_dir: &Path,
        config: &PipelineConfig,
        sink: &mut dyn ChunkSink,
    ) -> Result<IngestManifest, DataLakeError> {
        let mut jobs = Vec::new();
        for entry in sorted_entries(source_dir)? {
            let name = file_name(&entry);
            if name.starts_with('.') || config.ignore_names.contains(&name) {
                continue;
            }
            if entry.is_dir() {
                for file in sorted_entries(&entry)? {
                    let fname = file_name(&file);
                    if file.is_file() && !fname.starts_with('.') && !config.ignore_names.contains(&fname) {
                        jobs.push((file, Ok(name.clone())));
                    }
                }
            } else if entry.is_file() {
                let case = config
                    .default_case
                    .clone()
                    .ok_or_else(|| DataLakeError::NoCaseId { path: entry.clone() });
                jobs.push((entry, case));
            }
        }
        self.run_jobs(jobs, config, sink)
    }

    fn run_jobs(
        &self,
        jobs: Vec<(PathBuf, Result<String, DataLakeError>)>,
        config: &PipelineConfig,
        sink: &mut dyn ChunkSink,
    ) -> Result<IngestManifest, DataLakeError> {
        if config.overlap_chars == 0 || config.overlap_chars >= config.max_chars {
            return Err(DataLakeError::InvalidChunkParams {
                max_chars: config.max_chars,
                overlap_chars: config.overlap_chars,
            });
        }
        let _lock = self.acquire_lock()?;
        let started_at = Utc::now();
        let mut manifest = IngestManifest {
            run_id: format!(
                "run-{}-{}",
                started_at.format("%Y%m%dT%H%M%S%.6fZ"),
                std::process::id()
            ),
            started_at,
            ingested: Vec::new(),
            rejected: Vec::new(),
            chunk_count: 0,
        };
        for (path, case) in jobs {
            let outcome = case.and_then(|case_id| self.process_one(&path, &case_id, config, sink));
            match outcome {
                Ok(Some((doc, n))) => {
                    tracing::debug!(doc_id = %doc.doc_id, chunks = n, "document ingested");
                    manifest.ingested.push(doc.doc_id);
                    manifest.chunk_count += n;
                }
                Ok(None) => {}
                Err(e) => {
                    tracing::warn!(path = %path.display(), error = %e, "document rejected");
                    manifest.rejected.push(Rejection {
                        path: path.display().to_string(),
                        reason: e.code().to_string(),
                        detail: e.to_string(),
                    });
                }
            }
        }
        manifest.ingested.sort();
        manifest.ingested.dedup();
        manifest.rejected.sort_by(|a, b| a.path.cmp(&b.path));
        let path = self.root.join("manifests").join(format!("{}.json", manifest.run_id));
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataLakeError> {
    let mut entries = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    entries.sort();
    Ok(entries)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, content: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn empty_file_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let lake = DataLake::open(tmp.path().join("lake")).unwrap();
        let p = write(tmp.path(), "note.txt", b"");
        assert!(matches!(lake.ingest_document(&p, "C1"), Err(DataLakeError::EmptyFile { .. })));
    }

    #[test]
    fn unsupported_extension_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let lake = DataLake::open(tmp.path().join("lake")).unwrap();
        let p = write(tmp.path(), "scan.jpeg", b"\xff\xd8");
        assert!(matches!(
            lake.ingest_document(&p, "C1"),
            Err(DataLakeError::UnsupportedFormat { .. })
        ));
        let upper = write(tmp.path(), "INFORME.TXT", b"texto");
        assert_eq!(lake.ingest_document(&upper, "C1").unwrap().format, DocFormat::PlainText);
    }

    #[test]
    fn reingest_is_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let lake = DataLake::open(tmp.path().join("lake")).unwrap();
        let p = write(tmp.path(), "informe.txt", "Paciente varón de 67 años.".as_bytes());
        let a = lake.ingest_document(&p, "C1").unwrap();
        let b = lake.ingest_document(&p, "C1").unwrap();
        assert_eq!(a, b);
        assert_eq!(fs::read_dir(lake.landing_dir().join("C1")).unwrap().count(), 1);
        let landed = fs::read(lake.landing_path(&a)).unwrap();
        assert_eq!(sha256_hex(&landed), a.checksum);
        assert!(a.source_path.starts_with(&format!("C1/{}__", a.checksum)));
        // same bytes for another case are a distinct document
        let c = lake.ingest_document(&p, "C2").unwrap();
        assert_ne!(a.doc_id, c.doc_id);
    }

    #[test]
    fn extract_plain_text_identity() {
        let tmp = tempfile::tempdir().unwrap();
        let lake = DataLake::open(tmp.path().join("lake")).unwrap();
        let p = write(tmp.path(), "a.txt", "Paciente varón de 67 años.".as_bytes());
        let doc = lake.ingest_document(&p, "C1").unwrap();
        assert_eq!(lake.extract_text(&doc).unwrap(), "Paciente varón de 67 años.");
    }

    #[test]
    fn extract_reports_decode_failure_and_missing_extractor() {
        let tmp = tempfile::tempdir().unwrap();
        let lake = DataLake::open(tmp.path().join("lake")).unwrap();
        let bad = write(tmp.path(), "bad.txt", b"abc\xffdef");
        let doc = lake.ingest_document(&bad, "C1").unwrap();
        assert!(matches!(lake.extract_text(&doc), Err(DataLakeError::DecodeFailure { .. })));
        let pdf = write(tmp.path(), "scan.pdf", b"%PDF-1.4");
        let doc = lake.ingest_document(&pdf, "C1").unwrap();
        assert!(matches!(
            lake.extract_text(&doc),
            Err(DataLakeError::ExtractorUnavailable(DocFormat::Pdf))
        ));
    }

    #[test]
    fn pipeline_batch_and_rerun() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        for i in 0..9 {
            write(&src, &format!("C{}/note{i}.txt", i % 3), format!("Nota {i}. ECOG {}.", i % 5).as_bytes());
        }
        write(&src, "C0/empty.txt", b"");
        write(&src, "C0/truth.json", b"{}");
        let lake = DataLake::open(tmp.path().join("lake")).unwrap();
        let cfg = PipelineConfig::default();
        let m = lake.run_pipeline(&src, &cfg, &mut NullSink).unwrap();
        assert_eq!(m.ingested.len(), 9);
        assert_eq!(m.rejected.len(), 1);
        assert_eq!(m.rejected[0].reason, "EmptyFile");
        assert_eq!(m.chunk_count, 9);
        let mut sorted = m.ingested.clone();
        sorted.sort();
        assert_eq!(sorted, m.ingested);

        let again = lake.run_pipeline(&src, &cfg, &mut NullSink).unwrap();
        assert!(again.ingested.is_empty());
        assert_eq!(again.chunk_count, 0);
        assert_eq!(lake.load_chunks().unwrap().len(), 9);
    }

    #[test]
    fn top_level_files_need_default_case() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        write(&src, "loose.txt", b"hola");
        let lake = DataLake::open(tmp.path().join("lake")).unwrap();
        let m = lake.run_pipeline(&src, &PipelineConfig::default(), &mut NullSink).unwrap();
        assert_eq!(m.rejected[0].reason, "NoCaseId");
        let cfg = PipelineConfig {
            default_case: Some("C9".into()),
            ..PipelineConfig::default()
        };
        let m = lake.run_pipeline(&src, &cfg, &mut NullSink).unwrap();
        assert_eq!(m.ingested.len(), 1);
    }

    #[test]
    fn sink_failure_leaves_document_retryable() {
        struct Failing;
        impl ChunkSink for Failing {
            fn accept(&mut self, _: &RawDocument, _: &[Chunk]) -> Result<(), String> {
                Err("index offline".into())
            }
        }
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        write(&src, "C1/a.txt", b"texto");
        let lake = DataLake::open(tmp.path().join("lake")).unwrap();
        let cfg = PipelineConfig::default();
        let m = lake.run_pipeline(&src, &cfg, &mut Failing).unwrap();
        assert_eq!(m.rejected[0].reason, "SinkFailure");
        let m = lake.run_pipeline(&src, &cfg, &mut NullSink).unwrap();
        assert_eq!(m.ingested.len(), 1);
    }

    #[test]
    fn concurrent_run_is_locked_out() {
        let tmp = tempfile::tempdir().unwrap();
        let lake = DataLake::open(tmp.path().join("lake")).unwrap();
        let _held = lake.acquire_lock().unwrap();
        let src = tmp.path().join("src");
        fs::create_dir_all(&src).unwrap();
        assert!(matches!(
            lake.run_pipeline(&src, &PipelineConfig::default(), &mut NullSink),
            Err(DataLakeError::Locked(_))
        ));
    }
}
