//! Wires the data lake, vector index, record store and backends into the
//! operations exposed by the CLI and the HTTP service.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock, TryLockError};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::config::{ConfigError, EmbeddingConfig, RunConfig};
use crate::datalake::{Chunk, ChunkSink, DataLake, DataLakeError, IngestManifest, PipelineConfig, RawDocument};
use crate::embed_index::{embed_all, EmbedIndexError, EmbeddingProvider, HashingEmbedder, HttpEmbedder, IndexEntry, Payload, VectorIndex};
use crate::evaluation::{emit_report, load_fixture_cases, run_benchmark, CompareOptions, EvalError, ModelReport};
use crate::form_model::{FormInstance, FormSchema, SchemaError, Source, UpdateError, ValidationError};
use crate::generation::{autofill_case, backend_for, AutofillOutcome, ChatBackend, GenerationError, Retriever};
use crate::records_store::{
    Actor, AuditAction, CaseRecord, CaseStatus, FileRecordStore, NewAuditEvent, RecordStore, RecordsError,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    DataLake(#[from] DataLakeError),
    #[error(transparent)]
    Index(#[from] EmbedIndexError),
    #[error(transparent)]
    Records(RecordsError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("unknown case {0}")]
    CaseNotFound(String),
    #[error("unknown backend {0}")]
    UnknownBackend(String),
    #[error("unknown field {0}")]
    UnknownField(String),
    #[error("case {0} is being modified by another request")]
    Busy(String),
    #[error("{} invalid field value(s)", .0.len())]
    Validation(Vec<ValidationError>),
    #[error("stored index was built with {found}, configured embedder is {expected}; run `index --rebuild`")]
    IndexMismatch { expected: String, found: String },
}

impl From<RecordsError> for EngineError {
    fn from(e: RecordsError) -> Self {
        match e {
            RecordsError::NotFound(what) => EngineError::CaseNotFound(what),
            other => EngineError::Records(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormView {
    pub case_id: String,
    /// 0 when no form has been saved yet.
    pub version: u32,
    pub form: FormInstance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutofillReport {
    pub version: u32,
    #[serde(flatten)]
    pub outcome: AutofillOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceItem {
    pub chunk_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    /// Char span within the document's normalized text.
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub index_size: usize,
    pub schema_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOutput {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub reports: Vec<ModelReport>,
}

pub struct Engine {
    config: RunConfig,
    schema: FormSchema,
    lake: DataLake,
    index: VectorIndex,
    embedder: Box<dyn EmbeddingProvider>,
    records: FileRecordStore,
    backends: BTreeMap<String, Arc<dyn ChatBackend>>,
    leases: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    /// Benchmarks run exclusively; autofills share.
    bench_gate: RwLock<()>,
}

fn embedder_for(cfg: &EmbeddingConfig) -> Result<Box<dyn EmbeddingProvider>, EngineError> {
    Ok(match cfg {
        EmbeddingConfig::Hashing { dim } => Box::new(HashingEmbedder::new(*dim)),
        EmbeddingConfig::Http {
            id,
            endpoint,
            dim,
            timeout_s,
        } => Box::new(HttpEmbedder::new(id, endpoint, *dim, Duration::from_secs_f64(*timeout_s))?),
    })
}

const EMBED_BATCH: usize = 64;

fn index_entries(chunks: &[Chunk], embedder: &dyn EmbeddingProvider) -> Result<Vec<IndexEntry>, EmbedIndexError> {
    let mut out = Vec::with_capacity(chunks.len());
    for batch in chunks.chunks(EMBED_BATCH) {
        let texts: Vec<&str> = batch.iter().map(|c| c.text.as_str()).collect();
        let vectors = embed_all(&texts, embedder)?;
        out.extend(batch.iter().zip(vectors).map(|(c, v)| IndexEntry {
            chunk_id: c.chunk_id.clone(),
            vector: v,
            payload: Payload {
                case_id: c.case_id.clone(),
                doc_id: c.doc_id.clone(),
                ordinal: c.ordinal,
            },
            text: c.text.clone(),
        }));
    }
    Ok(out)
}

/// Embeds and indexes each staged document, remembering which cases gained
/// documents.
struct IndexingSink<'a> {
    index: &'a VectorIndex,
    embedder: &'a dyn EmbeddingProvider,
    new_docs: BTreeMap<String, Vec<String>>,
}

impl ChunkSink for IndexingSink<'_> {
    fn accept(&mut self, doc: &RawDocument, chunks: &[Chunk]) -> Result<(), String> {
        let entries = index_entries(chunks, self.embedder).map_err(|e| e.to_string())?;
        self.index.upsert(entries).map_err(|e| e.to_string())?;
        self.new_docs.entry(doc.case_id.clone()).or_default().push(doc.doc_id.clone());
        Ok(())
    }
}

impl Engine {
    pub fn open(config: RunConfig) -> Result<Self, EngineError> {
        Self::open_inner(config, false)
    }

    /// Like `open`, but a stored index built by another embedder is discarded
    /// and rebuilt from the staged chunks instead of being an error.
    pub fn open_rebuilding(config: RunConfig) -> Result<Self, EngineError> {
        Self::open_inner(config, true)
    }

    fn open_inner(config: RunConfig, discard_mismatch: bool) -> Result<Self, EngineError> {
        config.validate()?;
        let schema = match &config.schema_path {
            Some(p) => FormSchema::load(p)?,
            None => FormSchema::bundled(),
        };
        let lake = DataLake::open(&config.datalake_root)?;
        let records = FileRecordStore::open(lake.root().join("refined").join("records"))?;
        let embedder = embedder_for(&config.embedding)?;
        let mut backends = BTreeMap::new();
        for p in &config.backends {
            backends.insert(p.backend_id.clone(), backend_for(p)?);
        }
        let index_dir = lake.root().join("refined").join("index");
        let index = match VectorIndex::load(&index_dir)? {
            Some(ix) if discard_mismatch && (ix.provider_id() != embedder.provider_id() || ix.dim() != embedder.dim()) => {
                tracing::warn!(found = ix.provider_id(), expected = embedder.provider_id(), "discarding index built by another embedder");
                VectorIndex::new(embedder.dim(), embedder.provider_id())
            }
            Some(ix) if ix.provider_id() != embedder.provider_id() || ix.dim() != embedder.dim() => {
                return Err(EngineError::IndexMismatch {
                    expected: embedder.provider_id().to_string(),
                    found: ix.provider_id().to_string(),
                })
            }
            Some(ix) => ix,
            None => VectorIndex::new(embedder.dim(), embedder.provider_id()),
        };
        let engine = Self {
            config,
            schema,
            lake,
            index,
            embedder,
            records,
            backends,
            leases: Mutex::new(HashMap::new()),
            bench_gate: RwLock::new(()),
        };
        // an interrupted run can leave staged chunks that never reached the saved index
        let staged = engine.lake.load_chunks()?.len();
        if staged != engine.index.len() {
            tracing::info!(staged, indexed = engine.index.len(), "index out of date, rebuilding");
            engine.rebuild_index()?;
        }
        Ok(engine)
    }

    /// Replaces a backend (e.g. with an instrumented one in tests).
    pub fn set_backend(&mut self, backend: Arc<dyn ChatBackend>) {
        self.backends.insert(backend.backend_id().to_string(), backend);
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn schema(&self) -> &FormSchema {
        &self.schema
    }

    pub fn lake(&self) -> &DataLake {
        &self.lake
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn records(&self) -> &FileRecordStore {
        &self.records
    }

    pub fn backend_ids(&self) -> Vec<String> {
        self.backends.keys().cloned().collect()
    }

    pub fn retriever(&self) -> Retriever<'_> {
        Retriever {
            index: &self.index,
            embedder: self.embedder.as_ref(),
            k: self.config.retrieval.k,
        }
    }

    fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            max_chars: self.config.chunking.max_chars,
            overlap_chars: self.config.chunking.overlap_chars,
            ..PipelineConfig::default()
        }
    }

    fn index_dir(&self) -> PathBuf {
        self.lake.root().join("refined").join("index")
    }

    fn lease(&self, case_id: &str) -> Arc<Mutex<()>> {
        self.leases.lock().expect("lease table").entry(case_id.to_string()).or_default().clone()
    }

    fn run_ingest(&self, run: impl FnOnce(&mut IndexingSink<'_>) -> Result<IngestManifest, DataLakeError>) -> Result<IngestManifest, EngineError> {
        let mut sink = IndexingSink {
            index: &self.index,
            embedder: self.embedder.as_ref(),
            new_docs: BTreeMap::new(),
        };
        let manifest = run(&mut sink)?;
        if !sink.new_docs.is_empty() {
            self.index.save(&self.index_dir())?;
        }
        let digest = serde_json::to_vec(&manifest).expect("manifest serializes");
        for (case_id, doc_ids) in sink.new_docs {
            let mut events = Vec::new();
            let mut record = match self.records.get_case(&case_id) {
                Ok(r) => r,
                Err(RecordsError::NotFound(_)) => {
                    events.push(NewAuditEvent::new(Actor::Pipeline, AuditAction::CaseCreated, case_id.as_bytes()));
                    CaseRecord::new(&case_id)
                }
                Err(e) => return Err(e.into()),
            };
            for d in &doc_ids {
                if !record.doc_ids.contains(d) {
                    record.doc_ids.push(d.clone());
                }
            }
            self.records.put_case(&record)?;
            events.push(NewAuditEvent::new(Actor::Pipeline, AuditAction::DocumentsIngested { doc_ids }, &digest));
            self.records.append_audit_batch(&case_id, events)?;
        }
        Ok(manifest)
    }

    /// Ingests files for one case; new documents are chunked, embedded and
    /// indexed, and the case record is created or extended.
    pub fn ingest(&self, case_id: &str, paths: &[PathBuf]) -> Result<IngestManifest, EngineError> {
        if !crate::fsutil::is_safe_id(case_id) {
            return Err(DataLakeError::InvalidCaseId(case_id.to_string()).into());
        }
        let cfg = self.pipeline_config();
        self.run_ingest(|sink| self.lake.ingest_paths(case_id, paths, &cfg, sink))
    }

    /// Runs the ETL over a directory of case subdirectories.
    pub fn run_pipeline(&self, source_dir: &Path) -> Result<IngestManifest, EngineError> {
        let cfg = self.pipeline_config();
        self.run_ingest(|sink| self.lake.run_pipeline(source_dir, &cfg, sink))
    }

    /// Re-embeds every refined chunk with the configured provider.
    pub fn rebuild_index(&self) -> Result<usize, EngineError> {
        let chunks = self.lake.load_chunks()?;
        let entries = index_entries(&chunks, self.embedder.as_ref())?;
        let n = self.index.replace_all(entries)?;
        self.index.save(&self.index_dir())?;
        Ok(n)
    }

    fn backend(&self, backend_id: &str) -> Result<Arc<dyn ChatBackend>, EngineError> {
        self.backends
            .get(backend_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownBackend(backend_id.to_string()))
    }

    fn current_form(&self, case_id: &str) -> Result<FormView, EngineError> {
        self.records.get_case(case_id)?;
        let (version, form) = match self.records.latest_form(case_id)? {
            Some((v, f)) if f.schema_key() == self.schema.key() => (v, f),
            Some((v, _)) => (v, FormInstance::new(case_id, &self.schema)),
            None => (0, FormInstance::new(case_id, &self.schema)),
        };
        Ok(FormView {
            case_id: case_id.to_string(),
            version,
            form,
        })
    }

    pub fn form(&self, case_id: &str) -> Result<FormView, EngineError> {
        self.current_form(case_id)
    }

    fn advance_status(&self, case_id: &str, to: CaseStatus) -> Result<Option<AuditAction>, EngineError> {
        let mut record = self.records.get_case(case_id)?;
        if record.status >= to {
            return Ok(None);
        }
        let from = record.status;
        record.status = to;
        self.records.put_case(&record)?;
        Ok(Some(AuditAction::StatusChanged { from, to }))
    }

    fn save_with_audit(&self, form: &FormInstance, actor: Actor, mut events: Vec<NewAuditEvent>, status: CaseStatus) -> Result<u32, EngineError> {
        let case_id = form.case_id();
        let body = serde_json::to_vec(form).expect("form serializes");
        let version = self.records.save_form(form)?;
        events.push(NewAuditEvent::new(actor.clone(), AuditAction::FormSaved { version }, &body));
        if let Some(change) = self.advance_status(case_id, status)? {
            events.push(NewAuditEvent::new(actor, change, &body));
        }
        self.records.append_audit_batch(case_id, events)?;
        Ok(version)
    }

    /// Autofills a case with one backend and stores the result as a new form
    /// version. Human-entered values of the latest form are kept.
    pub fn autofill(&self, case_id: &str, backend_id: &str) -> Result<AutofillReport, EngineError> {
        let backend = self.backend(backend_id)?;
        self.records.get_case(case_id)?;
        let lease = self.lease(case_id);
        let _writer = match lease.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(EngineError::Busy(case_id.to_string())),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        let _shared = self.bench_gate.read().expect("bench gate");
        let base = self.current_form(case_id)?;
        let outcome = autofill_case(case_id, &self.schema, &self.retriever(), backend.as_ref(), Some(base.form));
        let actor = Actor::Model {
            backend_id: backend_id.to_string(),
        };
        let mut events = Vec::new();
        for c in &outcome.completions {
            self.records.put_raw_output(case_id, c.block_id, backend_id, &c.raw_output)?;
            events.push(NewAuditEvent::new(
                actor.clone(),
                AuditAction::RawOutputStored {
                    block_id: c.block_id,
                    backend_id: backend_id.to_string(),
                },
                c.raw_output.as_bytes(),
            ));
        }
        let version = self.save_with_audit(&outcome.form, actor, events, CaseStatus::Autofilled)?;
        Ok(AutofillReport { version, outcome })
    }

    /// Applies human edits all-or-nothing. Every invalid update is reported;
    /// nothing is stored unless all of them validate.
    pub fn patch_form(&self, case_id: &str, updates: &[(String, Json)], user_id: &str) -> Result<FormView, EngineError> {
        self.records.get_case(case_id)?;
        let lease = self.lease(case_id);
        let _writer = match lease.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(EngineError::Busy(case_id.to_string())),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        let mut form = self.current_form(case_id)?.form;
        let mut errors = Vec::new();
        for (field, raw) in updates {
            match form.apply_update(&self.schema, field, raw, Source::Human) {
                Ok(()) => {}
                Err(UpdateError::Validation(e)) => errors.push(e),
                Err(e) => {
                    errors.push(ValidationError {
                        field_id: field.clone(),
                        kind: crate::form_model::ValidationErrorKind::TypeMismatch,
                        detail: e.to_string(),
                    });
                }
            }
        }
        if !errors.is_empty() {
            return Err(EngineError::Validation(errors));
        }
        let actor = Actor::Human {
            user_id: user_id.to_string(),
        };
        let fields = updates.iter().map(|(f, _)| f.clone()).collect();
        let body = serde_json::to_vec(&updates.iter().map(|(f, v)| (f, v)).collect::<BTreeMap<_, _>>()).expect("json");
        let events = vec![NewAuditEvent::new(actor.clone(), AuditAction::FieldsUpdated { field_ids: fields }, &body)];
        let version = self.save_with_audit(&form, actor, events, CaseStatus::Reviewed)?;
        Ok(FormView {
            case_id: case_id.to_string(),
            version,
            form,
        })
    }

    /// Chunks backing a field of the latest form, in provenance order.
    pub fn provenance(&self, case_id: &str, field_id: &str) -> Result<Vec<ProvenanceItem>, EngineError> {
        if self.schema.field(field_id).is_none() {
            return Err(EngineError::UnknownField(field_id.to_string()));
        }
        let view = self.current_form(case_id)?;
        let ids = view.form.get(field_id).map(|f| f.provenance.clone()).unwrap_or_default();
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let chunks: HashMap<String, Chunk> = self.lake.load_chunks()?.into_iter().map(|c| (c.chunk_id.clone(), c)).collect();
        Ok(ids
            .iter()
            .filter_map(|id| chunks.get(id))
            .map(|c| ProvenanceItem {
                chunk_id: c.chunk_id.clone(),
                doc_id: c.doc_id.clone(),
                ordinal: c.ordinal,
                start: c.start,
                end: c.end,
                text: c.text.clone(),
            })
            .collect())
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".to_string(),
            index_size: self.index.len(),
            schema_version: self.schema.key(),
        }
    }

    /// Ingests the configured fixtures, benchmarks the given backends (all
    /// configured ones when empty) and writes the report files to `out_dir`.
    pub fn benchmark(&self, backend_ids: &[String], out_dir: &Path) -> Result<BenchmarkOutput, EngineError> {
        let fixtures = self
            .config
            .fixtures_dir
            .clone()
            .ok_or_else(|| ConfigError::Invalid("fixtures_dir is not configured".into()))?;
        let _exclusive = self.bench_gate.write().expect("bench gate");
        self.run_pipeline(&fixtures)?;
        let cases: Vec<_> = load_fixture_cases(&fixtures, &self.schema)?.into_iter().map(|c| c.truth).collect();
        let ids: Vec<String> = if backend_ids.is_empty() { self.backend_ids() } else { backend_ids.to_vec() };
        let backends = ids.iter().map(|id| self.backend(id)).collect::<Result<Vec<_>, _>>()?;
        let run = run_benchmark(&cases, &backends, &self.schema, &self.retriever(), CompareOptions::default())?;
        let files = emit_report(&run.reports, out_dir)?;
        Ok(BenchmarkOutput {
            out_dir: out_dir.to_path_buf(),
            files,
            reports: run.reports,
        })
    }
}
