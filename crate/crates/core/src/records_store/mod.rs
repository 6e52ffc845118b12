//! Durable case records, versioned forms, raw model outputs and the per-case
//! audit trail.

mod file;

use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::form_model::FormInstance;

pub use file::FileRecordStore;

#[derive(Debug, Error)]
pub enum RecordsError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid status transition {from:?} -> {to:?}")]
    InvalidTransition { from: CaseStatus, to: CaseStatus },
    #[error("invalid case id {0:?}")]
    InvalidCaseId(String),
    #[error("storage failure: {0}")]
    StorageFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Ingested,
    Autofilled,
    Reviewed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub created_at: DateTime<Utc>,
    pub doc_ids: Vec<String>,
    /// Version number of the latest saved form.
    pub latest_form: Option<u32>,
    pub status: CaseStatus,
}

impl CaseRecord {
    pub fn new(case_id: impl Into<String>) -> Self {
        Self {
            case_id: case_id.into(),
            created_at: Utc::now(),
            doc_ids: Vec::new(),
            latest_form: None,
            status: CaseStatus::Ingested,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Actor {
    Pipeline,
    Model { backend_id: String },
    Human { user_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AuditAction {
    CaseCreated,
    DocumentsIngested { doc_ids: Vec<String> },
    RawOutputStored { block_id: u8, backend_id: String },
    FormSaved { version: u32 },
    FieldsUpdated { field_ids: Vec<String> },
    StatusChanged { from: CaseStatus, to: CaseStatus },
}

/// An event before the store assigns its id and timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewAuditEvent {
    pub actor: Actor,
    pub action: AuditAction,
    /// SHA-256 of the payload the event refers to (form, raw output, ...).
    pub payload_digest: String,
}

impl NewAuditEvent {
    pub fn new(actor: Actor, action: AuditAction, payload: &[u8]) -> Self {
        Self {
            actor,
            action,
            payload_digest: crate::text::sha256_hex(payload),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub event_id: u64,
    pub timestamp: DateTime<Utc>,
    pub actor: Actor,
    pub action: AuditAction,
    pub payload_digest: String,
}

/// Storage interface. Writes to one case are serialized by the store; a
/// write is either fully visible or absent after a crash.
pub trait RecordStore: Send + Sync {
    /// Creates or replaces a case record. Status may only move forward.
    fn put_case(&self, record: &CaseRecord) -> Result<(), RecordsError>;
    fn get_case(&self, case_id: &str) -> Result<CaseRecord, RecordsError>;
    fn list_cases(&self) -> Result<Vec<String>, RecordsError>;
    /// Stores a new immutable form version and points the case at it.
    fn save_form(&self, form: &FormInstance) -> Result<u32, RecordsError>;
    fn get_form(&self, case_id: &str, version: u32) -> Result<FormInstance, RecordsError>;
    fn latest_form(&self, case_id: &str) -> Result<Option<(u32, FormInstance)>, RecordsError>;
    fn put_raw_output(&self, case_id: &str, block_id: u8, backend_id: &str, text: &str) -> Result<PathBuf, RecordsError>;
    fn append_audit(&self, case_id: &str, event: NewAuditEvent) -> Result<u64, RecordsError> {
        Ok(self.append_audit_batch(case_id, vec![event])?[0])
    }
    /// Appends all events in one write; ids are consecutive.
    fn append_audit_batch(&self, case_id: &str, events: Vec<NewAuditEvent>) -> Result<Vec<u64>, RecordsError>;
    fn list_audit(&self, case_id: &str) -> Result<Vec<AuditEvent>, RecordsError>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayState {
    pub status: Option<CaseStatus>,
    pub doc_ids: Vec<String>,
    pub form_versions: Vec<u32>,
    pub last_event_id: Option<u64>,
}

/// Folds an audit trail: creation sets `ingested`, status changes set their
/// target, saved forms and ingested documents accumulate.
pub fn replay(events: &[AuditEvent]) -> ReplayState {
    let mut s = ReplayState::default();
    for e in events {
        match &e.action {
            AuditAction::CaseCreated => s.status = Some(CaseStatus::Ingested),
            AuditAction::DocumentsIngested { doc_ids } => {
                for d in doc_ids {
                    if !s.doc_ids.contains(d) {
                        s.doc_ids.push(d.clone());
                    }
                }
            }
            AuditAction::FormSaved { version } => s.form_versions.push(*version),
            AuditAction::StatusChanged { to, .. } => s.status = Some(*to),
            AuditAction::RawOutputStored { .. } | AuditAction::FieldsUpdated { .. } => {}
        }
        s.last_event_id = Some(e.event_id);
    }
    s
}
