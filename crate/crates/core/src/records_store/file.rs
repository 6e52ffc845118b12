use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::Utc;
use serde::de::DeserializeOwned;

use super::{AuditEvent, CaseRecord, NewAuditEvent, RecordStore, RecordsError};
use crate::form_model::FormInstance;
use crate::fsutil::{is_safe_id, write_atomic};

/// One directory per case:
/// `case.json`, `forms/v<N>.json`, `audit.jsonl`, `raw_outputs/<block>_<backend>.txt`.
pub struct FileRecordStore {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn storage<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> RecordsError + '_ {
    move |e| RecordsError::StorageFailure(format!("{}: {e}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, RecordsError> {
    let bytes = fs::read(path).map_err(storage(path))?;
    serde_json::from_slice(&bytes).map_err(storage(path))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), RecordsError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(storage(path))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(storage(path))
}

impl FileRecordStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RecordsError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(storage(&root))?;
        Ok(Self {
            root,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn case_dir(&self, case_id: &str) -> Result<PathBuf, RecordsError> {
        if !is_safe_id(case_id) {
            return Err(RecordsError::InvalidCaseId(case_id.to_string()));
        }
        Ok(self.root.join(case_id))
    }

    fn existing_case_dir(&self, case_id: &str) -> Result<PathBuf, RecordsError> {
        let dir = self.case_dir(case_id)?;
        if !dir.join("case.json").is_file() {
            return Err(RecordsError::NotFound(format!("case {case_id}")));
        }
        Ok(dir)
    }

    fn lock(&self, case_id: &str) -> Arc<Mutex<()>> {
        let mut map = self.locks.lock().expect("lock table");
        map.entry(case_id.to_string()).or_default().clone()
    }

    fn form_versions(dir: &Path) -> Result<Vec<u32>, RecordsError> {
        let forms = dir.join("forms");
        let Ok(entries) = fs::read_dir(&forms) else {
            return Ok(Vec::new());
        };
        let mut versions = Vec::new();
        for e in entries {
            let name = e.map_err(storage(&forms))?.file_name();
            let name = name.to_string_lossy();
            if let Some(n) = name.strip_prefix('v').and_then(|s| s.strip_suffix(".json")).and_then(|s| s.parse().ok()) {
                versions.push(n);
            }
        }
        versions.sort_unstable();
        Ok(versions)
    }

    /// Reads complete audit lines; a torn trailing line (crash mid-append)
    /// is ignored. Returns the events and the byte length of the intact prefix.
    fn read_audit(path: &Path) -> Result<(Vec<AuditEvent>, u64), RecordsError> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
            Err(e) => return Err(storage(path)(e)),
        };
        let intact = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        let mut events = Vec::new();
        for line in bytes[..intact].split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
            events.push(serde_json::from_slice(line).map_err(storage(path))?);
        }
        Ok((events, intact as u64))
    }
}

impl RecordStore for FileRecordStore {
    fn put_case(&self, record: &CaseRecord) -> Result<(), RecordsError> {
        let dir = self.case_dir(&record.case_id)?;
        let lock = self.lock(&record.case_id);
        let _g = lock.lock().expect("case lock");
        let path = dir.join("case.json");
        if path.is_file() {
            let current: CaseRecord = read_json(&path)?;
            if record.status < current.status {
                return Err(RecordsError::InvalidTransition {
                    from: current.status,
                    to: record.status,
                });
            }
        }
        fs::create_dir_all(&dir).map_err(storage(&dir))?;
        write_json(&path, record)
    }

    fn get_case(&self, case_id: &str) -> Result<CaseRecord, RecordsError> {
        let dir = self.existing_case_dir(case_id)?;
        read_json(&dir.join("case.json"))
    }

    fn list_cases(&self) -> Result<Vec<String>, RecordsError> {
        let mut out = Vec::new();
        for e in fs::read_dir(&self.root).map_err(storage(&self.root))? {
            let e = e.map_err(storage(&self.root))?;
            if e.path().join("case.json").is_file() {
                out.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    fn save_form(&self, form: &FormInstance) -> Result<u32, RecordsError> {
        let dir = self.existing_case_dir(form.case_id())?;
        let lock = self.lock(form.case_id());
        let _g = lock.lock().expect("case lock");
        let version = Self::form_versions(&dir)?.last().copied().unwrap_or(0) + 1;
        let forms = dir.join("forms");
        fs::create_dir_all(&forms).map_err(storage(&forms))?;
        write_json(&forms.join(format!("v{version}.json")), form)?;
        let case_path = dir.join("case.json");
        let mut record: CaseRecord = read_json(&case_path)?;
        record.latest_form = Some(version);
        write_json(&case_path, &record)?;
        Ok(version)
    }

    fn get_form(&self, case_id: &str, version: u32) -> Result<FormInstance, RecordsError> {
        let dir = self.existing_case_dir(case_id)?;
        let path = dir.join("forms").join(format!("v{version}.json"));
        if !path.is_file() {
            return Err(RecordsError::NotFound(format!("form v{version} of case {case_id}")));
        }
        read_json(&path)
    }

    fn latest_form(&self, case_id: &str) -> Result<Option<(u32, FormInstance)>, RecordsError> {
        let dir = self.existing_case_dir(case_id)?;
        // the forms directory is authoritative; case.json may lag after a crash
        match Self::form_versions(&dir)?.last() {
            Some(&v) => Ok(Some((v, self.get_form(case_id, v)?))),
            None => Ok(None),
        }
    }

    fn put_raw_output(&self, case_id: &str, block_id: u8, backend_id: &str, text: &str) -> Result<PathBuf, RecordsError> {
        let dir = self.existing_case_dir(case_id)?;
        if !is_safe_id(backend_id) {
            return Err(RecordsError::StorageFailure(format!("unsafe backend id {backend_id:?}")));
        }
        let blobs = dir.join("raw_outputs");
        fs::create_dir_all(&blobs).map_err(storage(&blobs))?;
        let path = blobs.join(format!("{block_id}_{backend_id}.txt"));
        write_atomic(&path, text.as_bytes()).map_err(storage(&path))?;
        Ok(path)
    }

    fn append_audit_batch(&self, case_id: &str, events: Vec<NewAuditEvent>) -> Result<Vec<u64>, RecordsError> {
        let dir = self.existing_case_dir(case_id)?;
        let lock = self.lock(case_id);
        let _g = lock.lock().expect("case lock");
        let path = dir.join("audit.jsonl");
        let (existing, intact) = Self::read_audit(&path)?;
        let mut next = existing.last().map_or(1, |e| e.event_id + 1);
        let now = Utc::now();
        let mut buf = Vec::new();
        let mut ids = Vec::with_capacity(events.len());
        for ev in events {
            let event = AuditEvent {
                event_id: next,
                timestamp: now,
                actor: ev.actor,
                action: ev.action,
                payload_digest: ev.payload_digest,
            };
            serde_json::to_writer(&mut buf, &event).map_err(storage(&path))?;
            buf.push(b'\n');
            ids.push(next);
            next += 1;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(storage(&path))?;
        // drop a torn tail left by an interrupted append; it was never acknowledged
        if file.metadata().map_err(storage(&path))?.len() != intact {
            file.set_len(intact).map_err(storage(&path))?;
        }
        file.write_all(&buf).map_err(storage(&path))?;
        file.sync_all().map_err(storage(&path))?;
        Ok(ids)
    }

    fn list_audit(&self, case_id: &str) -> Result<Vec<AuditEvent>, RecordsError> {
        let dir = self.existing_case_dir(case_id)?;
        Ok(Self::read_audit(&dir.join("audit.jsonl"))?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::form_model::{FormSchema, Source};
    use crate::records_store::{replay, Actor, AuditAction, CaseStatus};
    use serde_json::json;

    fn store() -> (tempfile::TempDir, FileRecordStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = FileRecordStore::open(dir.path().join("records")).unwrap();
        (dir, s)
    }

    fn ev(action: AuditAction) -> NewAuditEvent {
        NewAuditEvent::new(Actor::Pipeline, action, b"x")
    }

    #[test]
    fn put_get_round_trip() {
        let (_d, s) = store();
        let rec = CaseRecord::new("C1");
        s.put_case(&rec).unwrap();
        assert_eq!(s.get_case("C1").unwrap(), rec);
        assert!(matches!(s.get_case("missing"), Err(RecordsError::NotFound(_))));
        assert_eq!(s.list_cases().unwrap(), vec!["C1".to_string()]);
    }

    #[test]
    fn status_cannot_regress() {
        let (_d, s) = store();
        let mut rec = CaseRecord::new("C1");
        rec.status = CaseStatus::Reviewed;
        s.put_case(&rec).unwrap();
        rec.status = CaseStatus::Ingested;
        assert!(matches!(
            s.put_case(&rec),
            Err(RecordsError::InvalidTransition {
                from: CaseStatus::Reviewed,
                to: CaseStatus::Ingested
            })
        ));
        assert_eq!(s.get_case("C1").unwrap().status, CaseStatus::Reviewed);
    }

    #[test]
    fn form_versions_are_monotone_and_immutable() {
        let (_d, s) = store();
        let schema = FormSchema::bundled();
        s.put_case(&CaseRecord::new("C1")).unwrap();
        let mut f = FormInstance::new("C1", &schema);
        assert_eq!(s.save_form(&f).unwrap(), 1);
        f.apply_update(&schema, "ecog", &json!(2), Source::Human).unwrap();
        assert_eq!(s.save_form(&f).unwrap(), 2);
        assert!(s.get_form("C1", 1).unwrap().value("ecog").is_none());
        assert_eq!(s.latest_form("C1").unwrap().unwrap(), (2, f));
        assert_eq!(s.get_case("C1").unwrap().latest_form, Some(2));
        assert!(matches!(s.get_form("C1", 3), Err(RecordsError::NotFound(_))));
    }

    #[test]
    fn save_form_for_unknown_case() {
        let (_d, s) = store();
        let f = FormInstance::new("ghost", &FormSchema::bundled());
        assert!(matches!(s.save_form(&f), Err(RecordsError::NotFound(_))));
    }

    #[test]
    fn audit_ids_increase_and_survive_torn_tail() {
        let (_d, s) = store();
        s.put_case(&CaseRecord::new("C1")).unwrap();
        assert_eq!(s.append_audit("C1", ev(AuditAction::CaseCreated)).unwrap(), 1);
        assert_eq!(s.append_audit("C1", ev(AuditAction::FormSaved { version: 1 })).unwrap(), 2);
        let path = s.root().join("C1/audit.jsonl");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"event_id\":3,\"timest").unwrap();
        assert_eq!(s.list_audit("C1").unwrap().len(), 2);
        let ids = s
            .append_audit_batch(
                "C1",
                vec![
                    ev(AuditAction::FieldsUpdated {
                        field_ids: vec!["ecog".into()],
                    }),
                    ev(AuditAction::FormSaved { version: 2 }),
                ],
            )
            .unwrap();
        assert_eq!(ids, vec![3, 4]);
        let all = s.list_audit("C1").unwrap();
        assert_eq!(all.iter().map(|e| e.event_id).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn replay_reconstructs_status_and_versions() {
        let (_d, s) = store();
        s.put_case(&CaseRecord::new("C1")).unwrap();
        let trail = vec![
            ev(AuditAction::CaseCreated),
            ev(AuditAction::DocumentsIngested {
                doc_ids: vec!["doc-a".into()],
            }),
            ev(AuditAction::FormSaved { version: 1 }),
            ev(AuditAction::StatusChanged {
                from: CaseStatus::Ingested,
                to: CaseStatus::Autofilled,
            }),
            ev(AuditAction::FormSaved { version: 2 }),
            ev(AuditAction::StatusChanged {
                from: CaseStatus::Autofilled,
                to: CaseStatus::Reviewed,
            }),
        ];
        for e in trail {
            s.append_audit("C1", e).unwrap();
        }
        let state = replay(&s.list_audit("C1").unwrap());
        assert_eq!(state.status, Some(CaseStatus::Reviewed));
        assert_eq!(state.form_versions, vec![1, 2]);
        assert_eq!(state.doc_ids, vec!["doc-a".to_string()]);
        assert_eq!(state.last_event_id, Some(6));
    }

    #[test]
    fn concurrent_appends_never_share_ids() {
        let (_d, s) = store();
        s.put_case(&CaseRecord::new("C1")).unwrap();
        std::thread::scope(|scope| {
            for _ in 0..8 {
                scope.spawn(|| {
                    for _ in 0..10 {
                        s.append_audit("C1", ev(AuditAction::CaseCreated)).unwrap();
                    }
                });
            }
        });
        let ids: Vec<u64> = s.list_audit("C1").unwrap().iter().map(|e| e.event_id).collect();
        assert_eq!(ids, (1..=80).collect::<Vec<_>>());
    }

    #[test]
    fn raw_outputs_are_kept() {
        let (_d, s) = store();
        s.put_case(&CaseRecord::new("C1")).unwrap();
        let p = s.put_raw_output("C1", 1, "mock", "{\"ecog\":1}").unwrap();
        assert!(p.ends_with("raw_outputs/1_mock.txt"));
        assert_eq!(fs::read_to_string(p).unwrap(), "{\"ecog\":1}");
        assert!(s.put_raw_output("C1", 1, "../x", "").is_err());
        assert!(matches!(s.get_case("../etc"), Err(RecordsError::InvalidCaseId(_))));
    }
}
