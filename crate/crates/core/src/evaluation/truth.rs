use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::EvalError;
use crate::form_model::{active_blocks, validate_value, FieldValue, FormSchema, Source, Value};

#[derive(Deserialize)]
struct TruthFile {
    schema_id: String,
    schema_version: String,
    values: BTreeMap<String, Json>,
}

/// Reference answers for one case. Values are canonical and the blocks
/// holding values are exactly the blocks the truth's triggers activate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthForm {
    pub case_id: String,
    pub values: BTreeMap<String, Value>,
    pub active_blocks: BTreeSet<u8>,
}

impl GroundTruthForm {
    pub fn from_json_str(case_id: &str, text: &str, schema: &FormSchema) -> Result<Self, EvalError> {
        let bad = |detail: String| EvalError::Truth {
            case_id: case_id.to_string(),
            detail,
        };
        let file: TruthFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if file.schema_id != schema.schema_id || file.schema_version != schema.version {
            return Err(bad(format!(
                "truth targets {}@{}, schema is {}",
                file.schema_id,
                file.schema_version,
                schema.key()
            )));
        }
        let mut values = BTreeMap::new();
        for (id, raw) in &file.values {
            let spec = schema.field(id).ok_or_else(|| bad(format!("unknown field {id}")))?;
            if let Some(v) = validate_value(spec, raw).map_err(|e| bad(e.to_string()))? {
                values.insert(id.clone(), v);
            }
        }
        let as_fields: BTreeMap<String, FieldValue> = values
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    FieldValue {
                        field_id: k.clone(),
                        value: Some(v.clone()),
                        source: Source::Human,
                        provenance: vec![],
                        note: None,
                    },
                )
            })
            .collect();
        let active = active_blocks(&as_fields, schema);
        let supplied: BTreeSet<u8> = values.keys().filter_map(|k| schema.block_of(k)).chain([1]).collect();
        if supplied != active {
            return Err(bad(format!("values supplied for blocks {supplied:?} but triggers activate {active:?}")));
        }
        Ok(Self {
            case_id: case_id.to_string(),
            values,
            active_blocks: active,
        })
    }

    pub fn load(case_id: &str, path: &Path, schema: &FormSchema) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(case_id, &text, schema)
    }

    /// Evaluable fields of the truth-active blocks, in schema order.
    pub fn evaluable_fields(&self, schema: &FormSchema) -> Vec<String> {
        schema
            .blocks
            .iter()
            .filter(|b| self.active_blocks.contains(&b.block_id))
            .flat_map(|b| b.fields.iter())
            .filter(|f| f.evaluable)
            .map(|f| f.field_id.clone())
            .collect()
    }
}

/// A fixture case directory: source documents plus `truth.json`.
#[derive(Debug, Clone)]
pub struct FixtureCase {
    pub case_id: String,
    pub dir: PathBuf,
    pub documents: Vec<PathBuf>,
    pub truth: GroundTruthForm,
}

pub const TRUTH_FILE: &str = "truth.json";

/// Loads every `<dir>/<case_id>/` holding a `truth.json`, sorted by case id.
pub fn load_fixture_cases(dir: &Path, schema: &FormSchema) -> Result<Vec<FixtureCase>, EvalError> {
    let io = |e: std::io::Error| EvalError::Io(format!("{}: {e}", dir.display()));
    let mut cases = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let truth_path = path.join(TRUTH_FILE);
        if !truth_path.is_file() {
            continue;
        }
        let case_id = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut documents = Vec::new();
        for doc in fs::read_dir(&path).map_err(io)? {
            let p = doc.map_err(io)?.path();
            let name = p.file_name().unwrap_or_default().to_string_lossy();
            if p.is_file() && name != TRUTH_FILE && !name.starts_with('.') {
                documents.push(p);
            }
        }
        documents.sort();
        let truth = GroundTruthForm::load(&case_id, &truth_path, schema)?;
        cases.push(FixtureCase {
            case_id,
            dir: path,
            documents,
            truth,
        });
    }
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(cases)
}
