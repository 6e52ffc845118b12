//! A form being completed for one case.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use super::schema::FormSchema;
use super::value::{validate_value, FieldValue, Source, ValidationError, ValidationErrorKind, Value};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UpdateError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("field {0:?} holds a human-entered value; model updates need force")]
    HumanValueProtected(String),
    #[error("updates must come from a model or a human")]
    InvalidSource,
    #[error("form belongs to schema {found}, expected {expected}")]
    SchemaMismatch { expected: String, found: String },
}

/// One applied update. Folding the entries over an empty form reproduces
/// its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormAuditEntry {
    pub timestamp: DateTime<Utc>,
    pub field_id: String,
    pub old: Option<Value>,
    pub new: Option<Value>,
    pub source: Source,
    #[serde(default)]
    pub provenance: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Values for every schema field plus the derived set of active blocks.
/// Values of blocks that became inactive are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormInstance {
    case_id: String,
    schema_id: String,
    schema_version: String,
    values: BTreeMap<String, FieldValue>,
    active_blocks: BTreeSet<u8>,
    audit: Vec<FormAuditEntry>,
}

/// Active blocks for a values map; missing fields make their clauses false.
pub fn active_blocks(values: &BTreeMap<String, FieldValue>, schema: &FormSchema) -> BTreeSet<u8> {
    schema.active_blocks(|id| values.get(id).and_then(|v| v.value.as_ref()))
}

impl FormInstance {
    pub fn new(case_id: impl Into<String>, schema: &FormSchema) -> Self {
        let values: BTreeMap<String, FieldValue> = schema
            .fields()
            .map(|f| (f.field_id.clone(), FieldValue::empty(&f.field_id)))
            .collect();
        let active = active_blocks(&values, schema);
        Self {
            case_id: case_id.into(),
            schema_id: schema.schema_id.clone(),
            schema_version: schema.version.clone(),
            values,
            active_blocks: active,
            audit: Vec::new(),
        }
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn schema_key(&self) -> String {
        format!("{}@{}", self.schema_id, self.schema_version)
    }

    pub fn values(&self) -> &BTreeMap<String, FieldValue> {
        &self.values
    }

    pub fn get(&self, field_id: &str) -> Option<&FieldValue> {
        self.values.get(field_id)
    }

    pub fn value(&self, field_id: &str) -> Option<&Value> {
        self.values.get(field_id).and_then(|v| v.value.as_ref())
    }

    pub fn active_blocks(&self) -> &BTreeSet<u8> {
        &self.active_blocks
    }

    pub fn audit(&self) -> &[FormAuditEntry] {
        &self.audit
    }

    /// Whether `field_id` belongs to a currently active block.
    pub fn is_active_field(&self, schema: &FormSchema, field_id: &str) -> bool {
        schema
            .block_of(field_id)
            .is_some_and(|b| self.active_blocks.contains(&b))
    }

    fn check_schema(&self, schema: &FormSchema) -> Result<(), UpdateError> {
        if self.schema_id != schema.schema_id || self.schema_version != schema.version {
            return Err(UpdateError::SchemaMismatch {
                expected: schema.key(),
                found: self.schema_key(),
            });
        }
        Ok(())
    }

    /// Validates `raw` for `field_id` and stores it. On error the instance is
    /// unchanged; on success exactly one audit entry is appended. Model
    /// updates never replace a human-entered value.
    pub fn apply_update(&mut self, schema: &FormSchema, field_id: &str, raw: &Json, source: Source) -> Result<(), UpdateError> {
        self.update(schema, field_id, raw, source, false)
    }

    /// Like [`apply_update`](Self::apply_update) but lets a model value
    /// replace a human one.
    pub fn force_update(&mut self, schema: &FormSchema, field_id: &str, raw: &Json, source: Source) -> Result<(), UpdateError> {
        self.update(schema, field_id, raw, source, true)
    }

    fn update(&mut self, schema: &FormSchema, field_id: &str, raw: &Json, source: Source, force: bool) -> Result<(), UpdateError> {
        if source == Source::Empty {
            return Err(UpdateError::InvalidSource);
        }
        self.check_schema(schema)?;
        let spec = schema.field(field_id).ok_or_else(|| ValidationError {
            field_id: field_id.to_string(),
            kind: ValidationErrorKind::UnknownField,
            detail: "field is not part of the schema".into(),
        })?;
        let value = validate_value(spec, raw)?;
        let current = self.values.get(field_id).cloned().unwrap_or_else(|| FieldValue::empty(field_id));
        self.guard(&current, source, force)?;
        // a human confirming a model value keeps the model's evidence
        let provenance = if source == Source::Human && current.source == Source::Model && current.value == value {
            current.provenance.clone()
        } else {
            Vec::new()
        };
        self.commit(
            schema,
            FieldValue {
                field_id: field_id.to_string(),
                value,
                source,
                provenance,
                note: None,
            },
        );
        Ok(())
    }

    /// Stores an already produced field state (e.g. a parsed model answer with
    /// its provenance), re-validating the value. Human values are protected
    /// as in [`apply_update`](Self::apply_update).
    pub fn record_value(&mut self, schema: &FormSchema, field: FieldValue) -> Result<(), UpdateError> {
        self.check_schema(schema)?;
        let spec = schema.field(&field.field_id).ok_or_else(|| ValidationError {
            field_id: field.field_id.clone(),
            kind: ValidationErrorKind::UnknownField,
            detail: "field is not part of the schema".into(),
        })?;
        if let Some(v) = &field.value {
            let revalidated = validate_value(spec, &v.to_json())?;
            if revalidated.as_ref() != Some(v) {
                return Err(ValidationError {
                    field_id: field.field_id.clone(),
                    kind: ValidationErrorKind::TypeMismatch,
                    detail: format!("{v} is not in canonical form"),
                }
                .into());
            }
        } else if field.source != Source::Empty && field.source != Source::Human {
            return Err(UpdateError::InvalidSource);
        }
        let current = self.values.get(&field.field_id).cloned().unwrap_or_else(|| FieldValue::empty(&field.field_id));
        self.guard(&current, field.source, false)?;
        self.commit(schema, field);
        Ok(())
    }

    fn guard(&self, current: &FieldValue, source: Source, force: bool) -> Result<(), UpdateError> {
        if current.source == Source::Human && source != Source::Human && !force {
            return Err(UpdateError::HumanValueProtected(current.field_id.clone()));
        }
        Ok(())
    }

    fn commit(&mut self, schema: &FormSchema, field: FieldValue) {
        let old = self.values.get(&field.field_id).and_then(|v| v.value.clone());
        self.audit.push(FormAuditEntry {
            timestamp: Utc::now(),
            field_id: field.field_id.clone(),
            old,
            new: field.value.clone(),
            source: field.source,
            provenance: field.provenance.clone(),
            note: field.note.clone(),
        });
        self.values.insert(field.field_id.clone(), field);
        self.active_blocks = active_blocks(&self.values, schema);
    }

    /// Rebuilds the values map by folding the audit trail over an empty form.
    pub fn replay_audit(&self, schema: &FormSchema) -> BTreeMap<String, FieldValue> {
        let mut values = FormInstance::new(&self.case_id, schema).values;
        for e in &self.audit {
            values.insert(
                e.field_id.clone(),
                FieldValue {
                    field_id: e.field_id.clone(),
                    value: e.new.clone(),
                    source: e.source,
                    provenance: e.provenance.clone(),
                    note: e.note.clone(),
                },
            );
        }
        values
    }

    /// Share of required fields in active blocks that hold a value; 1.0 when
    /// no required field is active.
    pub fn completeness(&self, schema: &FormSchema) -> f64 {
        let mut required = 0usize;
        let mut filled = 0usize;
        for block in schema.blocks.iter().filter(|b| self.active_blocks.contains(&b.block_id)) {
            for f in block.fields.iter().filter(|f| f.required) {
                required += 1;
                if self.value(&f.field_id).is_some() {
                    filled += 1;
                }
            }
        }
        if required == 0 {
            1.0
        } else {
            filled as f64 / required as f64
        }
    }

    /// Checks a deserialized instance against `schema`: known fields, valid
    /// values and an up-to-date active block set.
    pub fn verify(&self, schema: &FormSchema) -> Result<(), UpdateError> {
        self.check_schema(schema)?;
        for (id, fv) in &self.values {
            let spec = schema.field(id).ok_or_else(|| ValidationError {
                field_id: id.clone(),
                kind: ValidationErrorKind::UnknownField,
                detail: "stored field is not part of the schema".into(),
            })?;
            if let Some(v) = &fv.value {
                validate_value(spec, &v.to_json())?;
            }
        }
        if active_blocks(&self.values, schema) != self.active_blocks {
            return Err(UpdateError::SchemaMismatch {
                expected: format!("{:?}", active_blocks(&self.values, schema)),
                found: format!("{:?}", self.active_blocks),
            });
        }
        Ok(())
    }
}
