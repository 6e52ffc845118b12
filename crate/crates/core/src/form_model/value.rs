//! Typed field values and the coercion rules that produce them.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::schema::{DType, FieldSpec};
use crate::text::canonical_key;

/// A validated field payload. Categorical values hold the canonical domain
/// member; free text is kept verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl Value {
    pub fn to_json(&self) -> Json {
        serde_json::to_value(self).expect("value serializes")
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Text(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValidationErrorKind {
    OutOfRange,
    NotInDomain,
    TypeMismatch,
    UnknownField,
}

impl fmt::Display for ValidationErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{kind}: {field_id}: {detail}")]
pub struct ValidationError {
    pub field_id: String,
    pub kind: ValidationErrorKind,
    pub detail: String,
}

impl ValidationError {
    fn new(spec: &FieldSpec, kind: ValidationErrorKind, detail: String) -> Self {
        Self {
            field_id: spec.field_id.clone(),
            kind,
            detail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Model,
    Human,
    Empty,
}

/// A field's current state within a form instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldValue {
    pub field_id: String,
    pub value: Option<Value>,
    pub source: Source,
    /// Chunk ids of the evidence shown when the value was produced.
    #[serde(default)]
    pub provenance: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl FieldValue {
    pub fn empty(field_id: impl Into<String>) -> Self {
        Self {
            field_id: field_id.into(),
            value: None,
            source: Source::Empty,
            provenance: Vec::new(),
            note: None,
        }
    }

    pub fn is_missing(&self) -> bool {
        self.value.is_none()
    }
}

/// Key used for categorical matching: canonical key with `-`/`_` read as spaces.
pub(crate) fn categorical_key(s: &str) -> String {
    canonical_key(&s.replace(['-', '_'], " "))
}

fn parse_number(raw: &str) -> Option<f64> {
    let s = raw.trim().replace('\u{2212}', "-");
    let s = match (s.contains(','), s.contains('.')) {
        (true, true) => return None,
        (true, false) => s.replace(',', "."),
        _ => s,
    };
    if s.is_empty() || s.contains(|c: char| c.is_whitespace()) {
        return None;
    }
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}

fn number_of(raw: &Json) -> Option<f64> {
    match raw {
        Json::Number(n) => n.as_f64(),
        Json::String(s) => parse_number(s),
        _ => None,
    }
}

/// Coerces untyped input into a value for `spec`. `null` means missing and
/// is accepted for every field.
///
/// Booleans accept `true`/`false` and, case-insensitively, `sí`/`si`/`yes`/`no`;
/// numbers accept `.` or `,` as decimal separator; categorical input is
/// matched against the domain and its aliases after trimming, lowercasing and
/// accent folding.
pub fn validate_value(spec: &FieldSpec, raw: &Json) -> Result<Option<Value>, ValidationError> {
    use ValidationErrorKind::*;
    if raw.is_null() {
        return Ok(None);
    }
    let mismatch = |what: &str| ValidationError::new(spec, TypeMismatch, format!("expected {what}, got {raw}"));
    let value = match &spec.dtype {
        DType::Boolean => match raw {
            Json::Bool(b) => Value::Bool(*b),
            Json::String(s) => match canonical_key(s).as_str() {
                "true" | "si" | "yes" | "verdadero" => Value::Bool(true),
                "false" | "no" | "falso" => Value::Bool(false),
                _ => return Err(mismatch("boolean")),
            },
            _ => return Err(mismatch("boolean")),
        },
        DType::Integer { min, max } => {
            let x = number_of(raw).ok_or_else(|| mismatch("integer"))?;
            if x.fract() != 0.0 || x.abs() > 9.0e15 {
                return Err(mismatch("integer"));
            }
            let i = x as i64;
            if i < *min || i > *max {
                return Err(ValidationError::new(spec, OutOfRange, format!("{i} outside {min}..={max}")));
            }
            Value::Int(i)
        }
        DType::Float { min, max } => {
            let x = number_of(raw).ok_or_else(|| mismatch("number"))?;
            if x < *min || x > *max {
                return Err(ValidationError::new(spec, OutOfRange, format!("{x} outside {min}..={max}")));
            }
            Value::Float(x)
        }
        DType::Categorical { .. } => {
            let Json::String(s) = raw else {
                return Err(mismatch("category label"));
            };
            match spec.resolve_category(s) {
                Some(member) => Value::Text(member.to_string()),
                None => {
                    return Err(ValidationError::new(
                        spec,
                        NotInDomain,
                        format!("{s:?} is not one of {:?}", spec.domain().unwrap_or(&[])),
                    ))
                }
            }
        }
        DType::FreeText => match raw {
            Json::String(s) => Value::Text(s.clone()),
            _ => return Err(mismatch("text")),
        },
    };
    Ok(Some(value))
}
