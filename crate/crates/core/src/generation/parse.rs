use std::collections::BTreeMap;

use serde_json::{Map, Value as Json};

use super::GenerationError;
use crate::form_model::{validate_value, BlockSpec, FieldValue, Source};

/// Removes markdown fence lines (```json and ```).
fn strip_fences(raw: &str) -> String {
    raw.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Byte ranges of balanced top-level `{...}` spans, string-aware.
fn balanced_objects(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' {
            i += 1;
            continue;
        }
        let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
        let mut end = None;
        for (j, &b) in bytes.iter().enumerate().skip(i) {
            if in_str {
                match (escaped, b) {
                    (true, _) => escaped = false,
                    (false, b'\\') => escaped = true,
                    (false, b'"') => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(j);
                        break;
                    }
                }
                _ => {}
            }
        }
        match end {
            Some(j) => {
                out.push(&text[i..=j]);
                i = j + 1;
            }
            None => break,
        }
    }
    out
}

/// Drops commas that directly precede `}` or `]` outside strings.
fn remove_trailing_commas(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let (mut in_str, mut escaped) = (false, false);
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            out.push(c);
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        if c == '"' {
            in_str = true;
        } else if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn first_object(raw: &str) -> Option<Map<String, Json>> {
    let cleaned = strip_fences(raw);
    for candidate in balanced_objects(&cleaned) {
        for attempt in [candidate.to_string(), remove_trailing_commas(candidate)] {
            if let Ok(Json::Object(map)) = serde_json::from_str::<Json>(&attempt) {
                return Some(map);
            }
        }
    }
    None
}

/// Repairs and validates a model answer for `block`. The result has one entry
/// per block field. Values that fail validation become missing with the
/// error kept as a note; they are never coerced to something plausible.
pub fn parse_model_output(raw: &str, block: &BlockSpec) -> Result<BTreeMap<String, FieldValue>, GenerationError> {
    let object = first_object(raw).ok_or(GenerationError::UnparseableOutput)?;
    for key in object.keys() {
        if !block.fields.iter().any(|f| &f.field_id == key) {
            tracing::warn!(block = block.block_id, field = %key, "dropping unknown field in model output");
        }
    }
    let mut out = BTreeMap::new();
    for spec in &block.fields {
        let raw_value = object.get(&spec.field_id).unwrap_or(&Json::Null);
        let fv = match validate_value(spec, raw_value) {
            Ok(Some(v)) => FieldValue {
                field_id: spec.field_id.clone(),
                value: Some(v),
                source: Source::Model,
                provenance: Vec::new(),
                note: None,
            },
            Ok(None) => FieldValue::empty(&spec.field_id),
            Err(e) => FieldValue {
                note: Some(format!("{e} (model answered {raw_value})")),
                ..FieldValue::empty(&spec.field_id)
            },
        };
        out.insert(spec.field_id.clone(), fv);
    }
    Ok(out)
}

/// Renders a parsed map back into the output contract.
pub fn render_output(values: &BTreeMap<String, FieldValue>) -> String {
    let map: Map<String, Json> = values
        .iter()
        .map(|(k, v)| (k.clone(), v.value.as_ref().map_or(Json::Null, |v| v.to_json())))
        .collect();
    serde_json::to_string(&Json::Object(map)).expect("json object")
}
