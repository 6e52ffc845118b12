use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::form_model::{categorical_key, DType, FieldSpec, Value};
use crate::text::canonical_key;

/// Absolute tolerance for float fields (percent scale).
pub const FLOAT_TOLERANCE: f64 = 0.5;
/// Token F1 needed for a free-text match when that mode is switched on.
pub const TOKEN_F1_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Exact,
    CategoricalCanonical,
    NumericTolerance,
    TokenF1,
    Excluded,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompareOptions {
    /// Score evaluable free-text fields by token F1 instead of excluding them.
    pub free_text_token_f1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldComparison {
    pub field_id: String,
    pub expected: Option<Value>,
    pub predicted: Option<Value>,
    #[serde(rename = "match")]
    pub matched: bool,
    pub mode: MatchMode,
}

/// Multiset token overlap F1 over canonicalized whitespace tokens.
pub fn token_f1(a: &str, b: &str) -> f64 {
    let ta: Vec<String> = canonical_key(a).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
    let tb: Vec<String> = canonical_key(b).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
    if ta.is_empty() || tb.is_empty() {
        return if ta.is_empty() && tb.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &ta {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &tb {
        if let Some(c) = counts.get_mut(t.as_str()).filter(|c| **c > 0) {
            *c -= 1;
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / tb.len() as f64;
    let r = common as f64 / ta.len() as f64;
    2.0 * p * r / (p + r)
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Int(i) => Some(*i as f64),
        Value::Float(f) => Some(*f),
        _ => None,
    }
}

pub fn mode_for(spec: &FieldSpec, opts: CompareOptions) -> MatchMode {
    match (&spec.dtype, spec.evaluable) {
        (_, false) => MatchMode::Excluded,
        (DType::FreeText, true) if opts.free_text_token_f1 => MatchMode::TokenF1,
        (DType::FreeText, true) => MatchMode::Excluded,
        (DType::Categorical { .. }, true) => MatchMode::CategoricalCanonical,
        (DType::Float { .. }, true) => MatchMode::NumericTolerance,
        (DType::Boolean | DType::Integer { .. }, true) => MatchMode::Exact,
    }
}

/// Compares one field. Missing against present never matches; both missing
/// matches.
pub fn compare_field(spec: &FieldSpec, expected: Option<&Value>, predicted: Option<&Value>, opts: CompareOptions) -> FieldComparison {
    let mode = mode_for(spec, opts);
    let matched = match (expected, predicted) {
        (None, None) => true,
        (Some(e), Some(p)) => match mode {
            MatchMode::Excluded | MatchMode::Exact => e == p,
            MatchMode::CategoricalCanonical => match (e, p) {
                (Value::Text(a), Value::Text(b)) => categorical_key(a) == categorical_key(b),
                _ => false,
            },
            // a hair of slack so decimal inputs like 45.1 vs 45.6 sit on the boundary
            MatchMode::NumericTolerance => match (as_f64(e), as_f64(p)) {
                (Some(a), Some(b)) => (a - b).abs() <= FLOAT_TOLERANCE + 1e-9,
                _ => false,
            },
            MatchMode::TokenF1 => match (e, p) {
                (Value::Text(a), Value::Text(b)) => token_f1(a, b) >= TOKEN_F1_THRESHOLD,
                _ => false,
            },
        },
        _ => false,
    };
    FieldComparison {
        field_id: spec.field_id.clone(),
        expected: expected.cloned(),
        predicted: predicted.cloned(),
        matched,
        mode,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::form_model::FormSchema;

    fn cmp(id: &str, e: Option<Value>, p: Option<Value>) -> FieldComparison {
        let s = FormSchema::bundled();
        compare_field(s.field(id).unwrap(), e.as_ref(), p.as_ref(), CompareOptions::default())
    }

    #[test]
    fn categorical_canonical_match() {
        let c = cmp("smoking_status", Some(Value::Text("ex-smoker".into())), Some(Value::Text("Ex-Smoker".into())));
        assert!(c.matched);
        assert_eq!(c.mode, MatchMode::CategoricalCanonical);
    }

    #[test]
    fn float_tolerance_boundary() {
        let e = Some(Value::Float(45.0));
        assert!(cmp("pdl1", e.clone(), Some(Value::Float(45.4))).matched);
        assert!(cmp("pdl1", e.clone(), Some(Value::Float(45.5))).matched);
        assert!(!cmp("pdl1", e, Some(Value::Float(46.0))).matched);
    }

    #[test]
    fn missing_rules() {
        assert!(!cmp("ecog", Some(Value::Int(1)), None).matched);
        assert!(!cmp("ecog", None, Some(Value::Int(1))).matched);
        assert!(cmp("ecog", None, None).matched);
        assert!(!cmp("ecog", Some(Value::Int(1)), Some(Value::Int(2))).matched);
    }

    #[test]
    fn free_text_excluded_unless_flagged() {
        let s = FormSchema::bundled();
        let spec = s.field("chemo_agents").unwrap();
        assert_eq!(mode_for(spec, CompareOptions::default()), MatchMode::Excluded);
        let mut evaluable = spec.clone();
        evaluable.evaluable = true;
        let opts = CompareOptions { free_text_token_f1: true };
        let a = Value::Text("cisplatino y pemetrexed".into());
        let b = Value::Text("Cisplatino + pemetrexed".into());
        let c = compare_field(&evaluable, Some(&a), Some(&b), opts);
        assert_eq!(c.mode, MatchMode::TokenF1);
        assert!(c.matched);
    }

    #[test]
    fn token_f1_values() {
        assert_eq!(token_f1("a b c", "a b c"), 1.0);
        assert_eq!(token_f1("a b", "c d"), 0.0);
        // p = 1/2, r = 1/1
        assert!((token_f1("a", "a b") - 2.0 / 3.0).abs() < 1e-12);
    }
}
