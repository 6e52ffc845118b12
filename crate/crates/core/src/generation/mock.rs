use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use super::{GenerationError, PromptBundle};
use crate::text::fold_accents;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureAs {
    Text,
    Integer,
    Float,
}

/// One trigger rule. Either `value` is emitted verbatim or the `capture`
/// group is converted with `as`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternRule {
    pub field_id: String,
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Json>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture: Option<usize>,
    #[serde(default, rename = "as", skip_serializing_if = "Option::is_none")]
    pub capture_as: Option<CaptureAs>,
}

#[derive(Debug, Deserialize)]
struct TableFile {
    version: String,
    rules: Vec<PatternRule>,
}

/// Ordered rule list; for each field the first rule (in table order) that
/// matches anywhere in the context wins.
#[derive(Debug)]
pub struct PatternTable {
    pub version: String,
    rules: Vec<(PatternRule, Regex)>,
}

impl PatternTable {
    pub fn bundled() -> &'static PatternTable {
        static T: OnceLock<PatternTable> = OnceLock::new();
        T.get_or_init(|| {
            PatternTable::from_json_str(include_str!("../../assets/mock_patterns.json")).expect("bundled pattern table")
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, GenerationError> {
        let file: TableFile = serde_json::from_str(text).map_err(|e| GenerationError::PatternTable(e.to_string()))?;
        let mut rules = Vec::with_capacity(file.rules.len());
        for rule in file.rules {
            let re = Regex::new(&rule.pattern)
                .map_err(|e| GenerationError::PatternTable(format!("{}: {e}", rule.field_id)))?;
            match (&rule.value, rule.capture) {
                (Some(_), None) => {}
                (None, Some(g)) if g >= 1 && g < re.captures_len() => {}
                _ => {
                    return Err(GenerationError::PatternTable(format!(
                        "{}: rule needs either a value or a valid capture group",
                        rule.field_id
                    )))
                }
            }
            rules.push((rule, re));
        }
        Ok(Self {
            version: file.version,
            rules,
        })
    }

    pub fn rules(&self) -> impl Iterator<Item = &PatternRule> {
        self.rules.iter().map(|(r, _)| r)
    }

    fn extract(&self, field_id: &str, haystack: &str) -> Option<Json> {
        for (rule, re) in self.rules.iter().filter(|(r, _)| r.field_id == field_id) {
            let Some(caps) = re.captures(haystack) else { continue };
            if let Some(v) = &rule.value {
                return Some(v.clone());
            }
            let text = caps.get(rule.capture?)?.as_str();
            let converted = match rule.capture_as.unwrap_or(CaptureAs::Text) {
                CaptureAs::Text => Some(Json::String(text.to_string())),
                CaptureAs::Integer => text.parse::<i64>().ok().map(Json::from),
                CaptureAs::Float => text.replace(',', ".").parse::<f64>().ok().map(Json::from),
            };
            if converted.is_some() {
                return converted;
            }
        }
        None
    }

    /// Answers a bundle by scanning only its context texts, lowercased and
    /// accent-folded. Every block field appears in the output; unmatched
    /// fields are null.
    pub fn complete(&self, bundle: &PromptBundle) -> String {
        let haystack = bundle
            .contexts
            .iter()
            .map(|c| fold_accents(&c.text.to_lowercase()))
            .collect::<Vec<_>>()
            .join("\n");
        let mut out = Map::new();
        for id in &bundle.field_ids {
            out.insert(id.clone(), self.extract(id, &haystack).unwrap_or(Json::Null));
        }
        serde_json::to_string(&Json::Object(out)).expect("json object")
    }
}

/// The bundled deterministic extractor used as the offline backend.
pub fn mock_complete(bundle: &PromptBundle) -> String {
    PatternTable::bundled().complete(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_index::{Payload, RetrievalHit};
    use crate::form_model::FormSchema;
    use crate::generation::assemble_prompt;
    use serde_json::json;

    fn bundle(block: u8, texts: &[&str]) -> PromptBundle {
        let s = FormSchema::bundled();
        let hits: Vec<RetrievalHit> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| RetrievalHit {
                chunk_id: format!("d:{i:05}"),
                score: 1.0,
                text: t.to_string(),
                payload: Payload {
                    case_id: "C".into(),
                    doc_id: "d".into(),
                    ordinal: i,
                },
            })
            .collect();
        assemble_prompt(s.block(block).unwrap(), &hits)
    }

    fn answer(block: u8, texts: &[&str]) -> serde_json::Map<String, Json> {
        serde_json::from_str::<Json>(&mock_complete(&bundle(block, texts)))
            .unwrap()
            .as_object()
            .unwrap()
            .clone()
    }

    fn non_null(m: &serde_json::Map<String, Json>) -> Json {
        Json::Object(m.iter().filter(|(_, v)| !v.is_null()).map(|(k, v)| (k.clone(), v.clone())).collect())
    }

    #[test]
    fn bundled_table_compiles_and_targets_known_fields() {
        let s = FormSchema::bundled();
        let t = PatternTable::bundled();
        for r in t.rules() {
            assert!(s.field(&r.field_id).is_some(), "{}", r.field_id);
        }
    }

    #[test]
    fn ecog_and_ex_smoker() {
        let m = answer(1, &["ECOG 1. Exfumador desde 2015."]);
        assert_eq!(non_null(&m), json!({"ecog": 1, "smoking_status": "ex-smoker"}));
        assert_eq!(m.len(), FormSchema::bundled().block(1).unwrap().fields.len());
    }

    #[test]
    fn pdl1_percentage_is_float() {
        let m = answer(1, &["PD-L1 45%"]);
        assert_eq!(non_null(&m), json!({"pdl1": 45.0}));
        assert_eq!(m["pdl1"].as_f64(), Some(45.0));
        assert!(m["pdl1"].is_f64());
    }

    #[test]
    fn empty_context_gives_all_nulls() {
        let m = answer(1, &[]);
        assert!(m.values().all(Json::is_null));
    }

    #[test]
    fn refusal_and_markers() {
        let m = answer(1, &["Niega tratamiento. EGFR positivo."]);
        assert_eq!(m["treatment_refusal"], json!(true));
        assert_eq!(m["molecular_marker"], json!("egfr"));
        assert_eq!(m["molecular_marker_status"], json!("present"));
        let m = answer(1, &["Rechaza tratamiento. Estudio molecular negativo."]);
        assert_eq!(m["treatment_refusal"], json!(true));
        assert_eq!(m["molecular_marker"], json!("none"));
        assert_eq!(m["molecular_marker_status"], json!("absent"));
    }

    #[test]
    fn negations_take_precedence() {
        let m = answer(1, &["No ha recibido quimioterapia ni radioterapia. Sin recidiva."]);
        assert_eq!(m["radiotherapy"], json!(false));
        assert_eq!(m["chemotherapy"], json!(false));
        assert_eq!(m["recurrence"], json!(false));
        let m = answer(1, &["Recibió radioterapia torácica en 2019."]);
        assert_eq!(m["radiotherapy"], json!(true));
        let m = answer(1, &["No fumador."]);
        assert_eq!(m["smoking_status"], json!("non-smoker"));
    }

    #[test]
    fn matching_ignores_accents_and_case() {
        let m = answer(1, &["Nódulo en LÓBULO SUPERIOR DERECHO. Carcinoma de células pequeñas."]);
        assert_eq!(m["local_location"], json!("lobulo superior derecho"));
        assert_eq!(m["histology"], json!("carcinoma de celulas pequenas"));
    }

    #[test]
    fn output_is_byte_identical_across_calls() {
        let b = bundle(1, &["ECOG 2. PD-L1 del 80%. Fumador activo."]);
        assert_eq!(mock_complete(&b), mock_complete(&b));
    }

    #[test]
    fn malformed_tables_rejected() {
        let bad = r#"{"version":"x","rules":[{"field_id":"ecog","pattern":"ecog","capture":1}]}"#;
        assert!(PatternTable::from_json_str(bad).is_err());
        let bad = r#"{"version":"x","rules":[{"field_id":"ecog","pattern":"(","value":1}]}"#;
        assert!(PatternTable::from_json_str(bad).is_err());
    }
}
