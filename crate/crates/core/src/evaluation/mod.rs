//! Benchmark harness: field accuracy against ground truth, end-to-end
//! latency and boxplot statistics per backend.

mod compare;
mod stats;
mod truth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::form_model::{FormInstance, FormSchema};
use crate::fsutil::write_atomic;
use crate::generation::{autofill_case, ChatBackend, Retriever};

pub use compare::{compare_field, mode_for, token_f1, CompareOptions, FieldComparison, MatchMode, FLOAT_TOLERANCE, TOKEN_F1_THRESHOLD};
pub use stats::{quantile_sorted, summarize, Summary};
pub use truth::{load_fixture_cases, FixtureCase, GroundTruthForm, TRUTH_FILE};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("statistics of an empty sample")]
    EmptyInput,
    #[error("case {0} has no evaluable fields")]
    EmptyDenominator(String),
    #[error("ground truth for case {case_id}: {detail}")]
    Truth { case_id: String, detail: String },
    #[error("form schema {found} does not match {expected}")]
    SchemaMismatch { expected: String, found: String },
    #[error("i/o failure: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub backend_id: String,
    pub accuracy_pct: f64,
    pub matches: usize,
    pub counted: usize,
    pub latency_s: f64,
    pub comparisons: Vec<FieldComparison>,
}

/// Scores a predicted form over the truth's evaluable fields. The `backend_id`
/// and `latency_s` of the result are left for the caller.
pub fn case_accuracy(
    instance: &FormInstance,
    truth: &GroundTruthForm,
    schema: &FormSchema,
    opts: CompareOptions,
) -> Result<CaseResult, EvalError> {
    if instance.schema_key() != schema.key() {
        return Err(EvalError::SchemaMismatch {
            expected: schema.key(),
            found: instance.schema_key(),
        });
    }
    let mut comparisons = Vec::new();
    for id in truth.evaluable_fields(schema) {
        let spec = schema.field(&id).expect("evaluable field from schema");
        comparisons.push(compare_field(spec, truth.values.get(&id), instance.value(&id), opts));
    }
    let counted = comparisons.iter().filter(|c| c.mode != MatchMode::Excluded).count();
    if counted == 0 {
        return Err(EvalError::EmptyDenominator(truth.case_id.clone()));
    }
    let matches = comparisons.iter().filter(|c| c.mode != MatchMode::Excluded && c.matched).count();
    Ok(CaseResult {
        case_id: truth.case_id.clone(),
        backend_id: String::new(),
        accuracy_pct: 100.0 * matches as f64 / counted as f64,
        matches,
        counted,
        latency_s: 0.0,
        comparisons,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub backend_id: String,
    pub n_cases: usize,
    pub accuracy: Summary,
    pub latency: Summary,
    pub cases: Vec<CaseResult>,
}

impl ModelReport {
    pub fn from_cases(backend_id: &str, cases: Vec<CaseResult>) -> Result<Self, EvalError> {
        let acc: Vec<f64> = cases.iter().map(|c| c.accuracy_pct).collect();
        let lat: Vec<f64> = cases.iter().map(|c| c.latency_s).collect();
        Ok(Self {
            backend_id: backend_id.to_string(),
            n_cases: cases.len(),
            accuracy: summarize(&acc)?,
            latency: summarize(&lat)?,
            cases,
        })
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.cases.iter().map(|c| c.accuracy_pct).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRecord {
    pub chunk_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub reports: Vec<ModelReport>,
    /// backend -> case -> block -> contexts shown.
    pub retrieval: BTreeMap<String, BTreeMap<String, BTreeMap<u8, Vec<HitRecord>>>>,
}

/// Runs every backend over every case, one case at a time. The index and
/// embedder are shared, so all backends see the same contexts. Latency is
/// wall-clock time around the whole case autofill.
pub fn run_benchmark(
    cases: &[GroundTruthForm],
    backends: &[Arc<dyn ChatBackend>],
    schema: &FormSchema,
    retriever: &Retriever<'_>,
    opts: CompareOptions,
) -> Result<BenchmarkRun, EvalError> {
    let mut reports = Vec::new();
    let mut retrieval = BTreeMap::new();
    for backend in backends {
        let mut results = Vec::new();
        let per_case: &mut BTreeMap<String, BTreeMap<u8, Vec<HitRecord>>> =
            retrieval.entry(backend.backend_id().to_string()).or_default();
        for truth in cases {
            let started = Instant::now();
            let outcome = autofill_case(&truth.case_id, schema, retriever, backend.as_ref(), None);
            let latency_s = started.elapsed().as_secs_f64();
            let mut result = case_accuracy(&outcome.form, truth, schema, opts)?;
            result.backend_id = backend.backend_id().to_string();
            result.latency_s = latency_s;
            tracing::info!(backend = backend.backend_id(), case = %truth.case_id, accuracy = result.accuracy_pct, latency_s, "case scored");
            per_case.insert(
                truth.case_id.clone(),
                outcome
                    .completions
                    .iter()
                    .map(|c| {
                        let hits = c
                            .hits
                            .iter()
                            .map(|h| HitRecord {
                                chunk_id: h.chunk_id.clone(),
                                score: h.score,
                            })
                            .collect();
                        (c.block_id, hits)
                    })
                    .collect(),
            );
            results.push(result);
        }
        reports.push(ModelReport::from_cases(backend.backend_id(), results)?);
    }
    Ok(BenchmarkRun { reports, retrieval })
}

pub const SUMMARY_HEADER: [&str; 11] = [
    "backend_id",
    "n_cases",
    "mean_acc",
    "std_acc",
    "median_acc",
    "q1_acc",
    "q3_acc",
    "whisker_low_acc",
    "whisker_high_acc",
    "mean_latency_s",
    "std_latency_s",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BoxplotSeries {
    backend_id: String,
    accuracy_values: Vec<f64>,
    latency_values: Vec<f64>,
    accuracy: Summary,
    latency: Summary,
}

fn two_dp(v: f64) -> String {
    format!("{v:.2}")
}

/// The summary table as CSV text (LF line endings).
pub fn summary_csv(reports: &[ModelReport]) -> Result<String, EvalError> {
    let err = |e: csv::Error| EvalError::Io(e.to_string());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER).map_err(err)?;
    for r in reports {
        let a = &r.accuracy;
        w.write_record([
            r.backend_id.clone(),
            r.n_cases.to_string(),
            two_dp(a.mean),
            two_dp(a.std),
            two_dp(a.median),
            two_dp(a.q1),
            two_dp(a.q3),
            two_dp(a.whisker_low),
            two_dp(a.whisker_high),
            two_dp(r.latency.mean),
            two_dp(r.latency.std),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EvalError::Io(e.to_string()))
}

pub fn report_json(reports: &[ModelReport]) -> String {
    let mut s = serde_json::to_string_pretty(reports).expect("serializable report");
    s.push('\n');
    s
}

/// Writes `report.json`, `summary.csv` and `boxplot_data.json` into
/// `out_dir` and returns their paths.
pub fn emit_report(reports: &[ModelReport], out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let io = |p: &Path, e: std::io::Error| EvalError::Io(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let boxplot: Vec<BoxplotSeries> = reports
        .iter()
        .map(|r| BoxplotSeries {
            backend_id: r.backend_id.clone(),
            accuracy_values: r.accuracies(),
            latency_values: r.cases.iter().map(|c| c.latency_s).collect(),
            accuracy: r.accuracy.clone(),
            latency: r.latency.clone(),
        })
        .collect();
    let mut boxplot_text = serde_json::to_string_pretty(&boxplot).expect("serializable boxplot");
    boxplot_text.push('\n');
    let files = [
        ("report.json", report_json(reports)),
        ("summary.csv", summary_csv(reports)?),
        ("boxplot_data.json", boxplot_text),
    ];
    let mut paths = Vec::new();
    for (name, body) in files {
        let p = out_dir.join(name);
        write_atomic(&p, body.as_bytes()).map_err(|e| io(&p, e))?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::form_model::Source;
    use serde_json::json;

    fn result(backend: &str, case: &str, acc: f64, lat: f64) -> CaseResult {
        CaseResult {
            case_id: case.into(),
            backend_id: backend.into(),
            accuracy_pct: acc,
            matches: 0,
            counted: 1,
            latency_s: lat,
            comparisons: vec![],
        }
    }

    fn truth_and_form() -> (FormSchema, GroundTruthForm, FormInstance) {
        let s = FormSchema::bundled();
        let values = json!({
            "smoking_status": "smoker", "previous_neoplasia": false, "treatment_refusal": false,
            "patient_medication": "none", "known_allergies": false, "ecog": 1,
            "local_location": "left lower lobe", "locoregional_location": "none", "systemic_location": "none",
            "histology": "adenocarcinoma", "molecular_marker": "none", "molecular_marker_status": "absent",
            "pdl1": 30.0, "recurrence": false, "rebiopsy": false, "radiotherapy": false, "chemotherapy": false
        });
        let text = json!({"schema_id": s.schema_id, "schema_version": s.version, "values": values}).to_string();
        let t = GroundTruthForm::from_json_str("C", &text, &s).unwrap();
        let mut f = FormInstance::new("C", &s);
        for (k, v) in values.as_object().unwrap() {
            f.apply_update(&s, k, v, Source::Model).unwrap();
        }
        (s, t, f)
    }

    #[test]
    fn perfect_prediction_is_exactly_100() {
        let (s, t, f) = truth_and_form();
        let r = case_accuracy(&f, &t, &s, CompareOptions::default()).unwrap();
        assert_eq!(r.accuracy_pct, 100.0);
        assert_eq!(r.counted, 17);
    }

    #[test]
    fn eight_of_ten_style_arithmetic() {
        let (s, t, mut f) = truth_and_form();
        f.apply_update(&s, "ecog", &json!(3), Source::Model).unwrap();
        f.apply_update(&s, "histology", &json!("small cell carcinoma"), Source::Model).unwrap();
        let r = case_accuracy(&f, &t, &s, CompareOptions::default()).unwrap();
        assert_eq!(r.matches, 15);
        assert_eq!(r.accuracy_pct, 100.0 * 15.0 / 17.0);
    }

    #[test]
    fn missed_activation_is_penalized_through_truth_scope() {
        let s = FormSchema::bundled();
        let text = json!({"schema_id": s.schema_id, "schema_version": s.version,
            "values": {"chemotherapy": true, "chemo_intent": "palliative"}})
        .to_string();
        let t = GroundTruthForm::from_json_str("C", &text, &s).unwrap();
        let f = FormInstance::new("C", &s);
        let r = case_accuracy(&f, &t, &s, CompareOptions::default()).unwrap();
        // block 1 has 17 evaluable fields, block 7 adds chemo_intent
        assert_eq!(r.counted, 18);
        assert!(!r.comparisons.iter().find(|c| c.field_id == "chemo_intent").unwrap().matched);
        assert_eq!(r.matches, 16);
    }

    #[test]
    fn summary_csv_shape_and_rendering() {
        let reports = vec![
            ModelReport::from_cases("a", vec![result("a", "1", 80.0, 1.0), result("a", "2", 60.0, 3.0)]).unwrap(),
            ModelReport::from_cases("b", vec![result("b", "1", 100.0, 0.5)]).unwrap(),
        ];
        let csv = summary_csv(&reports).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], SUMMARY_HEADER.join(","));
        assert!(lines[1].starts_with("a,2,70.00,14.14,70.00,65.00,75.00,60.00,80.00,2.00,1.41"), "{}", lines[1]);
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn report_json_round_trips_byte_identical() {
        let reports = vec![ModelReport::from_cases(
            "a",
            vec![result("a", "1", 100.0 / 3.0, 0.123456789), result("a", "2", 0.1 + 0.2, 1e-7)],
        )
        .unwrap()];
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_report(&reports, dir.path()).unwrap();
        let text = std::fs::read_to_string(&paths[0]).unwrap();
        let parsed: Vec<ModelReport> = serde_json::from_str(&text).unwrap();
        assert_eq!(report_json(&parsed), text);
        let boxplot: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&paths[2]).unwrap()).unwrap();
        assert_eq!(boxplot[0]["accuracy_values"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn empty_denominator() {
        let s = FormSchema::from_json_str(
            r#"{"schema_id":"t","version":"1","blocks":[{"block_id":1,"title":"B","fields":[
            {"field_id":"notes","label":"N","section":"other","dtype":{"kind":"free_text"}}]}]}"#,
        )
        .unwrap();
        let t = GroundTruthForm::from_json_str("C", r#"{"schema_id":"t","schema_version":"1","values":{}}"#, &s).unwrap();
        let f = FormInstance::new("C", &s);
        assert!(matches!(
            case_accuracy(&f, &t, &s, CompareOptions::default()),
            Err(EvalError::EmptyDenominator(_))
        ));
    }
}
