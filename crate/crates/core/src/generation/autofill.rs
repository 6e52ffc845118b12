use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::backend::{complete_block, ChatBackend};
use super::parse::parse_model_output;
use super::prompt::{assemble_prompt, build_block_query, BlockQuery, PromptTemplate};
use super::GenerationError;
use crate::embed_index::{embed, EmbeddingProvider, RetrievalHit, VectorIndex};
use crate::form_model::{BlockSpec, FieldValue, FormInstance, FormSchema, UpdateError};

pub const DEFAULT_K: usize = 6;

/// Everything retrieval needs. The same retriever is shared by all backends
/// of a run so their contexts are identical.
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    pub index: &'a VectorIndex,
    pub embedder: &'a dyn EmbeddingProvider,
    pub k: usize,
}

pub fn retrieve_context(query: &BlockQuery, case_id: &str, retriever: &Retriever<'_>) -> Result<Vec<RetrievalHit>, GenerationError> {
    let q = embed(&query.query_text, retriever.embedder)?;
    Ok(retriever.index.search(&q, retriever.k, Some(case_id))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCompletion {
    pub block_id: u8,
    pub backend_id: String,
    pub raw_output: String,
    /// One entry per block field.
    pub parsed: BTreeMap<String, FieldValue>,
    /// Seconds spent on retrieval, prompting, the backend call and parsing.
    pub latency_s: f64,
    /// Chunk ids backing each present value.
    pub provenance: BTreeMap<String, Vec<String>>,
    /// Contexts shown to the backend, in prompt order.
    pub hits: Vec<RetrievalHit>,
    pub template_version: String,
    pub template_checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutofillOutcome {
    pub form: FormInstance,
    pub completions: Vec<BlockCompletion>,
    /// Sum of the block latencies.
    pub latency_s: f64,
}

fn run_block(case_id: &str, block: &BlockSpec, retriever: &Retriever<'_>, backend: &dyn ChatBackend) -> BlockCompletion {
    let started = Instant::now();
    let template = PromptTemplate::bundled();
    let mut completion = BlockCompletion {
        block_id: block.block_id,
        backend_id: backend.backend_id().to_string(),
        raw_output: String::new(),
        parsed: block
            .fields
            .iter()
            .map(|f| (f.field_id.clone(), FieldValue::empty(&f.field_id)))
            .collect(),
        latency_s: 0.0,
        provenance: BTreeMap::new(),
        hits: Vec::new(),
        template_version: template.version.clone(),
        template_checksum: template.checksum.clone(),
        error: None,
    };
    let outcome = (|| {
        let hits = retrieve_context(&build_block_query(block), case_id, retriever)?;
        let bundle = assemble_prompt(block, &hits);
        completion.hits = hits;
        let (raw, _) = complete_block(&bundle, backend)?;
        completion.raw_output = raw;
        parse_model_output(&completion.raw_output, block)
    })();
    match outcome {
        Ok(mut parsed) => {
            let ids: Vec<String> = completion.hits.iter().map(|h| h.chunk_id.clone()).collect();
            for fv in parsed.values_mut().filter(|fv| fv.value.is_some()) {
                fv.provenance = ids.clone();
                completion.provenance.insert(fv.field_id.clone(), ids.clone());
            }
            completion.parsed = parsed;
        }
        Err(e) => {
            tracing::warn!(case = case_id, block = block.block_id, error = %e, "block completion failed");
            for fv in completion.parsed.values_mut() {
                fv.note = Some(format!("block failed: {e}"));
            }
            completion.error = Some(e.to_string());
        }
    }
    completion.latency_s = started.elapsed().as_secs_f64();
    completion
}

fn record(form: &mut FormInstance, schema: &FormSchema, completion: &BlockCompletion) {
    for fv in completion.parsed.values() {
        if form.get(&fv.field_id) == Some(fv) {
            continue;
        }
        match form.record_value(schema, fv.clone()) {
            Ok(()) | Err(UpdateError::HumanValueProtected(_)) => {}
            Err(e) => tracing::warn!(field = %fv.field_id, error = %e, "model value not recorded"),
        }
    }
}

/// Completes block 1, derives the active blocks from the resulting form, then
/// completes each active block in ascending order. Inactive blocks never
/// reach the backend. A failed block leaves its fields missing and the run
/// continues. Values a human entered in `base` are kept.
pub fn autofill_case(
    case_id: &str,
    schema: &FormSchema,
    retriever: &Retriever<'_>,
    backend: &dyn ChatBackend,
    base: Option<FormInstance>,
) -> AutofillOutcome {
    let mut form = base.unwrap_or_else(|| FormInstance::new(case_id, schema));
    let mut completions = Vec::new();
    if let Some(first) = schema.blocks.iter().find(|b| b.activation.is_none()) {
        let c = run_block(case_id, first, retriever, backend);
        record(&mut form, schema, &c);
        completions.push(c);
    }
    let active = form.active_blocks().clone();
    for block in schema.blocks.iter().filter(|b| b.activation.is_some() && active.contains(&b.block_id)) {
        let c = run_block(case_id, block, retriever, backend);
        record(&mut form, schema, &c);
        completions.push(c);
    }
    let latency_s = completions.iter().map(|c| c.latency_s).sum();
    AutofillOutcome {
        form,
        completions,
        latency_s,
    }
}
