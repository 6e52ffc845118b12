use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::embed_index::RetrievalHit;
use crate::form_model::{BlockSpec, DType, FieldSpec};
use crate::text::sha256_hex;

pub const NO_CONTEXT_MARKER: &str = "NO CONTEXT";
const OUTPUT_CONTRACT: &str = "single JSON object keyed by field_id";
const USER_SEPARATOR: &str = "=== USER ===";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockQuery {
    pub block_id: u8,
    pub query_text: String,
}

/// Title, then each field's label and synonyms, comma separated.
pub fn build_block_query(block: &BlockSpec) -> BlockQuery {
    let mut parts = vec![block.title.clone()];
    for f in &block.fields {
        parts.push(f.label.clone());
        parts.extend(f.synonyms.iter().cloned());
    }
    BlockQuery {
        block_id: block.block_id,
        query_text: parts.join(", "),
    }
}

/// The versioned prompt text shipped with the crate.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub version: String,
    pub checksum: String,
    system: String,
    user: String,
}

impl PromptTemplate {
    pub fn bundled() -> &'static PromptTemplate {
        static T: OnceLock<PromptTemplate> = OnceLock::new();
        T.get_or_init(|| {
            PromptTemplate::parse("block-prompt-v1", include_str!("../../assets/prompt/block_prompt_v1.txt"))
                .expect("bundled prompt template")
        })
    }

    pub fn parse(version: &str, text: &str) -> Option<Self> {
        let (system, user) = text.split_once(USER_SEPARATOR)?;
        Some(Self {
            version: version.to_string(),
            checksum: sha256_hex(text.as_bytes()),
            system: system.trim().to_string(),
            user: user.trim_start_matches('\n').to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextItem {
    pub chunk_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub block_id: u8,
    pub block_title: String,
    /// Field ids of the block, in schema order.
    pub field_ids: Vec<String>,
    pub system_instructions: String,
    pub field_schema_rendering: String,
    pub contexts: Vec<ContextItem>,
    pub output_contract: String,
    /// The fully rendered user message.
    pub user_prompt: String,
    pub template_version: String,
    pub template_checksum: String,
}

fn render_field(f: &FieldSpec) -> String {
    let kind = match &f.dtype {
        DType::Categorical { domain, .. } => {
            let values: Vec<String> = domain.iter().map(|d| format!("\"{d}\"")).collect();
            format!("categorical, one of: {}", values.join(" | "))
        }
        DType::Boolean => "boolean, true or false".to_string(),
        DType::Integer { min, max } => format!("integer, {min}..{max}"),
        DType::Float { min, max } => format!("number, {min}..{max}"),
        DType::FreeText => "free text".to_string(),
    };
    format!("- {} ({kind}): {}. Use null if absent.", f.field_id, f.label)
}

pub fn assemble_prompt(block: &BlockSpec, hits: &[RetrievalHit]) -> PromptBundle {
    assemble_with(PromptTemplate::bundled(), block, hits)
}

pub(crate) fn assemble_with(template: &PromptTemplate, block: &BlockSpec, hits: &[RetrievalHit]) -> PromptBundle {
    let field_schema_rendering = block.fields.iter().map(render_field).collect::<Vec<_>>().join("\n");
    let contexts: Vec<ContextItem> = hits
        .iter()
        .map(|h| ContextItem {
            chunk_id: h.chunk_id.clone(),
            text: h.text.clone(),
        })
        .collect();
    let rendered_contexts = if contexts.is_empty() {
        format!("{NO_CONTEXT_MARKER}: no source fragments were retrieved for this block.")
    } else {
        contexts
            .iter()
            .enumerate()
            .map(|(i, c)| format!("[{}] (chunk {})\n{}", i + 1, c.chunk_id, c.text))
            .collect::<Vec<_>>()
            .join("\n\n")
    };
    let user_prompt = template
        .user
        .replace("{{block_id}}", &block.block_id.to_string())
        .replace("{{block_title}}", &block.title)
        .replace("{{fields}}", &field_schema_rendering)
        .replace("{{output_contract}}", OUTPUT_CONTRACT)
        .replace("{{contexts}}", &rendered_contexts);
    PromptBundle {
        block_id: block.block_id,
        block_title: block.title.clone(),
        field_ids: block.fields.iter().map(|f| f.field_id.clone()).collect(),
        system_instructions: template.system.clone(),
        field_schema_rendering,
        contexts,
        output_contract: OUTPUT_CONTRACT.to_string(),
        user_prompt,
        template_version: template.version.clone(),
        template_checksum: template.checksum.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_index::Payload;
    use crate::form_model::FormSchema;

    fn hit(id: &str, text: &str) -> RetrievalHit {
        RetrievalHit {
            chunk_id: id.into(),
            score: 0.5,
            text: text.into(),
            payload: Payload {
                case_id: "C".into(),
                doc_id: "d".into(),
                ordinal: 0,
            },
        }
    }

    #[test]
    fn radiotherapy_query_mentions_radioterapia() {
        let s = FormSchema::bundled();
        let q = build_block_query(s.block(6).unwrap());
        assert!(q.query_text.contains("radioterapia"));
        assert_eq!(q, build_block_query(s.block(6).unwrap()));
        let q1 = build_block_query(s.block(1).unwrap());
        assert!(q1.query_text.contains("ECOG"));
        assert!(q1.query_text.contains("tabaquismo, fumador, exfumador"));
    }

    #[test]
    fn every_field_rendered_once() {
        let s = FormSchema::bundled();
        let hits: Vec<_> = (0..6).map(|i| hit(&format!("d:{i:05}"), "texto")).collect();
        for block in &s.blocks {
            let b = assemble_prompt(block, &hits);
            for f in &block.fields {
                let prefix = format!("- {} (", f.field_id);
                let n = b.field_schema_rendering.lines().filter(|l| l.starts_with(&prefix)).count();
                assert_eq!(n, 1, "{}", f.field_id);
            }
            assert_eq!(b.field_schema_rendering.lines().count(), block.fields.len());
        }
    }

    #[test]
    fn categorical_domain_listed_verbatim() {
        let s = FormSchema::bundled();
        let b = assemble_prompt(s.block(1).unwrap(), &[]);
        assert!(b.field_schema_rendering.contains("\"smoker\" | \"non-smoker\" | \"ex-smoker\""));
        assert!(b.field_schema_rendering.contains("ecog (integer, 0..5)"));
    }

    #[test]
    fn zero_hits_render_no_context_marker() {
        let s = FormSchema::bundled();
        let b = assemble_prompt(s.block(2).unwrap(), &[]);
        assert!(b.user_prompt.contains(NO_CONTEXT_MARKER));
        assert!(b.contexts.is_empty());
    }

    #[test]
    fn contexts_numbered_with_chunk_ids() {
        let s = FormSchema::bundled();
        let b = assemble_prompt(s.block(1).unwrap(), &[hit("d:00001", "ECOG 1."), hit("d:00000", "Exfumador.")]);
        assert!(b.user_prompt.contains("[1] (chunk d:00001)\nECOG 1."));
        assert!(b.user_prompt.contains("[2] (chunk d:00000)\nExfumador."));
        assert!(!b.user_prompt.contains(NO_CONTEXT_MARKER));
        assert!(!b.user_prompt.contains("{{"));
        assert!(b.system_instructions.contains("use null") || b.system_instructions.contains("Use null"));
        assert_eq!(b.template_checksum.len(), 64);
    }
}
