//! Declarative form definition: blocks, typed fields and activation rules.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use super::value::{categorical_key, Value};

const BUNDLED_SCHEMA: &str = include_str!("../../assets/schema/lung_mdtb.json");

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema parse error: {0}")]
    Parse(String),
    #[error("schema validation error: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    MedicalHistory,
    PerformanceStatus,
    Diagnosis,
    Treatment,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DType {
    Categorical {
        domain: Vec<String>,
        /// Alternative spellings per domain member.
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        aliases: BTreeMap<String, Vec<String>>,
    },
    Boolean,
    Integer {
        min: i64,
        max: i64,
    },
    Float {
        min: f64,
        max: f64,
    },
    FreeText,
}

impl DType {
    pub fn name(&self) -> &'static str {
        match self {
            DType::Categorical { .. } => "categorical",
            DType::Boolean => "boolean",
            DType::Integer { .. } => "integer",
            DType::Float { .. } => "float",
            DType::FreeText => "free_text",
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub field_id: String,
    pub label: String,
    pub section: Section,
    pub dtype: DType,
    #[serde(default)]
    pub required: bool,
    /// Whether the field participates in accuracy scoring.
    #[serde(default = "yes")]
    pub evaluable: bool,
    /// Retrieval query terms (typically the narrative's own vocabulary).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synonyms: Vec<String>,
}

impl FieldSpec {
    pub fn domain(&self) -> Option<&[String]> {
        match &self.dtype {
            DType::Categorical { domain, .. } => Some(domain),
            _ => None,
        }
    }

    /// Domain member matching `raw` directly or through an alias.
    pub fn resolve_category(&self, raw: &str) -> Option<&str> {
        let DType::Categorical { domain, aliases } = &self.dtype else {
            return None;
        };
        let key = categorical_key(raw);
        if let Some(m) = domain.iter().find(|m| categorical_key(m) == key) {
            return Some(m);
        }
        aliases
            .iter()
            .find(|(_, alts)| alts.iter().any(|a| categorical_key(a) == key))
            .map(|(member, _)| member.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Equals,
    NotEquals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combinator {
    #[default]
    AllOf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub field_id: String,
    pub comparator: Comparator,
    pub literal: Json,
}

impl Clause {
    /// A clause over a missing field is false regardless of comparator.
    fn holds(&self, value: Option<&Value>) -> bool {
        let Some(value) = value else {
            return false;
        };
        let equal = match (&self.literal, value) {
            (Json::Bool(l), Value::Bool(v)) => l == v,
            (Json::String(l), Value::Text(v)) => categorical_key(l) == categorical_key(v),
            _ => false,
        };
        match self.comparator {
            Comparator::Equals => equal,
            Comparator::NotEquals => !equal,
        }
    }
}

/// Conjunction of equality tests on block-1 fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationPredicate {
    #[serde(default)]
    pub combinator: Combinator,
    pub clauses: Vec<Clause>,
}

impl ActivationPredicate {
    pub fn holds<'a>(&self, lookup: impl Fn(&str) -> Option<&'a Value>) -> bool {
        match self.combinator {
            Combinator::AllOf => self.clauses.iter().all(|c| c.holds(lookup(&c.field_id))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub block_id: u8,
    pub title: String,
    pub fields: Vec<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationPredicate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormSchema {
    pub schema_id: String,
    pub version: String,
    pub blocks: Vec<BlockSpec>,
    #[serde(skip)]
    field_index: HashMap<String, (usize, usize)>,
}

impl FormSchema {
    /// The lung-cancer tumour-board schema shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_json_str(BUNDLED_SCHEMA).expect("bundled schema is valid")
    }

    pub fn bundled_source() -> &'static str {
        BUNDLED_SCHEMA
    }

    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let text = std::fs::read_to_string(path).map_err(|e| SchemaError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, SchemaError> {
        let mut schema: FormSchema = serde_json::from_str(text).map_err(|e| SchemaError::Parse(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    /// Stable identifier of this schema revision, `<schema_id>@<version>`.
    pub fn key(&self) -> String {
        format!("{}@{}", self.schema_id, self.version)
    }

    fn validate(&mut self) -> Result<(), SchemaError> {
        let err = |m: String| Err(SchemaError::Validation(m));
        if self.blocks.is_empty() {
            return err("schema has no blocks".into());
        }
        let mut ids: Vec<u8> = self.blocks.iter().map(|b| b.block_id).collect();
        ids.sort_unstable();
        let expected: Vec<u8> = (1..=self.blocks.len() as u8).collect();
        if ids != expected || self.blocks.len() > 7 {
            return err(format!("block ids must be unique and cover 1..={} (at most 7), got {ids:?}", self.blocks.len()));
        }
        self.blocks.sort_by_key(|b| b.block_id);

        let mut index = HashMap::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            match (&block.activation, block.block_id) {
                (Some(_), 1) => return err("block 1 must not have an activation predicate".into()),
                (None, id) if id != 1 => return err(format!("block {id} has no activation predicate")),
                _ => {}
            }
            for (fi, f) in block.fields.iter().enumerate() {
                if f.field_id.is_empty() {
                    return err(format!("block {} has a field with empty id", block.block_id));
                }
                if index.insert(f.field_id.clone(), (bi, fi)).is_some() {
                    return err(format!("duplicate field id {:?}", f.field_id));
                }
                validate_dtype(f)?;
            }
        }

        let block1 = &self.blocks[0];
        for block in &self.blocks[1..] {
            let pred = block.activation.as_ref().expect("checked above");
            if pred.clauses.is_empty() {
                return err(format!("block {} activation has no clauses", block.block_id));
            }
            for clause in &pred.clauses {
                let Some(target) = block1.fields.iter().find(|f| f.field_id == clause.field_id) else {
                    return err(format!(
                        "block {} activation references {:?}, which is not a block-1 field",
                        block.block_id, clause.field_id
                    ));
                };
                let ok = match (&target.dtype, &clause.literal) {
                    (DType::Boolean, Json::Bool(_)) => true,
                    (DType::Categorical { .. }, Json::String(s)) => target.resolve_category(s).is_some(),
                    _ => false,
                };
                if !ok {
                    return err(format!(
                        "block {} activation literal {} does not fit {} field {:?}",
                        block.block_id,
                        clause.literal,
                        target.dtype.name(),
                        target.field_id
                    ));
                }
            }
        }
        self.field_index = index;
        Ok(())
    }

    pub fn block(&self, block_id: u8) -> Option<&BlockSpec> {
        self.blocks.iter().find(|b| b.block_id == block_id)
    }

    pub fn field(&self, field_id: &str) -> Option<&FieldSpec> {
        self.field_index
            .get(field_id)
            .map(|&(b, f)| &self.blocks[b].fields[f])
    }

    pub fn block_of(&self, field_id: &str) -> Option<u8> {
        self.field_index.get(field_id).map(|&(b, _)| self.blocks[b].block_id)
    }

    pub fn fields(&self) -> impl Iterator<Item = &FieldSpec> {
        self.blocks.iter().flat_map(|b| b.fields.iter())
    }

    pub fn block_ids(&self) -> BTreeSet<u8> {
        self.blocks.iter().map(|b| b.block_id).collect()
    }

    /// Blocks enabled by the given values: block 1 always, every other block
    /// iff all clauses of its predicate hold.
    pub fn active_blocks<'a>(&self, lookup: impl Fn(&str) -> Option<&'a Value>) -> BTreeSet<u8> {
        self.blocks
            .iter()
            .filter(|b| b.activation.as_ref().is_none_or(|p| p.holds(&lookup)))
            .map(|b| b.block_id)
            .collect()
    }

    /// Block-1 boolean fields that gate exactly one downstream block through a
    /// single `equals true` clause, with the block each one enables.
    pub fn boolean_triggers(&self) -> Vec<(String, u8)> {
        let mut out = Vec::new();
        for block in &self.blocks[1..] {
            if let Some(pred) = &block.activation {
                if let [c] = pred.clauses.as_slice() {
                    if c.comparator == Comparator::Equals && c.literal == Json::Bool(true) {
                        out.push((c.field_id.clone(), block.block_id));
                    }
                }
            }
        }
        out
    }
}

fn validate_dtype(f: &FieldSpec) -> Result<(), SchemaError> {
    let err = |m: String| Err(SchemaError::Validation(format!("field {:?}: {m}", f.field_id)));
    match &f.dtype {
        DType::Categorical { domain, aliases } => {
            if domain.is_empty() {
                return err("categorical domain is empty".into());
            }
            let mut seen = HashSet::new();
            for m in domain {
                if !seen.insert(categorical_key(m)) {
                    return err(format!("duplicate domain value {m:?}"));
                }
            }
            for (member, alts) in aliases {
                if !domain.contains(member) {
                    return err(format!("alias target {member:?} is not in the domain"));
                }
                for a in alts {
                    if !seen.insert(categorical_key(a)) {
                        return err(format!("alias {a:?} collides with another value"));
                    }
                }
            }
        }
        DType::Integer { min, max } if min > max => return err(format!("min {min} > max {max}")),
        DType::Float { min, max } if !(min.is_finite() && max.is_finite() && min <= max) => {
            return err(format!("invalid float range {min}..{max}"))
        }
        _ => {}
    }
    Ok(())
}
