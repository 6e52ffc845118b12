//! Adaptive form model: schema, typed values, activation and form instances.

mod instance;
mod schema;
mod value;

pub use instance::{active_blocks, FormAuditEntry, FormInstance, UpdateError};
pub use schema::{
    ActivationPredicate, BlockSpec, Clause, Combinator, Comparator, DType, FieldSpec, FormSchema, SchemaError, Section,
};
pub use value::{validate_value, FieldValue, Source, ValidationError, ValidationErrorKind, Value};

pub(crate) use value::categorical_key;
