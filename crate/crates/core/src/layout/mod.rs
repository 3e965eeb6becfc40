//! Serialization of values in flat and factored layouts.
//!
//! Values serialize in preorder. A flat value occupies one buffer: each node
//! is its tag byte, then its scalar fields as 8-byte little-endian integers,
//! then its packed fields inline. A factored value occupies one buffer per
//! entry of its buffer shape: tags stream into buffer 0 and every
//! non-self-recursive field appends to its own buffer in traversal order,
//! while self-recursive children continue in the tag stream.
//!
//! Three reserved tags share the byte space above constructor tags:
//! redirection records link a sealed chunk to its continuation, indirection
//! records share an already-serialized value, and random-access records
//! carry back-patched field start addresses for constant-time skips.

mod container;
pub(crate) mod plan;
pub(crate) mod read;
pub(crate) mod write;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::region::{Address, RegionError, RegionId, RegionStore};
use crate::schema::{AdtSchema, FieldType, Layout};

pub use container::{export_container, import_container};
pub use plan::{FieldPlan, LayoutPlan, ShapeNode};
pub use read::{deserialize, skip_value, Counters};
pub use write::{serialize, serialize_plain, serialize_with, RaPatch, SerializeOptions, ValueWriter};

/// Reserved tag: chunk redirection (also `region::REDIR_TAG`).
pub const REDIR: u8 = 255;
/// Reserved tag: indirection to a shared serialized value.
pub const INDIR: u8 = 254;
/// Reserved tag: random-access record.
pub const RANDOM_ACCESS: u8 = 253;

/// One constructor argument of an in-memory [`Value`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arg {
    Int(i64),
    Value(Value),
}

/// The in-memory reference representation of a serialized value. Used as the
/// oracle in tests and for I/O at the API edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Value {
    pub ctor: String,
    pub args: Vec<Arg>,
}

impl Value {
    pub fn new(ctor: &str, args: Vec<Arg>) -> Value {
        Value { ctor: ctor.to_string(), args }
    }

    pub fn leaf(ctor: &str) -> Value {
        Value::new(ctor, Vec::new())
    }

    /// Total number of constructor nodes, nested datatypes included.
    pub fn node_count(&self) -> u64 {
        let mut n = 0;
        let mut stack = vec![self];
        while let Some(v) = stack.pop() {
            n += 1;
            for a in &v.args {
                if let Arg::Value(c) = a {
                    stack.push(c);
                }
            }
        }
        n
    }
}

impl serde::Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(2))?;
        m.serialize_entry("ctor", &self.ctor)?;
        m.serialize_entry("args", &self.args)?;
        m.end()
    }
}

impl serde::Serialize for Arg {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Arg::Int(i) => s.serialize_i64(*i),
            Arg::Value(v) => v.serialize(s),
        }
    }
}

impl<'de> serde::Deserialize<'de> for Value {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Value, D::Error> {
        let json = serde_json::Value::deserialize(d)?;
        value_from_json(&json).map_err(serde::de::Error::custom)
    }
}

impl<'de> serde::Deserialize<'de> for Arg {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Arg, D::Error> {
        let json = serde_json::Value::deserialize(d)?;
        arg_from_json(&json).map_err(serde::de::Error::custom)
    }
}

fn value_from_json(j: &serde_json::Value) -> Result<Value, String> {
    let obj = j.as_object().ok_or("expected an object with \"ctor\" and \"args\"")?;
    let ctor = obj
        .get("ctor")
        .and_then(|c| c.as_str())
        .ok_or("missing \"ctor\"")?;
    let args = match obj.get("args") {
        None => Vec::new(),
        Some(a) => a
            .as_array()
            .ok_or("\"args\" must be an array")?
            .iter()
            .map(arg_from_json)
            .collect::<Result<_, _>>()?,
    };
    Ok(Value::new(ctor, args))
}

fn arg_from_json(j: &serde_json::Value) -> Result<Arg, String> {
    if let Some(n) = j.as_i64() {
        // JSON interchange keeps integers within 53 bits.
        if n.unsigned_abs() >= (1 << 53) {
            return Err(format!("integer {n} does not fit in 53 bits"));
        }
        return Ok(Arg::Int(n));
    }
    Ok(Arg::Value(value_from_json(j)?))
}

/// One read/write position per participating buffer; index 0 is always the
/// tag-stream cursor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CursorBundle {
    pub cursors: Vec<Address>,
}

impl CursorBundle {
    pub fn width(&self) -> usize {
        self.cursors.len()
    }
}

/// A fully written serialized value: its start bundle and the regions it
/// owns. Call [`SerializedRoot::release`] to drop the ownership reference of
/// each region exactly once.
#[derive(Debug)]
pub struct SerializedRoot {
    pub schema: Arc<AdtSchema>,
    pub datatype: String,
    pub layout: Layout,
    pub bundle: CursorBundle,
    pub regions: Vec<RegionId>,
    released: std::cell::Cell<bool>,
}

impl SerializedRoot {
    pub(crate) fn new(
        schema: Arc<AdtSchema>,
        datatype: String,
        layout: Layout,
        bundle: CursorBundle,
        regions: Vec<RegionId>,
    ) -> SerializedRoot {
        SerializedRoot {
            schema,
            datatype,
            layout,
            bundle,
            regions,
            released: std::cell::Cell::new(false),
        }
    }

    /// Decrement the reference count of each owned region. Idempotent.
    pub fn release(&self, store: &mut RegionStore) -> Result<(), LayoutError> {
        if self.released.replace(true) {
            return Ok(());
        }
        for &r in &self.regions {
            store.decref(r)?;
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<LayoutPlan, LayoutError> {
        LayoutPlan::new(self.schema.clone(), &self.datatype)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("value does not match schema: {0}")]
    SchemaMismatch(String),
    #[error("unknown datatype `{0}`")]
    UnknownDatatype(String),
    #[error("corrupt tag byte {byte} at {at:?}")]
    CorruptTag { byte: u8, at: Address },
    #[error("buffer truncated at {0:?}")]
    TruncatedBuffer(Address),
    #[error("layout mismatch between destination and source")]
    LayoutMismatch,
    #[error("feature disabled: {0}")]
    FeatureDisabled(&'static str),
    #[error("random-access record finalized with unpatched slots")]
    DanglingPatch,
    #[error("bad container magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    VersionMismatch(u16),
    #[error("container schema hash does not match any datatype of the given schema")]
    SchemaHashMismatch,
    #[error("container file truncated")]
    TruncatedFile,
    #[error(transparent)]
    Region(#[from] RegionError),
}

/// Check a value's constructor arities and field kinds against the schema.
pub fn check_value(schema: &AdtSchema, datatype: &str, value: &Value) -> Result<(), LayoutError> {
    let mut stack = vec![(datatype.to_string(), value)];
    while let Some((dt_name, v)) = stack.pop() {
        let dt = schema
            .get(&dt_name)
            .ok_or_else(|| LayoutError::UnknownDatatype(dt_name.clone()))?;
        let ctor = dt.constructor(&v.ctor).ok_or_else(|| {
            LayoutError::SchemaMismatch(format!("`{}` is not a constructor of `{dt_name}`", v.ctor))
        })?;
        if ctor.fields.len() != v.args.len() {
            return Err(LayoutError::SchemaMismatch(format!(
                "`{}` expects {} fields, got {}",
                v.ctor,
                ctor.fields.len(),
                v.args.len()
            )));
        }
        for (f, a) in ctor.fields.iter().zip(&v.args) {
            match (f, a) {
                (FieldType::Int, Arg::Int(_)) => {}
                (FieldType::Packed(d), Arg::Value(c)) => stack.push((d.clone(), c)),
                _ => {
                    return Err(LayoutError::SchemaMismatch(format!(
                        "field kind mismatch in `{}`",
                        v.ctor
                    )))
                }
            }
        }
    }
    Ok(())
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.ctor)?;
        if !self.args.is_empty() {
            write!(f, "(")?;
            for (i, a) in self.args.iter().enumerate() {
                if i > 0 {
                    write!(f, ", ")?;
                }
                match a {
                    Arg::Int(n) => write!(f, "{n}")?,
                    Arg::Value(v) => write!(f, "{v}")?,
                }
            }
            write!(f, ")")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_json_roundtrip() {
        let v = Value::new(
            "Node",
            vec![
                Arg::Value(Value::new("Leaf", vec![Arg::Int(1)])),
                Arg::Value(Value::new("Leaf", vec![Arg::Int(-2)])),
            ],
        );
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"{"ctor":"Node","args":[{"ctor":"Leaf","args":[1]},{"ctor":"Leaf","args":[-2]}]}"#);
        let back: Value = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn oversized_json_int_rejected() {
        let err = serde_json::from_str::<Value>(r#"{"ctor":"Leaf","args":[9007199254740992]}"#);
        assert!(err.is_err());
    }

    #[test]
    fn check_value_catches_mismatches() {
        let s = AdtSchema::parse("data Tree = Node Tree Tree | Leaf Int").unwrap();
        let good = Value::new(
            "Node",
            vec![
                Arg::Value(Value::new("Leaf", vec![Arg::Int(1)])),
                Arg::Value(Value::new("Leaf", vec![Arg::Int(2)])),
            ],
        );
        assert!(check_value(&s, "Tree", &good).is_ok());
        let bad_arity = Value::new("Leaf", vec![]);
        assert!(matches!(
            check_value(&s, "Tree", &bad_arity),
            Err(LayoutError::SchemaMismatch(_))
        ));
        let bad_kind = Value::new("Leaf", vec![Arg::Value(Value::leaf("Leaf"))]);
        assert!(matches!(
            check_value(&s, "Tree", &bad_kind),
            Err(LayoutError::SchemaMismatch(_))
        ));
    }
}
