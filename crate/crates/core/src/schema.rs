//! Datatype schemas with layout annotations.
//!
//! A schema is parsed from a small line-oriented text format:
//!
//! ```text
//! # comments start with '#'
//! data List = Cons Int List | Nil
//! layout List = Factored
//! ```
//!
//! Field types are `Int` or a datatype name. A missing `layout` line defaults
//! to `Flat`. Constructor tags are assigned in declaration order, starting at
//! zero; tags 250..=255 are reserved for runtime records.
//!
//! The buffer shape of a datatype describes which buffers participate in its
//! serialized form: buffer 0 is always the constructor-tag stream, every
//! non-self-recursive scalar field gets one scalar buffer, and packed
//! non-self-recursive fields contribute a nested shape. Flat datatypes
//! collapse to a single buffer. Self-recursive fields have no entry at all:
//! they serialize through the tag stream.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Constructor tags must stay below this; 250..=255 are reserved.
pub const MAX_CONSTRUCTORS: usize = 250;

/// Per-datatype storage layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Layout {
    Flat,
    Factored,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::Flat => write!(f, "Flat"),
            Layout::Factored => write!(f, "Factored"),
        }
    }
}

/// A constructor field: a 64-bit integer or a packed occurrence of a datatype.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldType {
    Int,
    Packed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstructorDef {
    pub name: String,
    /// Equal to the constructor's position in declaration order.
    pub tag: u8,
    pub fields: Vec<FieldType>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatatypeDef {
    pub name: String,
    pub layout: Layout,
    pub constructors: Vec<ConstructorDef>,
}

impl DatatypeDef {
    pub fn constructor(&self, name: &str) -> Option<&ConstructorDef> {
        self.constructors.iter().find(|c| c.name == name)
    }

    /// Whether field `idx` of `ctor` is a packed occurrence of this datatype.
    pub fn is_self_recursive(&self, ctor: &ConstructorDef, idx: usize) -> bool {
        matches!(&ctor.fields[idx], FieldType::Packed(d) if d == &self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemaErrorKind {
    Syntax(String),
    DuplicateDatatype(String),
    UnknownDatatype(String),
    TooManyConstructors(String),
    FieldOrderViolation { datatype: String, ctor: String },
    UnsupportedFieldType(String),
    /// A Factored datatype used as a field of a Flat datatype. A flat buffer
    /// cannot embed a multi-buffer value.
    FactoredFieldInFlat { datatype: String, field: String },
    /// A cycle through non-self-recursive packed fields of Factored
    /// datatypes, which would give an infinite buffer shape.
    InfiniteShape(String),
}

impl fmt::Display for SchemaErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemaErrorKind::Syntax(m) => write!(f, "syntax error: {m}"),
            SchemaErrorKind::DuplicateDatatype(n) => write!(f, "duplicate datatype `{n}`"),
            SchemaErrorKind::UnknownDatatype(n) => write!(f, "unknown datatype `{n}`"),
            SchemaErrorKind::TooManyConstructors(n) => {
                write!(f, "datatype `{n}` has more than {MAX_CONSTRUCTORS} constructors")
            }
            SchemaErrorKind::FieldOrderViolation { datatype, ctor } => write!(
                f,
                "constructor `{ctor}` of `{datatype}` violates field order \
                 (scalars, then packed, then self-recursive)"
            ),
            SchemaErrorKind::UnsupportedFieldType(t) => write!(f, "unsupported field type `{t}`"),
            SchemaErrorKind::FactoredFieldInFlat { datatype, field } => write!(
                f,
                "flat datatype `{datatype}` cannot contain factored datatype `{field}`"
            ),
            SchemaErrorKind::InfiniteShape(n) => write!(
                f,
                "datatype `{n}` has an infinite buffer shape (factored cycle through packed fields)"
            ),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{kind} at line {line}, column {col}")]
pub struct SchemaError {
    pub kind: SchemaErrorKind,
    pub line: usize,
    pub col: usize,
}

impl SchemaError {
    fn new(kind: SchemaErrorKind, line: usize, col: usize) -> Self {
        SchemaError { kind, line, col }
    }
}

/// A validated set of datatype definitions. Immutable after parse; safe to
/// share read-only across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdtSchema {
    datatypes: Vec<DatatypeDef>,
    by_name: HashMap<String, usize>,
}

impl AdtSchema {
    /// Parse and validate a schema from its text form.
    pub fn parse(text: &str) -> Result<AdtSchema, SchemaError> {
        parse_schema(text)
    }

    pub fn datatypes(&self) -> &[DatatypeDef] {
        &self.datatypes
    }

    pub fn get(&self, name: &str) -> Option<&DatatypeDef> {
        self.by_name.get(name).map(|&i| &self.datatypes[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Rebuild the schema with `datatype`'s layout replaced. Used by `pack`
    /// to honor an explicit layout choice; revalidates composition rules.
    pub fn with_layout(&self, datatype: &str, layout: Layout) -> Result<AdtSchema, SchemaError> {
        let mut datatypes = self.datatypes.clone();
        let idx = self
            .index_of(datatype)
            .ok_or_else(|| SchemaError::new(SchemaErrorKind::UnknownDatatype(datatype.into()), 0, 0))?;
        datatypes[idx].layout = layout;
        let schema = AdtSchema {
            by_name: self.by_name.clone(),
            datatypes,
        };
        validate(&schema)?;
        Ok(schema)
    }

    /// Canonical text of `datatype`'s definition closure: the datatype first,
    /// then every datatype reachable from it in first-reference order, each
    /// rendered as its `data` line followed by its `layout` line.
    pub fn canonical_closure_text(&self, datatype: &str) -> Option<String> {
        self.get(datatype)?;
        let mut order: Vec<&str> = Vec::new();
        let mut stack = vec![datatype];
        while let Some(name) = stack.pop() {
            if order.contains(&name) {
                continue;
            }
            let dt = self.get(name)?;
            order.push(&dt.name);
            let mut refs: Vec<&str> = Vec::new();
            for ctor in &dt.constructors {
                for f in &ctor.fields {
                    if let FieldType::Packed(d) = f {
                        if !order.contains(&d.as_str()) && !refs.contains(&d.as_str()) {
                            refs.push(d);
                        }
                    }
                }
            }
            // Reversed so the first reference is popped first.
            for r in refs.into_iter().rev() {
                stack.push(r);
            }
        }
        let mut out = String::new();
        for name in order {
            let dt = self.get(name).unwrap();
            out.push_str("data ");
            out.push_str(&dt.name);
            out.push_str(" =");
            for (i, ctor) in dt.constructors.iter().enumerate() {
                if i > 0 {
                    out.push_str(" |");
                }
                out.push(' ');
                out.push_str(&ctor.name);
                for f in &ctor.fields {
                    out.push(' ');
                    match f {
                        FieldType::Int => out.push_str("Int"),
                        FieldType::Packed(d) => out.push_str(d),
                    }
                }
            }
            out.push('\n');
            out.push_str(&format!("layout {} = {}\n", dt.name, dt.layout));
        }
        Some(out)
    }

    /// FNV-1a (64-bit) over the canonical closure text. Pins a container file
    /// to the definitions it was written under.
    pub fn closure_hash(&self, datatype: &str) -> Option<u64> {
        Some(fnv1a(self.canonical_closure_text(datatype)?.as_bytes()))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Where a (constructor, field) pair's bytes live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BufferRef {
    /// A dedicated scalar buffer.
    Scalar,
    /// A packed non-self-recursive field with its own nested shape.
    Nested(BufferShape),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeEntry {
    pub ctor: String,
    pub tag: u8,
    pub field: usize,
    pub buffer: BufferRef,
}

/// The buffer shape of a datatype. `entries` is empty for Flat datatypes and
/// otherwise lists every (constructor, non-self-recursive field) pair, in
/// constructor declaration order then field order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferShape {
    pub datatype: String,
    pub layout: Layout,
    pub entries: Vec<ShapeEntry>,
}

impl BufferShape {
    /// Total number of participating buffers; buffer 0 is the tag stream.
    pub fn buffer_count(&self) -> usize {
        1 + self
            .entries
            .iter()
            .map(|e| match &e.buffer {
                BufferRef::Scalar => 1,
                BufferRef::Nested(s) => s.buffer_count(),
            })
            .sum::<usize>()
    }

    /// One human-readable role per buffer, in bundle order.
    pub fn buffer_roles(&self) -> Vec<String> {
        let mut roles = Vec::new();
        self.push_roles("", &mut roles);
        roles
    }

    fn push_roles(&self, prefix: &str, out: &mut Vec<String>) {
        out.push(format!("{prefix}tags[{}]", self.datatype));
        for e in &self.entries {
            let key = format!("{prefix}({},{})", e.ctor, e.field);
            match &e.buffer {
                BufferRef::Scalar => out.push(format!("{key}:Int")),
                BufferRef::Nested(s) => s.push_roles(&format!("{key}."), out),
            }
        }
    }
}

/// Compute the buffer shape of `datatype`. Fails with `InfiniteShape` when a
/// factored cycle through non-self-recursive packed fields is found.
pub fn buffer_shape(schema: &AdtSchema, datatype: &str) -> Result<BufferShape, SchemaError> {
    let mut path = Vec::new();
    shape_of(schema, datatype, &mut path)
}

fn shape_of(
    schema: &AdtSchema,
    datatype: &str,
    path: &mut Vec<String>,
) -> Result<BufferShape, SchemaError> {
    let dt = schema
        .get(datatype)
        .ok_or_else(|| SchemaError::new(SchemaErrorKind::UnknownDatatype(datatype.into()), 0, 0))?;
    if dt.layout == Layout::Flat {
        return Ok(BufferShape {
            datatype: dt.name.clone(),
            layout: Layout::Flat,
            entries: Vec::new(),
        });
    }
    if path.iter().any(|p| p == datatype) {
        return Err(SchemaError::new(
            SchemaErrorKind::InfiniteShape(datatype.into()),
            0,
            0,
        ));
    }
    path.push(datatype.to_string());
    let mut entries = Vec::new();
    for ctor in &dt.constructors {
        for (idx, field) in ctor.fields.iter().enumerate() {
            let buffer = match field {
                FieldType::Int => BufferRef::Scalar,
                FieldType::Packed(d) if d == datatype => continue,
                FieldType::Packed(d) => BufferRef::Nested(shape_of(schema, d, path)?),
            };
            entries.push(ShapeEntry {
                ctor: ctor.name.clone(),
                tag: ctor.tag,
                field: idx,
                buffer,
            });
        }
    }
    path.pop();
    Ok(BufferShape {
        datatype: dt.name.clone(),
        layout: Layout::Factored,
        entries,
    })
}

/// Number of cursors a traversal of `shape` carries: one for the tag stream
/// plus one per scalar buffer and the recursive count of each nested shape.
pub fn cursor_count(shape: &BufferShape) -> usize {
    shape.buffer_count()
}

fn parse_schema(text: &str) -> Result<AdtSchema, SchemaError> {
    struct PendingLayout {
        name: String,
        layout: Layout,
        line: usize,
        col: usize,
    }

    let mut datatypes: Vec<DatatypeDef> = Vec::new();
    let mut by_name: HashMap<String, usize> = HashMap::new();
    let mut layouts: Vec<PendingLayout> = Vec::new();

    for (lineno, raw_line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        let uncommented = match raw_line.find('#') {
            Some(i) => &raw_line[..i],
            None => raw_line,
        };
        // ';' separates statements within one line.
        let mut col_base = 0;
        for segment in uncommented.split(';') {
            let seg_start = col_base;
            col_base += segment.len() + 1;
            let trimmed = segment.trim();
            if trimmed.is_empty() {
                continue;
            }
            let col = seg_start + segment.len() - segment.trim_start().len() + 1;
            let mut words = trimmed.split_whitespace();
            match words.next() {
                Some("data") => {
                    let def = parse_data_stmt(trimmed, line_num, col)?;
                    if by_name.contains_key(&def.name) {
                        return Err(SchemaError::new(
                            SchemaErrorKind::DuplicateDatatype(def.name),
                            line_num,
                            col,
                        ));
                    }
                    by_name.insert(def.name.clone(), datatypes.len());
                    datatypes.push(def);
                }
                Some("layout") => {
                    let rest: Vec<&str> = words.collect();
                    if rest.len() != 3 || rest[1] != "=" {
                        return Err(SchemaError::new(
                            SchemaErrorKind::Syntax("expected `layout <Name> = Flat|Factored`".into()),
                            line_num,
                            col,
                        ));
                    }
                    let layout = match rest[2] {
                        "Flat" => Layout::Flat,
                        "Factored" => Layout::Factored,
                        other => {
                            return Err(SchemaError::new(
                                SchemaErrorKind::Syntax(format!("unknown layout `{other}`")),
                                line_num,
                                col,
                            ))
                        }
                    };
                    layouts.push(PendingLayout {
                        name: rest[0].to_string(),
                        layout,
                        line: line_num,
                        col,
                    });
                }
                Some(other) => {
                    return Err(SchemaError::new(
                        SchemaErrorKind::Syntax(format!("expected `data` or `layout`, found `{other}`")),
                        line_num,
                        col,
                    ))
                }
                None => {}
            }
        }
    }

    for pl in layouts {
        match by_name.get(&pl.name) {
            Some(&i) => datatypes[i].layout = pl.layout,
            None => {
                return Err(SchemaError::new(
                    SchemaErrorKind::UnknownDatatype(pl.name),
                    pl.line,
                    pl.col,
                ))
            }
        }
    }

    let schema = AdtSchema { datatypes, by_name };
    validate(&schema)?;
    Ok(schema)
}

fn parse_data_stmt(stmt: &str, line: usize, col: usize) -> Result<DatatypeDef, SchemaError> {
    let body = stmt.strip_prefix("data").unwrap().trim();
    let (name, rhs) = body.split_once('=').ok_or_else(|| {
        SchemaError::new(
            SchemaErrorKind::Syntax("expected `data <Name> = ...`".into()),
            line,
            col,
        )
    })?;
    let name = name.trim();
    if name.is_empty() || !is_ident(name) {
        return Err(SchemaError::new(
            SchemaErrorKind::Syntax(format!("bad datatype name `{name}`")),
            line,
            col,
        ));
    }
    let mut constructors = Vec::new();
    for alt in rhs.split('|') {
        let mut words = alt.split_whitespace();
        let ctor = words.next().ok_or_else(|| {
            SchemaError::new(SchemaErrorKind::Syntax("empty constructor".into()), line, col)
        })?;
        if !is_ident(ctor) {
            return Err(SchemaError::new(
                SchemaErrorKind::Syntax(format!("bad constructor name `{ctor}`")),
                line,
                col,
            ));
        }
        let mut fields = Vec::new();
        for w in words {
            if w == "Int" {
                fields.push(FieldType::Int);
            } else if is_ident(w) {
                fields.push(FieldType::Packed(w.to_string()));
            } else {
                return Err(SchemaError::new(
                    SchemaErrorKind::UnsupportedFieldType(w.to_string()),
                    line,
                    col,
                ));
            }
        }
        if constructors.len() >= MAX_CONSTRUCTORS {
            return Err(SchemaError::new(
                SchemaErrorKind::TooManyConstructors(name.to_string()),
                line,
                col,
            ));
        }
        constructors.push(ConstructorDef {
            name: ctor.to_string(),
            tag: constructors.len() as u8,
            fields,
        });
    }
    Ok(DatatypeDef {
        name: name.to_string(),
        layout: Layout::Flat,
        constructors,
    })
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn validate(schema: &AdtSchema) -> Result<(), SchemaError> {
    for dt in &schema.datatypes {
        for ctor in &dt.constructors {
            // Field order: scalars, then packed non-self-recursive, then
            // self-recursive. 0 -> 1 -> 2 must be monotone.
            let mut stage = 0;
            for (idx, f) in ctor.fields.iter().enumerate() {
                let s = match f {
                    FieldType::Int => 0,
                    FieldType::Packed(d) if d == &dt.name => 2,
                    FieldType::Packed(d) => {
                        let fdt = schema.get(d).ok_or_else(|| {
                            SchemaError::new(SchemaErrorKind::UnknownDatatype(d.clone()), 0, 0)
                        })?;
                        if dt.layout == Layout::Flat && fdt.layout == Layout::Factored {
                            return Err(SchemaError::new(
                                SchemaErrorKind::FactoredFieldInFlat {
                                    datatype: dt.name.clone(),
                                    field: d.clone(),
                                },
                                0,
                                0,
                            ));
                        }
                        1
                    }
                };
                if s < stage {
                    return Err(SchemaError::new(
                        SchemaErrorKind::FieldOrderViolation {
                            datatype: dt.name.clone(),
                            ctor: ctor.name.clone(),
                        },
                        0,
                        0,
                    ));
                }
                stage = s;
                let _ = idx;
            }
        }
    }
    // Shape computation rejects factored cycles.
    for dt in &schema.datatypes {
        buffer_shape(schema, &dt.name)?;
    }
    Ok(())
}
