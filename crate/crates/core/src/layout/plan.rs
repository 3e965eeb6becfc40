//! Compiled buffer assignment for a datatype.
//!
//! The plan flattens a datatype's buffer shape into absolute bundle indices:
//! a preorder walk assigns buffer 0 to the root tag stream, then one index
//! per scalar buffer and a recursively numbered range per nested shape. All
//! readers and writers share one bundle vector; a nested value simply
//! operates on its own index range.

use std::collections::HashMap;
use std::sync::Arc;

use crate::schema::{buffer_shape, AdtSchema, FieldType, Layout};

use super::LayoutError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldPlan {
    /// Scalar field; `buf` is the buffer holding its bytes (the shared
    /// stream for flat datatypes, a dedicated buffer for factored ones).
    Scalar { buf: usize },
    /// Packed non-self-recursive field, laid out in its own shape.
    Nested { shape: usize },
    /// Packed self-recursive field: continues in the same shape.
    SelfRec,
}

#[derive(Debug, Clone)]
pub struct CtorPlan {
    pub name: String,
    pub tag: u8,
    pub fields: Vec<FieldPlan>,
    /// Indices into `fields` of packed fields, in declaration order.
    pub packed: Vec<usize>,
    pub n_scalars: usize,
}

#[derive(Debug, Clone)]
pub struct ShapeNode {
    /// Datatype index in the schema.
    pub dt: usize,
    pub layout: Layout,
    /// Buffer carrying this shape's constructor tags. Flat shapes carry
    /// everything here.
    pub tag_buf: usize,
    /// Bundle index range `[buf_start, buf_end)` covered by this shape.
    pub buf_start: usize,
    pub buf_end: usize,
    pub ctors: Vec<CtorPlan>,
}

impl ShapeNode {
    pub fn width(&self) -> usize {
        self.buf_end - self.buf_start
    }
}

#[derive(Debug, Clone)]
pub struct LayoutPlan {
    pub schema: Arc<AdtSchema>,
    pub datatype: String,
    pub layout: Layout,
    pub width: usize,
    pub roles: Vec<String>,
    shapes: Vec<ShapeNode>,
}

impl LayoutPlan {
    pub fn new(schema: Arc<AdtSchema>, datatype: &str) -> Result<LayoutPlan, LayoutError> {
        let dt = schema
            .get(datatype)
            .ok_or_else(|| LayoutError::UnknownDatatype(datatype.to_string()))?;
        let layout = dt.layout;
        let shape = buffer_shape(&schema, datatype)
            .map_err(|e| LayoutError::SchemaMismatch(e.to_string()))?;
        let roles = shape.buffer_roles();

        let mut builder = Builder {
            schema: &schema,
            shapes: Vec::new(),
            next_buf: 0,
            flat_memo: HashMap::new(),
        };
        builder.build(datatype, None)?;
        let width = builder.next_buf;
        debug_assert_eq!(width, roles.len());
        Ok(LayoutPlan {
            schema: schema.clone(),
            datatype: datatype.to_string(),
            layout,
            width,
            roles,
            shapes: builder.shapes,
        })
    }

    pub fn root(&self) -> &ShapeNode {
        &self.shapes[0]
    }

    pub fn shape(&self, id: usize) -> &ShapeNode {
        &self.shapes[id]
    }

    pub fn shape_count(&self) -> usize {
        self.shapes.len()
    }

    /// Bundle index range addressed by a packed field of `shape`.
    pub fn field_range(&self, shape: &ShapeNode, field: FieldPlan) -> (usize, usize) {
        match field {
            FieldPlan::Scalar { buf } => (buf, buf + 1),
            FieldPlan::SelfRec => (shape.buf_start, shape.buf_end),
            FieldPlan::Nested { shape } => {
                let s = self.shape(shape);
                (s.buf_start, s.buf_end)
            }
        }
    }

    /// Random-access slot layout for a constructor: one group per packed
    /// field after the first, each group one address per component buffer.
    pub fn ra_groups(&self, shape: &ShapeNode, ctor: &CtorPlan) -> Vec<(usize, usize)> {
        ctor.packed
            .iter()
            .skip(1)
            .map(|&f| self.field_range(shape, ctor.fields[f]))
            .collect()
    }
}

struct Builder<'a> {
    schema: &'a AdtSchema,
    shapes: Vec<ShapeNode>,
    next_buf: usize,
    /// Flat datatypes inlined into a shared buffer, keyed by (datatype,
    /// buffer). Lets mutually recursive flat datatypes terminate.
    flat_memo: HashMap<(usize, usize), usize>,
}

impl<'a> Builder<'a> {
    fn alloc_buf(&mut self) -> usize {
        let b = self.next_buf;
        self.next_buf += 1;
        b
    }

    /// Build the shape for `datatype`. `container_buf` is the enclosing flat
    /// buffer when this datatype is inlined into one.
    fn build(&mut self, datatype: &str, container_buf: Option<usize>) -> Result<usize, LayoutError> {
        let dt_idx = self
            .schema
            .index_of(datatype)
            .ok_or_else(|| LayoutError::UnknownDatatype(datatype.to_string()))?;
        let dt = &self.schema.datatypes()[dt_idx];

        if dt.layout == Layout::Flat {
            let buf = container_buf.unwrap_or_else(|| self.alloc_buf());
            if let Some(&id) = self.flat_memo.get(&(dt_idx, buf)) {
                return Ok(id);
            }
            let id = self.shapes.len();
            self.shapes.push(ShapeNode {
                dt: dt_idx,
                layout: Layout::Flat,
                tag_buf: buf,
                buf_start: buf,
                buf_end: buf + 1,
                ctors: Vec::new(),
            });
            self.flat_memo.insert((dt_idx, buf), id);
            let mut ctors = Vec::with_capacity(dt.constructors.len());
            for ctor in &dt.constructors {
                let mut fields = Vec::with_capacity(ctor.fields.len());
                for f in &ctor.fields {
                    fields.push(match f {
                        FieldType::Int => FieldPlan::Scalar { buf },
                        FieldType::Packed(d) if d == &dt.name => FieldPlan::SelfRec,
                        FieldType::Packed(d) => {
                            // Schema validation rejects factored fields of
                            // flat datatypes, so this is flat-in-flat.
                            let child = self.build(d, Some(buf))?;
                            FieldPlan::Nested { shape: child }
                        }
                    });
                }
                ctors.push(make_ctor(ctor, fields));
            }
            self.shapes[id].ctors = ctors;
            return Ok(id);
        }

        let id = self.shapes.len();
        let buf_start = self.next_buf;
        let tag_buf = self.alloc_buf();
        self.shapes.push(ShapeNode {
            dt: dt_idx,
            layout: Layout::Factored,
            tag_buf,
            buf_start,
            buf_end: buf_start,
            ctors: Vec::new(),
        });
        let mut ctors = Vec::with_capacity(dt.constructors.len());
        for ctor in &dt.constructors {
            let mut fields = Vec::with_capacity(ctor.fields.len());
            for f in &ctor.fields {
                fields.push(match f {
                    FieldType::Int => FieldPlan::Scalar { buf: self.alloc_buf() },
                    FieldType::Packed(d) if d == &dt.name => FieldPlan::SelfRec,
                    FieldType::Packed(d) => {
                        let child = self.build(d, None)?;
                        FieldPlan::Nested { shape: child }
                    }
                });
            }
            ctors.push(make_ctor(ctor, fields));
        }
        self.shapes[id].ctors = ctors;
        self.shapes[id].buf_end = self.next_buf;
        Ok(id)
    }
}

fn make_ctor(ctor: &crate::schema::ConstructorDef, fields: Vec<FieldPlan>) -> CtorPlan {
    let packed: Vec<usize> = fields
        .iter()
        .enumerate()
        .filter(|(_, f)| !matches!(f, FieldPlan::Scalar { .. }))
        .map(|(i, _)| i)
        .collect();
    let n_scalars = fields.len() - packed.len();
    CtorPlan {
        name: ctor.name.clone(),
        tag: ctor.tag,
        fields,
        packed,
        n_scalars,
    }
}
