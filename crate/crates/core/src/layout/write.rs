//! Region-backed serialization.

use std::sync::Arc;

use crate::region::{Address, RegionId, RegionStore};
use crate::schema::AdtSchema;

use super::plan::{FieldPlan, LayoutPlan};
use super::{check_value, Arg, CursorBundle, LayoutError, SerializedRoot, Value, INDIR, RANDOM_ACCESS};

#[derive(Debug, Clone, Default)]
pub struct SerializeOptions {
    /// Emit a random-access record before every constructor with two or more
    /// packed fields.
    pub random_access: bool,
    /// Serialize every k-th packed child value as a separate root and write
    /// an indirection to it instead of inlining.
    pub indirection_period: Option<u32>,
}

/// Output side of a bundle: one region per buffer, all cursors at the
/// frontier.
pub(crate) struct OutBundle<'a> {
    pub store: &'a mut RegionStore,
    pub regions: Vec<RegionId>,
    pub start: Vec<Address>,
    pub cur: Vec<Address>,
}

impl<'a> OutBundle<'a> {
    pub fn new(store: &'a mut RegionStore, width: usize) -> Result<OutBundle<'a>, LayoutError> {
        let mut regions = Vec::with_capacity(width);
        let mut start = Vec::with_capacity(width);
        for _ in 0..width {
            let r = store.new_region_default()?;
            regions.push(r);
            start.push(store.frontier(r)?);
        }
        let cur = start.clone();
        Ok(OutBundle { store, regions, start, cur })
    }

    pub fn append(&mut self, buf: usize, bytes: &[u8]) -> Result<(), LayoutError> {
        self.cur[buf] = self.store.append(self.cur[buf], bytes)?;
        Ok(())
    }

    /// Reserve an 8-byte back-patch slot on `buf`.
    pub fn reserve_slot(&mut self, buf: usize) -> Result<Address, LayoutError> {
        let (slot, next) = self.store.reserve_slot(self.cur[buf], 8)?;
        self.cur[buf] = next;
        Ok(slot)
    }
}

/// Handle for a manually emitted random-access record. Every group must be
/// filled before [`ValueWriter::finish`].
#[derive(Debug)]
pub struct RaPatch {
    groups: Vec<PatchGroup>,
}

#[derive(Debug)]
struct PatchGroup {
    /// Indices into the writer's slot table.
    slots: std::ops::Range<usize>,
    /// Bundle range whose cursor positions fill the slots.
    range: (usize, usize),
}

impl RaPatch {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }
}

pub struct ValueWriter<'a> {
    plan: LayoutPlan,
    out: OutBundle<'a>,
    opts: SerializeOptions,
    slots: Vec<(Address, bool)>,
    unfilled: usize,
    indirect_tick: u64,
}

enum Task<'v> {
    Node { v: &'v Value, shape: usize, root: bool },
    Fill { slots: std::ops::Range<usize>, range: (usize, usize) },
}

impl<'a> ValueWriter<'a> {
    pub fn new(
        schema: &Arc<AdtSchema>,
        datatype: &str,
        store: &'a mut RegionStore,
        opts: SerializeOptions,
    ) -> Result<ValueWriter<'a>, LayoutError> {
        let plan = LayoutPlan::new(schema.clone(), datatype)?;
        let out = OutBundle::new(store, plan.width)?;
        Ok(ValueWriter {
            plan,
            out,
            opts,
            slots: Vec::new(),
            unfilled: 0,
            indirect_tick: 0,
        })
    }

    /// Append one value in preorder at the current frontier.
    pub fn write_value(&mut self, value: &Value) -> Result<(), LayoutError> {
        check_value(&self.plan.schema, &self.plan.datatype, value)?;
        let mut tasks = vec![Task::Node { v: value, shape: 0, root: true }];
        while let Some(task) = tasks.pop() {
            match task {
                Task::Fill { slots, range } => {
                    for (slot_idx, buf) in slots.zip(range.0..range.1) {
                        let (addr, filled) = &mut self.slots[slot_idx];
                        debug_assert!(!*filled);
                        let target = self.out.cur[buf];
                        self.out.store.patch(*addr, &target.encode())?;
                        *filled = true;
                        self.unfilled -= 1;
                    }
                }
                Task::Node { v, shape, root } => self.write_one(v, shape, root, &mut tasks)?,
            }
        }
        Ok(())
    }

    fn write_one<'v>(
        &mut self,
        v: &'v Value,
        shape_id: usize,
        root: bool,
        tasks: &mut Vec<Task<'v>>,
    ) -> Result<(), LayoutError> {
        if !root {
            if let Some(period) = self.opts.indirection_period {
                self.indirect_tick += 1;
                if self.indirect_tick % period as u64 == 0 {
                    return self.write_shared(v, shape_id);
                }
            }
        }

        let shape = self.plan.shape(shape_id).clone();
        let dt = &self.plan.schema.datatypes()[shape.dt];
        let tag = dt
            .constructor(&v.ctor)
            .expect("value checked against schema")
            .tag;
        let ctor = &shape.ctors[tag as usize];

        let with_ra = self.opts.random_access && ctor.packed.len() >= 2;
        let mut groups: Vec<PatchGroup> = Vec::new();
        if with_ra {
            self.out.append(shape.tag_buf, &[RANDOM_ACCESS, tag])?;
            for range in self.plan.ra_groups(&shape, ctor) {
                let start = self.slots.len();
                for _ in range.0..range.1 {
                    let slot = self.out.reserve_slot(shape.tag_buf)?;
                    self.slots.push((slot, false));
                    self.unfilled += 1;
                }
                groups.push(PatchGroup { slots: start..self.slots.len(), range });
            }
        } else {
            self.out.append(shape.tag_buf, &[tag])?;
        }

        for (field, arg) in ctor.fields.iter().zip(&v.args) {
            if let FieldPlan::Scalar { buf } = field {
                let Arg::Int(n) = arg else { unreachable!() };
                self.out.append(*buf, &n.to_le_bytes())?;
            }
        }

        // Children pushed in reverse so the first packed field is written
        // first; each slot group fills right before its field starts.
        for (pos, &fidx) in ctor.packed.iter().enumerate().rev() {
            let Arg::Value(child) = &v.args[fidx] else { unreachable!() };
            let child_shape = match ctor.fields[fidx] {
                FieldPlan::SelfRec => shape_id,
                FieldPlan::Nested { shape } => shape,
                FieldPlan::Scalar { .. } => unreachable!(),
            };
            tasks.push(Task::Node { v: child, shape: child_shape, root: false });
            if with_ra && pos >= 1 {
                let g = &groups[pos - 1];
                tasks.push(Task::Fill { slots: g.slots.clone(), range: g.range });
            }
        }
        Ok(())
    }

    /// Serialize `v` as its own root and write an indirection to it.
    fn write_shared(&mut self, v: &Value, shape_id: usize) -> Result<(), LayoutError> {
        let shape = self.plan.shape(shape_id);
        let dt_name = self.plan.schema.datatypes()[shape.dt].name.clone();
        let range = (shape.buf_start, shape.buf_end);
        let schema = self.plan.schema.clone();
        let opts = self.opts.clone();
        let src = serialize_with(&schema, &dt_name, v, self.out.store, &opts)?;
        self.indirect_to(range, &src)?;
        // The indirection's outlinks keep the shared regions alive.
        src.release(self.out.store)?;
        Ok(())
    }

    fn indirect_to(&mut self, range: (usize, usize), src: &SerializedRoot) -> Result<(), LayoutError> {
        debug_assert_eq!(range.1 - range.0, src.bundle.width());
        for (i, buf) in (range.0..range.1).enumerate() {
            let target = src.bundle.cursors[i];
            let mut record = [0u8; 9];
            record[0] = INDIR;
            record[1..].copy_from_slice(&target.encode());
            self.out.append(buf, &record)?;
            // The record landed in the chunk the cursor now sits in.
            self.out.store.record_outlink(self.out.cur[buf], target.region)?;
        }
        Ok(())
    }

    /// Write an indirection to `src` as a whole value at the current
    /// position. Destination and source must agree on datatype and layout.
    pub fn write_indirection(&mut self, src: &SerializedRoot) -> Result<(), LayoutError> {
        if src.datatype != self.plan.datatype || src.layout != self.plan.layout {
            return Err(LayoutError::LayoutMismatch);
        }
        self.indirect_to((0, self.plan.width), src)
    }

    /// Emit a random-access record for `ctor` at the current position,
    /// returning the patch handle. The constructor's fields are not written;
    /// every slot group must be filled via [`ValueWriter::fill_group`].
    pub fn write_random_access(&mut self, ctor: &str) -> Result<RaPatch, LayoutError> {
        if !self.opts.random_access {
            return Err(LayoutError::FeatureDisabled("random-access records"));
        }
        let shape = self.plan.root().clone();
        let dt = &self.plan.schema.datatypes()[shape.dt];
        let c = dt
            .constructor(ctor)
            .ok_or_else(|| LayoutError::SchemaMismatch(format!("unknown constructor `{ctor}`")))?;
        let ctor_plan = &shape.ctors[c.tag as usize];
        self.out.append(shape.tag_buf, &[RANDOM_ACCESS, c.tag])?;
        let mut groups = Vec::new();
        for range in self.plan.ra_groups(&shape, ctor_plan) {
            let start = self.slots.len();
            for _ in range.0..range.1 {
                let slot = self.out.reserve_slot(shape.tag_buf)?;
                self.slots.push((slot, false));
                self.unfilled += 1;
            }
            groups.push(PatchGroup { slots: start..self.slots.len(), range });
        }
        Ok(RaPatch { groups })
    }

    /// Back-patch one slot group of `patch` with the current cursor
    /// positions of its bundle range.
    pub fn fill_group(&mut self, patch: &RaPatch, group: usize) -> Result<(), LayoutError> {
        let g = &patch.groups[group];
        for (slot_idx, buf) in g.slots.clone().zip(g.range.0..g.range.1) {
            let (addr, filled) = &mut self.slots[slot_idx];
            if *filled {
                continue;
            }
            let target = self.out.cur[buf];
            self.out.store.patch(*addr, &target.encode())?;
            *filled = true;
            self.unfilled -= 1;
        }
        Ok(())
    }

    pub fn bundle(&self) -> CursorBundle {
        CursorBundle { cursors: self.out.cur.clone() }
    }

    /// Append raw bytes to one buffer, bypassing the value walk. Lets tests
    /// build malformed streams.
    #[cfg(test)]
    pub(crate) fn write_raw_for_tests(&mut self, buf: usize, bytes: &[u8]) -> Result<(), LayoutError> {
        self.out.append(buf, bytes)
    }

    /// Finalize into a root at the first written position.
    pub fn finish(self) -> Result<SerializedRoot, LayoutError> {
        if self.unfilled > 0 {
            return Err(LayoutError::DanglingPatch);
        }
        Ok(SerializedRoot::new(
            self.plan.schema.clone(),
            self.plan.datatype.clone(),
            self.plan.layout,
            CursorBundle { cursors: self.out.start.clone() },
            self.out.regions.clone(),
        ))
    }
}

/// Serialize one value, creating one region per participating buffer.
pub fn serialize(
    schema: &Arc<AdtSchema>,
    datatype: &str,
    value: &Value,
    store: &mut RegionStore,
) -> Result<SerializedRoot, LayoutError> {
    serialize_with(schema, datatype, value, store, &SerializeOptions::default())
}

pub fn serialize_with(
    schema: &Arc<AdtSchema>,
    datatype: &str,
    value: &Value,
    store: &mut RegionStore,
    opts: &SerializeOptions,
) -> Result<SerializedRoot, LayoutError> {
    let mut w = ValueWriter::new(schema, datatype, store, opts.clone())?;
    w.write_value(value)?;
    w.finish()
}

/// Serialize into plain per-buffer byte vectors: no redirection,
/// indirection, or random-access records. Used by the container exporter
/// and as the byte-level oracle in tests.
pub fn serialize_plain(plan: &LayoutPlan, value: &Value) -> Result<Vec<Vec<u8>>, LayoutError> {
    check_value(&plan.schema, &plan.datatype, value)?;
    let mut bufs = vec![Vec::new(); plan.width];
    let mut stack = vec![(value, 0usize)];
    while let Some((v, shape_id)) = stack.pop() {
        let shape = plan.shape(shape_id);
        let dt = &plan.schema.datatypes()[shape.dt];
        let tag = dt.constructor(&v.ctor).expect("checked").tag;
        let ctor = &shape.ctors[tag as usize];
        bufs[shape.tag_buf].push(tag);
        for (field, arg) in ctor.fields.iter().zip(&v.args) {
            if let FieldPlan::Scalar { buf } = field {
                let Arg::Int(n) = arg else { unreachable!() };
                bufs[*buf].extend_from_slice(&n.to_le_bytes());
            }
        }
        for &fidx in ctor.packed.iter().rev() {
            let Arg::Value(child) = &v.args[fidx] else { unreachable!() };
            let child_shape = match ctor.fields[fidx] {
                FieldPlan::SelfRec => shape_id,
                FieldPlan::Nested { shape } => shape,
                FieldPlan::Scalar { .. } => unreachable!(),
            };
            stack.push((child, child_shape));
        }
    }
    Ok(bufs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::deserialize;

    fn tree_schema() -> Arc<AdtSchema> {
        Arc::new(AdtSchema::parse("data Tree = Node Tree Tree | Leaf Int").unwrap())
    }

    fn tree_factored_schema() -> Arc<AdtSchema> {
        Arc::new(
            AdtSchema::parse("data Tree = Node Tree Tree | Leaf Int\nlayout Tree = Factored")
                .unwrap(),
        )
    }

    fn node(l: Value, r: Value) -> Value {
        Value::new("Node", vec![Arg::Value(l), Arg::Value(r)])
    }

    fn leaf(n: i64) -> Value {
        Value::new("Leaf", vec![Arg::Int(n)])
    }

    #[test]
    fn flat_tree_bytes() {
        // Independent recursive writer over the Value, frozen: tag Node=0,
        // Leaf=1 by declaration order, ints 8-byte little-endian.
        let schema = tree_schema();
        let mut store = RegionStore::new();
        let root = serialize(&schema, "Tree", &node(leaf(1), leaf(2)), &mut store).unwrap();
        let got = store.read(root.bundle.cursors[0], 19).unwrap().unwrap();
        let mut expect = vec![0x00, 0x01];
        expect.extend_from_slice(&1i64.to_le_bytes());
        expect.push(0x01);
        expect.extend_from_slice(&2i64.to_le_bytes());
        assert_eq!(got, &expect[..]);
    }

    #[test]
    fn factored_tree_bytes() {
        let schema = tree_factored_schema();
        let mut store = RegionStore::new();
        let root = serialize(&schema, "Tree", &node(leaf(1), leaf(2)), &mut store).unwrap();
        let tags = store.read(root.bundle.cursors[0], 3).unwrap().unwrap();
        assert_eq!(tags, &[0x00, 0x01, 0x01]);
        let ints = store.read(root.bundle.cursors[1], 16).unwrap().unwrap();
        let mut expect = 1i64.to_le_bytes().to_vec();
        expect.extend_from_slice(&2i64.to_le_bytes());
        assert_eq!(ints, &expect[..]);
    }

    #[test]
    fn factored_nil_has_empty_int_buffer() {
        let schema = Arc::new(
            AdtSchema::parse("data List = Cons Int List | Nil\nlayout List = Factored").unwrap(),
        );
        let mut store = RegionStore::new();
        let root = serialize(&schema, "List", &Value::leaf("Nil"), &mut store).unwrap();
        assert_eq!(store.read(root.bundle.cursors[0], 1).unwrap().unwrap(), &[0x01]);
        assert!(store.read(root.bundle.cursors[1], 1).unwrap().is_none());
    }

    #[test]
    fn plain_serializer_matches_region_serializer() {
        let schema = tree_factored_schema();
        let plan = LayoutPlan::new(schema.clone(), "Tree").unwrap();
        let v = node(node(leaf(3), leaf(4)), leaf(5));
        let bufs = serialize_plain(&plan, &v).unwrap();
        let mut store = RegionStore::new();
        let root = serialize(&schema, "Tree", &v, &mut store).unwrap();
        for (i, buf) in bufs.iter().enumerate() {
            let got = store.read(root.bundle.cursors[i], buf.len() as u32).unwrap().unwrap();
            assert_eq!(got, &buf[..]);
        }
    }

    #[test]
    fn indirection_refcounts_and_mismatch() {
        let schema = tree_factored_schema();
        let mut store = RegionStore::new();
        let src = serialize(&schema, "Tree", &leaf(7), &mut store).unwrap();
        let mut w = ValueWriter::new(&schema, "Tree", &mut store, SerializeOptions::default()).unwrap();
        w.write_indirection(&src).unwrap();
        let dst = w.finish().unwrap();
        // One increment per distinct (dst chunk, src region) pair.
        for (i, &r) in src.regions.iter().enumerate() {
            assert_eq!(store.refcount(r).unwrap(), 2, "region of buffer {i}");
        }
        let got = deserialize(&dst, &store).unwrap();
        assert_eq!(got, leaf(7));

        let flat = tree_schema();
        let mut store2 = RegionStore::new();
        let src_flat = serialize(&flat, "Tree", &leaf(7), &mut store2).unwrap();
        let mut w2 =
            ValueWriter::new(&schema, "Tree", &mut store, SerializeOptions::default()).unwrap();
        assert_eq!(w2.write_indirection(&src_flat).unwrap_err(), LayoutError::LayoutMismatch);
        let _ = store2;
    }

    #[test]
    fn random_access_requires_flag_and_patching() {
        let schema = tree_schema();
        let mut store = RegionStore::new();
        let mut w = ValueWriter::new(&schema, "Tree", &mut store, SerializeOptions::default()).unwrap();
        assert!(matches!(
            w.write_random_access("Node").unwrap_err(),
            LayoutError::FeatureDisabled(_)
        ));
        drop(w);

        let opts = SerializeOptions { random_access: true, ..Default::default() };
        let mut w = ValueWriter::new(&schema, "Tree", &mut store, opts).unwrap();
        let patch = w.write_random_access("Node").unwrap();
        assert_eq!(patch.group_count(), 1);
        assert_eq!(w.finish().unwrap_err(), LayoutError::DanglingPatch);
    }
}
