//! Reading serialized values.
//!
//! Readers walk a cursor bundle over the written regions. Chunk redirections
//! are discovered positionally: every cursor checks its chunk's seal point
//! before consuming a unit, so scalar buffers need no in-band sentinel.
//! Indirections are announced by the tag stream and then resolved in every
//! buffer of the value being read; random-access records are consumed from
//! the tag stream and expose field start addresses.
//!
//! Byte accounting follows the cache-touch model the counters exist to
//! report: every byte a cursor passes over in a tag stream counts as read
//! (flat layouts inline scalars there, so skipped scalar bytes still
//! count), while a skip-bump over a dedicated scalar buffer touches no
//! payload and counts zero bytes and one step.

use crate::region::{Address, RegionStore};
use crate::schema::Layout;

use super::plan::{CtorPlan, FieldPlan, LayoutPlan, ShapeNode};
use super::{Arg, LayoutError, SerializedRoot, Value, INDIR, RANDOM_ACCESS};

/// Deterministic traversal counters, one read/write cell per buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counters {
    pub bytes_read: Vec<u64>,
    pub bytes_written: Vec<u64>,
    pub steps: u64,
    pub bundle_copies: u64,
}

impl Counters {
    pub fn new(width: usize) -> Counters {
        Counters {
            bytes_read: vec![0; width],
            bytes_written: vec![0; width],
            steps: 0,
            bundle_copies: 0,
        }
    }

    pub fn total_read(&self) -> u64 {
        self.bytes_read.iter().sum()
    }

    pub fn total_written(&self) -> u64 {
        self.bytes_written.iter().sum()
    }
}

/// Follow chunk redirections until the cursor is off any seal point.
pub(crate) fn follow_redirects(
    store: &RegionStore,
    cursor: &mut Address,
    counters: &mut Counters,
) -> Result<(), LayoutError> {
    while let Some((seal, target)) = store.redirect_target(*cursor)? {
        if cursor.offset < seal {
            break;
        }
        debug_assert_eq!(cursor.offset, seal, "cursor past seal point");
        *cursor = target;
        counters.steps += 1;
    }
    Ok(())
}

/// Read `n` bytes at the cursor, following redirections, and advance.
pub(crate) fn read_unit<'s>(
    store: &'s RegionStore,
    cursor: &mut Address,
    n: u32,
    counters: &mut Counters,
) -> Result<&'s [u8], LayoutError> {
    follow_redirects(store, cursor, counters)?;
    let bytes = store
        .read(*cursor, n)?
        .ok_or(LayoutError::TruncatedBuffer(*cursor))?;
    cursor.offset += n;
    Ok(bytes)
}

/// Advance a cursor by `n` bytes without touching payload.
pub(crate) fn bump(
    store: &RegionStore,
    cursor: &mut Address,
    n: u32,
    counters: &mut Counters,
) -> Result<(), LayoutError> {
    follow_redirects(store, cursor, counters)?;
    if cursor.offset + n > store.data_end(*cursor)? {
        return Err(LayoutError::TruncatedBuffer(*cursor));
    }
    cursor.offset += n;
    Ok(())
}

pub(crate) fn read_scalar(
    store: &RegionStore,
    bundle: &mut [Address],
    buf: usize,
    counters: &mut Counters,
) -> Result<i64, LayoutError> {
    let bytes = read_unit(store, &mut bundle[buf], 8, counters)?;
    counters.bytes_read[buf] += 8;
    counters.steps += 1;
    Ok(i64::from_le_bytes(bytes.try_into().unwrap()))
}

/// Start-of-value header: either a constructor (with any random-access
/// slots already consumed) or an indirection with its per-buffer targets.
pub(crate) enum Header {
    Ctor { tag: u8, ra: Option<RaSlots> },
    Indir { targets: Vec<Address> },
}

/// Slot groups of a random-access record: one `(bundle range, addresses)`
/// pair per packed field after the first.
pub(crate) type RaSlots = Vec<((usize, usize), Vec<Address>)>;

pub(crate) fn read_header(
    plan: &LayoutPlan,
    store: &RegionStore,
    shape: &ShapeNode,
    bundle: &mut [Address],
    counters: &mut Counters,
) -> Result<Header, LayoutError> {
    read_header_masked(plan, store, shape, bundle, counters, None)
}

/// Like [`read_header`], but indirection records are only consumed from
/// buffers marked live; frozen buffers keep their positions and report
/// their current (unused) position as the jump target.
pub(crate) fn read_header_masked(
    plan: &LayoutPlan,
    store: &RegionStore,
    shape: &ShapeNode,
    bundle: &mut [Address],
    counters: &mut Counters,
    live: Option<&[bool]>,
) -> Result<Header, LayoutError> {
    let tag_buf = shape.tag_buf;
    let at = bundle[tag_buf];
    let byte = read_unit(store, &mut bundle[tag_buf], 1, counters)?[0];
    counters.bytes_read[tag_buf] += 1;
    counters.steps += 1;
    match byte {
        RANDOM_ACCESS => {
            let tag = read_unit(store, &mut bundle[tag_buf], 1, counters)?[0];
            counters.bytes_read[tag_buf] += 1;
            if tag as usize >= shape.ctors.len() {
                return Err(LayoutError::CorruptTag { byte: tag, at: bundle[tag_buf] });
            }
            let ctor = &shape.ctors[tag as usize];
            let mut ra = Vec::new();
            for range in plan.ra_groups(shape, ctor) {
                let mut addrs = Vec::with_capacity(range.1 - range.0);
                for _ in range.0..range.1 {
                    let bytes = read_unit(store, &mut bundle[tag_buf], 8, counters)?;
                    counters.bytes_read[tag_buf] += 8;
                    addrs.push(Address::decode(bytes.try_into().unwrap()));
                }
                ra.push((range, addrs));
            }
            counters.steps += 1;
            Ok(Header::Ctor { tag, ra: Some(ra) })
        }
        INDIR => {
            // The remaining 8 bytes of the tag-stream record, then one full
            // 9-byte record per other buffer of this value's range.
            let bytes = read_unit(store, &mut bundle[tag_buf], 8, counters)?;
            counters.bytes_read[tag_buf] += 8;
            counters.steps += 1;
            let mut targets = Vec::with_capacity(shape.width());
            for buf in shape.buf_start..shape.buf_end {
                if buf == tag_buf {
                    targets.push(Address::decode(bytes.try_into().unwrap()));
                    continue;
                }
                if live.is_some_and(|l| !l[buf]) {
                    // Frozen buffer: its record is never consumed and its
                    // target is never read.
                    targets.push(bundle[buf]);
                    continue;
                }
                let rec = read_unit(store, &mut bundle[buf], 9, counters)?;
                counters.bytes_read[buf] += 9;
                counters.steps += 1;
                if rec[0] != INDIR {
                    return Err(LayoutError::CorruptTag { byte: rec[0], at: bundle[buf] });
                }
                targets.push(Address::decode(rec[1..].try_into().unwrap()));
            }
            Ok(Header::Indir { targets })
        }
        tag if (tag as usize) < shape.ctors.len() => Ok(Header::Ctor { tag, ra: None }),
        byte => Err(LayoutError::CorruptTag { byte, at }),
    }
}

/// Structurally reconstruct the value starting at `bundle`, leaving the
/// bundle at its end witness.
pub(crate) fn read_value(
    plan: &LayoutPlan,
    store: &RegionStore,
    bundle: &mut Vec<Address>,
    counters: &mut Counters,
) -> Result<Value, LayoutError> {
    enum W {
        Node(usize),
        Assemble { shape: usize, tag: u8, scalars: Vec<i64> },
        Restore { start: usize, saved: Vec<Address> },
    }

    let mut work = vec![W::Node(0)];
    let mut values: Vec<Value> = Vec::new();

    while let Some(w) = work.pop() {
        match w {
            W::Restore { start, saved } => {
                bundle[start..start + saved.len()].copy_from_slice(&saved);
            }
            W::Assemble { shape, tag, scalars } => {
                let shape = plan.shape(shape);
                let ctor = &shape.ctors[tag as usize];
                let n_packed = ctor.packed.len();
                let mut children = values.split_off(values.len() - n_packed);
                let mut args: Vec<Arg> = scalars.into_iter().map(Arg::Int).collect();
                args.extend(children.drain(..).map(Arg::Value));
                values.push(Value { ctor: ctor.name.clone(), args });
            }
            W::Node(shape_id) => {
                let shape = plan.shape(shape_id);
                match read_header(plan, store, shape, bundle, counters)? {
                    Header::Indir { targets } => {
                        let saved = bundle[shape.buf_start..shape.buf_end].to_vec();
                        bundle[shape.buf_start..shape.buf_end].copy_from_slice(&targets);
                        work.push(W::Restore { start: shape.buf_start, saved });
                        work.push(W::Node(shape_id));
                    }
                    Header::Ctor { tag, .. } => {
                        let ctor = &shape.ctors[tag as usize];
                        let mut scalars = Vec::with_capacity(ctor.n_scalars);
                        for field in &ctor.fields {
                            if let FieldPlan::Scalar { buf } = field {
                                scalars.push(read_scalar(store, bundle, *buf, counters)?);
                            }
                        }
                        work.push(W::Assemble { shape: shape_id, tag, scalars });
                        for &fidx in ctor.packed.iter().rev() {
                            work.push(W::Node(child_shape(shape_id, ctor, fidx)));
                        }
                    }
                }
            }
        }
    }
    debug_assert_eq!(values.len(), 1);
    Ok(values.pop().unwrap())
}

pub(crate) fn child_shape(shape_id: usize, ctor: &CtorPlan, fidx: usize) -> usize {
    match ctor.fields[fidx] {
        FieldPlan::SelfRec => shape_id,
        FieldPlan::Nested { shape } => shape,
        FieldPlan::Scalar { .. } => unreachable!("scalar fields are not packed"),
    }
}

/// Deserialize a fully written root back into a [`Value`]. Redirections and
/// indirections are followed transparently; random-access records are
/// skipped.
pub fn deserialize(root: &SerializedRoot, store: &RegionStore) -> Result<Value, LayoutError> {
    let plan = root.plan()?;
    let mut bundle = root.bundle.cursors.clone();
    let mut scratch = Counters::new(plan.width);
    read_value(&plan, store, &mut bundle, &mut scratch)
}

/// Advance `bundle` from a value's start to its end witness in every
/// participating buffer. The walk reads tag streams, bumps dedicated scalar
/// buffers without touching them, and jumps via random-access slots where
/// records are present.
pub fn skip_value(
    plan: &LayoutPlan,
    store: &RegionStore,
    bundle: &mut Vec<Address>,
    counters: &mut Counters,
) -> Result<(), LayoutError> {
    let mut work = vec![0usize];
    while let Some(shape_id) = work.pop() {
        let shape = plan.shape(shape_id);
        match read_header(plan, store, shape, bundle, counters)? {
            Header::Indir { .. } => {
                // End witness of a shared value is just past its records;
                // the target is not entered.
            }
            Header::Ctor { tag, ra } => {
                let ctor = &shape.ctors[tag as usize];
                skip_scalars(plan, store, shape, ctor, bundle, counters)?;
                if let (Some(ra), true) = (&ra, !ctor.packed.is_empty()) {
                    if let Some(((start, end), addrs)) = ra.last() {
                        // Jump to the last packed field and walk only that
                        // one; everything before it is covered by the record.
                        bundle[*start..*end].copy_from_slice(addrs);
                        counters.steps += 1;
                        let fidx = *ctor.packed.last().unwrap();
                        work.push(child_shape(shape_id, ctor, fidx));
                        continue;
                    }
                }
                for &fidx in ctor.packed.iter().rev() {
                    work.push(child_shape(shape_id, ctor, fidx));
                }
            }
        }
    }
    Ok(())
}

/// Step over a constructor's scalar fields: flat layouts pass the bytes in
/// the tag stream, factored layouts bump the dedicated buffers.
pub(crate) fn skip_scalars(
    _plan: &LayoutPlan,
    store: &RegionStore,
    shape: &ShapeNode,
    ctor: &CtorPlan,
    bundle: &mut [Address],
    counters: &mut Counters,
) -> Result<(), LayoutError> {
    for field in &ctor.fields {
        if let FieldPlan::Scalar { buf } = field {
            bump(store, &mut bundle[*buf], 8, counters)?;
            if shape.layout == Layout::Flat {
                counters.bytes_read[*buf] += 8;
            }
            counters.steps += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::layout::{serialize, serialize_with, SerializeOptions};
    use crate::region::RegionStore;
    use crate::schema::AdtSchema;

    fn tree(factored: bool) -> Arc<AdtSchema> {
        let layout = if factored { "\nlayout Tree = Factored" } else { "" };
        Arc::new(AdtSchema::parse(&format!("data Tree = Node Tree Tree | Leaf Int{layout}")).unwrap())
    }

    fn node(l: Value, r: Value) -> Value {
        Value::new("Node", vec![Arg::Value(l), Arg::Value(r)])
    }

    fn leaf(n: i64) -> Value {
        Value::new("Leaf", vec![Arg::Int(n)])
    }

    #[test]
    fn roundtrip_both_layouts() {
        let v = node(node(leaf(1), leaf(2)), leaf(3));
        for factored in [false, true] {
            let schema = tree(factored);
            let mut store = RegionStore::new();
            let root = serialize(&schema, "Tree", &v, &mut store).unwrap();
            assert_eq!(deserialize(&root, &store).unwrap(), v);
        }
    }

    #[test]
    fn roundtrip_across_chunk_boundaries() {
        // 32-byte first chunks force any 3-leaf tree across a redirection.
        let v = node(node(leaf(1), leaf(2)), leaf(3));
        for factored in [false, true] {
            let schema = tree(factored);
            let mut store = RegionStore::with_config(32, true);
            let root = serialize(&schema, "Tree", &v, &mut store).unwrap();
            assert_eq!(deserialize(&root, &store).unwrap(), v);
        }
    }

    #[test]
    fn truncated_buffer_mid_integer() {
        let schema = tree(false);
        let mut store = RegionStore::new();
        let mut w = crate::layout::ValueWriter::new(
            &schema,
            "Tree",
            &mut store,
            SerializeOptions::default(),
        )
        .unwrap();
        // A Leaf tag with only 3 of its 8 integer bytes written.
        w.write_raw_for_tests(0, &[0x01, 0xaa, 0xbb, 0xcc]).unwrap();
        let root = w.finish().unwrap();
        assert!(matches!(
            deserialize(&root, &store).unwrap_err(),
            LayoutError::TruncatedBuffer(_)
        ));
    }

    #[test]
    fn corrupt_tag_is_reported() {
        let schema = tree(false);
        let mut store = RegionStore::new();
        let mut w = crate::layout::ValueWriter::new(
            &schema,
            "Tree",
            &mut store,
            SerializeOptions::default(),
        )
        .unwrap();
        w.write_raw_for_tests(0, &[0x77]).unwrap();
        let root = w.finish().unwrap();
        assert!(matches!(
            deserialize(&root, &store).unwrap_err(),
            LayoutError::CorruptTag { byte: 0x77, .. }
        ));
    }

    #[test]
    fn roundtrip_with_random_access_and_indirection() {
        let v = node(node(leaf(1), node(leaf(2), leaf(3))), node(leaf(4), leaf(5)));
        for factored in [false, true] {
            for (ra, period) in [(true, None), (false, Some(2)), (true, Some(3))] {
                let schema = tree(factored);
                let mut store = RegionStore::with_config(32, true);
                let opts = SerializeOptions { random_access: ra, indirection_period: period };
                let root = serialize_with(&schema, "Tree", &v, &mut store, &opts).unwrap();
                assert_eq!(deserialize(&root, &store).unwrap(), v, "ra={ra} period={period:?}");
            }
        }
    }

    #[test]
    fn skip_equals_flat_size() {
        // Leaf 1 flat: 1 tag + 8 int bytes.
        let schema = tree(false);
        let mut store = RegionStore::new();
        let root = serialize(&schema, "Tree", &leaf(1), &mut store).unwrap();
        let plan = root.plan().unwrap();
        let mut bundle = root.bundle.cursors.clone();
        let start = bundle[0].offset;
        let mut c = Counters::new(plan.width);
        skip_value(&plan, &store, &mut bundle, &mut c).unwrap();
        assert_eq!(bundle[0].offset, start + 9);
    }

    #[test]
    fn skip_factored_node_lands_on_end_witness() {
        // Node(Leaf 1)(Leaf 2) factored: 3 tag bytes, 16 int bytes.
        let schema = tree(true);
        let mut store = RegionStore::new();
        let root = serialize(&schema, "Tree", &node(leaf(1), leaf(2)), &mut store).unwrap();
        let plan = root.plan().unwrap();
        let mut bundle = root.bundle.cursors.clone();
        let mut c = Counters::new(plan.width);
        skip_value(&plan, &store, &mut bundle, &mut c).unwrap();
        assert_eq!(bundle[0].offset, root.bundle.cursors[0].offset + 3);
        assert_eq!(bundle[1].offset, root.bundle.cursors[1].offset + 16);
        // Dedicated scalar buffer was bumped, not read.
        assert_eq!(c.bytes_read[1], 0);
        assert_eq!(c.bytes_read[0], 3);
    }

    #[test]
    fn skip_then_read_second_value() {
        let schema = tree(false);
        let mut store = RegionStore::new();
        let mut w = crate::layout::ValueWriter::new(
            &schema,
            "Tree",
            &mut store,
            SerializeOptions::default(),
        )
        .unwrap();
        w.write_value(&leaf(1)).unwrap();
        w.write_value(&leaf(2)).unwrap();
        let root = w.finish().unwrap();
        let plan = root.plan().unwrap();
        let mut bundle = root.bundle.cursors.clone();
        let mut c = Counters::new(plan.width);
        skip_value(&plan, &store, &mut bundle, &mut c).unwrap();
        let second = read_value(&plan, &store, &mut bundle, &mut c).unwrap();
        assert_eq!(second, leaf(2));
    }
}
