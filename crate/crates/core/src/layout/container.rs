//! The `.fadt` container file format.
//!
//! Little-endian throughout: magic `FADT` (4 bytes), version `u16` = 1,
//! layout kind `u8` (0 flat, 1 factored), buffer count `u16`, schema hash
//! `u64` (FNV-1a over the canonical text of the datatype's definition
//! closure), one `u64` length per buffer, then the buffer payloads
//! concatenated in bundle order with no padding.
//!
//! Export compacts each buffer into one contiguous segment: redirection
//! records are elided, indirections are resolved by inlining (export is a
//! deep copy), and random-access records are dropped. Import wraps the
//! payloads in fresh single-chunk regions, readable without transformation.

use std::sync::Arc;

use crate::region::{RegionStore, MIN_CHUNK_SIZE, REDIR_RESERVE};
use crate::schema::{AdtSchema, Layout};

use super::plan::LayoutPlan;
use super::write::serialize_plain;
use super::{deserialize, CursorBundle, LayoutError, SerializedRoot};

pub const MAGIC: &[u8; 4] = b"FADT";
pub const VERSION: u16 = 1;

/// Serialize a root into its canonical container bytes.
pub fn export_container(root: &SerializedRoot, store: &RegionStore) -> Result<Vec<u8>, LayoutError> {
    let plan = root.plan()?;
    let value = deserialize(root, store)?;
    let bufs = serialize_plain(&plan, &value)?;
    let hash = root
        .schema
        .closure_hash(&root.datatype)
        .ok_or_else(|| LayoutError::UnknownDatatype(root.datatype.clone()))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match root.layout {
        Layout::Flat => 0,
        Layout::Factored => 1,
    });
    out.extend_from_slice(&(bufs.len() as u16).to_le_bytes());
    out.extend_from_slice(&hash.to_le_bytes());
    for b in &bufs {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    }
    for b in &bufs {
        out.extend_from_slice(b);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LayoutError> {
        if self.pos + n > self.bytes.len() {
            return Err(LayoutError::TruncatedFile);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, LayoutError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, LayoutError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Import container bytes, matching the embedded schema hash against the
/// definition closures of `schema`'s datatypes.
pub fn import_container(
    store: &mut RegionStore,
    schema: &Arc<AdtSchema>,
    bytes: &[u8],
) -> Result<SerializedRoot, LayoutError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(LayoutError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(LayoutError::VersionMismatch(version));
    }
    let layout = match r.take(1)?[0] {
        0 => Layout::Flat,
        1 => Layout::Factored,
        _ => return Err(LayoutError::TruncatedFile),
    };
    let buffer_count = r.u16()? as usize;
    let hash = r.u64()?;

    let datatype = schema
        .datatypes()
        .iter()
        .find(|dt| schema.closure_hash(&dt.name) == Some(hash))
        .map(|dt| dt.name.clone())
        .ok_or(LayoutError::SchemaHashMismatch)?;
    let plan = LayoutPlan::new(schema.clone(), &datatype)?;
    if plan.layout != layout || plan.width != buffer_count {
        return Err(LayoutError::SchemaHashMismatch);
    }

    let mut lengths = Vec::with_capacity(buffer_count);
    for _ in 0..buffer_count {
        lengths.push(r.u64()? as usize);
    }

    let mut bundle = Vec::with_capacity(buffer_count);
    let mut regions = Vec::with_capacity(buffer_count);
    for &len in &lengths {
        let chunk = (len as u32 + REDIR_RESERVE).max(MIN_CHUNK_SIZE);
        let region = store.new_region(chunk)?;
        let start = store.frontier(region)?;
        store.append(start, r.take(len)?)?;
        regions.push(region);
        bundle.push(start);
    }
    if r.pos != bytes.len() {
        return Err(LayoutError::TruncatedFile);
    }
    Ok(SerializedRoot::new(
        schema.clone(),
        datatype,
        layout,
        CursorBundle { cursors: bundle },
        regions,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{serialize, serialize_with, Arg, SerializeOptions, Value};

    fn tree_schema() -> Arc<AdtSchema> {
        Arc::new(
            AdtSchema::parse("data Tree = Node Tree Tree | Leaf Int\nlayout Tree = Factored")
                .unwrap(),
        )
    }

    fn sample() -> Value {
        Value::new(
            "Node",
            vec![
                Arg::Value(Value::new("Leaf", vec![Arg::Int(1)])),
                Arg::Value(Value::new("Leaf", vec![Arg::Int(2)])),
            ],
        )
    }

    #[test]
    fn factored_tree_header_and_lengths() {
        let schema = tree_schema();
        let mut store = RegionStore::new();
        let root = serialize(&schema, "Tree", &sample(), &mut store).unwrap();
        let bytes = export_container(&root, &store).unwrap();
        assert_eq!(&bytes[0..4], b"FADT");
        assert_eq!(u16::from_le_bytes(bytes[4..6].try_into().unwrap()), 1);
        assert_eq!(bytes[6], 1);
        let count = u16::from_le_bytes(bytes[7..9].try_into().unwrap());
        assert_eq!(count, 2);
        let len0 = u64::from_le_bytes(bytes[17..25].try_into().unwrap());
        let len1 = u64::from_le_bytes(bytes[25..33].try_into().unwrap());
        assert_eq!((len0, len1), (3, 16));
    }

    #[test]
    fn export_import_export_is_identity() {
        let schema = tree_schema();
        let mut store = RegionStore::new();
        let root = serialize(&schema, "Tree", &sample(), &mut store).unwrap();
        let bytes = export_container(&root, &store).unwrap();
        let imported = import_container(&mut store, &schema, &bytes).unwrap();
        assert_eq!(imported.datatype, "Tree");
        assert_eq!(deserialize(&imported, &store).unwrap(), sample());
        let bytes2 = export_container(&imported, &store).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn export_inlines_indirections_and_drops_records() {
        let schema = tree_schema();
        let mut store = RegionStore::with_config(32, true);
        let opts = SerializeOptions { random_access: true, indirection_period: Some(2) };
        let root = serialize_with(&schema, "Tree", &sample(), &mut store, &opts).unwrap();
        let bytes = export_container(&root, &store).unwrap();
        // Canonical compacted form: identical to exporting a plain root.
        let mut store2 = RegionStore::new();
        let plain = serialize(&schema, "Tree", &sample(), &mut store2).unwrap();
        assert_eq!(bytes, export_container(&plain, &store2).unwrap());
    }

    #[test]
    fn bad_magic_and_bad_hash() {
        let schema = tree_schema();
        let mut store = RegionStore::new();
        let root = serialize(&schema, "Tree", &sample(), &mut store).unwrap();
        let mut bytes = export_container(&root, &store).unwrap();
        bytes[0] ^= 0xff;
        assert_eq!(
            import_container(&mut store, &schema, &bytes).unwrap_err(),
            LayoutError::BadMagic
        );
        bytes[0] ^= 0xff;

        let other = Arc::new(AdtSchema::parse("data Other = K Int").unwrap());
        assert_eq!(
            import_container(&mut store, &other, &bytes).unwrap_err(),
            LayoutError::SchemaHashMismatch
        );

        let truncated = &bytes[..bytes.len() - 1];
        assert_eq!(
            import_container(&mut store, &schema, truncated).unwrap_err(),
            LayoutError::TruncatedFile
        );

        let mut versioned = bytes.clone();
        versioned[4] = 9;
        assert_eq!(
            import_container(&mut store, &schema, &versioned).unwrap_err(),
            LayoutError::VersionMismatch(9)
        );
    }
}
