//! Growable byte regions built from linked chunks.
//!
//! A region starts with one chunk and grows by appending chunks of exactly
//! double the previous size. Writes are bump-allocated at the region
//! frontier. The last [`REDIR_RESERVE`] bytes of every chunk are kept free
//! for a redirection record: when a write does not fit, the record (reserved
//! tag + encoded address of the next chunk's start) is placed there, the
//! chunk is sealed, and writing continues at the start of the new chunk.
//!
//! Reclamation is eager reference counting at region granularity. Each chunk
//! footer carries an *outset*, the set of regions the chunk points into;
//! when a region's count reaches zero its chunks are freed and every region
//! in their outsets is decremented in turn. Outlinks are only created from
//! regions still being written to regions already fully written, so no
//! cycles can form.

use std::collections::BTreeSet;

use thiserror::Error;

/// Reserved tag marking a redirection record at a chunk tail.
pub const REDIR_TAG: u8 = 255;
/// Bytes held back in every chunk for a redirection record: tag + address.
pub const REDIR_RESERVE: u32 = 9;
/// Smallest legal first chunk: must hold the widest single write (a
/// random-access record for the builtin schemas) plus the redirection zone.
pub const MIN_CHUNK_SIZE: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct RegionId(pub u16);

/// A portable byte position: region, chunk index, offset into the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Address {
    pub region: RegionId,
    pub chunk: u16,
    pub offset: u32,
}

impl Address {
    pub fn new(region: RegionId, chunk: u16, offset: u32) -> Self {
        Address { region, chunk, offset }
    }

    /// Normative 8-byte encoding: region id 16b | chunk 16b | offset 32b,
    /// packed low-to-high and emitted little-endian. Used by redirection,
    /// indirection, and random-access records and by the container format.
    pub fn encode(&self) -> [u8; 8] {
        let packed =
            self.region.0 as u64 | (self.chunk as u64) << 16 | (self.offset as u64) << 32;
        packed.to_le_bytes()
    }

    pub fn decode(bytes: [u8; 8]) -> Address {
        let packed = u64::from_le_bytes(bytes);
        Address {
            region: RegionId((packed & 0xffff) as u16),
            chunk: ((packed >> 16) & 0xffff) as u16,
            offset: (packed >> 32) as u32,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RegionError {
    #[error("first chunk size {0} below minimum {MIN_CHUNK_SIZE}")]
    InvalidChunkSize(u32),
    #[error("region {0:?} is not alive")]
    UseAfterFree(RegionId),
    #[error("address {0:?} is not the allocation frontier of its region")]
    NotAtFrontier(Address),
    #[error("byte at {0:?} written twice")]
    DoubleWrite(Address),
    #[error("address {0:?} out of bounds")]
    OutOfBounds(Address),
    #[error("region id space exhausted")]
    OutOfMemory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ByteState {
    Unwritten,
    Reserved,
    Written,
}

#[derive(Debug)]
struct Chunk {
    data: Vec<u8>,
    /// Allocation frontier within this chunk.
    used: u32,
    /// Set when the chunk was sealed by a redirection: data bytes end here
    /// and the record sits in the last `REDIR_RESERVE` bytes.
    redirected_at: Option<u32>,
    /// Footer metadata: regions this chunk points into, and the next chunk.
    outset: BTreeSet<RegionId>,
    next: Option<u16>,
    /// Per-byte write map, allocated only under instrumentation.
    write_map: Option<Vec<ByteState>>,
}

impl Chunk {
    fn new(size: u32, instrument: bool) -> Chunk {
        Chunk {
            data: vec![0; size as usize],
            used: 0,
            redirected_at: None,
            outset: BTreeSet::new(),
            next: None,
            write_map: instrument.then(|| vec![ByteState::Unwritten; size as usize]),
        }
    }

    fn size(&self) -> u32 {
        self.data.len() as u32
    }

    /// End of readable data: the seal point if redirected, else the frontier.
    fn data_end(&self) -> u32 {
        self.redirected_at.unwrap_or(self.used)
    }
}

#[derive(Debug)]
struct Region {
    chunks: Vec<Chunk>,
    refcount: u32,
    freed: bool,
}

/// Owner of all regions. Single-threaded for allocation and writes; fully
/// written regions may be shared read-only across threads.
#[derive(Debug)]
pub struct RegionStore {
    regions: Vec<Region>,
    default_first_chunk: u32,
    instrument: bool,
}

impl Default for RegionStore {
    fn default() -> Self {
        Self::new()
    }
}

impl RegionStore {
    /// Store with 64-byte first chunks and write-once instrumentation on.
    pub fn new() -> RegionStore {
        RegionStore::with_config(64, true)
    }

    pub fn with_config(default_first_chunk: u32, instrument: bool) -> RegionStore {
        RegionStore {
            regions: Vec::new(),
            default_first_chunk,
            instrument,
        }
    }

    pub fn default_first_chunk(&self) -> u32 {
        self.default_first_chunk
    }

    pub fn new_region_default(&mut self) -> Result<RegionId, RegionError> {
        self.new_region(self.default_first_chunk)
    }

    /// Create a region with one chunk and reference count 1.
    pub fn new_region(&mut self, first_chunk_size: u32) -> Result<RegionId, RegionError> {
        if first_chunk_size < MIN_CHUNK_SIZE {
            return Err(RegionError::InvalidChunkSize(first_chunk_size));
        }
        if self.regions.len() > u16::MAX as usize {
            return Err(RegionError::OutOfMemory);
        }
        let id = RegionId(self.regions.len() as u16);
        self.regions.push(Region {
            chunks: vec![Chunk::new(first_chunk_size, self.instrument)],
            refcount: 1,
            freed: false,
        });
        Ok(id)
    }

    fn region(&self, id: RegionId) -> Result<&Region, RegionError> {
        let r = self.regions.get(id.0 as usize).ok_or(RegionError::UseAfterFree(id))?;
        if r.freed {
            return Err(RegionError::UseAfterFree(id));
        }
        Ok(r)
    }

    fn region_mut(&mut self, id: RegionId) -> Result<&mut Region, RegionError> {
        let r = self
            .regions
            .get_mut(id.0 as usize)
            .ok_or(RegionError::UseAfterFree(id))?;
        if r.freed {
            return Err(RegionError::UseAfterFree(id));
        }
        Ok(r)
    }

    pub fn is_alive(&self, id: RegionId) -> bool {
        self.regions
            .get(id.0 as usize)
            .map(|r| !r.freed)
            .unwrap_or(false)
    }

    pub fn refcount(&self, id: RegionId) -> Result<u32, RegionError> {
        Ok(self.region(id)?.refcount)
    }

    /// Chunk sizes of a region, in order. Test and report helper.
    pub fn chunk_sizes(&self, id: RegionId) -> Result<Vec<u32>, RegionError> {
        Ok(self.region(id)?.chunks.iter().map(|c| c.size()).collect())
    }

    /// Current allocation frontier of a region.
    pub fn frontier(&self, id: RegionId) -> Result<Address, RegionError> {
        let r = self.region(id)?;
        let chunk = (r.chunks.len() - 1) as u16;
        Ok(Address::new(id, chunk, r.chunks[chunk as usize].used))
    }

    /// Ensure `n` bytes fit at the frontier `addr`. If they do not fit before
    /// the redirection reserve zone, a doubled chunk is appended, a
    /// redirection record is written into the sealed chunk's reserve zone,
    /// and the new chunk's start address is returned.
    pub fn reserve(&mut self, addr: Address, n: u32) -> Result<Address, RegionError> {
        let frontier = self.frontier(addr.region)?;
        if addr != frontier {
            return Err(RegionError::NotAtFrontier(addr));
        }
        let mut cur = addr;
        loop {
            let region = self.region(cur.region)?;
            let chunk = &region.chunks[cur.chunk as usize];
            let size = chunk.size();
            if cur.offset + n <= size - REDIR_RESERVE {
                return Ok(cur);
            }
            // Seal this chunk and continue in a doubled one. A write wider
            // than the new chunk's usable space falls through and doubles
            // again, leaving an empty sealed chunk behind.
            let new_size = size * 2;
            let instrument = self.instrument;
            let region = self.region_mut(cur.region)?;
            let next_index = region.chunks.len() as u16;
            region.chunks.push(Chunk::new(new_size, instrument));
            let target = Address::new(cur.region, next_index, 0);

            let chunk = &mut region.chunks[cur.chunk as usize];
            chunk.redirected_at = Some(cur.offset);
            chunk.next = Some(next_index);
            let rec_at = (size - REDIR_RESERVE) as usize;
            chunk.data[rec_at] = REDIR_TAG;
            chunk.data[rec_at + 1..rec_at + 9].copy_from_slice(&target.encode());
            if let Some(map) = &mut chunk.write_map {
                for b in &mut map[rec_at..rec_at + 9] {
                    *b = ByteState::Written;
                }
            }
            chunk.used = size;
            cur = target;
        }
    }

    /// Where the sealed chunk's redirection points, if it was sealed.
    pub fn redirect_target(&self, addr: Address) -> Result<Option<(u32, Address)>, RegionError> {
        let region = self.region(addr.region)?;
        let chunk = region
            .chunks
            .get(addr.chunk as usize)
            .ok_or(RegionError::OutOfBounds(addr))?;
        match chunk.redirected_at {
            None => Ok(None),
            Some(seal) => {
                let rec_at = (chunk.size() - REDIR_RESERVE) as usize;
                let mut enc = [0u8; 8];
                enc.copy_from_slice(&chunk.data[rec_at + 1..rec_at + 9]);
                Ok(Some((seal, Address::decode(enc))))
            }
        }
    }

    fn mark_written(
        chunk: &mut Chunk,
        addr: Address,
        n: usize,
        patch: bool,
    ) -> Result<(), RegionError> {
        if let Some(map) = &mut chunk.write_map {
            for (i, b) in map[addr.offset as usize..addr.offset as usize + n]
                .iter_mut()
                .enumerate()
            {
                let ok = match (*b, patch) {
                    (ByteState::Unwritten, false) => true,
                    (ByteState::Reserved, true) => true,
                    _ => false,
                };
                if !ok {
                    return Err(RegionError::DoubleWrite(Address::new(
                        addr.region,
                        addr.chunk,
                        addr.offset + i as u32,
                    )));
                }
                *b = ByteState::Written;
            }
        }
        Ok(())
    }

    /// Reserve space for `bytes` at the frontier, write them, and return the
    /// new frontier. The returned address stays within one chunk.
    pub fn append(&mut self, addr: Address, bytes: &[u8]) -> Result<Address, RegionError> {
        let dst = self.reserve(addr, bytes.len() as u32)?;
        let region = self.region_mut(dst.region)?;
        let chunk = &mut region.chunks[dst.chunk as usize];
        Self::mark_written(chunk, dst, bytes.len(), false)?;
        chunk.data[dst.offset as usize..dst.offset as usize + bytes.len()].copy_from_slice(bytes);
        chunk.used = dst.offset + bytes.len() as u32;
        Ok(Address::new(dst.region, dst.chunk, chunk.used))
    }

    /// Reserve `n` zero bytes at the frontier for later back-patching.
    /// Returns the slot address and the new frontier.
    pub fn reserve_slot(&mut self, addr: Address, n: u32) -> Result<(Address, Address), RegionError> {
        let dst = self.reserve(addr, n)?;
        let region = self.region_mut(dst.region)?;
        let chunk = &mut region.chunks[dst.chunk as usize];
        if let Some(map) = &mut chunk.write_map {
            for b in &mut map[dst.offset as usize..(dst.offset + n) as usize] {
                if *b != ByteState::Unwritten {
                    return Err(RegionError::DoubleWrite(dst));
                }
                *b = ByteState::Reserved;
            }
        }
        chunk.used = dst.offset + n;
        Ok((dst, Address::new(dst.region, dst.chunk, chunk.used)))
    }

    /// Fill a slot previously handed out by [`reserve_slot`].
    ///
    /// [`reserve_slot`]: RegionStore::reserve_slot
    pub fn patch(&mut self, slot: Address, bytes: &[u8]) -> Result<(), RegionError> {
        let region = self.region_mut(slot.region)?;
        let chunk = region
            .chunks
            .get_mut(slot.chunk as usize)
            .ok_or(RegionError::OutOfBounds(slot))?;
        if slot.offset + bytes.len() as u32 > chunk.used {
            return Err(RegionError::OutOfBounds(slot));
        }
        Self::mark_written(chunk, slot, bytes.len(), true)?;
        chunk.data[slot.offset as usize..slot.offset as usize + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    /// Read `n` bytes at `addr`, within one chunk. `None` when the range
    /// runs past the chunk's written data.
    pub fn read(&self, addr: Address, n: u32) -> Result<Option<&[u8]>, RegionError> {
        let region = self.region(addr.region)?;
        let chunk = region
            .chunks
            .get(addr.chunk as usize)
            .ok_or(RegionError::OutOfBounds(addr))?;
        if addr.offset + n > chunk.data_end() {
            return Ok(None);
        }
        Ok(Some(
            &chunk.data[addr.offset as usize..(addr.offset + n) as usize],
        ))
    }

    /// End of readable data in the chunk `addr` points into.
    pub fn data_end(&self, addr: Address) -> Result<u32, RegionError> {
        let region = self.region(addr.region)?;
        let chunk = region
            .chunks
            .get(addr.chunk as usize)
            .ok_or(RegionError::OutOfBounds(addr))?;
        Ok(chunk.data_end())
    }

    /// Byte position of `addr` counting all data bytes of earlier chunks
    /// (redirection records excluded).
    pub fn linear_offset(&self, addr: Address) -> Result<u64, RegionError> {
        let region = self.region(addr.region)?;
        let mut total = 0u64;
        for c in &region.chunks[..addr.chunk as usize] {
            total += c.data_end() as u64;
        }
        Ok(total + addr.offset as u64)
    }

    pub fn incref(&mut self, id: RegionId) -> Result<u32, RegionError> {
        let r = self.region_mut(id)?;
        r.refcount += 1;
        Ok(r.refcount)
    }

    /// Decrement a region's count; at zero the region is freed and every
    /// region in its chunks' outsets is decremented transitively.
    pub fn decref(&mut self, id: RegionId) -> Result<u32, RegionError> {
        let first = {
            let r = self.region_mut(id)?;
            r.refcount -= 1;
            r.refcount
        };
        if first > 0 {
            return Ok(first);
        }
        let mut worklist = vec![id];
        while let Some(rid) = worklist.pop() {
            let r = self.region_mut(rid)?;
            debug_assert_eq!(r.refcount, 0);
            r.freed = true;
            let mut targets = Vec::new();
            for chunk in &mut r.chunks {
                targets.extend(chunk.outset.iter().copied());
                chunk.data = Vec::new();
                chunk.write_map = None;
            }
            for t in targets {
                let tr = self.region_mut(t)?;
                tr.refcount -= 1;
                if tr.refcount == 0 {
                    worklist.push(t);
                }
            }
        }
        Ok(0)
    }

    /// Record that the chunk containing `from` points into region `to`.
    /// Idempotent per chunk; a self-link is a no-op.
    pub fn record_outlink(&mut self, from: Address, to: RegionId) -> Result<(), RegionError> {
        if from.region == to {
            return Ok(());
        }
        self.region(to)?;
        let region = self.region_mut(from.region)?;
        let chunk = region
            .chunks
            .get_mut(from.chunk as usize)
            .ok_or(RegionError::OutOfBounds(from))?;
        if chunk.outset.insert(to) {
            self.incref(to)?;
        }
        Ok(())
    }

    /// Outsets of every chunk of a region, in chunk order.
    pub fn outsets(&self, id: RegionId) -> Result<Vec<BTreeSet<RegionId>>, RegionError> {
        Ok(self.region(id)?.chunks.iter().map(|c| c.outset.clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_region_basics() {
        let mut store = RegionStore::new();
        let r = store.new_region(64).unwrap();
        assert_eq!(store.chunk_sizes(r).unwrap(), vec![64]);
        assert_eq!(store.refcount(r).unwrap(), 1);
        let r2 = store.new_region(64).unwrap();
        assert_ne!(r, r2);
    }

    #[test]
    fn too_small_first_chunk() {
        let mut store = RegionStore::new();
        assert_eq!(
            store.new_region(16).unwrap_err(),
            RegionError::InvalidChunkSize(16)
        );
    }

    #[test]
    fn reserve_within_chunk_is_identity() {
        let mut store = RegionStore::new();
        let r = store.new_region(64).unwrap();
        let addr = store.frontier(r).unwrap();
        assert_eq!(store.reserve(addr, 9).unwrap(), addr);
    }

    #[test]
    fn reserve_crossing_writes_redirection() {
        // Simulation oracle: with a 64-byte chunk and the 9-byte reserve
        // zone, 9-byte appends fit while offset + 9 <= 55, so the frontier
        // walks 0,9,18,27,36,45 and the append at 54 triggers a new chunk.
        let mut store = RegionStore::new();
        let r = store.new_region(64).unwrap();
        let mut addr = store.frontier(r).unwrap();
        for i in 0..6 {
            assert_eq!(addr, Address::new(r, 0, 9 * i));
            addr = store.append(addr, &[7u8; 9]).unwrap();
        }
        assert_eq!(addr, Address::new(r, 0, 54));
        addr = store.append(addr, &[8u8; 9]).unwrap();
        assert_eq!(addr, Address::new(r, 1, 9));
        assert_eq!(store.chunk_sizes(r).unwrap(), vec![64, 128]);
        let (seal, target) = store.redirect_target(Address::new(r, 0, 0)).unwrap().unwrap();
        assert_eq!(seal, 54);
        assert_eq!(target, Address::new(r, 1, 0));
    }

    #[test]
    fn chunks_double_geometrically() {
        let mut store = RegionStore::new();
        let r = store.new_region(64).unwrap();
        let mut addr = store.frontier(r).unwrap();
        for _ in 0..30 {
            addr = store.append(addr, &[1u8; 9]).unwrap();
        }
        let sizes = store.chunk_sizes(r).unwrap();
        assert_eq!(sizes, vec![64, 128, 256]);
    }

    #[test]
    fn decref_frees_and_cascades() {
        let mut store = RegionStore::new();
        let a = store.new_region(64).unwrap();
        let b = store.new_region(64).unwrap();
        let start_a = store.frontier(a).unwrap();
        store.record_outlink(start_a, b).unwrap();
        assert_eq!(store.refcount(b).unwrap(), 2);
        // Idempotent per chunk.
        store.record_outlink(start_a, b).unwrap();
        assert_eq!(store.refcount(b).unwrap(), 2);
        // Self-link: no count change.
        store.record_outlink(start_a, a).unwrap();
        assert_eq!(store.refcount(a).unwrap(), 1);

        assert_eq!(store.decref(b).unwrap(), 1);
        assert!(store.is_alive(b));
        assert_eq!(store.decref(a).unwrap(), 0);
        assert!(!store.is_alive(a));
        assert!(!store.is_alive(b));
        assert_eq!(store.decref(a).unwrap_err(), RegionError::UseAfterFree(a));
    }

    #[test]
    fn write_once_is_enforced() {
        let mut store = RegionStore::new();
        let r = store.new_region(64).unwrap();
        let addr = store.frontier(r).unwrap();
        store.append(addr, &[1, 2, 3]).unwrap();
        // Appending again at the old (stale) frontier is rejected.
        assert_eq!(
            store.append(addr, &[9]).unwrap_err(),
            RegionError::NotAtFrontier(addr)
        );
        // Patching a never-reserved byte is a double write.
        assert!(matches!(
            store.patch(Address::new(r, 0, 1), &[0]).unwrap_err(),
            RegionError::DoubleWrite(_)
        ));
    }

    #[test]
    fn slot_patch_roundtrip() {
        let mut store = RegionStore::new();
        let r = store.new_region(64).unwrap();
        let addr = store.frontier(r).unwrap();
        let (slot, addr) = store.reserve_slot(addr, 8).unwrap();
        store.append(addr, &[0xAA]).unwrap();
        store.patch(slot, &Address::new(r, 0, 42).encode()).unwrap();
        let bytes = store.read(slot, 8).unwrap().unwrap();
        assert_eq!(Address::decode(bytes.try_into().unwrap()), Address::new(r, 0, 42));
        // A second patch of the same slot is a double write.
        assert!(matches!(
            store.patch(slot, &[0; 8]).unwrap_err(),
            RegionError::DoubleWrite(_)
        ));
    }

    #[test]
    fn address_encoding_roundtrips() {
        let a = Address::new(RegionId(0x1234), 0x56, 0x9abcdef0);
        assert_eq!(Address::decode(a.encode()), a);
        // Low 16 bits are the region id.
        assert_eq!(u64::from_le_bytes(a.encode()) & 0xffff, 0x1234);
    }

    #[test]
    fn truncated_read_is_none() {
        let mut store = RegionStore::new();
        let r = store.new_region(64).unwrap();
        let addr = store.frontier(r).unwrap();
        store.append(addr, &[1, 2, 3]).unwrap();
        assert!(store.read(Address::new(r, 0, 0), 3).unwrap().is_some());
        assert!(store.read(Address::new(r, 0, 0), 4).unwrap().is_none());
    }
}
