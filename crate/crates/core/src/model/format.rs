//! `HALM` weight file: little-endian header, a fixed-width group index, then
//! the f32 payload. Any single record can be read with one seek.
//!
//! ```text
//! magic    "HALM"
//! version  u32
//! header   L, D, N_h, N_kv, N_g, N_v, group_size: u32; seed: u64; dtype: u32 (0 = f32)
//! count    u32
//! index    count x { layer: u32, kind: u8, group: u32, offset: u64, length: u64 }
//! payload  records back to back; offset is absolute, length in bytes
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use super::weights::{canonical_keys, record_len, GroupKey, RecordKind, WeightStore};
use super::ModelSpec;
use crate::{Error, Result};

pub const HALM_MAGIC: &[u8; 4] = b"HALM";
pub const HALM_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;
const HEADER_LEN: usize = 4 + 4 + 7 * 4 + 8 + 4 + 4;
const INDEX_ENTRY_LEN: usize = 4 + 1 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HalmHeader {
    pub version: u32,
    pub spec: ModelSpec,
    pub record_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HalmIndexEntry {
    pub key: GroupKey,
    pub offset: u64,
    pub length: u64,
}

pub(crate) fn encode(store: &WeightStore) -> Vec<u8> {
    let spec = store.spec();
    let keys = canonical_keys(spec);
    let payload_start = HEADER_LEN + keys.len() * INDEX_ENTRY_LEN;
    let payload_len: usize = keys.iter().map(|k| record_len(spec, k.kind) * 4).sum();
    let mut out = Vec::with_capacity(payload_start + payload_len);

    out.extend_from_slice(HALM_MAGIC);
    out.extend_from_slice(&HALM_VERSION.to_le_bytes());
    for v in [
        spec.num_layers,
        spec.hidden_dim,
        spec.num_heads,
        spec.num_kv_heads,
        spec.mlp_groups,
        spec.vocab_groups,
        spec.group_size,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&spec.seed.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(keys.len() as u32).to_le_bytes());

    let mut offset = payload_start as u64;
    for key in &keys {
        let length = (record_len(spec, key.kind) * 4) as u64;
        out.extend_from_slice(&(key.layer as u32).to_le_bytes());
        out.push(key.kind.as_u8());
        out.extend_from_slice(&(key.group as u32).to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&length.to_le_bytes());
        offset += length;
    }
    for key in &keys {
        let rec = store.get(*key).expect("store holds every canonical key");
        for w in rec {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse_header(buf: &[u8]) -> Result<HalmHeader> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != HALM_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != HALM_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = c.u32()? as usize;
    }
    let seed = c.u64()?;
    let dtype = c.u32()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {dtype}")));
    }
    let record_count = c.u32()?;
    let spec = ModelSpec {
        num_layers: dims[0],
        hidden_dim: dims[1],
        num_heads: dims[2],
        num_kv_heads: dims[3],
        mlp_groups: dims[4],
        vocab_groups: dims[5],
        group_size: dims[6],
        seed,
    };
    spec.validate()?;
    Ok(HalmHeader {
        version,
        spec,
        record_count,
    })
}

fn parse_index(buf: &[u8], header: &HalmHeader) -> Result<Vec<HalmIndexEntry>> {
    let mut c = Cursor { buf, pos: 0 };
    let mut entries = Vec::with_capacity(header.record_count as usize);
    for _ in 0..header.record_count {
        let layer = c.u32()? as usize;
        let kind_raw = c.u8()?;
        let kind = RecordKind::from_u8(kind_raw)
            .ok_or_else(|| Error::Format(format!("unknown record kind {kind_raw}")))?;
        let group = c.u32()? as usize;
        let offset = c.u64()?;
        let length = c.u64()?;
        entries.push(HalmIndexEntry {
            key: GroupKey { layer, kind, group },
            offset,
            length,
        });
    }
    validate_index(&header.spec, &entries)?;
    Ok(entries)
}

/// Every expected key present once with the right length; ranges tile the
/// payload with no gaps or overlaps.
fn validate_index(spec: &ModelSpec, entries: &[HalmIndexEntry]) -> Result<()> {
    let expected = canonical_keys(spec);
    if entries.len() != expected.len() {
        return Err(Error::Format(format!(
            "index has {} records, expected {}",
            entries.len(),
            expected.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for e in entries {
        if !seen.insert(e.key) {
            return Err(Error::Format(format!("duplicate record {:?}", e.key)));
        }
        let want = (record_len(spec, e.key.kind) * 4) as u64;
        if e.length != want {
            return Err(Error::Format(format!(
                "record {:?} has length {} (expected {want})",
                e.key, e.length
            )));
        }
    }
    if expected.iter().any(|k| !seen.contains(k)) {
        return Err(Error::Format("index is missing records".into()));
    }
    let payload_start = (HEADER_LEN + entries.len() * INDEX_ENTRY_LEN) as u64;
    let mut ranges: Vec<(u64, u64)> = entries.iter().map(|e| (e.offset, e.length)).collect();
    ranges.sort_unstable();
    let mut cursor = payload_start;
    for (off, len) in ranges {
        if off != cursor {
            return Err(Error::Format(format!(
                "record ranges not contiguous at offset {off} (expected {cursor})"
            )));
        }
        cursor += len;
    }
    Ok(())
}

fn decode_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect()
}

pub(crate) fn decode(bytes: &[u8]) -> Result<WeightStore> {
    let header = parse_header(bytes)?;
    let index_len = header.record_count as usize * INDEX_ENTRY_LEN;
    let index_bytes = bytes
        .get(HEADER_LEN..HEADER_LEN + index_len)
        .ok_or_else(|| Error::Format("truncated index".into()))?;
    let entries = parse_index(index_bytes, &header)?;
    let payload_end = entries.iter().map(|e| e.offset + e.length).max().unwrap_or(0);
    if payload_end as usize != bytes.len() {
        return Err(Error::Format(format!(
            "payload ends at {payload_end} but file has {} bytes",
            bytes.len()
        )));
    }
    let mut records = BTreeMap::new();
    for e in entries {
        let raw = &bytes[e.offset as usize..(e.offset + e.length) as usize];
        records.insert(e.key, decode_f32s(raw));
    }
    Ok(WeightStore::from_records(header.spec, records))
}

/// Reads the header and index eagerly, records on demand.
#[derive(Debug)]
pub struct HalmReader {
    file: File,
    header: HalmHeader,
    index: BTreeMap<GroupKey, HalmIndexEntry>,
}

impl HalmReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = File::open(path)?;
        let file_len = file.metadata()?.len();
        let mut head = vec![0u8; HEADER_LEN];
        file.read_exact(&mut head)
            .map_err(|_| Error::Format("truncated header".into()))?;
        let header = parse_header(&head)?;
        let mut idx = vec![0u8; header.record_count as usize * INDEX_ENTRY_LEN];
        file.read_exact(&mut idx)
            .map_err(|_| Error::Format("truncated index".into()))?;
        let entries = parse_index(&idx, &header)?;
        let payload_end = entries.iter().map(|e| e.offset + e.length).max().unwrap_or(0);
        if payload_end != file_len {
            return Err(Error::Format(format!(
                "payload ends at {payload_end} but file has {file_len} bytes"
            )));
        }
        Ok(Self {
            file,
            header,
            index: entries.into_iter().map(|e| (e.key, e)).collect(),
        })
    }

    pub fn header(&self) -> &HalmHeader {
        &self.header
    }

    pub fn entry(&self, key: GroupKey) -> Option<&HalmIndexEntry> {
        self.index.get(&key)
    }

    /// One seek, one read.
    pub fn read_record(&mut self, key: GroupKey) -> Result<Vec<f32>> {
        let e = *self
            .index
            .get(&key)
            .ok_or_else(|| Error::Format(format!("no record for {key:?}")))?;
        self.file.seek(SeekFrom::Start(e.offset))?;
        let mut buf = vec![0u8; e.length as usize];
        self.file.read_exact(&mut buf)?;
        Ok(decode_f32s(&buf))
    }

    pub fn load_all(mut self) -> Result<WeightStore> {
        let keys: Vec<GroupKey> = self.index.keys().copied().collect();
        let mut records = BTreeMap::new();
        for k in keys {
            let r = self.read_record(k)?;
            records.insert(k, r);
        }
        Ok(WeightStore::from_records(self.header.spec, records))
    }
}
