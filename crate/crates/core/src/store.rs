//! Embedding files: a little-endian `FASE` container of binary32 rows plus a
//! `.meta.jsonl` sidecar holding one JSON object per row.
//!
//! Layout: magic `FASE`, `u32` version (1), `u32` dim, `u64` count, then
//! `count × dim` `f32` values row-major. The prompt checkpoint reuses the
//! container with one extra `u32` (context length) before the payload.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FASE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Spoof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMeta {
    pub id: String,
    pub label: Label,
    pub attack_type: Option<String>,
    pub domain: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub vector: Vec<f32>,
    pub meta: RecordMeta,
}

/// Rows of fixed-dimension vectors with per-row metadata. Ids are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    rows: Vec<Record>,
    ids: HashSet<String>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ZeroDim);
        }
        Ok(EmbeddingStore {
            dim,
            rows: Vec::new(),
            ids: HashSet::new(),
        })
    }

    pub fn from_records(dim: usize, records: impl IntoIterator<Item = Record>) -> Result<Self> {
        let mut store = Self::new(dim)?;
        for r in records {
            store.push(r)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        Error::check_dim(self.dim, record.vector.len())?;
        if record.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding row"));
        }
        if !self.ids.insert(record.meta.id.clone()) {
            return Err(Error::DuplicateId(record.meta.id));
        }
        self.rows.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Record] {
        &self.rows
    }

    /// Keeps rows matching `pred`, preserving order.
    pub fn filtered(&self, mut pred: impl FnMut(&Record) -> bool) -> EmbeddingStore {
        let rows: Vec<Record> = self.rows.iter().filter(|r| pred(r)).cloned().collect();
        let ids = rows.iter().map(|r| r.meta.id.clone()).collect();
        EmbeddingStore {
            dim: self.dim,
            rows,
            ids,
        }
    }

    /// Appends every row of `other`; fails on dimension or id clashes.
    pub fn extend(&mut self, other: EmbeddingStore) -> Result<()> {
        Error::check_dim(self.dim, other.dim)?;
        for r in other.rows {
            self.push(r)?;
        }
        Ok(())
    }

    /// Rows widened to `f64`.
    pub fn vectors_f64(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.vector.iter().map(|&x| f64::from(x)).collect())
            .collect()
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

/// Header fields of a container file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub dim: u32,
    pub count: u64,
}

pub(crate) fn encode_container(
    dim: usize,
    count: usize,
    extra: Option<u32>,
    values: impl IntoIterator<Item = f32>,
) -> Vec<u8> {
    let extra_len = if extra.is_some() { 4 } else { 0 };
    let mut buf = Vec::with_capacity(HEADER_LEN + extra_len + dim * count * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    if let Some(x) = extra {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parses a container, returning the header, the optional extra field and the
/// payload.
pub(crate) fn decode_container(
    bytes: &[u8],
    with_extra: bool,
) -> Result<(Header, Option<u32>, Vec<f32>)> {
    let extra_len = if with_extra { 4 } else { 0 };
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("length checked");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN + extra_len {
        return Err(Error::Truncated {
            expected: (HEADER_LEN + extra_len) as u64,
            found: bytes.len() as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("in bounds"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let dim = u32_at(8);
    if dim == 0 {
        return Err(Error::ZeroDim);
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("in bounds"));
    let extra = with_extra.then(|| u32_at(HEADER_LEN));

    let payload = &bytes[HEADER_LEN + extra_len..];
    let expected = u64::from(dim)
        .checked_mul(count)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Metadata(format!("dim {dim} × count {count} overflows")))?;
    let found = payload.len() as u64;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    if found > expected {
        return Err(Error::TrailingData(found - expected));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Ok((Header { dim, count }, extra, values))
}

/// Reads only the header of an embedding file.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _, _) = decode_container(&bytes, false)?;
    Ok(header)
}

pub fn write_embeddings(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let bytes = encode_container(
        store.dim,
        store.rows.len(),
        None,
        store.rows.iter().flat_map(|r| r.vector.iter().copied()),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_jsonl(&meta_path(path), store.rows.iter().map(|r| &r.meta))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingStore> {
    read_embeddings_with_meta(path, &meta_path(path))
}

/// Like [`read_embeddings`] with the sidecar at an explicit path.
pub fn read_embeddings_with_meta(path: &Path, meta: &Path) -> Result<EmbeddingStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _, values) = decode_container(&bytes, false)?;
    let metas: Vec<RecordMeta> = read_jsonl(meta)?;
    if metas.len() as u64 != header.count {
        return Err(Error::Metadata(format!(
            "header declares {} rows, sidecar has {}",
            header.count,
            metas.len()
        )));
    }
    let dim = header.dim as usize;
    let records = values
        .chunks_exact(dim)
        .zip(metas)
        .map(|(v, meta)| Record {
            vector: v.to_vec(),
            meta,
        });
    EmbeddingStore::from_records(dim, records)
}

pub(crate) fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::Json {
            path: path.to_owned(),
            line: 0,
            source: e,
        })?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Json {
                path: path.to_owned(),
                line: i + 1,
                source: e,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: &str, label: Label) -> RecordMeta {
        RecordMeta {
            id: id.into(),
            label,
            attack_type: (label == Label::Spoof).then(|| "print".to_string()),
            domain: "d0".into(),
            split: Split::Test,
        }
    }

    fn small_store() -> EmbeddingStore {
        let recs = (0..3).map(|i| Record {
            vector: vec![i as f32, 0.5, -1.25, f32::MIN_POSITIVE],
            meta: meta(&format!("r{i}"), if i == 2 { Label::Spoof } else { Label::Real }),
        });
        EmbeddingStore::from_records(4, recs).unwrap()
    }

    #[test]
    fn round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.fase");
        let store = small_store();
        write_embeddings(&store, &path).unwrap();
        assert_eq!(read_embeddings(&path).unwrap(), store);
        assert_eq!(read_header(&path).unwrap(), Header { dim: 4, count: 3 });

        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"FASE");
        assert_eq!(bytes.len(), 20 + 3 * 4 * 4);
    }

    #[test]
    fn sidecar_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.fase");
        write_embeddings(&small_store(), &path).unwrap();
        let text = fs::read_to_string(meta_path(&path)).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"id":"r0","label":"real","attack_type":null,"domain":"d0","split":"test"}"#
        );
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_container(2, 1, None, [1.0, 2.0]);
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode_container(&bytes, false),
            Err(Error::BadMagic(m)) if &m == b"XXXX"
        ));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_container(2, 1, None, [1.0, 2.0]);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_container(&bytes, false),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn truncated_and_trailing() {
        let bytes = encode_container(2, 2, None, [1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            decode_container(&bytes[..bytes.len() - 1], false),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            decode_container(&bytes[..10], false),
            Err(Error::Truncated { .. })
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            decode_container(&longer, false),
            Err(Error::TrailingData(1))
        ));
    }

    #[test]
    fn zero_dim() {
        let bytes = encode_container(0, 0, None, []);
        assert!(matches!(decode_container(&bytes, false), Err(Error::ZeroDim)));
        assert!(matches!(EmbeddingStore::new(0), Err(Error::ZeroDim)));
    }

    #[test]
    fn duplicate_ids_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.fase");
        fs::write(&path, encode_container(1, 2, None, [1.0, 2.0])).unwrap();
        let m = meta("same", Label::Real);
        write_jsonl(&meta_path(&path), [&m, &m]).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::DuplicateId(id)) if id == "same"));
    }

    #[test]
    fn sidecar_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.fase");
        fs::write(&path, encode_container(1, 2, None, [1.0, 2.0])).unwrap();
        write_jsonl(&meta_path(&path), [&meta("a", Label::Real)]).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::Metadata(_))));
    }

    #[test]
    fn push_checks() {
        let mut s = EmbeddingStore::new(2).unwrap();
        let rec = |id: &str, v: Vec<f32>| Record {
            vector: v,
            meta: meta(id, Label::Real),
        };
        s.push(rec("a", vec![1.0, 2.0])).unwrap();
        assert!(matches!(s.push(rec("a", vec![1.0, 2.0])), Err(Error::DuplicateId(_))));
        assert!(s.push(rec("b", vec![1.0])).is_err());
        assert!(s.push(rec("c", vec![f32::NAN, 1.0])).is_err());
    }
}
