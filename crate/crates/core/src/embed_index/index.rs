use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::{cosine, EmbedIndexError, EmbeddingVector};
use crate::fsutil::write_atomic;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    pub case_id: String,
    pub doc_id: String,
    pub ordinal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub vector: EmbeddingVector,
    pub payload: Payload,
    /// Chunk text, returned with hits.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk_id: String,
    pub score: f64,
    pub text: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub dim: usize,
    pub provider_id: String,
    pub entry_count: usize,
}

const MAGIC: &[u8; 8] = b"MDTBIDX1";

/// Exact (brute-force) cosine index. Searches share a read lock; an upsert
/// batch is applied under the write lock, so searches never see half a batch.
pub struct VectorIndex {
    dim: usize,
    provider_id: String,
    entries: RwLock<BTreeMap<String, IndexEntry>>,
}

impl VectorIndex {
    pub fn new(dim: usize, provider_id: impl Into<String>) -> Self {
        Self {
            dim,
            provider_id: provider_id.into(),
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("index lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, chunk_id: &str) -> Option<IndexEntry> {
        self.entries.read().expect("index lock").get(chunk_id).cloned()
    }

    pub fn clear(&self) {
        self.entries.write().expect("index lock").clear();
    }

    /// Inserts or replaces entries by chunk id; returns how many were written.
    pub fn upsert(&self, entries: Vec<IndexEntry>) -> Result<usize, EmbedIndexError> {
        if let Some(bad) = entries.iter().find(|e| e.vector.dim() != self.dim) {
            return Err(EmbedIndexError::DimMismatch {
                expected: self.dim,
                actual: bad.vector.dim(),
            });
        }
        let n = entries.len();
        let mut map = self.entries.write().expect("index lock");
        for e in entries {
            map.insert(e.chunk_id.clone(), e);
        }
        Ok(n)
    }

    /// Swaps the whole content in one step (used by rebuilds).
    pub fn replace_all(&self, entries: Vec<IndexEntry>) -> Result<usize, EmbedIndexError> {
        if let Some(bad) = entries.iter().find(|e| e.vector.dim() != self.dim) {
            return Err(EmbedIndexError::DimMismatch {
                expected: self.dim,
                actual: bad.vector.dim(),
            });
        }
        let fresh: BTreeMap<String, IndexEntry> = entries.into_iter().map(|e| (e.chunk_id.clone(), e)).collect();
        let n = fresh.len();
        *self.entries.write().expect("index lock") = fresh;
        Ok(n)
    }

    /// Exact top-`k` by cosine over entries of `case_filter` (all when
    /// `None`), ordered by descending score then ascending chunk id. Zero
    /// vectors are never returned, and a zero query yields no hits.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        case_filter: Option<&str>,
    ) -> Result<Vec<RetrievalHit>, EmbedIndexError> {
        if query.dim() != self.dim {
            return Err(EmbedIndexError::DimMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        if k == 0 || query.is_zero() {
            return Ok(Vec::new());
        }
        let map = self.entries.read().expect("index lock");
        let mut scored = Vec::new();
        for e in map.values() {
            if case_filter.is_some_and(|c| c != e.payload.case_id) || e.vector.is_zero() {
                continue;
            }
            scored.push((cosine(query, &e.vector)?, e));
        }
        scored.sort_by(|(sa, ea), (sb, eb)| sb.total_cmp(sa).then_with(|| ea.chunk_id.cmp(&eb.chunk_id)));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(score, e)| RetrievalHit {
                chunk_id: e.chunk_id.clone(),
                score,
                text: e.text.clone(),
                payload: e.payload.clone(),
            })
            .collect())
    }

    pub fn meta(&self) -> IndexMeta {
        IndexMeta {
            dim: self.dim,
            provider_id: self.provider_id.clone(),
            entry_count: self.len(),
        }
    }

    /// Writes `index.bin` and `index.meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EmbedIndexError> {
        let map = self.entries.read().expect("index lock");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(map.len() as u64).to_le_bytes());
        for e in map.values() {
            put_str(&mut buf, &e.chunk_id);
            put_str(&mut buf, &e.payload.case_id);
            put_str(&mut buf, &e.payload.doc_id);
            buf.extend_from_slice(&(e.payload.ordinal as u64).to_le_bytes());
            put_str(&mut buf, &e.text);
            for v in e.vector.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = IndexMeta {
            dim: self.dim,
            provider_id: self.provider_id.clone(),
            entry_count: map.len(),
        };
        drop(map);
        let bin = dir.join("index.bin");
        write_atomic(&bin, &buf).map_err(|source| EmbedIndexError::Io { path: bin, source })?;
        let meta_path = dir.join("index.meta.json");
        let mut meta_bytes = serde_json::to_vec_pretty(&meta).expect("meta serializes");
        meta_bytes.push(b'\n');
        write_atomic(&meta_path, &meta_bytes).map_err(|source| EmbedIndexError::Io { path: meta_path, source })
    }

    /// Loads an index saved by [`save`](Self::save); `Ok(None)` when `dir`
    /// holds no index yet.
    pub fn load(dir: &Path) -> Result<Option<Self>, EmbedIndexError> {
        let meta_path = dir.join("index.meta.json");
        let meta_bytes = match std::fs::read(&meta_path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(EmbedIndexError::Io { path: meta_path, source }),
        };
        let meta: IndexMeta = serde_json::from_slice(&meta_bytes).map_err(|e| EmbedIndexError::Corrupt {
            path: meta_path.clone(),
            detail: e.to_string(),
        })?;
        let bin = dir.join("index.bin");
        let bytes = std::fs::read(&bin).map_err(|source| EmbedIndexError::Io { path: bin.clone(), source })?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            path: bin.clone(),
        };
        if r.take(8)? != MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        if dim != meta.dim || count != meta.entry_count {
            return Err(r.corrupt("header disagrees with index.meta.json"));
        }
        let index = Self::new(dim, meta.provider_id);
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let chunk_id = r.string()?;
            let case_id = r.string()?;
            let doc_id = r.string()?;
            let ordinal = r.u64()? as usize;
            let text = r.string()?;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            entries.push(IndexEntry {
                chunk_id,
                vector: EmbeddingVector::new(values),
                payload: Payload { case_id, doc_id, ordinal },
                text,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt("trailing bytes"));
        }
        index.upsert(entries)?;
        Ok(Some(index))
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: &str) -> EmbedIndexError {
        EmbedIndexError::Corrupt {
            path: self.path.clone(),
            detail: format!("{detail} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbedIndexError> {
        if self.pos + n > self.bytes.len() {
            return Err(self.corrupt("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EmbedIndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, EmbedIndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, EmbedIndexError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt("invalid utf-8"))
    }
}
