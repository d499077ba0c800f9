//! Exact nearest-neighbor retrieval over a large store of unit-normalized
//! caption embeddings. The store is a flat f32 blob, memory-mappable so
//! concurrent CLI processes share pages; queries run in f64 and return
//! byte-identical rankings whether scanned naively or in parallel blocks.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use memmap2::Mmap;
use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Float;

/// Entries scanned per parallel work unit. Fixed so that chunk boundaries —
/// and therefore merge order — do not depend on the thread count.
const SCAN_CHUNK: usize = 8192;
/// Queries evaluated together against one cached entry row.
const QUERY_BLOCK: usize = 8;

const DIC1_MAGIC: &str = "DIC1";
const ALIGN: u64 = 16;

#[derive(Debug, Serialize, Deserialize)]
struct DicHeader {
    magic: String,
    count: usize,
    d: usize,
}

enum Backing {
    Owned {
        vectors: Vec<f32>,
        sentences: Vec<String>,
    },
    Mapped {
        map: Mmap,
        vectors_offset: usize,
        table_offset: usize,
        blob_offset: usize,
    },
}

/// Read-only embedding dictionary.
pub struct EmbeddingStore {
    count: usize,
    d: usize,
    backing: Backing,
    /// Pre-normalization norms, available for stores built in this process.
    pub norms_original: Option<Vec<f32>>,
}

/// One ranked retrieval result.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub similarity: f64,
    pub sentence: String,
}

#[derive(Debug, Clone, Default)]
pub struct BuildReport {
    /// Input indices rejected for zero norm.
    pub rejected: Vec<usize>,
}

/// Normalizes and stores embeddings with their sentences. Zero-norm entries
/// are rejected and reported by input index.
pub fn build_store<T: Float>(
    embeddings: ArrayView2<'_, T>,
    sentences: &[String],
) -> Result<(EmbeddingStore, BuildReport)> {
    let (k, d) = embeddings.dim();
    if k == 0 {
        return Err(Error::validation("store needs >= 1 entry"));
    }
    if sentences.len() != k {
        return Err(Error::DimensionMismatch {
            context: "store sentences vs embeddings",
            left: sentences.len(),
            right: k,
        });
    }
    if !embeddings.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("store embeddings".into()));
    }

    let mut vectors = Vec::with_capacity(k * d);
    let mut kept_sentences = Vec::with_capacity(k);
    let mut norms = Vec::with_capacity(k);
    let mut report = BuildReport::default();
    for (i, row) in embeddings.rows().into_iter().enumerate() {
        let norm = row.iter().fold(0.0f64, |acc, v| {
            let x = v.as_f64();
            acc + x * x
        });
        let norm = norm.sqrt();
        if norm == 0.0 {
            report.rejected.push(i);
            continue;
        }
        for v in row {
            vectors.push((v.as_f64() / norm) as f32);
        }
        kept_sentences.push(sentences[i].clone());
        norms.push(norm as f32);
    }
    if kept_sentences.is_empty() {
        return Err(Error::validation("every store entry had zero norm"));
    }
    let count = kept_sentences.len();
    Ok((
        EmbeddingStore {
            count,
            d,
            backing: Backing::Owned {
                vectors,
                sentences: kept_sentences,
            },
            norms_original: Some(norms),
        },
        report,
    ))
}

impl EmbeddingStore {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        match &self.backing {
            Backing::Owned { vectors, .. } => &vectors[i * self.d..(i + 1) * self.d],
            Backing::Mapped {
                map,
                vectors_offset,
                ..
            } => {
                let start = vectors_offset + i * self.d * 4;
                let bytes = &map[start..start + self.d * 4];
                // alignment checked at open; layout is plain little-endian f32
                unsafe {
                    std::slice::from_raw_parts(bytes.as_ptr() as *const f32, self.d)
                }
            }
        }
    }

    pub fn sentence(&self, i: usize) -> Result<String> {
        match &self.backing {
            Backing::Owned { sentences, .. } => Ok(sentences[i].clone()),
            Backing::Mapped {
                map,
                table_offset,
                blob_offset,
                ..
            } => {
                let mut off_bytes = &map[table_offset + i * 8..table_offset + (i + 1) * 8];
                let rel = off_bytes.read_u64::<LittleEndian>()? as usize;
                let mut len_bytes = &map[blob_offset + rel..blob_offset + rel + 4];
                let len = len_bytes.read_u32::<LittleEndian>()? as usize;
                let raw = &map[blob_offset + rel + 4..blob_offset + rel + 4 + len];
                String::from_utf8(raw.to_vec())
                    .map_err(|e| Error::validation(format!("sentence {i} not utf-8: {e}")))
            }
        }
    }

    /// Maximum deviation of any stored norm from 1.
    pub fn max_norm_error(&self) -> f64 {
        (0..self.count)
            .map(|i| {
                let n = self
                    .vector(i)
                    .iter()
                    .fold(0.0f64, |acc, &v| acc + v as f64 * v as f64)
                    .sqrt();
                (n - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Exact top-k by cosine similarity, descending; ties break toward the
    /// lower store index.
    pub fn nearest(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        let hits = self.batch_nearest_rows(&[query], k)?;
        Ok(hits.into_iter().next().unwrap())
    }

    /// Per-query ranked lists, identical to calling [`nearest`] per row.
    pub fn batch_nearest(&self, queries: ArrayView2<'_, f64>, k: usize) -> Result<Vec<Vec<Hit>>> {
        let rows: Vec<Vec<f64>> = queries.rows().into_iter().map(|r| r.to_vec()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        self.batch_nearest_rows(&refs, k)
    }

    fn batch_nearest_rows(&self, queries: &[&[f64]], k: usize) -> Result<Vec<Vec<Hit>>> {
        let k = k.min(self.count);
        if k == 0 {
            return Err(Error::validation("top-k must be >= 1"));
        }
        let mut normalized = Vec::with_capacity(queries.len());
        for (qi, q) in queries.iter().enumerate() {
            if q.len() != self.d {
                return Err(Error::DimensionMismatch {
                    context: "query dimension vs store",
                    left: q.len(),
                    right: self.d,
                });
            }
            if !q.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("query {qi}")));
            }
            let norm = q.iter().fold(0.0f64, |acc, v| acc + v * v).sqrt();
            if norm == 0.0 {
                return Err(Error::validation(format!("query {qi} has zero norm")));
            }
            normalized.push(q.iter().map(|v| v / norm).collect::<Vec<f64>>());
        }

        let n_chunks = self.count.div_ceil(SCAN_CHUNK);
        // per chunk: per query local top-k; chunks merge in index order
        let partials: Vec<Vec<Vec<(f64, u32)>>> = (0..n_chunks)
            .into_par_iter()
            .map(|chunk| {
                let start = chunk * SCAN_CHUNK;
                let end = (start + SCAN_CHUNK).min(self.count);
                let mut local: Vec<Vec<(f64, u32)>> =
                    vec![Vec::with_capacity(k + 1); normalized.len()];
                let mut entry64 = vec![0.0f64; self.d];
                for i in start..end {
                    let row = self.vector(i);
                    for (e, &v) in entry64.iter_mut().zip(row) {
                        *e = v as f64;
                    }
                    for qb in (0..normalized.len()).step_by(QUERY_BLOCK) {
                        for q in qb..(qb + QUERY_BLOCK).min(normalized.len()) {
                            let sim = dot_fixed(&normalized[q], &entry64);
                            push_topk(&mut local[q], k, sim, i as u32);
                        }
                    }
                }
                local
            })
            .collect();

        let mut out = Vec::with_capacity(normalized.len());
        for q in 0..normalized.len() {
            let mut merged: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
            for chunk in &partials {
                for &(sim, idx) in &chunk[q] {
                    push_topk(&mut merged, k, sim, idx);
                }
            }
            let mut hits = Vec::with_capacity(merged.len());
            for (sim, idx) in merged {
                hits.push(Hit {
                    index: idx as usize,
                    similarity: sim,
                    sentence: self.sentence(idx as usize)?,
                });
            }
            out.push(hits);
        }
        Ok(out)
    }

    /// Reference scan: every similarity, full sort, first k. Used as the
    /// exactness oracle for the blocked path.
    pub fn nearest_naive(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        let k = k.min(self.count);
        if k == 0 {
            return Err(Error::validation("top-k must be >= 1"));
        }
        if query.len() != self.d {
            return Err(Error::DimensionMismatch {
                context: "query dimension vs store",
                left: query.len(),
                right: self.d,
            });
        }
        let norm = query.iter().fold(0.0f64, |acc, v| acc + v * v).sqrt();
        if norm == 0.0 {
            return Err(Error::validation("query has zero norm"));
        }
        let qn: Vec<f64> = query.iter().map(|v| v / norm).collect();
        let mut sims: Vec<(f64, u32)> = (0..self.count)
            .map(|i| {
                let row = self.vector(i);
                let mut acc = 0.0f64;
                for (q, &v) in qn.iter().zip(row) {
                    acc += q * (v as f64);
                }
                (acc, i as u32)
            })
            .collect();
        sims.sort_by(|a, b| rank_order(*a, *b));
        sims.truncate(k);
        sims.into_iter()
            .map(|(sim, idx)| {
                Ok(Hit {
                    index: idx as usize,
                    similarity: sim,
                    sentence: self.sentence(idx as usize)?,
                })
            })
            .collect()
    }

    /// Writes the DIC1 file: JSON header line, padding to a 16-byte
    /// boundary, normalized f32 vectors, a u64 offset table, and the
    /// length-prefixed UTF-8 sentence blob.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = serde_json::to_string(&DicHeader {
            magic: DIC1_MAGIC.into(),
            count: self.count,
            d: self.d,
        })?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        let mut pos = header.len() as u64 + 1;
        while pos % ALIGN != 0 {
            w.write_all(b" ")?;
            pos += 1;
        }
        for i in 0..self.count {
            for &v in self.vector(i) {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        let mut offsets = Vec::with_capacity(self.count);
        let mut blob = Vec::new();
        for i in 0..self.count {
            offsets.push(blob.len() as u64);
            let s = self.sentence(i)?;
            blob.write_u32::<LittleEndian>(s.len() as u32)?;
            blob.extend_from_slice(s.as_bytes());
        }
        for off in offsets {
            w.write_u64::<LittleEndian>(off)?;
        }
        w.write_all(&blob)?;
        w.flush()?;
        Ok(())
    }

    /// Memory-maps a DIC1 file read-only.
    pub fn open(path: &Path) -> Result<EmbeddingStore> {
        if cfg!(target_endian = "big") {
            return Err(Error::validation(
                "DIC1 stores are little-endian; this platform is big-endian",
            ));
        }
        let file = File::open(path)?;
        let map = unsafe { Mmap::map(&file)? };
        let newline = map
            .iter()
            .take(65536)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path.display().to_string(), "missing header line"))?;
        let header: DicHeader = serde_json::from_slice(&map[..newline])?;
        if header.magic != DIC1_MAGIC {
            return Err(Error::format(
                path.display().to_string(),
                format!("bad magic '{}'", header.magic),
            ));
        }
        let mut vectors_offset = newline + 1;
        while vectors_offset as u64 % ALIGN != 0 {
            vectors_offset += 1;
        }
        let table_offset = vectors_offset + header.count * header.d * 4;
        let blob_offset = table_offset + header.count * 8;
        if map.len() < blob_offset {
            return Err(Error::format(
                path.display().to_string(),
                format!("file truncated: {} < {blob_offset}", map.len()),
            ));
        }
        if (map.as_ptr() as usize + vectors_offset) % 4 != 0 {
            return Err(Error::format(
                path.display().to_string(),
                "vector region is not 4-byte aligned",
            ));
        }
        Ok(EmbeddingStore {
            count: header.count,
            d: header.d,
            backing: Backing::Mapped {
                map,
                vectors_offset,
                table_offset,
                blob_offset,
            },
            norms_original: None,
        })
    }
}

/// Streaming DIC1 writer for stores too large to assemble in memory.
/// Vectors are written as they arrive (normalized); sentences are buffered
/// and flushed by `finish`.
pub struct DicWriter {
    w: BufWriter<File>,
    d: usize,
    declared: usize,
    written: usize,
    sentences: Vec<String>,
}

impl DicWriter {
    pub fn create(path: &Path, count: usize, d: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::validation("store needs >= 1 entry"));
        }
        let mut w = BufWriter::new(
            OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(path)?,
        );
        let header = serde_json::to_string(&DicHeader {
            magic: DIC1_MAGIC.into(),
            count,
            d,
        })?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        let mut pos = header.len() as u64 + 1;
        while pos % ALIGN != 0 {
            w.write_all(b" ")?;
            pos += 1;
        }
        Ok(DicWriter {
            w,
            d,
            declared: count,
            written: 0,
            sentences: Vec::with_capacity(count),
        })
    }

    /// Normalizes and appends one entry. Zero-norm entries are an error here
    /// (the caller declared the final count already).
    pub fn push(&mut self, embedding: &[f64], sentence: &str) -> Result<()> {
        if embedding.len() != self.d {
            return Err(Error::DimensionMismatch {
                context: "streamed entry dimension",
                left: embedding.len(),
                right: self.d,
            });
        }
        let norm = embedding.iter().fold(0.0f64, |acc, v| acc + v * v).sqrt();
        if norm == 0.0 {
            return Err(Error::validation(format!(
                "zero-norm entry at streamed index {}",
                self.written
            )));
        }
        for v in embedding {
            self.w.write_f32::<LittleEndian>((v / norm) as f32)?;
        }
        self.sentences.push(sentence.to_string());
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.declared {
            return Err(Error::validation(format!(
                "store declared {} entries, wrote {}",
                self.declared, self.written
            )));
        }
        let mut blob = Vec::new();
        let mut offsets = Vec::with_capacity(self.sentences.len());
        for s in &self.sentences {
            offsets.push(blob.len() as u64);
            blob.write_u32::<LittleEndian>(s.len() as u32)?;
            blob.extend_from_slice(s.as_bytes());
        }
        for off in offsets {
            self.w.write_u64::<LittleEndian>(off)?;
        }
        self.w.write_all(&blob)?;
        self.w.flush()?;
        Ok(())
    }
}

/// Reads just the (count, d) of a DIC1 file.
pub fn store_info(path: &Path) -> Result<(usize, usize)> {
    let mut f = File::open(path)?;
    let mut buf = vec![0u8; 65536];
    let n = f.read(&mut buf)?;
    let newline = buf[..n]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path.display().to_string(), "missing header line"))?;
    let header: DicHeader = serde_json::from_slice(&buf[..newline])?;
    f.seek(SeekFrom::Start(0))?;
    Ok((header.count, header.d))
}

#[inline]
fn dot_fixed(q: &[f64], entry: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (a, b) in q.iter().zip(entry) {
        acc += a * b;
    }
    acc
}

fn rank_order(a: (f64, u32), b: (f64, u32)) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .expect("similarities are finite")
        .then(a.1.cmp(&b.1))
}

fn push_topk(list: &mut Vec<(f64, u32)>, k: usize, sim: f64, idx: u32) {
    let cand = (sim, idx);
    if list.len() == k {
        if rank_order(*list.last().unwrap(), cand) != std::cmp::Ordering::Greater {
            return;
        }
        list.pop();
    }
    let pos = list.partition_point(|&e| rank_order(e, cand) != std::cmp::Ordering::Greater);
    list.insert(pos, cand);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    fn random_store(count: usize, d: usize, seed: u64) -> EmbeddingStore {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let m = Array2::from_shape_fn((count, d), |_| rng.sample::<f64, _>(StandardNormal));
        let sentences: Vec<String> = (0..count).map(|i| format!("sentence {i}")).collect();
        build_store(m.view(), &sentences).unwrap().0
    }

    #[test]
    fn build_normalizes() {
        let e = array![[3.0f64, 4.0]];
        let (store, report) = build_store(e.view(), &["only".to_string()]).unwrap();
        assert!(report.rejected.is_empty());
        assert_eq!(store.vector(0), &[0.6f32, 0.8]);
        assert_eq!(store.norms_original.as_ref().unwrap()[0], 5.0);
    }

    #[test]
    fn build_rejects_zero_norm() {
        let e = array![[0.0f64, 0.0], [1.0, 0.0]];
        let (store, report) =
            build_store(e.view(), &["zero".to_string(), "unit".to_string()]).unwrap();
        assert_eq!(report.rejected, vec![0]);
        assert_eq!(store.count(), 1);
        assert_eq!(store.sentence(0).unwrap(), "unit");
    }

    #[test]
    fn build_norm_sweep() {
        let store = random_store(1000, 16, 7);
        assert!(store.max_norm_error() <= 1e-6);
    }

    #[test]
    fn self_retrieval_rank_one() {
        let store = random_store(200, 12, 9);
        let q: Vec<f64> = store.vector(37).iter().map(|&v| v as f64).collect();
        let hits = store.nearest(&q, 3).unwrap();
        assert_eq!(hits[0].index, 37);
        assert!((hits[0].similarity - 1.0).abs() < 1e-6);
        assert_eq!(hits[0].sentence, "sentence 37");
    }

    #[test]
    fn k_larger_than_store() {
        let store = random_store(5, 8, 11);
        let q: Vec<f64> = store.vector(0).iter().map(|&v| v as f64).collect();
        let hits = store.nearest(&q, 50).unwrap();
        assert_eq!(hits.len(), 5);
    }

    #[test]
    fn zero_query_rejected() {
        let store = random_store(5, 8, 13);
        assert!(store.nearest(&vec![0.0; 8], 1).is_err());
    }

    #[test]
    fn scale_invariance_of_queries() {
        let store = random_store(300, 10, 15);
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let q: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
        let scaled: Vec<f64> = q.iter().map(|v| v * 37.5).collect();
        let a = store.nearest(&q, 7).unwrap();
        let b = store.nearest(&scaled, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.index, y.index);
        }
    }

    #[test]
    fn blocked_matches_naive_exactly() {
        let store = random_store(10_000, 24, 21);
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        for _ in 0..100 {
            let q: Vec<f64> = (0..24).map(|_| rng.sample(StandardNormal)).collect();
            let fast = store.nearest(&q, 5).unwrap();
            let slow = store.nearest_naive(&q, 5).unwrap();
            assert_eq!(fast.len(), slow.len());
            for (f, s) in fast.iter().zip(&slow) {
                assert_eq!(f.index, s.index);
                assert_eq!(f.similarity.to_bits(), s.similarity.to_bits());
            }
        }
    }

    #[test]
    fn batch_equals_per_query() {
        let store = random_store(2000, 16, 31);
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let queries = Array2::from_shape_fn((9, 16), |_| rng.sample::<f64, _>(StandardNormal));
        let batched = store.batch_nearest(queries.view(), 4).unwrap();
        for (qi, hits) in batched.iter().enumerate() {
            let single = store.nearest(&queries.row(qi).to_vec(), 4).unwrap();
            assert_eq!(hits, &single);
        }
    }

    #[test]
    fn duplicate_entries_tie_break_by_index() {
        let e = array![[1.0f64, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let s: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
        let (store, _) = build_store(e.view(), &s).unwrap();
        let hits = store.nearest(&[1.0, 0.0], 3).unwrap();
        assert_eq!(hits[0].index, 0);
        assert_eq!(hits[1].index, 2);
        assert_eq!(hits[2].index, 1);
    }

    #[test]
    fn file_roundtrip_preserves_results() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.dic1");
        let store = random_store(500, 12, 41);
        store.write(&path).unwrap();
        let mapped = EmbeddingStore::open(&path).unwrap();
        assert_eq!(mapped.count(), 500);
        assert_eq!(mapped.dim(), 12);
        assert_eq!(store_info(&path).unwrap(), (500, 12));

        let mut rng = ChaCha20Rng::seed_from_u64(42);
        for _ in 0..10 {
            let q: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
            let a = store.nearest(&q, 5).unwrap();
            let b = mapped.nearest(&q, 5).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(mapped.sentence(123).unwrap(), "sentence 123");
    }

    #[test]
    fn streaming_writer_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.dic1");
        let p2 = dir.path().join("b.dic1");
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let m = Array2::from_shape_fn((40, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let sentences: Vec<String> = (0..40).map(|i| format!("row {i}")).collect();
        let (store, _) = build_store(m.view(), &sentences).unwrap();
        store.write(&p1).unwrap();

        let mut w = DicWriter::create(&p2, 40, 6).unwrap();
        for i in 0..40 {
            w.push(&m.row(i).to_vec(), &sentences[i]).unwrap();
        }
        w.finish().unwrap();

        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
