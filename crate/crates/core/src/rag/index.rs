//! Exact nearest-neighbour index and its on-disk form.

use std::io::Write;
use std::path::Path;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{CorpusChunk, Embedder, Embedding, RagError, RetrievalMode, RetrievedSnippet};

pub const INDEX_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PVIX";

#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex<T> {
    chunks: Vec<CorpusChunk>,
    vectors: Vec<Embedding<T>>,
    dimension: usize,
}

#[derive(Serialize, Deserialize)]
struct ChunkFile {
    version: u32,
    dimension: usize,
    chunks: Vec<CorpusChunk>,
}

impl<T: Float> FlatIndex<T> {
    /// Embeds every chunk; chunks without any token are skipped since they
    /// have no direction.
    pub fn build(chunks: Vec<CorpusChunk>, embedder: &dyn Embedder<T>) -> Self {
        let mut kept = Vec::with_capacity(chunks.len());
        let mut vectors = Vec::with_capacity(chunks.len());
        for c in chunks {
            let v = embedder.embed(&c.text);
            if v.is_zero() {
                continue;
            }
            vectors.push(v);
            kept.push(c);
        }
        FlatIndex {
            chunks: kept,
            vectors,
            dimension: embedder.dimension(),
        }
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn chunks(&self) -> &[CorpusChunk] {
        &self.chunks
    }

    pub fn vectors(&self) -> &[Embedding<T>] {
        &self.vectors
    }

    /// `(chunk position, score)` for the best `k`, by descending score, then
    /// doc_id, section and position.
    pub fn rank(&self, query: &Embedding<T>, k: usize) -> Vec<(usize, T)> {
        let mut order: Vec<usize> = (0..self.vectors.len()).collect();
        order.sort_by(|&a, &b| {
            query
                .compare_similarity(&self.vectors[b], &self.vectors[a])
                .then_with(|| self.chunks[a].doc_id.cmp(&self.chunks[b].doc_id))
                .then_with(|| self.chunks[a].section.cmp(&self.chunks[b].section))
                .then_with(|| a.cmp(&b))
        });
        let mut scored: Vec<(usize, T)> = order.into_iter().map(|i| (i, query.cosine(&self.vectors[i]))).collect();
        scored.truncate(k.max(1));
        scored
    }

    pub fn search(&self, embedder: &dyn Embedder<T>, query: &str, k: usize) -> Vec<RetrievedSnippet> {
        let q = embedder.embed(query);
        self.rank(&q, k)
            .into_iter()
            .map(|(i, score)| RetrievedSnippet {
                chunk: self.chunks[i].clone(),
                score: score.to_f64().unwrap_or(0.0).clamp(-1.0, 1.0),
                mode: RetrievalMode::Offline,
            })
            .collect()
    }

    /// Writes `index.bin` and `chunks.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), RagError> {
        std::fs::create_dir_all(dir)?;
        let width = std::mem::size_of::<T>() as u8;
        let mut bin = Vec::with_capacity(17 + self.len() * self.dimension * width as usize);
        bin.extend_from_slice(MAGIC);
        bin.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        bin.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        bin.extend_from_slice(&(self.len() as u32).to_le_bytes());
        bin.push(width);
        for v in &self.vectors {
            for x in v.values() {
                let x = x.to_f64().unwrap_or(0.0);
                if width == 4 {
                    bin.extend_from_slice(&(x as f32).to_le_bytes());
                } else {
                    bin.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        std::fs::File::create(dir.join("index.bin"))?.write_all(&bin)?;
        let meta = ChunkFile {
            version: INDEX_VERSION,
            dimension: self.dimension,
            chunks: self.chunks.clone(),
        };
        let json = serde_json::to_vec_pretty(&meta).map_err(|e| RagError::CorruptIndex(e.to_string()))?;
        std::fs::write(dir.join("chunks.json"), json)?;
        Ok(())
    }

    /// Reads an index written by [`FlatIndex::save`]; any version or scalar
    /// width mismatch is refused.
    pub fn load(dir: &Path) -> Result<Self, RagError> {
        let bin = std::fs::read(dir.join("index.bin"))?;
        let meta: ChunkFile = serde_json::from_slice(&std::fs::read(dir.join("chunks.json"))?)
            .map_err(|e| RagError::CorruptIndex(format!("chunks.json: {e}")))?;
        if bin.len() < 17 || &bin[..4] != MAGIC {
            return Err(RagError::CorruptIndex("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bin[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        for found in [version, meta.version] {
            if found != INDEX_VERSION {
                return Err(RagError::VersionMismatch {
                    found,
                    expected: INDEX_VERSION,
                });
            }
        }
        let dimension = u32_at(8) as usize;
        let count = u32_at(12) as usize;
        let width = bin[16] as usize;
        if width != std::mem::size_of::<T>() {
            return Err(RagError::CorruptIndex(format!(
                "stored scalar width {width} does not match requested width {}",
                std::mem::size_of::<T>()
            )));
        }
        if count != meta.chunks.len() || dimension != meta.dimension || bin.len() != 17 + count * dimension * width {
            return Err(RagError::CorruptIndex("size mismatch between index.bin and chunks.json".into()));
        }
        let mut vectors = Vec::with_capacity(count);
        for row in bin[17..].chunks(dimension.max(1) * width).take(count) {
            let values = row
                .chunks(width)
                .map(|b| {
                    let x = if width == 4 {
                        f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    } else {
                        f64::from_le_bytes(b.try_into().expect("8 bytes"))
                    };
                    T::from(x).expect("finite scalar")
                })
                .collect();
            vectors.push(Embedding::from_raw(values));
        }
        Ok(FlatIndex {
            chunks: meta.chunks,
            vectors,
            dimension,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::HashedBagOfWords;
    use super::*;

    fn chunk(doc: &str, text: &str) -> CorpusChunk {
        CorpusChunk {
            doc_id: doc.into(),
            section: "s".into(),
            text: text.into(),
            source_uri: "u".into(),
        }
    }

    #[test]
    fn self_similarity_and_clamp() {
        let e = HashedBagOfWords::default();
        let idx: FlatIndex<f64> = FlatIndex::build(
            vec![chunk("b", "sudo tar checkpoint"), chunk("a", "sudo awk begin system"), chunk("c", "!!!")],
            &e,
        );
        assert_eq!(idx.len(), 2);
        let hits = idx.search(&e, "sudo awk begin system", 1);
        assert_eq!(hits[0].chunk.doc_id, "a");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert_eq!(idx.search(&e, "x", 50).len(), 2);
    }

    #[test]
    fn ties_break_by_doc_id() {
        let e = HashedBagOfWords::default();
        let idx: FlatIndex<f32> = FlatIndex::build(vec![chunk("zed", "same words"), chunk("alpha", "same words")], &e);
        let hits = idx.search(&e, "same words", 2);
        assert_eq!(hits[0].chunk.doc_id, "alpha");
    }

    #[test]
    fn save_load_round_trip_and_version_check() {
        let e = HashedBagOfWords::default();
        let idx: FlatIndex<f32> = FlatIndex::build(vec![chunk("a", "sudo awk"), chunk("b", "tar")], &e);
        let dir = tempfile::tempdir().unwrap();
        idx.save(dir.path()).unwrap();
        assert_eq!(FlatIndex::<f32>::load(dir.path()).unwrap(), idx);
        assert!(matches!(FlatIndex::<f64>::load(dir.path()), Err(RagError::CorruptIndex(_))));
        let mut bin = std::fs::read(dir.path().join("index.bin")).unwrap();
        bin[4] = 9;
        std::fs::write(dir.path().join("index.bin"), bin).unwrap();
        assert!(matches!(
            FlatIndex::<f32>::load(dir.path()),
            Err(RagError::VersionMismatch { found: 9, .. })
        ));
    }
}
