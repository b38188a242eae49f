//! Binary container for precomputed per-layer token embeddings.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPE1" | version u32 = 1 | sentence_count u64 | layer_count u32 | dim u32
//! offset table: sentence_count x u64 (absolute byte offsets)
//! per sentence:
//!   sentence_id u64 | word_count u32 | subtoken_count u32
//!   alignment: word_count x (u32 start, u32 end)
//!   values: layer_count x subtoken_count x dim x f32 (layer-major, then token-major)
//! ```
//!
//! Sentences are written in increasing id order so lookups by id are a
//! binary search over the offset table. The reader uses positioned reads
//! and can be shared between threads.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::SpanIndex;
use crate::error::StoreError;

pub const MAGIC: [u8; 4] = *b"SPE1";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;
const SENTENCE_HEADER_LEN: u64 = 16;

type StoreResult<T> = std::result::Result<T, StoreError>;

/// Word -> subtoken alignment entry, half-open.
pub type WordRange = (usize, usize);

/// All layers of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredEmbeddings {
    pub sentence_id: u64,
    pub layer_count: usize,
    pub subtoken_count: usize,
    pub dim: usize,
    pub alignment: Vec<WordRange>,
    pub values: Vec<f32>,
}

impl LayeredEmbeddings {
    pub fn new(
        sentence_id: u64,
        layer_count: usize,
        subtoken_count: usize,
        dim: usize,
        alignment: Vec<WordRange>,
        values: Vec<f32>,
    ) -> StoreResult<Self> {
        let emb = LayeredEmbeddings {
            sentence_id,
            layer_count,
            subtoken_count,
            dim,
            alignment,
            values,
        };
        emb.validate()?;
        Ok(emb)
    }

    /// Identity alignment: word `i` is subtoken `i`.
    pub fn identity_alignment(words: usize) -> Vec<WordRange> {
        (0..words).map(|i| (i, i + 1)).collect()
    }

    pub fn validate(&self) -> StoreResult<()> {
        let id = self.sentence_id;
        if self.layer_count == 0 || self.dim == 0 {
            return Err(StoreError::Inconsistent(format!(
                "sentence {id}: layer_count and dim must be positive"
            )));
        }
        if self.values.len() != self.layer_count * self.subtoken_count * self.dim {
            return Err(StoreError::Inconsistent(format!(
                "sentence {id}: {} values for {}x{}x{}",
                self.values.len(),
                self.layer_count,
                self.subtoken_count,
                self.dim
            )));
        }
        let mut prev_end = 0;
        for (w, &(a, b)) in self.alignment.iter().enumerate() {
            if a >= b || a < prev_end || b > self.subtoken_count {
                return Err(StoreError::Inconsistent(format!(
                    "sentence {id}: word {w} has invalid subtoken range [{a},{b})"
                )));
            }
            prev_end = b;
        }
        Ok(())
    }

    pub fn word_count(&self) -> usize {
        self.alignment.len()
    }

    /// Embedding of `token` at `layer`.
    pub fn row(&self, layer: usize, token: usize) -> &[f32] {
        let start = (layer * self.subtoken_count + token) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn map_span(&self, span: SpanIndex) -> (usize, usize) {
        map_span(&self.alignment, span)
    }
}

/// Subtoken range covered by a word span: from the first subtoken of the
/// first word to the end of the last word.
pub fn map_span(alignment: &[WordRange], span: SpanIndex) -> (usize, usize) {
    (alignment[span.start].0, alignment[span.end - 1].1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreHeader {
    pub sentence_count: u64,
    pub layer_count: u32,
    pub dim: u32,
}

fn sentence_byte_len(word_count: u64, subtoken_count: u64, layer_count: u64, dim: u64) -> u64 {
    SENTENCE_HEADER_LEN + word_count * 8 + layer_count * subtoken_count * dim * 4
}

fn to_u32(value: usize, what: &str) -> StoreResult<u32> {
    u32::try_from(value)
        .map_err(|_| StoreError::Inconsistent(format!("{what} {value} exceeds u32")))
}

/// Serializes sentences into the store layout. Sentences are ordered by id.
pub fn encode_store(sentences: &[LayeredEmbeddings]) -> StoreResult<Vec<u8>> {
    let mut ordered: Vec<&LayeredEmbeddings> = sentences.iter().collect();
    ordered.sort_by_key(|s| s.sentence_id);
    for pair in ordered.windows(2) {
        if pair[0].sentence_id == pair[1].sentence_id {
            return Err(StoreError::Inconsistent(format!(
                "duplicate sentence id {}",
                pair[0].sentence_id
            )));
        }
    }
    let (layer_count, dim) = match ordered.first() {
        Some(s) => (s.layer_count, s.dim),
        None => (1, 1),
    };
    for s in &ordered {
        s.validate()?;
        if s.layer_count != layer_count || s.dim != dim {
            return Err(StoreError::Inconsistent(format!(
                "sentence {} has {} layers x dim {}, store has {} x {}",
                s.sentence_id, s.layer_count, s.dim, layer_count, dim
            )));
        }
    }

    let n = ordered.len() as u64;
    let mut offsets = Vec::with_capacity(ordered.len());
    let mut cursor = HEADER_LEN + 8 * n;
    for s in &ordered {
        offsets.push(cursor);
        cursor += sentence_byte_len(
            s.word_count() as u64,
            s.subtoken_count as u64,
            layer_count as u64,
            dim as u64,
        );
    }

    let mut buf = Vec::with_capacity(cursor as usize);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&to_u32(layer_count, "layer_count")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(dim, "dim")?.to_le_bytes());
    for off in &offsets {
        buf.extend_from_slice(&off.to_le_bytes());
    }
    for s in &ordered {
        buf.extend_from_slice(&s.sentence_id.to_le_bytes());
        buf.extend_from_slice(&to_u32(s.word_count(), "word_count")?.to_le_bytes());
        buf.extend_from_slice(&to_u32(s.subtoken_count, "subtoken_count")?.to_le_bytes());
        for &(a, b) in &s.alignment {
            buf.extend_from_slice(&to_u32(a, "alignment start")?.to_le_bytes());
            buf.extend_from_slice(&to_u32(b, "alignment end")?.to_le_bytes());
        }
        for v in &s.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    debug_assert_eq!(buf.len() as u64, cursor);
    Ok(buf)
}

pub fn write_store(sentences: &[LayeredEmbeddings], path: &Path) -> StoreResult<()> {
    let bytes = encode_store(sentences)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Open store with its offset table resident in memory.
#[derive(Debug)]
pub struct EmbeddingStore {
    path: PathBuf,
    file: File,
    header: StoreHeader,
    offsets: Vec<u64>,
    file_len: u64,
}

fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    #[cfg(unix)]
    {
        use std::os::unix::fs::FileExt;
        file.read_exact_at(buf, offset)
    }
    #[cfg(windows)]
    {
        use std::os::windows::fs::FileExt;
        let mut done = 0;
        while done < buf.len() {
            let n = file.seek_read(&mut buf[done..], offset + done as u64)?;
            if n == 0 {
                return Err(std::io::ErrorKind::UnexpectedEof.into());
            }
            done += n;
        }
        Ok(())
    }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

impl EmbeddingStore {
    pub fn open(path: impl AsRef<Path>) -> StoreResult<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|source| StoreError::Open {
            path: path.clone(),
            source,
        })?;
        let file_len = file.metadata()?.len();
        if file_len < HEADER_LEN {
            if file_len >= 4 {
                let mut magic = [0u8; 4];
                read_at(&file, &mut magic, 0)?;
                if magic != MAGIC {
                    return Err(StoreError::BadMagic(magic));
                }
            }
            return Err(StoreError::Truncated(format!(
                "{file_len} bytes, header needs {HEADER_LEN}"
            )));
        }
        let mut head = [0u8; HEADER_LEN as usize];
        read_at(&file, &mut head, 0)?;
        let magic: [u8; 4] = head[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let version = u32_at(&head, 4);
        if version != VERSION {
            return Err(StoreError::Version(version));
        }
        let header = StoreHeader {
            sentence_count: u64_at(&head, 8),
            layer_count: u32_at(&head, 16),
            dim: u32_at(&head, 20),
        };
        let table_len = header
            .sentence_count
            .checked_mul(8)
            .ok_or_else(|| StoreError::Corrupt("sentence count overflows".into()))?;
        if HEADER_LEN + table_len > file_len {
            return Err(StoreError::Truncated(
                "offset table extends past end of file".into(),
            ));
        }
        let mut table = vec![0u8; table_len as usize];
        read_at(&file, &mut table, HEADER_LEN)?;
        let offsets: Vec<u64> = table.chunks_exact(8).map(|c| u64_at(c, 0)).collect();

        let data_start = HEADER_LEN + table_len;
        let mut prev: Option<u64> = None;
        for &off in &offsets {
            if off < data_start || prev.is_some_and(|p| off <= p) {
                return Err(StoreError::Corrupt(
                    "offsets not strictly increasing".into(),
                ));
            }
            if off + SENTENCE_HEADER_LEN > file_len {
                return Err(StoreError::Truncated(format!(
                    "sentence at offset {off} past end of file"
                )));
            }
            prev = Some(off);
        }
        let store = EmbeddingStore {
            path,
            file,
            header,
            offsets,
            file_len,
        };
        let expected_end = match store.offsets.last() {
            Some(&last) => {
                let (_, words, subtokens) = store.sentence_header(last)?;
                last + store.record_len(words, subtokens)
            }
            None => data_start,
        };
        if expected_end > file_len {
            return Err(StoreError::Truncated(format!(
                "last sentence ends at byte {expected_end}, file has {file_len}"
            )));
        }
        if expected_end < file_len {
            return Err(StoreError::Corrupt(format!(
                "{} trailing bytes after last sentence",
                file_len - expected_end
            )));
        }
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> StoreHeader {
        self.header
    }

    pub fn sentence_count(&self) -> usize {
        self.offsets.len()
    }

    pub fn layer_count(&self) -> usize {
        self.header.layer_count as usize
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    fn record_len(&self, words: u64, subtokens: u64) -> u64 {
        sentence_byte_len(
            words,
            subtokens,
            self.header.layer_count as u64,
            self.header.dim as u64,
        )
    }

    fn sentence_header(&self, offset: u64) -> StoreResult<(u64, u64, u64)> {
        let mut buf = [0u8; SENTENCE_HEADER_LEN as usize];
        read_at(&self.file, &mut buf, offset)?;
        Ok((
            u64_at(&buf, 0),
            u32_at(&buf, 8) as u64,
            u32_at(&buf, 12) as u64,
        ))
    }

    fn sentence_id_at(&self, index: usize) -> StoreResult<u64> {
        let mut buf = [0u8; 8];
        read_at(&self.file, &mut buf, self.offsets[index])?;
        Ok(u64::from_le_bytes(buf))
    }

    /// Sentence at position `index` (0-based, id order).
    pub fn get_by_index(&self, index: usize) -> StoreResult<LayeredEmbeddings> {
        let offset = *self
            .offsets
            .get(index)
            .ok_or_else(|| StoreError::Corrupt(format!("sentence index {index} out of range")))?;
        let (sentence_id, words, subtokens) = self.sentence_header(offset)?;
        let len = self.record_len(words, subtokens);
        let limit = self
            .offsets
            .get(index + 1)
            .copied()
            .unwrap_or(self.file_len);
        if offset + len > limit {
            return Err(if limit == self.file_len {
                StoreError::Truncated(format!("sentence {sentence_id} extends past end of file"))
            } else {
                StoreError::Corrupt(format!("sentence {sentence_id} overlaps the next record"))
            });
        }
        let mut body = vec![0u8; (len - SENTENCE_HEADER_LEN) as usize];
        read_at(&self.file, &mut body, offset + SENTENCE_HEADER_LEN)?;
        let words = words as usize;
        let alignment: Vec<WordRange> = (0..words)
            .map(|w| {
                (
                    u32_at(&body, w * 8) as usize,
                    u32_at(&body, w * 8 + 4) as usize,
                )
            })
            .collect();
        let values: Vec<f32> = body[words * 8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        LayeredEmbeddings::new(
            sentence_id,
            self.layer_count(),
            subtokens as usize,
            self.dim(),
            alignment,
            values,
        )
        .map_err(|e| StoreError::Corrupt(e.to_string()))
    }

    /// Looks a sentence up by id (binary search over the id-ordered records).
    pub fn get(&self, sentence_id: u64) -> StoreResult<LayeredEmbeddings> {
        let (mut lo, mut hi) = (0usize, self.offsets.len());
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let id = self.sentence_id_at(mid)?;
            if id == sentence_id {
                return self.get_by_index(mid);
            }
            if id < sentence_id {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        Err(StoreError::MissingSentence(sentence_id))
    }

    pub fn contains(&self, sentence_id: u64) -> StoreResult<bool> {
        match self.get(sentence_id) {
            Ok(_) => Ok(true),
            Err(StoreError::MissingSentence(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(id: u64, layers: usize, tokens: usize, dim: usize) -> LayeredEmbeddings {
        let values = (0..layers * tokens * dim)
            .map(|i| i as f32 * 0.5 - id as f32)
            .collect();
        LayeredEmbeddings::new(
            id,
            layers,
            tokens,
            dim,
            LayeredEmbeddings::identity_alignment(tokens),
            values,
        )
        .unwrap()
    }

    #[test]
    fn map_span_examples() {
        let ident = LayeredEmbeddings::identity_alignment(5);
        assert_eq!(map_span(&ident, SpanIndex { start: 1, end: 3 }), (1, 3));
        let split = vec![(0, 2), (2, 3)];
        assert_eq!(map_span(&split, SpanIndex { start: 0, end: 2 }), (0, 3));
        let wide = vec![(0, 1), (1, 2), (2, 5)];
        assert_eq!(map_span(&wide, SpanIndex { start: 2, end: 3 }), (2, 5));
    }

    #[test]
    fn alignment_must_be_ordered_and_in_range() {
        let bad = LayeredEmbeddings::new(0, 1, 3, 1, vec![(0, 2), (1, 3)], vec![0.0; 3]);
        assert!(bad.is_err());
        let out = LayeredEmbeddings::new(0, 1, 3, 1, vec![(0, 4)], vec![0.0; 3]);
        assert!(out.is_err());
        // special tokens at both ends belong to no word
        let ok = LayeredEmbeddings::new(0, 1, 4, 1, vec![(1, 2), (2, 3)], vec![0.0; 4]);
        assert!(ok.is_ok());
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.spe");
        let sents = vec![sentence(9, 2, 3, 4), sentence(2, 2, 5, 4)];
        write_store(&sents, &path).unwrap();
        let store = EmbeddingStore::open(&path).unwrap();
        assert_eq!(store.sentence_count(), 2);
        assert_eq!(store.get(9).unwrap(), sents[0]);
        assert_eq!(store.get(2).unwrap(), sents[1]);
        assert_eq!(store.get_by_index(0).unwrap().sentence_id, 2);
        assert!(matches!(store.get(3), Err(StoreError::MissingSentence(3))));
    }

    #[test]
    fn writes_are_deterministic() {
        let sents = vec![sentence(1, 3, 4, 2)];
        assert_eq!(encode_store(&sents).unwrap(), encode_store(&sents).unwrap());
    }

    #[test]
    fn mixed_dims_rejected() {
        let sents = vec![sentence(0, 1, 2, 256), sentence(1, 1, 2, 512)];
        assert!(matches!(
            encode_store(&sents),
            Err(StoreError::Inconsistent(_))
        ));
        let dup = vec![sentence(0, 1, 2, 4), sentence(0, 1, 2, 4)];
        assert!(encode_store(&dup).is_err());
    }

    #[test]
    fn detects_bad_magic_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = encode_store(&[sentence(0, 2, 3, 4), sentence(1, 2, 3, 4)]).unwrap();

        let p = dir.path().join("magic.spe");
        let mut b = bytes.clone();
        b[..4].copy_from_slice(b"XXXX");
        std::fs::write(&p, &b).unwrap();
        let err = EmbeddingStore::open(&p).unwrap_err();
        assert!(matches!(err, StoreError::BadMagic(_)));
        assert!(err.to_string().contains("bad magic"));

        let p = dir.path().join("version.spe");
        let mut b = bytes.clone();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(
            EmbeddingStore::open(&p),
            Err(StoreError::Version(2))
        ));

        let p = dir.path().join("trunc.spe");
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        let err = EmbeddingStore::open(&p).unwrap_err();
        assert!(matches!(err, StoreError::Truncated(_)), "{err}");
        assert!(err.to_string().contains("truncated"));

        let p = dir.path().join("head.spe");
        std::fs::write(&p, &bytes[..12]).unwrap();
        assert!(matches!(
            EmbeddingStore::open(&p),
            Err(StoreError::Truncated(_))
        ));

        assert!(matches!(
            EmbeddingStore::open(dir.path().join("missing.spe")),
            Err(StoreError::Open { .. })
        ));
    }

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.spe");
        write_store(&[], &path).unwrap();
        assert_eq!(EmbeddingStore::open(&path).unwrap().sentence_count(), 0);
    }
}
