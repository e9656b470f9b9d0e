//! Embedding interchange (TSEMB1 binary and headerless CSV), token pooling,
//! mean-centering and a deterministic hashing embedder.
//!
//! TSEMB1 layout, all integers and floats little-endian:
//!
//! ```text
//! offset 0   "TSEMB1"        6 bytes
//! offset 6   T               u32
//! offset 10  d               u32
//! offset 14  payload         T * d f32, row-major
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::data::EmbeddingSequence;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"TSEMB1";
const HEADER_LEN: usize = 14;

/// Encodes an embedding matrix as TSEMB1 bytes (values rounded to f32).
pub fn encode_tsemb(e: &EmbeddingSequence) -> Vec<u8> {
    let v = e.vectors();
    let (t, d) = v.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for x in v.iter() {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    out
}

pub fn decode_tsemb(bytes: &[u8]) -> Result<EmbeddingSequence> {
    if bytes.len() < HEADER_LEN || &bytes[..6] != MAGIC {
        return Err(Error::BadMagic);
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let expected = 4 * t * d;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let mut values = Vec::with_capacity(t * d);
    for (k, chunk) in payload[..expected].chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !x.is_finite() {
            return Err(Error::NonFinite {
                row: k / d.max(1),
                col: k % d.max(1),
            });
        }
        values.push(f64::from(x));
    }
    EmbeddingSequence::new(Array2::from_shape_vec((t, d), values).expect("t*d values"))
}

pub fn write_embeddings(e: &EmbeddingSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tsemb(e)).map_err(|err| Error::io(path, err))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|err| Error::io(path, err))?;
    decode_tsemb(&bytes)
}

/// Reads headerless CSV: one row per timestamp, one column per dimension.
pub fn read_embeddings_csv(path: impl AsRef<Path>) -> Result<EmbeddingSequence> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let parsed = record
            .iter()
            .enumerate()
            .map(|(col, cell)| {
                cell.parse::<f64>().map_err(|e| Error::Parse {
                    row: row + 1,
                    col: col + 1,
                    message: format!("`{cell}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(parsed);
    }
    EmbeddingSequence::from_rows(&rows)
}

pub fn write_embeddings_csv(e: &EmbeddingSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in e.vectors().outer_iter() {
        writer.write_record(row.iter().map(|v| v.to_string()))?;
    }
    writer.flush().map_err(|err| Error::io(path, err))
}

/// Reads TSEMB1 when the file starts with the magic, CSV otherwise.
pub fn read_embeddings_auto(path: impl AsRef<Path>) -> Result<EmbeddingSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|err| Error::io(path, err))?;
    if bytes.starts_with(MAGIC) {
        decode_tsemb(&bytes)
    } else {
        read_embeddings_csv(path)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoolMode {
    #[default]
    Avg,
}

/// Pools token vectors (`L_t x d`) into one text vector.
pub fn pool_tokens(tokens: ArrayView2<'_, f64>, mode: PoolMode) -> Result<Array1<f64>> {
    match mode {
        PoolMode::Avg => tokens.mean_axis(Axis(0)).ok_or(Error::EmptyText),
    }
}

/// Subtracts the mean embedding from every row.
pub fn mean_center(e: &EmbeddingSequence) -> EmbeddingSequence {
    let v = e.vectors();
    let mean = v.mean_axis(Axis(0)).expect("at least one row");
    EmbeddingSequence::new(&v - &mean).expect("centering keeps values finite")
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn token_hash(token: &str, seed: u64) -> u64 {
    let mut h = FNV_OFFSET;
    for byte in seed.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Feature-hashing text embedder: every whitespace token adds `+-1` at a
/// hashed index; the sum is L2-normalized when non-zero.
pub fn hash_embed(text: &str, d: usize, seed: u64) -> Vec<f64> {
    assert!(d > 0, "embedding dimension must be positive");
    let mut v = vec![0.0; d];
    for token in text.split_whitespace() {
        let h = token_hash(token, seed);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % d as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Embeds every text with [`hash_embed`].
pub fn hash_embed_all<S: AsRef<str>>(texts: &[S], d: usize, seed: u64) -> Result<EmbeddingSequence> {
    let rows: Vec<Vec<f64>> = texts.iter().map(|t| hash_embed(t.as_ref(), d, seed)).collect();
    if rows.is_empty() {
        return Err(Error::InvalidEmbeddings("no texts to embed".into()));
    }
    EmbeddingSequence::from_rows(&rows)
}
