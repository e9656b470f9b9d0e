use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use tats_core::embedding_io::{hash_embed_all, read_embeddings_auto, write_embeddings, write_embeddings_csv};
use tats_core::{load_csv, make_synthetic_hidden_driver, BinaryMask, EmbeddingSequence, MultimodalDataset};

/// A user input problem that the core library cannot see, e.g. a missing
/// flag combination. Maps to exit code 2.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Series CSV with a header row.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Use the generated hidden-driver dataset of this length instead.
    #[arg(long, value_name = "T")]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 1, requires = "synthetic")]
    pub synthetic_seed: u64,
    /// Embeddings (TSEMB1 or headerless CSV), one row per timestamp.
    #[arg(long, conflicts_with = "synthetic")]
    pub emb: Option<PathBuf>,
    /// Text column of the data CSV, embedded with --hash-embed.
    #[arg(long, requires = "data")]
    pub text_col: Option<String>,
    /// Embed --text-col with the feature-hashing embedder. Never done
    /// implicitly.
    #[arg(long, requires = "text_col", conflicts_with = "emb")]
    pub hash_embed: bool,
    #[arg(long, default_value_t = 64)]
    pub hash_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub hash_seed: u64,
}

impl DataArgs {
    pub fn load(&self) -> Result<MultimodalDataset> {
        if let Some(t) = self.synthetic {
            return Ok(make_synthetic_hidden_driver(t, self.synthetic_seed)?);
        }
        let path = self.data.as_ref().expect("clap requires --data or --synthetic");
        let csv = load_csv(path, self.text_col.as_deref()).with_context(|| format!("reading {}", path.display()))?;
        let emb = match (&self.emb, csv.texts) {
            (Some(p), _) => read_embeddings_auto(p).with_context(|| format!("reading {}", p.display()))?,
            (None, Some(texts)) if self.hash_embed => {
                if self.hash_dim == 0 {
                    return Err(invalid("--hash-dim must be positive"));
                }
                hash_embed_all(&texts, self.hash_dim, self.hash_seed)?
            }
            (None, Some(_)) => {
                return Err(invalid(
                    "--text-col given without embeddings: pass --emb, or --hash-embed to use the hashing embedder",
                ))
            }
            (None, None) => return Err(invalid("no embeddings: pass --emb, or --text-col with --hash-embed")),
        };
        Ok(MultimodalDataset::with_default_split(csv.series, emb)?)
    }
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    if let Some(path) = path {
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Numeric table from a headed CSV (time column dropped).
pub fn read_table(path: &Path) -> Result<Array2<f64>> {
    let csv = load_csv(path, None).with_context(|| format!("reading {}", path.display()))?;
    Ok(csv.series.into_values())
}

/// 0/1 table; any non-zero cell counts as set.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    Ok(BinaryMask::new(read_table(path)?.mapv(|v| v != 0.0)))
}

pub fn write_table(path: &Path, columns: &[String], values: ArrayView2<'_, f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let mut header = vec!["t".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for (i, row) in values.outer_iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_embeddings_any(e: &EmbeddingSequence, path: &Path) -> Result<()> {
    let is_csv = path.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv"));
    if is_csv {
        write_embeddings_csv(e, path)?;
    } else {
        write_embeddings(e, path)?;
    }
    Ok(())
}

pub fn column_names(n: usize) -> Vec<String> {
    if n == 1 {
        vec!["x".into()]
    } else {
        (0..n).map(|i| format!("x{i}")).collect()
    }
}
