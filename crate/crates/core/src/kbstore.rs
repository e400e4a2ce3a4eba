//! Knowledge-base construction and persistence.
//!
//! A KB is an immutable `f32` embedding matrix plus row-aligned metadata.
//! Textual KBs hold one unit-norm text embedding per passage. Multimodal KBs
//! hold `(image ‖ text)` concatenations of two unit-norm halves, so a flat
//! inner product against a `(query image ‖ query text)` vector equals the sum
//! of the two cosine similarities.
//!
//! Bundle layout on disk:
//!
//! ```text
//! <dir>/manifest.json     kind, dim, rows, provider fingerprint, sha256 checksums
//! <dir>/embeddings.bin    "MIRAGKB1" | u32 rows (LE) | u32 dim (LE) | rows*dim f32 (LE)
//! <dir>/metadata.jsonl    one record per row, in row order
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::{l2_normalize, EmbedError, Embedder, EmbeddingVector};
use crate::media::ImageLoader;

pub const MAGIC: &[u8; 8] = b"MIRAGKB1";
const HEADER_LEN: usize = 16;
const MANIFEST: &str = "manifest.json";
const EMBEDDINGS: &str = "embeddings.bin";
const METADATA: &str = "metadata.jsonl";

#[derive(Debug, Error)]
pub enum KbError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("embedding failed for {doc_id}: {source}")]
    Embedding { doc_id: String, source: EmbedError },
    #[error("cannot read image for {doc_id}: {source}")]
    ImageRead {
        doc_id: String,
        source: std::io::Error,
    },
    #[error("duplicate doc_id {0}")]
    DuplicateDocId(String),
    #[error("entry {0} has empty text")]
    EmptyText(String),
    #[error("corrupt KB bundle: {0}")]
    CorruptBundle(String),
    #[error("KB was built with provider `{found}`, but `{expected}` is configured")]
    FingerprintMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KbKind {
    Textual,
    Multimodal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPassage {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalEntry {
    pub doc_id: String,
    pub image_ref: String,
    pub section_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_id: Option<String>,
}

/// Row metadata; the variant always matches the owning KB's kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum KbRecord {
    Text(TextPassage),
    Multimodal(MultimodalEntry),
}

fn non_blank(s: &Option<String>) -> Option<&str> {
    s.as_deref().filter(|s| !s.trim().is_empty())
}

impl KbRecord {
    pub fn doc_id(&self) -> &str {
        match self {
            KbRecord::Text(p) => &p.doc_id,
            KbRecord::Multimodal(e) => &e.doc_id,
        }
    }

    pub fn entity_id(&self) -> Option<&str> {
        match self {
            KbRecord::Text(p) => p.entity_id.as_deref(),
            KbRecord::Multimodal(e) => e.entity_id.as_deref(),
        }
    }

    /// Text that goes through the text encoder: the summary when present.
    pub fn embedding_text(&self) -> &str {
        match self {
            KbRecord::Text(p) => non_blank(&p.summary).unwrap_or(&p.text),
            KbRecord::Multimodal(e) => non_blank(&e.summary).unwrap_or(&e.section_text),
        }
    }

    /// Full body text, used for prompts and pseudo-relevance checks.
    pub fn content(&self) -> &str {
        match self {
            KbRecord::Text(p) => &p.text,
            KbRecord::Multimodal(e) => &e.section_text,
        }
    }

    pub fn title(&self) -> Option<&str> {
        match self {
            KbRecord::Text(p) if !p.title.is_empty() => Some(&p.title),
            _ => None,
        }
    }

    pub fn image_ref(&self) -> Option<&str> {
        match self {
            KbRecord::Multimodal(e) => Some(&e.image_ref),
            KbRecord::Text(_) => None,
        }
    }

    fn kind(&self) -> KbKind {
        match self {
            KbRecord::Text(_) => KbKind::Textual,
            KbRecord::Multimodal(_) => KbKind::Multimodal,
        }
    }
}

/// Immutable embedding matrix with aligned metadata.
#[derive(Debug, Clone)]
pub struct KbIndex {
    kind: KbKind,
    dim: usize,
    matrix: Vec<f32>,
    metadata: Vec<KbRecord>,
    provider_fingerprint: String,
    positions: HashMap<String, usize>,
}

impl KbIndex {
    /// Assembles an index from raw parts, checking alignment and id uniqueness.
    pub fn from_parts(
        kind: KbKind,
        dim: usize,
        matrix: Vec<f32>,
        metadata: Vec<KbRecord>,
        provider_fingerprint: String,
    ) -> Result<Self, KbError> {
        if dim == 0 {
            return Err(KbError::CorruptBundle("dim is zero".into()));
        }
        if matrix.len() != metadata.len() * dim {
            return Err(KbError::CorruptBundle(format!(
                "matrix holds {} values, expected {} rows x {dim}",
                matrix.len(),
                metadata.len()
            )));
        }
        let mut positions = HashMap::with_capacity(metadata.len());
        for (i, rec) in metadata.iter().enumerate() {
            if rec.kind() != kind {
                return Err(KbError::CorruptBundle(format!(
                    "record {} does not match KB kind {kind:?}",
                    rec.doc_id()
                )));
            }
            if positions.insert(rec.doc_id().to_string(), i).is_some() {
                return Err(KbError::DuplicateDocId(rec.doc_id().to_string()));
            }
        }
        Ok(Self {
            kind,
            dim,
            matrix,
            metadata,
            provider_fingerprint,
            positions,
        })
    }

    pub fn kind(&self) -> KbKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.metadata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metadata.is_empty()
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn record(&self, i: usize) -> &KbRecord {
        &self.metadata[i]
    }

    pub fn records(&self) -> &[KbRecord] {
        &self.metadata
    }

    pub fn lookup(&self, doc_id: &str) -> Option<usize> {
        self.positions.get(doc_id).copied()
    }

    pub fn get(&self, doc_id: &str) -> Option<&KbRecord> {
        self.lookup(doc_id).map(|i| &self.metadata[i])
    }

    pub fn provider_fingerprint(&self) -> &str {
        &self.provider_fingerprint
    }

    pub fn verify_fingerprint(&self, expected: &str) -> Result<(), KbError> {
        if self.provider_fingerprint == expected {
            Ok(())
        } else {
            Err(KbError::FingerprintMismatch {
                expected: expected.to_string(),
                found: self.provider_fingerprint.clone(),
            })
        }
    }
}

/// Fingerprint recorded for a multimodal KB built from two providers.
pub fn multimodal_fingerprint(image: &str, text: &str) -> String {
    format!("image[{image}]+text[{text}]")
}

fn push_row(matrix: &mut Vec<f32>, v: &EmbeddingVector) {
    matrix.extend(v.values().iter().map(|&x| x as f32));
}

/// Embeds every passage (summary if present, else full text), in input order.
pub fn build_text_kb(
    passages: impl IntoIterator<Item = TextPassage>,
    provider: &dyn Embedder,
) -> Result<KbIndex, KbError> {
    let records: Vec<KbRecord> = passages.into_iter().map(KbRecord::Text).collect();
    if records.is_empty() {
        return Err(KbError::EmptyCorpus);
    }
    check_records(&records)?;
    let rows: Vec<Result<EmbeddingVector, KbError>> = records
        .par_iter()
        .map(|rec| {
            provider
                .embed_text(rec.embedding_text())
                .map_err(|source| KbError::Embedding {
                    doc_id: rec.doc_id().to_string(),
                    source,
                })
        })
        .collect();
    let dim = provider.dim();
    let mut matrix = Vec::with_capacity(records.len() * dim);
    for row in rows {
        push_row(&mut matrix, &row?);
    }
    KbIndex::from_parts(
        KbKind::Textual,
        dim,
        matrix,
        records,
        provider.fingerprint(),
    )
}

/// Embeds each entry as `normalize(image) ‖ normalize(text)`, in input order.
pub fn build_multimodal_kb(
    entries: impl IntoIterator<Item = MultimodalEntry>,
    text_provider: &dyn Embedder,
    image_provider: &dyn Embedder,
    images: &dyn ImageLoader,
) -> Result<KbIndex, KbError> {
    let records: Vec<KbRecord> = entries.into_iter().map(KbRecord::Multimodal).collect();
    if records.is_empty() {
        return Err(KbError::EmptyCorpus);
    }
    check_records(&records)?;
    let rows: Vec<Result<EmbeddingVector, KbError>> = records
        .par_iter()
        .map(|rec| {
            let doc_id = rec.doc_id().to_string();
            let bytes = images
                .load(rec.image_ref().unwrap_or_default())
                .map_err(|source| KbError::ImageRead {
                    doc_id: doc_id.clone(),
                    source,
                })?;
            let embed_err = |source| KbError::Embedding {
                doc_id: doc_id.clone(),
                source,
            };
            let img = image_provider
                .embed_image(&bytes)
                .and_then(|v| l2_normalize(&v))
                .map_err(embed_err)?;
            let txt = text_provider
                .embed_text(rec.embedding_text())
                .and_then(|v| l2_normalize(&v))
                .map_err(embed_err)?;
            Ok(img.concat(&txt))
        })
        .collect();
    let dim = image_provider.dim() + text_provider.dim();
    let mut matrix = Vec::with_capacity(records.len() * dim);
    for row in rows {
        push_row(&mut matrix, &row?);
    }
    KbIndex::from_parts(
        KbKind::Multimodal,
        dim,
        matrix,
        records,
        multimodal_fingerprint(&image_provider.fingerprint(), &text_provider.fingerprint()),
    )
}

fn check_records(records: &[KbRecord]) -> Result<(), KbError> {
    let mut seen = std::collections::HashSet::new();
    for rec in records {
        if !seen.insert(rec.doc_id()) {
            return Err(KbError::DuplicateDocId(rec.doc_id().to_string()));
        }
        if rec.content().trim().is_empty() && rec.embedding_text().trim().is_empty() {
            return Err(KbError::EmptyText(rec.doc_id().to_string()));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: KbKind,
    dim: usize,
    rows: usize,
    provider_fingerprint: String,
    checksums: Checksums,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checksums {
    embeddings: String,
    metadata: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes the embedding matrix in the bundle's binary layout.
pub fn encode_embeddings(kb: &KbIndex) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + kb.matrix.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(kb.len() as u32).to_le_bytes());
    out.extend_from_slice(&(kb.dim as u32).to_le_bytes());
    for x in &kb.matrix {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn decode_embeddings(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), KbError> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(KbError::CorruptBundle("bad embeddings header".into()));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + rows * dim * 4;
    if bytes.len() != expected {
        return Err(KbError::CorruptBundle(format!(
            "embeddings.bin is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let matrix = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, dim, matrix))
}

fn encode_metadata(kb: &KbIndex) -> Result<Vec<u8>, KbError> {
    let mut out = Vec::new();
    for rec in &kb.metadata {
        serde_json::to_writer(&mut out, rec).map_err(std::io::Error::from)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn save_kb(kb: &KbIndex, dir: impl AsRef<Path>) -> Result<(), KbError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let embeddings = encode_embeddings(kb);
    let metadata = encode_metadata(kb)?;
    let manifest = Manifest {
        format_version: 1,
        kind: kb.kind,
        dim: kb.dim,
        rows: kb.len(),
        provider_fingerprint: kb.provider_fingerprint.clone(),
        checksums: Checksums {
            embeddings: sha256_hex(&embeddings),
            metadata: sha256_hex(&metadata),
        },
    };
    fs::write(dir.join(EMBEDDINGS), &embeddings)?;
    fs::write(dir.join(METADATA), &metadata)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_kb(dir: impl AsRef<Path>) -> Result<KbIndex, KbError> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)
        .map_err(|e| KbError::CorruptBundle(format!("manifest: {e}")))?;
    let embeddings = fs::read(dir.join(EMBEDDINGS))?;
    if sha256_hex(&embeddings) != manifest.checksums.embeddings {
        return Err(KbError::CorruptBundle(
            "embeddings.bin checksum mismatch".into(),
        ));
    }
    let (rows, dim, matrix) = decode_embeddings(&embeddings)?;
    if rows != manifest.rows || dim != manifest.dim {
        return Err(KbError::CorruptBundle(format!(
            "manifest says {}x{}, embeddings.bin holds {rows}x{dim}",
            manifest.rows, manifest.dim
        )));
    }
    let meta_bytes = fs::read(dir.join(METADATA))?;
    if sha256_hex(&meta_bytes) != manifest.checksums.metadata {
        return Err(KbError::CorruptBundle(
            "metadata.jsonl checksum mismatch".into(),
        ));
    }
    let mut metadata = Vec::with_capacity(rows);
    for (n, line) in BufReader::new(meta_bytes.as_slice()).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = match manifest.kind {
            KbKind::Textual => serde_json::from_str(&line).map(KbRecord::Text),
            KbKind::Multimodal => serde_json::from_str(&line).map(KbRecord::Multimodal),
        }
        .map_err(|e| KbError::CorruptBundle(format!("metadata line {}: {e}", n + 1)))?;
        metadata.push(rec);
    }
    if metadata.len() != rows {
        return Err(KbError::CorruptBundle(format!(
            "{} metadata rows for {rows} embeddings",
            metadata.len()
        )));
    }
    KbIndex::from_parts(
        manifest.kind,
        dim,
        matrix,
        metadata,
        manifest.provider_fingerprint,
    )
}

/// Loads a bundle and checks it against the configured provider fingerprint.
/// With `allow_mismatch`, a mismatch is logged instead of returned.
pub fn load_kb_checked(
    dir: impl AsRef<Path>,
    expected_fingerprint: &str,
    allow_mismatch: bool,
) -> Result<KbIndex, KbError> {
    let kb = load_kb(dir)?;
    match kb.verify_fingerprint(expected_fingerprint) {
        Err(e) if allow_mismatch => {
            tracing::warn!("{e}");
            Ok(kb)
        }
        other => other.map(|_| kb),
    }
}

/// Reads a JSONL file of `T`, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: impl AsRef<Path>,
) -> Result<Vec<T>, KbError> {
    let f = fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.as_ref().display(), n + 1),
            )
        })?);
    }
    Ok(out)
}
