//! Tokenizer compression.
//!
//! Subword tokenizers keep distinct ids for surfaces that differ only in case,
//! leading whitespace, compatibility form or diacritics (`"A"`, `" a"`, `"á"`).
//! [`build_projection`] pre-computes a surjective map from raw token ids onto
//! canonical ids so N-gram lookups see one id per textual equivalence class.
//!
//! The canonical space carries one extra id, the *sentinel*, that no raw token
//! maps to. It pads N-grams that reach past the start of a sequence.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{EngramError, Result};

const PROJ_MAGIC: &[u8; 4] = b"EGVP";
const PROJ_VERSION: u32 = 1;

/// One raw tokenizer entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabEntry {
    pub token_id: u32,
    /// Decoded token text. May be invalid UTF-8 for byte-fallback tokens.
    pub surface: Vec<u8>,
    pub is_special: bool,
}

impl VocabEntry {
    pub fn new(token_id: u32, surface: impl Into<Vec<u8>>, is_special: bool) -> Self {
        Self {
            token_id,
            surface: surface.into(),
            is_special,
        }
    }
}

/// Stages of the normalization chain. They always run in the order
/// NFKC, lowercase, whitespace collapse, diacritic stripping; a disabled
/// stage is skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizeOptions {
    pub nfkc: bool,
    pub lowercase: bool,
    pub collapse_whitespace: bool,
    pub strip_diacritics: bool,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self {
            nfkc: true,
            lowercase: true,
            collapse_whitespace: true,
            strip_diacritics: true,
        }
    }
}

/// Canonical surface form under the default chain.
pub fn normalize_surface(surface: &[u8]) -> Vec<u8> {
    normalize_surface_with(surface, &NormalizeOptions::default())
}

/// Canonical surface form under an explicit chain. Bytes that are not valid
/// UTF-8 are returned unchanged.
pub fn normalize_surface_with(surface: &[u8], opts: &NormalizeOptions) -> Vec<u8> {
    let Ok(text) = std::str::from_utf8(surface) else {
        return surface.to_vec();
    };
    let mut s: String = if opts.nfkc {
        text.nfkc().collect()
    } else {
        text.to_owned()
    };
    if opts.lowercase {
        s = s.to_lowercase();
    }
    if opts.collapse_whitespace {
        s = collapse_whitespace(&s);
    }
    if opts.strip_diacritics {
        s = s.nfd().filter(|c| !is_combining_mark(*c)).nfc().collect();
    }
    s.into_bytes()
}

// Runs of whitespace become one space, then the ends are trimmed. A surface
// made only of whitespace keeps a single space so it stays a distinct class.
fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_ws = false;
    for c in s.chars() {
        if c.is_whitespace() {
            if !in_ws {
                out.push(' ');
            }
            in_ws = true;
        } else {
            out.push(c);
            in_ws = false;
        }
    }
    let trimmed = out.trim_matches(' ');
    if trimmed.is_empty() && !out.is_empty() {
        " ".to_owned()
    } else {
        trimmed.to_owned()
    }
}

/// Dense raw-id to canonical-id map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabProjection {
    table: Vec<u32>,
    canonical_count: u32,
}

impl VocabProjection {
    /// Builds a projection from an existing table, checking surjectivity and
    /// that the last canonical id (the sentinel) has no preimage.
    pub fn from_table(table: Vec<u32>, canonical_count: u32) -> Result<Self> {
        if table.is_empty() {
            return Err(EngramError::Validation("empty projection table".into()));
        }
        if canonical_count < 2 {
            return Err(EngramError::Validation(
                "canonical_count must cover at least one class and the sentinel".into(),
            ));
        }
        let sentinel = canonical_count - 1;
        let mut seen = vec![false; sentinel as usize];
        for &c in &table {
            if c >= sentinel {
                return Err(EngramError::Validation(format!(
                    "canonical id {c} is the sentinel or beyond (sentinel {sentinel})"
                )));
            }
            seen[c as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(EngramError::Validation(format!(
                "canonical id {missing} has no preimage"
            )));
        }
        Ok(Self {
            table,
            canonical_count,
        })
    }

    /// Identity projection over `vocab_size` raw ids.
    pub fn identity(vocab_size: u32) -> Self {
        Self {
            table: (0..vocab_size).collect(),
            canonical_count: vocab_size + 1,
        }
    }

    #[inline]
    pub fn project(&self, token_id: u32) -> Result<u32> {
        self.table
            .get(token_id as usize)
            .copied()
            .ok_or(EngramError::OutOfRange {
                index: token_id as u64,
                len: self.table.len() as u64,
            })
    }

    pub fn project_all(&self, token_ids: &[u32]) -> Result<Vec<u32>> {
        token_ids.iter().map(|&t| self.project(t)).collect()
    }

    /// Number of raw ids, `|V|`.
    pub fn vocab_size(&self) -> usize {
        self.table.len()
    }

    /// Size of the canonical space including the sentinel.
    pub fn canonical_count(&self) -> u32 {
        self.canonical_count
    }

    /// Number of canonical classes that raw tokens map onto.
    pub fn class_count(&self) -> u32 {
        self.canonical_count - 1
    }

    pub fn sentinel_id(&self) -> u32 {
        self.canonical_count - 1
    }

    /// `1 - classes / |V|`.
    pub fn compression_ratio(&self) -> f64 {
        1.0 - self.class_count() as f64 / self.table.len() as f64
    }

    pub fn table(&self) -> &[u32] {
        &self.table
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.table.len());
        out.extend_from_slice(PROJ_MAGIC);
        out.extend_from_slice(&PROJ_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.table.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.canonical_count.to_le_bytes());
        for &c in &self.table {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| EngramError::Format {
            kind: "projection",
            reason: reason.to_owned(),
        };
        if bytes.len() < 16 || &bytes[..4] != PROJ_MAGIC {
            return Err(bad("missing EGVP header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != PROJ_VERSION {
            return Err(bad("unsupported version"));
        }
        let n = word(8) as usize;
        let canonical_count = word(12);
        if bytes.len() != 16 + 4 * n {
            return Err(bad("payload length does not match |V|"));
        }
        let table = (0..n).map(|i| word(16 + 4 * i)).collect();
        Self::from_table(table, canonical_count)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// A canonical class that absorbed more than one raw token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MergeGroup {
    pub canonical_id: u32,
    /// Normalized surface, lossily decoded for display.
    pub normalized: String,
    pub members: Vec<u32>,
}

/// Output of [`build_projection`].
#[derive(Debug, Clone)]
pub struct ProjectionBuild {
    pub projection: VocabProjection,
    /// Classes with at least two members, largest first.
    pub merge_groups: Vec<MergeGroup>,
}

/// Summary written by `vocab build --report`.
#[derive(Debug, Clone, Serialize)]
pub struct CompressionReport {
    pub vocab_size: usize,
    pub canonical_classes: u32,
    pub sentinel_id: u32,
    pub compression_ratio: f64,
    /// `1 - (classes + 1) / |V|`, counting the sentinel as a class.
    pub compression_ratio_with_sentinel: f64,
    pub options: NormalizeOptions,
    pub top_groups: Vec<ReportGroup>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportGroup {
    pub rank: usize,
    pub merge_count: usize,
    pub normalized: String,
    pub original: Vec<String>,
}

/// Collapses tokens with byte-equal normalized surfaces onto one canonical id.
///
/// Ids are assigned densely in ascending raw-id order of first appearance.
/// Special tokens each get their own id. Raw ids must be unique and cover
/// `0..|V|` without gaps.
pub fn build_projection(vocab: &[VocabEntry], opts: &NormalizeOptions) -> Result<ProjectionBuild> {
    if vocab.is_empty() {
        return Err(EngramError::Validation("empty vocabulary".into()));
    }
    let n = vocab.len();
    let mut by_id: Vec<Option<&VocabEntry>> = vec![None; n];
    for entry in vocab {
        let slot = by_id
            .get_mut(entry.token_id as usize)
            .ok_or_else(|| {
                EngramError::Validation(format!(
                    "token id {} outside 0..{n}; ids must be contiguous",
                    entry.token_id
                ))
            })?;
        if slot.is_some() {
            return Err(EngramError::Validation(format!(
                "duplicate token id {}",
                entry.token_id
            )));
        }
        *slot = Some(entry);
    }

    let mut table = Vec::with_capacity(n);
    let mut classes: HashMap<Vec<u8>, u32> = HashMap::new();
    let mut members: Vec<Vec<u32>> = Vec::new();
    let mut normalized_of: Vec<Vec<u8>> = Vec::new();
    for entry in by_id.into_iter().map(|e| e.expect("ids checked contiguous")) {
        let canonical = if entry.is_special {
            members.push(Vec::new());
            normalized_of.push(entry.surface.clone());
            (members.len() - 1) as u32
        } else {
            let key = normalize_surface_with(&entry.surface, opts);
            *classes.entry(key.clone()).or_insert_with(|| {
                members.push(Vec::new());
                normalized_of.push(key);
                (members.len() - 1) as u32
            })
        };
        members[canonical as usize].push(entry.token_id);
        table.push(canonical);
    }

    let class_count = members.len() as u32;
    let projection = VocabProjection {
        table,
        canonical_count: class_count + 1,
    };
    let mut merge_groups: Vec<MergeGroup> = members
        .into_iter()
        .zip(normalized_of)
        .enumerate()
        .filter(|(_, (m, _))| m.len() > 1)
        .map(|(id, (members, norm))| MergeGroup {
            canonical_id: id as u32,
            normalized: String::from_utf8_lossy(&norm).into_owned(),
            members,
        })
        .collect();
    merge_groups.sort_by(|a, b| {
        b.members
            .len()
            .cmp(&a.members.len())
            .then(a.canonical_id.cmp(&b.canonical_id))
    });
    Ok(ProjectionBuild {
        projection,
        merge_groups,
    })
}

impl ProjectionBuild {
    pub fn report(&self, vocab: &[VocabEntry], opts: &NormalizeOptions, top: usize) -> CompressionReport {
        let surface: HashMap<u32, &[u8]> = vocab
            .iter()
            .map(|e| (e.token_id, e.surface.as_slice()))
            .collect();
        let top_groups = self
            .merge_groups
            .iter()
            .take(top)
            .enumerate()
            .map(|(i, g)| ReportGroup {
                rank: i + 1,
                merge_count: g.members.len(),
                normalized: g.normalized.clone(),
                original: g
                    .members
                    .iter()
                    .map(|id| String::from_utf8_lossy(surface[id]).into_owned())
                    .collect(),
            })
            .collect();
        CompressionReport {
            vocab_size: self.projection.vocab_size(),
            canonical_classes: self.projection.class_count(),
            sentinel_id: self.projection.sentinel_id(),
            compression_ratio: self.projection.compression_ratio(),
            compression_ratio_with_sentinel: 1.0
                - self.projection.canonical_count() as f64 / self.projection.vocab_size() as f64,
            options: *opts,
            top_groups,
        }
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: u32,
    surface_base64: String,
    #[serde(default)]
    special: bool,
}

/// Reads a vocabulary in the JSON-lines `{id, surface_base64, special}` format.
/// Unknown fields are ignored.
pub fn read_vocab_jsonl(reader: impl Read) -> Result<Vec<VocabEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line)?;
        let surface = BASE64.decode(rec.surface_base64.as_bytes()).map_err(|e| {
            EngramError::Validation(format!("line {}: bad base64: {e}", lineno + 1))
        })?;
        out.push(VocabEntry::new(rec.id, surface, rec.special));
    }
    Ok(out)
}

pub fn read_vocab_file(path: impl AsRef<Path>) -> Result<Vec<VocabEntry>> {
    read_vocab_jsonl(File::open(path)?)
}

pub fn write_vocab_jsonl(vocab: &[VocabEntry], mut writer: impl Write) -> Result<()> {
    for e in vocab {
        let line = serde_json::json!({
            "id": e.token_id,
            "surface_base64": BASE64.encode(&e.surface),
            "special": e.is_special,
        });
        writeln!(writer, "{line}")?;
    }
    Ok(())
}
