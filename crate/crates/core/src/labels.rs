//! Text labels, prompt templates, and frozen text embeddings.
//!
//! Each class carries one or more global descriptions and exactly nine local
//! descriptions ordered `k = 1..=9`: the x-band (left, center, right), then
//! the y-band (front, center, back), then the z-band (bottom, center, top).
//! Embeddings come either from a JSON-lines file produced by an external text
//! encoder or from [`fallback_embed`], a deterministic signed feature hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::NUM_LOCAL_LABELS;
use crate::error::{Error, Result};

pub const AXES: [&str; 3] = ["x", "y", "z"];

/// Position words per axis, index 0..3 ↔ grid coordinate 1..=3.
pub const POSITIONS: [[&str; 3]; 3] = [
    ["left", "center", "right"],
    ["front", "center", "back"],
    ["bottom", "center", "top"],
];

pub const GUIDANCE_PROMPT: &str = include_str!("../assets/guidance_prompt.txt");
const GLOBAL_QUERY: &str = include_str!("../assets/global_query.txt");
const LOCAL_QUERY: &str = include_str!("../assets/local_query.txt");

pub const DEFAULT_FALLBACK_DIM: usize = 256;

/// `(axis, position)` words of local label `k` (1..=9).
pub fn label_position(k: usize) -> Result<(&'static str, &'static str)> {
    if !(1..=NUM_LOCAL_LABELS).contains(&k) {
        return Err(Error::OutOfRange {
            value: k,
            lo: 1,
            hi: NUM_LOCAL_LABELS,
        });
    }
    let axis = (k - 1) / 3;
    Ok((AXES[axis], POSITIONS[axis][(k - 1) % 3]))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompts {
    pub guidance: String,
    pub global: String,
    pub local: Vec<String>,
}

pub fn render_prompts(class_name: &str) -> Result<Prompts> {
    if class_name.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let global = GLOBAL_QUERY.trim().replace("{classname}", class_name);
    let local = (1..=NUM_LOCAL_LABELS)
        .map(|k| {
            let (axis, pos) = label_position(k).expect("k in range");
            LOCAL_QUERY
                .trim()
                .replace("{pos}", pos)
                .replace("{axis}", axis)
                .replace("{classname}", class_name)
        })
        .collect();
    Ok(Prompts {
        guidance: GUIDANCE_PROMPT.to_string(),
        global,
        local,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub class_name: String,
    pub global_labels: Vec<String>,
    pub local_labels: Vec<String>,
}

impl LabelSet {
    pub fn validate(&self) -> Result<()> {
        if self.global_labels.is_empty() {
            return Err(Error::Config(format!("class {:?} has no global label", self.class_name)));
        }
        if self.local_labels.len() != NUM_LOCAL_LABELS {
            let k = self.local_labels.len() + 1;
            return Err(Error::MissingLocalK {
                class: self.class_name.clone(),
                k: k.min(NUM_LOCAL_LABELS),
            });
        }
        Ok(())
    }
}

/// `"{pos} region of the {axis}-axis for {classname}"`.
pub fn classification_local_label(class_name: &str, k: usize) -> Result<String> {
    let (axis, pos) = label_position(k)?;
    Ok(format!("{pos} region of the {axis}-axis for {class_name}"))
}

/// Global label = the class name; local labels from the region template.
pub fn classification_labels(class_vocabulary: &[String]) -> Result<BTreeMap<String, LabelSet>> {
    if class_vocabulary.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    class_vocabulary
        .iter()
        .map(|c| {
            let local_labels = (1..=NUM_LOCAL_LABELS)
                .map(|k| classification_local_label(c, k))
                .collect::<Result<_>>()?;
            Ok((
                c.clone(),
                LabelSet {
                    class_name: c.clone(),
                    global_labels: vec![c.clone()],
                    local_labels,
                },
            ))
        })
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Signed feature hashing of lowercase alphanumeric tokens, L2-normalized.
///
/// Bucket = `fnv1a(token) mod dim`; sign from the top bit of a second hash
/// over the token with a `#` suffix.
pub fn fallback_embed(text: &str, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut v = vec![0.0; dim];
    for t in &tokens {
        let bucket = (fnv1a(t.as_bytes()) % dim as u64) as usize;
        let sign_hash = fnv1a(format!("{t}#").as_bytes());
        v[bucket] += if sign_hash >> 63 == 0 { 1.0 } else { -1.0 };
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector(format!("fallback embedding of {text:?}")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Ingested,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledVector {
    pub text: String,
    pub vector: Vec<f64>,
}

/// Frozen raw text embeddings of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingSet {
    pub class_name: String,
    pub global: Vec<LabeledVector>,
    pub local: Vec<LabeledVector>,
    pub source: EmbeddingSource,
}

impl TextEmbeddingSet {
    pub fn dim(&self) -> usize {
        self.global
            .first()
            .or(self.local.first())
            .map_or(0, |v| v.vector.len())
    }

    pub fn local_vectors(&self) -> Vec<Vec<f64>> {
        self.local.iter().map(|l| l.vector.clone()).collect()
    }

    pub fn global_vectors(&self) -> Vec<Vec<f64>> {
        self.global.iter().map(|l| l.vector.clone()).collect()
    }

    /// SHA-256 over class, texts and vector bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.class_name.as_bytes());
        for lv in self.global.iter().chain(&self.local) {
            h.update(lv.text.as_bytes());
            for x in &lv.vector {
                h.update(x.to_le_bytes());
            }
        }
        let mut out = String::with_capacity(64);
        for b in h.finalize().iter() {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}

pub fn embed_label_set(labels: &LabelSet, dim: usize) -> Result<TextEmbeddingSet> {
    labels.validate()?;
    let embed = |texts: &[String]| -> Result<Vec<LabeledVector>> {
        texts
            .iter()
            .map(|t| {
                Ok(LabeledVector {
                    text: t.clone(),
                    vector: fallback_embed(t, dim)?,
                })
            })
            .collect()
    };
    Ok(TextEmbeddingSet {
        class_name: labels.class_name.clone(),
        global: embed(&labels.global_labels)?,
        local: embed(&labels.local_labels)?,
        source: EmbeddingSource::Fallback,
    })
}

pub fn embed_label_sets(
    labels: &BTreeMap<String, LabelSet>,
    dim: usize,
) -> Result<BTreeMap<String, TextEmbeddingSet>> {
    labels
        .iter()
        .map(|(c, l)| Ok((c.clone(), embed_label_set(l, dim)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Global,
    Local,
}

/// One line of an embedding (or label-only) JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub class: String,
    pub kind: LabelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vector: Vec<f64>,
}

pub fn parse_embedding_records(text: &str) -> Result<Vec<EmbeddingRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Groups records into per-class sets, enforcing one uniform dimension,
/// nonzero vectors, at least one global and all nine local labels.
pub fn embeddings_from_records(
    records: &[EmbeddingRecord],
    source: EmbeddingSource,
) -> Result<BTreeMap<String, TextEmbeddingSet>> {
    let mut dim: Option<usize> = None;
    let mut globals: BTreeMap<String, Vec<LabeledVector>> = BTreeMap::new();
    let mut locals: BTreeMap<String, Vec<Option<LabeledVector>>> = BTreeMap::new();
    for r in records {
        let d = *dim.get_or_insert(r.vector.len());
        if r.vector.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: r.vector.len(),
            });
        }
        if r.vector.iter().all(|x| *x == 0.0) || r.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::ZeroVector(format!("{} {:?} {:?}", r.class, r.kind, r.text)));
        }
        let lv = LabeledVector {
            text: r.text.clone(),
            vector: r.vector.clone(),
        };
        match r.kind {
            LabelKind::Global => globals.entry(r.class.clone()).or_default().push(lv),
            LabelKind::Local => {
                let k = r.k.ok_or_else(|| Error::Config(format!("local record of {} lacks k", r.class)))?;
                if !(1..=NUM_LOCAL_LABELS).contains(&k) {
                    return Err(Error::OutOfRange {
                        value: k,
                        lo: 1,
                        hi: NUM_LOCAL_LABELS,
                    });
                }
                let slots = locals
                    .entry(r.class.clone())
                    .or_insert_with(|| vec![None; NUM_LOCAL_LABELS]);
                slots[k - 1] = Some(lv);
            }
        }
    }
    let classes: Vec<String> = globals.keys().chain(locals.keys()).cloned().collect();
    let mut out = BTreeMap::new();
    for class in classes {
        if out.contains_key(&class) {
            continue;
        }
        let slots = locals.remove(&class).unwrap_or_else(|| vec![None; NUM_LOCAL_LABELS]);
        let mut local = Vec::with_capacity(NUM_LOCAL_LABELS);
        for (i, s) in slots.into_iter().enumerate() {
            local.push(s.ok_or_else(|| Error::MissingLocalK {
                class: class.clone(),
                k: i + 1,
            })?);
        }
        let global = globals.remove(&class).unwrap_or_default();
        if global.is_empty() {
            return Err(Error::Config(format!("class {class:?} has no global embedding")));
        }
        out.insert(
            class.clone(),
            TextEmbeddingSet {
                class_name: class,
                global,
                local,
                source,
            },
        );
    }
    Ok(out)
}

pub fn ingest_embeddings(path: impl AsRef<Path>) -> Result<BTreeMap<String, TextEmbeddingSet>> {
    let text = crate::error::read_text(path)?;
    embeddings_from_records(&parse_embedding_records(&text)?, EmbeddingSource::Ingested)
}

pub fn embedding_records(sets: &BTreeMap<String, TextEmbeddingSet>) -> Vec<EmbeddingRecord> {
    let mut out = Vec::new();
    for (class, set) in sets {
        for g in &set.global {
            out.push(EmbeddingRecord {
                class: class.clone(),
                kind: LabelKind::Global,
                k: None,
                text: g.text.clone(),
                vector: g.vector.clone(),
            });
        }
        for (i, l) in set.local.iter().enumerate() {
            out.push(EmbeddingRecord {
                class: class.clone(),
                kind: LabelKind::Local,
                k: Some(i + 1),
                text: l.text.clone(),
                vector: l.vector.clone(),
            });
        }
    }
    out
}

pub fn write_records(records: &[EmbeddingRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    crate::error::write_file(path, out)?;
    Ok(())
}

/// Label sets from records that carry text only (vectors ignored).
pub fn label_sets_from_records(records: &[EmbeddingRecord]) -> Result<BTreeMap<String, LabelSet>> {
    let mut globals: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut locals: BTreeMap<String, Vec<Option<String>>> = BTreeMap::new();
    for r in records {
        match r.kind {
            LabelKind::Global => globals.entry(r.class.clone()).or_default().push(r.text.clone()),
            LabelKind::Local => {
                let k = r.k.filter(|k| (1..=NUM_LOCAL_LABELS).contains(k)).ok_or_else(|| {
                    Error::Config(format!("local record of {} needs k in 1..=9", r.class))
                })?;
                locals
                    .entry(r.class.clone())
                    .or_insert_with(|| vec![None; NUM_LOCAL_LABELS])[k - 1] = Some(r.text.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    for (class, global_labels) in globals {
        let slots = locals.remove(&class).unwrap_or_else(|| vec![None; NUM_LOCAL_LABELS]);
        let mut local_labels = Vec::new();
        for (i, s) in slots.into_iter().enumerate() {
            local_labels.push(s.ok_or_else(|| Error::MissingLocalK {
                class: class.clone(),
                k: i + 1,
            })?);
        }
        out.insert(
            class.clone(),
            LabelSet {
                class_name: class,
                global_labels,
                local_labels,
            },
        );
    }
    if let Some((class, _)) = locals.into_iter().next() {
        return Err(Error::Config(format!("class {class:?} has no global label")));
    }
    Ok(out)
}
