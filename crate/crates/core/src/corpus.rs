//! Document ingestion: key-section extraction by anchor phrases, type/year
//! filtering, and structured record assembly.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elements::ElementCatalog;
use crate::text;

pub const DEFAULT_MIN_YEAR: u32 = 2020;

pub const DEFAULT_ANCHORS: [&str; 5] = ["本院查明", "本院认为", "判决如下", "裁判结果", "审理查明"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("document {0}: none of the anchors occur in the body")]
    NoAnchorsFound(String),
    #[error("unknown element key: {0}")]
    UnknownElementKey(String),
    #[error("anchor set is empty")]
    EmptyAnchorSet,
    #[error("duplicate anchor: {0}")]
    DuplicateAnchor(String),
    #[error("document {id}: {reason}")]
    InvalidDocument { id: String, reason: String },
    #[error("metadata line {line}: {source}")]
    Metadata {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocType {
    Judgment,
    Ruling,
    Other,
}

impl DocType {
    pub fn as_str(self) -> &'static str {
        match self {
            DocType::Judgment => "judgment",
            DocType::Ruling => "ruling",
            DocType::Other => "other",
        }
    }
}

/// One line of the metadata sidecar. The body lives in `<id>.txt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocMeta {
    pub id: String,
    pub doc_type: DocType,
    pub year: u32,
    pub province: String,
    pub crime_type: String,
    #[serde(default)]
    pub procedure: String,
    #[serde(default)]
    pub features: IndexMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDocument {
    pub id: String,
    pub body: String,
    pub doc_type: DocType,
    pub year: u32,
    pub province: String,
    pub crime_type: String,
    pub procedure: String,
}

impl RawDocument {
    pub fn new(meta: &DocMeta, body: &str) -> Result<Self, CorpusError> {
        let invalid = |reason: &str| CorpusError::InvalidDocument {
            id: meta.id.clone(),
            reason: reason.to_string(),
        };
        if body.is_empty() {
            return Err(invalid("empty body"));
        }
        if !(1000..=9999).contains(&meta.year) {
            return Err(invalid("year must be a 4-digit positive integer"));
        }
        Ok(Self {
            id: meta.id.clone(),
            body: body.to_string(),
            doc_type: meta.doc_type,
            year: meta.year,
            province: meta.province.clone(),
            crime_type: meta.crime_type.clone(),
            procedure: meta.procedure.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet(Vec<String>);

impl AnchorSet {
    pub fn new<S: Into<String>>(anchors: impl IntoIterator<Item = S>) -> Result<Self, CorpusError> {
        let anchors: Vec<String> = anchors.into_iter().map(Into::into).collect();
        if anchors.is_empty() || anchors.iter().any(String::is_empty) {
            return Err(CorpusError::EmptyAnchorSet);
        }
        for (i, a) in anchors.iter().enumerate() {
            if anchors[..i].contains(a) {
                return Err(CorpusError::DuplicateAnchor(a.clone()));
            }
        }
        Ok(Self(anchors))
    }

    /// One anchor phrase per non-blank line.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let raw = fs::read_to_string(path).map_err(io_err(path))?;
        Self::new(
            raw.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(text::normalize),
        )
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn contains(&self, anchor: &str) -> bool {
        self.0.iter().any(|a| a == anchor)
    }
}

impl Default for AnchorSet {
    fn default() -> Self {
        Self::new(DEFAULT_ANCHORS).expect("default anchors are valid")
    }
}

pub type Sections = IndexMap<String, String>;

/// Slices the normalized body at the first occurrence of each anchor. A span
/// runs from just after its anchor to the next anchor occurrence or the end
/// of the body. An anchor whose first occurrence starts inside an earlier
/// anchor's phrase is treated as absent.
pub fn extract_sections(doc: &RawDocument, anchors: &AnchorSet) -> Result<Sections, CorpusError> {
    let body = text::normalize(&doc.body);
    let mut hits: Vec<(usize, &str)> = anchors
        .as_slice()
        .iter()
        .filter_map(|a| body.find(a.as_str()).map(|pos| (pos, a.as_str())))
        .collect();
    hits.sort_by_key(|&(pos, _)| pos);

    let mut accepted: Vec<(usize, &str)> = Vec::with_capacity(hits.len());
    for (pos, anchor) in hits {
        if let Some(&(prev, prev_anchor)) = accepted.last() {
            if pos < prev + prev_anchor.len() {
                continue;
            }
        }
        accepted.push((pos, anchor));
    }
    if accepted.is_empty() {
        return Err(CorpusError::NoAnchorsFound(doc.id.clone()));
    }

    let mut sections = Sections::with_capacity(accepted.len());
    for (i, &(pos, anchor)) in accepted.iter().enumerate() {
        let start = pos + anchor.len();
        let end = accepted.get(i + 1).map_or(body.len(), |&(next, _)| next);
        sections.insert(anchor.to_string(), body[start..end].to_string());
    }
    Ok(sections)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    RulingExcluded,
    OtherTypeExcluded,
    TooOld,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Drop(DropReason),
}

/// Keeps judgments from `min_year` onward.
pub fn filter_document(doc: &RawDocument, min_year: u32) -> FilterDecision {
    match doc.doc_type {
        DocType::Ruling => FilterDecision::Drop(DropReason::RulingExcluded),
        DocType::Other => FilterDecision::Drop(DropReason::OtherTypeExcluded),
        DocType::Judgment if doc.year < min_year => FilterDecision::Drop(DropReason::TooOld),
        DocType::Judgment => FilterDecision::Keep,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocRecord {
    pub index: String,
    pub doc_type: String,
    pub procedure: String,
    pub features: IndexMap<String, String>,
    pub sections: Sections,
}

pub fn build_record(
    doc: &RawDocument,
    sections: Sections,
    features: IndexMap<String, String>,
    catalog: &ElementCatalog,
) -> Result<DocRecord, CorpusError> {
    if let Some(bad) = features.keys().find(|k| !catalog.contains(k)) {
        return Err(CorpusError::UnknownElementKey(bad.clone()));
    }
    Ok(DocRecord {
        index: doc.id.clone(),
        doc_type: doc.doc_type.as_str().to_string(),
        procedure: doc.procedure.clone(),
        features,
        sections,
    })
}

pub fn read_metadata(path: &Path) -> Result<Vec<DocMeta>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut metas = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let meta = serde_json::from_str(&line)
            .map_err(|source| CorpusError::Metadata { line: i + 1, source })?;
        metas.push(meta);
    }
    Ok(metas)
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub min_year: u32,
    pub anchors: AnchorSet,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            min_year: DEFAULT_MIN_YEAR,
            anchors: AnchorSet::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BuildStats {
    pub kept: usize,
    pub ruling_excluded: usize,
    pub other_type_excluded: usize,
    pub too_old: usize,
    pub no_anchors: usize,
}

/// Record plus the grouping metadata that does not belong in the record
/// itself.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltRecord {
    pub record: DocRecord,
    pub province: String,
    pub crime_type: String,
}

/// Reads `<dir>/<id>.txt` for each metadata line and emits records for the
/// documents that pass filtering and contain at least one anchor.
pub fn build_corpus(
    dir: &Path,
    metas: &[DocMeta],
    catalog: &ElementCatalog,
    opts: &BuildOptions,
) -> Result<(Vec<BuiltRecord>, BuildStats), CorpusError> {
    let mut stats = BuildStats::default();
    let mut out = Vec::new();
    for meta in metas {
        let path = dir.join(format!("{}.txt", meta.id));
        let body = fs::read_to_string(&path).map_err(io_err(&path))?;
        let doc = RawDocument::new(meta, &body)?;
        match filter_document(&doc, opts.min_year) {
            FilterDecision::Drop(DropReason::RulingExcluded) => stats.ruling_excluded += 1,
            FilterDecision::Drop(DropReason::OtherTypeExcluded) => stats.other_type_excluded += 1,
            FilterDecision::Drop(DropReason::TooOld) => stats.too_old += 1,
            FilterDecision::Keep => match extract_sections(&doc, &opts.anchors) {
                Ok(sections) => {
                    let record = build_record(&doc, sections, meta.features.clone(), catalog)?;
                    stats.kept += 1;
                    out.push(BuiltRecord {
                        record,
                        province: doc.province.clone(),
                        crime_type: doc.crime_type.clone(),
                    });
                }
                Err(CorpusError::NoAnchorsFound(_)) => stats.no_anchors += 1,
                Err(e) => return Err(e),
            },
        }
    }
    Ok((out, stats))
}

pub fn write_records<'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a DocRecord>,
) -> Result<(), CorpusError> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<DocRecord>, CorpusError> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CorpusError::from))
        .collect()
}
