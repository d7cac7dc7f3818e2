//! Retrieval-based instruction refinement: split a document into fixed-size
//! chunks, match each chunk to its nearest catalog element by cosine
//! similarity, and list only the matched elements in the extraction
//! instruction.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, Embedder, EmbeddingVector};
use crate::elements::ElementCatalog;
use crate::text::token_spans;

pub const DEFAULT_MAX_CHUNK_TOKENS: usize = 512;

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("document has no tokens")]
    EmptyText,
    #[error("max_chunk_tokens must be at least 1")]
    InvalidChunkSize,
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("true element set is empty")]
    EmptyTruth,
    #[error("catalog elements without augmented descriptions: {0:?}")]
    MissingAugmentedDescriptions(Vec<String>),
    #[error("embedding failed: {0}")]
    Embedding(#[from] ClientError),
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    pub text: String,
    /// Token range `[start, end)` within the document.
    pub token_span: (usize, usize),
}

/// Greedy split into chunks of at most `max_chunk_tokens` tokens. Text
/// between tokens stays with the preceding chunk, so the chunk texts
/// concatenate back to `text`.
pub fn chunk_text(text: &str, max_chunk_tokens: usize) -> Result<Vec<Chunk>, RetrieveError> {
    if max_chunk_tokens == 0 {
        return Err(RetrieveError::InvalidChunkSize);
    }
    let spans = token_spans(text);
    if spans.is_empty() {
        return Err(RetrieveError::EmptyText);
    }
    let starts: Vec<usize> = (0..spans.len()).step_by(max_chunk_tokens).collect();
    Ok(starts
        .iter()
        .enumerate()
        .map(|(index, &first)| {
            let last = (first + max_chunk_tokens).min(spans.len());
            let from = if index == 0 { 0 } else { spans[first].0 };
            let to = if last == spans.len() { text.len() } else { spans[last].0 };
            Chunk {
                index,
                text: text[from..to].to_string(),
                token_span: (first, last),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkMatch {
    pub chunk_index: usize,
    pub element_name: String,
    pub cosine: f64,
}

/// Embeds every catalog element's retrieval text.
pub fn embed_catalog(
    catalog: &ElementCatalog,
    embedder: &dyn Embedder,
    use_augmented: bool,
) -> Result<Vec<EmbeddingVector>, RetrieveError> {
    catalog
        .elements()
        .par_iter()
        .map(|e| embedder.embed(e.retrieval_text(use_augmented)).map_err(Into::into))
        .collect()
}

fn ranked(query: &EmbeddingVector, table: &[EmbeddingVector], k: usize) -> Result<Vec<(usize, f64)>, RetrieveError> {
    let mut scored = Vec::with_capacity(table.len());
    for (i, e) in table.iter().enumerate() {
        if e.dim() != query.dim() {
            return Err(RetrieveError::DimensionMismatch(query.dim(), e.dim()));
        }
        scored.push((i, query.cosine(e)));
    }
    // Stable sort keeps the lower catalog index first on exact ties.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k);
    Ok(scored)
}

/// The `top_k` most similar catalog elements for every chunk, best first.
/// Exact ties go to the lower catalog index.
pub fn match_elements_top_k(
    chunks: &[Chunk],
    catalog: &ElementCatalog,
    embedder: &dyn Embedder,
    use_augmented: bool,
    top_k: usize,
) -> Result<Vec<ChunkMatch>, RetrieveError> {
    if top_k == 0 {
        return Err(RetrieveError::InvalidTopK);
    }
    let table = embed_catalog(catalog, embedder, use_augmented)?;
    let per_chunk: Vec<Vec<ChunkMatch>> = chunks
        .par_iter()
        .map(|chunk| {
            let q = embedder.embed(&chunk.text)?;
            Ok(ranked(&q, &table, top_k)?
                .into_iter()
                .map(|(i, cosine)| ChunkMatch {
                    chunk_index: chunk.index,
                    element_name: catalog.elements()[i].name.clone(),
                    cosine,
                })
                .collect())
        })
        .collect::<Result<_, RetrieveError>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// One best element per chunk.
pub fn match_elements(
    chunks: &[Chunk],
    catalog: &ElementCatalog,
    embedder: &dyn Embedder,
    use_augmented: bool,
) -> Result<Vec<ChunkMatch>, RetrieveError> {
    match_elements_top_k(chunks, catalog, embedder, use_augmented, 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalContext {
    pub document: String,
    pub matched_elements: Vec<String>,
}

pub fn build_context(document: &str, matches: &[ChunkMatch]) -> RetrievalContext {
    let mut seen = HashSet::new();
    let matched_elements = matches
        .iter()
        .filter(|m| seen.insert(m.element_name.as_str()))
        .map(|m| m.element_name.clone())
        .collect();
    RetrievalContext {
        document: document.to_string(),
        matched_elements,
    }
}

impl RetrievalContext {
    /// Elements the instruction should list: the matched ones, or the whole
    /// catalog when nothing matched.
    pub fn instruction_elements<'a>(&'a self, catalog: &'a ElementCatalog) -> Vec<&'a str> {
        if self.matched_elements.is_empty() {
            catalog.names().collect()
        } else {
            self.matched_elements.iter().map(String::as_str).collect()
        }
    }

    pub fn render_instruction(&self, catalog: &ElementCatalog) -> String {
        format!(
            "请从下列判决书中抽取以下法律要素，并以JSON格式输出：{}\n\n判决书：\n{}",
            self.instruction_elements(catalog).join("、"),
            self.document
        )
    }
}

/// `|truth ∩ retrieved| / |truth|`, both treated as sets.
pub fn overlap_accuracy<S: AsRef<str>, T: AsRef<str>>(truth: &[S], retrieved: &[T]) -> Result<f64, RetrieveError> {
    let truth: HashSet<&str> = truth.iter().map(AsRef::as_ref).collect();
    if truth.is_empty() {
        return Err(RetrieveError::EmptyTruth);
    }
    let retrieved: HashSet<&str> = retrieved.iter().map(AsRef::as_ref).collect();
    Ok(truth.intersection(&retrieved).count() as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDocument {
    pub id: String,
    pub text: String,
    pub true_elements: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub document_id: String,
    pub original: f64,
    pub augmented: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationComparison {
    pub rows: Vec<ComparisonRow>,
    pub mean_original: f64,
    pub mean_augmented: f64,
}

impl AugmentationComparison {
    pub fn write_csv(&self, w: impl Write) -> Result<(), RetrieveError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["document_id", "original", "augmented"])?;
        for r in &self.rows {
            out.write_record([r.document_id.clone(), format!("{:.4}", r.original), format!("{:.4}", r.augmented)])?;
        }
        out.write_record([
            "mean".to_string(),
            format!("{:.4}", self.mean_original),
            format!("{:.4}", self.mean_augmented),
        ])?;
        out.flush()?;
        Ok(())
    }
}

fn retrieved_names(
    doc: &LabeledDocument,
    catalog: &ElementCatalog,
    embedder: &dyn Embedder,
    table: &[EmbeddingVector],
    max_chunk_tokens: usize,
) -> Result<Vec<String>, RetrieveError> {
    let chunks = chunk_text(&doc.text, max_chunk_tokens)?;
    chunks
        .iter()
        .map(|c| {
            let q = embedder.embed(&c.text)?;
            let (i, _) = ranked(&q, table, 1)?[0];
            Ok(catalog.elements()[i].name.clone())
        })
        .collect()
}

/// Overlap accuracy per document with original and with augmented element
/// descriptions.
pub fn compare_augmentation(
    dataset: &[LabeledDocument],
    catalog: &ElementCatalog,
    embedder: &dyn Embedder,
    max_chunk_tokens: usize,
) -> Result<AugmentationComparison, RetrieveError> {
    let missing: Vec<String> = catalog
        .elements()
        .iter()
        .filter(|e| e.augmented_description.is_none())
        .map(|e| e.name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(RetrieveError::MissingAugmentedDescriptions(missing));
    }
    let original = embed_catalog(catalog, embedder, false)?;
    let augmented = embed_catalog(catalog, embedder, true)?;
    let rows: Vec<ComparisonRow> = dataset
        .par_iter()
        .map(|doc| {
            let a = retrieved_names(doc, catalog, embedder, &original, max_chunk_tokens)?;
            let b = retrieved_names(doc, catalog, embedder, &augmented, max_chunk_tokens)?;
            Ok(ComparisonRow {
                document_id: doc.id.clone(),
                original: overlap_accuracy(&doc.true_elements, &a)?,
                augmented: overlap_accuracy(&doc.true_elements, &b)?,
            })
        })
        .collect::<Result<_, RetrieveError>>()?;
    let n = rows.len().max(1) as f64;
    Ok(AugmentationComparison {
        mean_original: rows.iter().map(|r| r.original).sum::<f64>() / n,
        mean_augmented: rows.iter().map(|r| r.augmented).sum::<f64>() / n,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::HashingEmbedder;
    use crate::elements::{ElementDef, ElementKind};

    #[test]
    fn chunk_sizes() {
        let text: String = std::iter::repeat("法").take(2500).collect();
        let chunks = chunk_text(&text, 1000).unwrap();
        let sizes: Vec<usize> = chunks.iter().map(|c| c.token_span.1 - c.token_span.0).collect();
        assert_eq!(sizes, vec![1000, 1000, 500]);
        assert_eq!(chunks.iter().map(|c| c.text.as_str()).collect::<String>(), text);
    }

    #[test]
    fn short_text_single_chunk() {
        let text = "  the court finds\n";
        let chunks = chunk_text(text, 512).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, text);
    }

    #[test]
    fn mixed_text_rejoins() {
        let text = "本院认为 the defendant 被告人 was\tfound  guilty。";
        for k in 1..6 {
            let chunks = chunk_text(text, k).unwrap();
            assert_eq!(chunks.iter().map(|c| c.text.as_str()).collect::<String>(), text);
            assert!(chunks.iter().all(|c| token_spans(&c.text).len() <= k));
        }
    }

    #[test]
    fn empty_text() {
        assert!(matches!(chunk_text("  \n", 4), Err(RetrieveError::EmptyText)));
        assert!(matches!(chunk_text("a", 0), Err(RetrieveError::InvalidChunkSize)));
    }

    #[test]
    fn self_match() {
        let catalog = ElementCatalog::starter();
        let e = HashingEmbedder::default();
        let target = &catalog.elements()[3];
        let chunk = Chunk {
            index: 0,
            text: target.description.clone(),
            token_span: (0, 1),
        };
        let m = match_elements(&[chunk], &catalog, &e, false).unwrap();
        assert_eq!(m[0].element_name, target.name);
        assert!((m[0].cosine - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let defs = ["甲", "乙", "丙", "丁", "戊", "己"]
            .iter()
            .map(|n| ElementDef::new(n, ElementKind::Flag, None))
            .collect::<Vec<_>>();
        let mut defs = defs;
        defs[2].description = "同".into();
        defs[5].description = "同".into();
        let catalog = ElementCatalog::new(defs).unwrap();
        let chunk = Chunk {
            index: 0,
            text: "同".into(),
            token_span: (0, 1),
        };
        let m = match_elements(&[chunk], &catalog, &HashingEmbedder::default(), false).unwrap();
        assert_eq!(m[0].element_name, "丙");
    }

    #[test]
    fn context_dedup() {
        let m = |n: &str| ChunkMatch {
            chunk_index: 0,
            element_name: n.into(),
            cosine: 0.5,
        };
        let ctx = build_context("doc", &[m("A"), m("B"), m("A"), m("C")]);
        assert_eq!(ctx.matched_elements, vec!["A", "B", "C"]);
        let empty = build_context("doc", &[]);
        let catalog = ElementCatalog::starter();
        assert_eq!(empty.instruction_elements(&catalog).len(), catalog.len());
        assert!(ctx.render_instruction(&catalog).contains("A、B、C"));
    }

    #[test]
    fn overlap_examples() {
        let truth = ["a", "b", "c", "d", "e"];
        assert_eq!(overlap_accuracy(&truth, &truth).unwrap(), 1.0);
        assert_eq!(overlap_accuracy(&truth, &["a", "b", "c", "d", "x"]).unwrap(), 0.8);
        assert_eq!(overlap_accuracy(&truth, &["x"]).unwrap(), 0.0);
        let none: [&str; 0] = [];
        assert!(matches!(overlap_accuracy(&none, &truth), Err(RetrieveError::EmptyTruth)));
    }

    #[test]
    fn augmentation_requires_descriptions() {
        let catalog = ElementCatalog::new(vec![ElementDef::new("甲", ElementKind::Flag, None)]).unwrap();
        let r = compare_augmentation(&[], &catalog, &HashingEmbedder::default(), 8);
        assert!(matches!(r, Err(RetrieveError::MissingAugmentedDescriptions(_))));
    }

    #[test]
    fn identical_variants_identical_scores() {
        let defs = ["有期徒刑", "缓刑", "罚金"]
            .iter()
            .map(|n| ElementDef::new(n, ElementKind::Flag, Some(n)))
            .collect();
        let catalog = ElementCatalog::new(defs).unwrap();
        let docs = vec![LabeledDocument {
            id: "d1".into(),
            text: "判处有期徒刑并处罚金".into(),
            true_elements: vec!["有期徒刑".into(), "罚金".into()],
        }];
        let report = compare_augmentation(&docs, &catalog, &HashingEmbedder::default(), 5).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].original, report.rows[0].augmented);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("document_id,original,augmented\n"));
    }
}
