//! Text-overlap metrics (ROUGE-1/2/L, greedy embedding match) and
//! element-extraction scoring aggregated per group.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, Embedder, EmbeddingVector};
use crate::elements::Value;
use crate::text::tokenize;

pub const AVERAGE_LABEL: &str = "Average";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} has no tokens")]
    EmptyAfterTokenization(&'static str),
    #[error("document {0} has no group label")]
    UnknownGroupLabel(usize),
    #[error("{docs} documents but {labels} labels")]
    LabelCountMismatch { docs: usize, labels: usize },
    #[error("embedding failed: {0}")]
    Embedding(#[from] ClientError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(recall: f64, precision: f64) -> Self {
        Self {
            recall,
            precision,
            f1: harmonic(precision, recall),
        }
    }

    fn from_counts(hits: usize, reference: usize, candidate: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Self::new(ratio(hits, reference), ratio(hits, candidate))
    }
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

fn ngram_prf(cand: &[&str], refr: &[&str], n: usize) -> Prf {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(refr, n);
    let (total_c, total_r) = (cand.len().saturating_sub(n - 1), refr.len().saturating_sub(n - 1));
    if total_c == 0 && total_r == 0 {
        // Both too short for this order: score by exact equality.
        let v = if cand == refr { 1.0 } else { 0.0 };
        return Prf::new(v, v);
    }
    let hits: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    Prf::from_counts(hits, total_r, total_c)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1, ROUGE-2 (clipped n-gram overlap) and ROUGE-L (plain LCS).
/// Recall is normalized by the reference, precision by the candidate.
pub fn rouge(candidate: &str, reference: &str) -> Result<RougeScore, MetricsError> {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() {
        return Err(MetricsError::EmptyAfterTokenization("candidate"));
    }
    if refr.is_empty() {
        return Err(MetricsError::EmptyAfterTokenization("reference"));
    }
    let lcs = lcs_len(&cand, &refr);
    Ok(RougeScore {
        rouge1: ngram_prf(&cand, &refr, 1),
        rouge2: ngram_prf(&cand, &refr, 2),
        rouge_l: Prf::from_counts(lcs, refr.len(), cand.len()),
    })
}

fn greedy_side(from: &[EmbeddingVector], to: &[EmbeddingVector]) -> f64 {
    from.iter()
        .map(|a| to.iter().map(|b| a.cosine(b)).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / from.len() as f64
}

/// Greedy token matching: recall averages, over reference tokens, the best
/// cosine to any candidate token; precision does the same from the
/// candidate side.
pub fn embed_score(candidate: &str, reference: &str, embedder: &dyn Embedder) -> Result<Prf, MetricsError> {
    let embed_all = |text: &str, side: &'static str| -> Result<Vec<EmbeddingVector>, MetricsError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(MetricsError::EmptyAfterTokenization(side));
        }
        tokens.iter().map(|t| embedder.embed(t).map_err(Into::into)).collect()
    };
    let cand = embed_all(candidate, "candidate")?;
    let refr = embed_all(reference, "reference")?;
    Ok(Prf::new(greedy_side(&refr, &cand), greedy_side(&cand, &refr)))
}

pub type SlotMap = IndexMap<String, Value>;

/// Slot counts for one document.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocCounts {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub gold_slots: usize,
}

impl DocCounts {
    /// Fraction of gold slots predicted exactly.
    pub fn accuracy(&self) -> f64 {
        if self.gold_slots == 0 {
            0.0
        } else {
            self.true_positive as f64 / self.gold_slots as f64
        }
    }
}

/// A value mismatch on a shared slot counts as both a false positive and a
/// false negative.
pub fn extraction_counts(gold: &SlotMap, pred: &SlotMap) -> DocCounts {
    let mut c = DocCounts {
        gold_slots: gold.len(),
        ..Default::default()
    };
    for (name, g) in gold {
        match pred.get(name) {
            Some(p) if p.matches(g) => c.true_positive += 1,
            Some(_) => {
                c.false_positive += 1;
                c.false_negative += 1;
            }
            None => c.false_negative += 1,
        }
    }
    c.false_positive += pred.keys().filter(|k| !gold.contains_key(*k)).count();
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionScore {
    pub group: String,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl ExtractionScore {
    /// Micro precision and recall over the pooled counts; accuracy is the
    /// mean of per-document accuracies.
    pub fn from_docs(group: impl Into<String>, docs: &[DocCounts]) -> Self {
        let tp: usize = docs.iter().map(|d| d.true_positive).sum();
        let fp: usize = docs.iter().map(|d| d.false_positive).sum();
        let fn_: usize = docs.iter().map(|d| d.false_negative).sum();
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let (precision, recall) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        let accuracy = if docs.is_empty() {
            0.0
        } else {
            docs.iter().map(DocCounts::accuracy).sum::<f64>() / docs.len() as f64
        };
        Self {
            group: group.into(),
            accuracy,
            recall,
            precision,
            f1: harmonic(precision, recall),
        }
    }
}

pub fn extraction_score(gold: &SlotMap, pred: &SlotMap) -> ExtractionScore {
    ExtractionScore::from_docs("", &[extraction_counts(gold, pred)])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub rows: Vec<ExtractionScore>,
    pub average: Option<ExtractionScore>,
}

/// One row per distinct label in order of first appearance, plus the
/// unweighted mean of those rows.
pub fn aggregate_by_group<S: AsRef<str>>(docs: &[DocCounts], labels: &[S]) -> Result<ExtractionReport, MetricsError> {
    if docs.len() != labels.len() {
        return Err(MetricsError::LabelCountMismatch {
            docs: docs.len(),
            labels: labels.len(),
        });
    }
    let mut groups: IndexMap<&str, Vec<DocCounts>> = IndexMap::new();
    for (i, (d, l)) in docs.iter().zip(labels).enumerate() {
        let l = l.as_ref().trim();
        if l.is_empty() {
            return Err(MetricsError::UnknownGroupLabel(i));
        }
        groups.entry(l).or_default().push(*d);
    }
    let rows: Vec<ExtractionScore> = groups
        .iter()
        .map(|(g, ds)| ExtractionScore::from_docs(*g, ds))
        .collect();
    let average = (!rows.is_empty()).then(|| {
        let n = rows.len() as f64;
        let mean = |f: fn(&ExtractionScore) -> f64| rows.iter().map(f).sum::<f64>() / n;
        ExtractionScore {
            group: AVERAGE_LABEL.to_string(),
            accuracy: mean(|r| r.accuracy),
            recall: mean(|r| r.recall),
            precision: mean(|r| r.precision),
            f1: mean(|r| r.f1),
        }
    });
    Ok(ExtractionReport { rows, average })
}

impl ExtractionReport {
    pub fn all_rows(&self) -> impl Iterator<Item = &ExtractionScore> {
        self.rows.iter().chain(self.average.as_ref())
    }

    /// Percentages with one decimal.
    pub fn to_csv(&self) -> Result<String, MetricsError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group", "accuracy", "recall", "precision", "f1"])?;
        for r in self.all_rows() {
            let pct = |v: f64| format!("{:.1}", v * 100.0);
            w.write_record([r.group.clone(), pct(r.accuracy), pct(r.recall), pct(r.precision), pct(r.f1)])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String, MetricsError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::HashingEmbedder;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        let s = rouge("被告人 构成 盗窃罪", "被告人 构成 盗窃罪").unwrap();
        for p in [s.rouge1, s.rouge2, s.rouge_l] {
            assert_eq!(p, Prf::new(1.0, 1.0));
        }
        let d = rouge("a b c", "x y z").unwrap();
        for p in [d.rouge1, d.rouge2, d.rouge_l] {
            assert_eq!(p, Prf::default());
        }
        let one = rouge("a", "a").unwrap();
        assert_eq!(one.rouge2.f1, 1.0);
        assert_eq!(rouge("a", "b").unwrap().rouge2.f1, 0.0);
    }

    #[test]
    fn rouge_cat_example() {
        let s = rouge("the cat sat", "the cat ran").unwrap();
        assert!(close(s.rouge1.f1, 2.0 / 3.0) && close(s.rouge1.recall, 2.0 / 3.0));
        assert!(close(s.rouge2.f1, 0.5) && close(s.rouge2.precision, 0.5));
        assert!(close(s.rouge_l.f1, 2.0 / 3.0));
    }

    #[test]
    fn rouge_symmetry() {
        let a = rouge("本院认为被告人犯盗窃罪", "被告人犯故意伤害罪").unwrap();
        let b = rouge("被告人犯故意伤害罪", "本院认为被告人犯盗窃罪").unwrap();
        for (x, y) in [(a.rouge1, b.rouge1), (a.rouge2, b.rouge2), (a.rouge_l, b.rouge_l)] {
            assert_eq!(x.recall, y.precision);
            assert!(close(x.f1, y.f1));
        }
    }

    #[test]
    fn rouge_empty() {
        assert!(matches!(rouge(" ", "a"), Err(MetricsError::EmptyAfterTokenization("candidate"))));
    }

    #[test]
    fn embed_identity_and_orthogonal() {
        let e = HashingEmbedder::default();
        let s = embed_score("本院认为", "本院认为", &e).unwrap();
        assert!((s.f1 - 1.0).abs() < 1e-6);
        let o = embed_score("ab", "xy", &crate::clients::HashingEmbedder::new(1 << 20)).unwrap();
        assert_eq!(o.f1, 0.0);
    }

    #[test]
    fn extraction_examples() {
        let m = |pairs: &[(&str, u64)]| -> SlotMap {
            pairs.iter().map(|(k, v)| (k.to_string(), Value::Integer(*v))).collect()
        };
        let gold = m(&[("a", 60), ("b", 1)]);
        let s = extraction_score(&gold, &m(&[("a", 60), ("c", 1)]));
        assert_eq!((s.precision, s.recall, s.f1, s.accuracy), (0.5, 0.5, 0.5, 0.5));
        let perfect = extraction_score(&gold, &gold);
        assert_eq!((perfect.precision, perfect.recall, perfect.f1, perfect.accuracy), (1.0, 1.0, 1.0, 1.0));
        let four = m(&[("a", 1), ("b", 2), ("c", 3), ("d", 4)]);
        let empty = extraction_score(&four, &SlotMap::new());
        assert_eq!((empty.precision, empty.recall, empty.f1, empty.accuracy), (0.0, 0.0, 0.0, 0.0));
        let c = extraction_counts(&gold, &m(&[("a", 61)]));
        assert_eq!((c.true_positive, c.false_positive, c.false_negative), (0, 1, 2));
    }

    #[test]
    fn group_average() {
        let doc = |tp, fp, fn_| DocCounts {
            true_positive: tp,
            false_positive: fp,
            false_negative: fn_,
            gold_slots: tp + fn_,
        };
        let single = aggregate_by_group(&[doc(2, 1, 1)], &["北京"]).unwrap();
        let avg = single.average.clone().unwrap();
        assert_eq!(avg.f1, single.rows[0].f1);
        assert_eq!(avg.group, AVERAGE_LABEL);
        // f1 0.4 (p = r = 0.4) and 0.8 (p = r = 0.8).
        let r = aggregate_by_group(&[doc(2, 3, 3), doc(4, 1, 1)], &["A", "B"]).unwrap();
        assert!(close(r.rows[0].f1, 0.4) && close(r.rows[1].f1, 0.8));
        assert!(close(r.average.as_ref().unwrap().f1, 0.6));
        assert_eq!(r.to_csv().unwrap().lines().count(), 4);
        assert!(matches!(
            aggregate_by_group(&[doc(1, 0, 0)], &[" "]),
            Err(MetricsError::UnknownGroupLabel(0))
        ));
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = aggregate_by_group::<&str>(&[], &[]).unwrap();
        assert_eq!(r.to_csv().unwrap(), "group,accuracy,recall,precision,f1\n");
    }
}
