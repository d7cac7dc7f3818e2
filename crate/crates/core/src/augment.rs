//! QA-pair augmentation: render the data-generation prompt, call a
//! generator, and recover validated QA pairs from the free-form reply.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, GenerationRequest, Generator};

pub const QA_TEMPLATE_ID: &str = "qa_generation";

/// Prompt used to ask a generator for `{num_qa}` QA pairs about `{prompt}`.
pub const QA_TEMPLATE: &str = r#"A conversation between User and Assistant. The user asks a question, and the Assistant solves it.
I am fine-tuning a large legal model and need to generate some question-answer pairs (QA) based on legal text as data enhancement.
The following is a piece of legal text:{prompt}
Please generate {num_qa} high-quality question-answer pairs (QA) based on this text. Both the questions and answers are required to be based on the text content, and the questions should cover the key legal concepts, clauses, or principles in the text.
The sample format is as follows:
{
  "input": "What is Article 96 of the Civil Code?",
  "output": "The legal persons of institutions......"
}
Please ensure that the generated QA pairs meet the following requirements:
1. The questions are clear, and the answers are accurate and directly derived from the text.
2. Question types may include definitions, interpretation of terms, scope of application, legal liability, etc.
3. The answer should be as concise as possible and avoid redundant information.
Please return the QA pair in the following format:
[ { "input": "Question 1", "output": "Answer 1" }, ... ]"#;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("unknown template: {0}")]
    UnknownTemplate(String),
    #[error("unresolved placeholder {{{0}}} in template")]
    UnresolvedPlaceholder(String),
    #[error("num_qa must be at least 1")]
    ZeroQa,
    #[error("no parsable QA array in response")]
    NoParsableArray,
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub input: String,
    pub output: String,
    #[serde(default)]
    pub source_article: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentJob {
    pub legal_text: String,
    pub num_qa: u32,
    pub template_id: String,
}

impl AugmentJob {
    pub fn new(legal_text: impl Into<String>, num_qa: u32) -> Self {
        Self {
            legal_text: legal_text.into(),
            num_qa,
            template_id: QA_TEMPLATE_ID.to_string(),
        }
    }
}

/// Named prompt templates. Placeholders are `{identifier}`; JSON braces in
/// the template body are left alone.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: Vec<(String, String)>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self {
            templates: vec![(QA_TEMPLATE_ID.to_string(), QA_TEMPLATE.to_string())],
        }
    }
}

impl TemplateRegistry {
    pub fn insert(&mut self, id: impl Into<String>, template: impl Into<String>) {
        let id = id.into();
        self.templates.retain(|(k, _)| *k != id);
        self.templates.push((id, template.into()));
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.templates
            .iter()
            .find(|(k, _)| k == id)
            .map(|(_, t)| t.as_str())
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("placeholder regex"))
}

/// Substitutes the legal text and the pair count in a single pass, so text
/// that itself contains `{num_qa}` is not re-expanded.
pub fn render_prompt(job: &AugmentJob, registry: &TemplateRegistry) -> Result<String, AugmentError> {
    if job.num_qa == 0 {
        return Err(AugmentError::ZeroQa);
    }
    let template = registry
        .get(&job.template_id)
        .ok_or_else(|| AugmentError::UnknownTemplate(job.template_id.clone()))?;
    if let Some(c) = placeholder_re()
        .captures_iter(template)
        .find(|c| !matches!(&c[1], "prompt" | "num_qa"))
    {
        return Err(AugmentError::UnresolvedPlaceholder(c[1].to_string()));
    }
    let num = job.num_qa.to_string();
    Ok(placeholder_re()
        .replace_all(template, |c: &Captures| match &c[1] {
            "prompt" => job.legal_text.clone(),
            _ => num.clone(),
        })
        .into_owned())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    CountMismatch { expected: usize, got: usize },
    EmptyField { index: usize },
    DuplicateQuestion { index: usize },
    MalformedEntry { index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedQa {
    pub pairs: Vec<QaPair>,
    pub diagnostics: Vec<Diagnostic>,
}

/// End index (exclusive) of the bracketed value starting at `start`, with
/// string literals and escapes skipped.
fn balanced_end(s: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s[start..].char_indices() {
        if in_str {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '[' | '{' => depth += 1,
            ']' | '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(start + i + c.len_utf8());
                }
            }
            _ => {}
        }
    }
    None
}

fn is_qa_object(v: &serde_json::Value) -> bool {
    v.get("input").is_some_and(|x| x.is_string()) && v.get("output").is_some_and(|x| x.is_string())
}

fn first_qa_array(response: &str) -> Option<Vec<serde_json::Value>> {
    response
        .match_indices('[')
        .filter_map(|(i, _)| balanced_end(response, i).map(|end| &response[i..end]))
        .filter_map(|slice| serde_json::from_str::<Vec<serde_json::Value>>(slice).ok())
        .find(|arr| arr.iter().any(is_qa_object))
}

fn squash_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Recovers QA pairs from the first balanced JSON array of input/output
/// objects in `response`. Malformed entries, empty fields and duplicate
/// questions are dropped and reported.
pub fn parse_qa(response: &str, expected: usize) -> Result<ParsedQa, AugmentError> {
    let entries = first_qa_array(response).ok_or(AugmentError::NoParsableArray)?;
    let mut pairs = Vec::new();
    let mut diagnostics = Vec::new();
    let mut seen = HashSet::new();
    for (index, entry) in entries.iter().enumerate() {
        if !is_qa_object(entry) {
            diagnostics.push(Diagnostic::MalformedEntry { index });
            continue;
        }
        let input = entry["input"].as_str().unwrap_or_default().trim();
        let output = entry["output"].as_str().unwrap_or_default().trim();
        if input.is_empty() || output.is_empty() {
            diagnostics.push(Diagnostic::EmptyField { index });
            continue;
        }
        if !seen.insert(squash_ws(input)) {
            diagnostics.push(Diagnostic::DuplicateQuestion { index });
            continue;
        }
        pairs.push(QaPair {
            input: input.to_string(),
            output: output.to_string(),
            source_article: None,
        });
    }
    if pairs.len() != expected {
        diagnostics.push(Diagnostic::CountMismatch {
            expected,
            got: pairs.len(),
        });
    }
    Ok(ParsedQa { pairs, diagnostics })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSettings {
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            max_tokens: 1024,
            temperature: 0.7,
            seed: None,
        }
    }
}

/// Renders, generates and parses one job. Every returned pair carries
/// `source` as its provenance.
pub fn run_job(
    job: &AugmentJob,
    source: Option<&str>,
    registry: &TemplateRegistry,
    generator: &dyn Generator,
    settings: &GenerationSettings,
) -> Result<ParsedQa, AugmentError> {
    let prompt = render_prompt(job, registry)?;
    let req = GenerationRequest {
        prompt,
        max_tokens: settings.max_tokens,
        temperature: settings.temperature,
        seed: settings.seed,
    };
    let reply = generator.generate(&req)?;
    let mut parsed = parse_qa(&reply, job.num_qa as usize)?;
    for p in &mut parsed.pairs {
        p.source_article = source.map(str::to_string);
    }
    Ok(parsed)
}

/// One statute passage to augment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LawText {
    pub article: String,
    pub text: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_substitutions() {
        let job = AugmentJob::new("MARKER_TEXT_X", 3);
        let p = render_prompt(&job, &TemplateRegistry::default()).unwrap();
        assert_eq!(p.matches("MARKER_TEXT_X").count(), 1);
        assert!(p.contains("Please generate 3 high-quality"));
        assert!(!p.contains("{prompt}") && !p.contains("{num_qa}"));
    }

    #[test]
    fn single_pair_renders() {
        let p = render_prompt(&AugmentJob::new("条文", 1), &TemplateRegistry::default()).unwrap();
        assert!(p.contains("Please generate 1 high-quality"));
    }

    #[test]
    fn stray_placeholder_rejected() {
        let mut reg = TemplateRegistry::default();
        reg.insert("bad", "text {prompt} and {foo}");
        let job = AugmentJob {
            template_id: "bad".into(),
            ..AugmentJob::new("x", 1)
        };
        assert!(matches!(
            render_prompt(&job, &reg),
            Err(AugmentError::UnresolvedPlaceholder(p)) if p == "foo"
        ));
    }

    #[test]
    fn unknown_template_and_zero_count() {
        let reg = TemplateRegistry::default();
        let job = AugmentJob {
            template_id: "nope".into(),
            ..AugmentJob::new("x", 1)
        };
        assert!(matches!(render_prompt(&job, &reg), Err(AugmentError::UnknownTemplate(_))));
        assert!(matches!(render_prompt(&AugmentJob::new("x", 0), &reg), Err(AugmentError::ZeroQa)));
    }

    #[test]
    fn text_with_placeholder_syntax_is_verbatim() {
        let job = AugmentJob::new("see {num_qa} here", 2);
        let p = render_prompt(&job, &TemplateRegistry::default()).unwrap();
        assert!(p.contains("see {num_qa} here"));
    }

    #[test]
    fn well_formed_array() {
        let r = r#"[{"input":"Q1","output":"A1"},{"input":"Q2","output":"A2"}]"#;
        let parsed = parse_qa(r, 2).unwrap();
        assert_eq!(parsed.pairs.len(), 2);
        assert!(parsed.diagnostics.is_empty());
    }

    #[test]
    fn seed_pair_parses() {
        let r = r#"[{"input":"刑法第一条的内容是什么？","output":"【立法宗旨】为了惩罚犯罪，保护人民，根据宪法，结合我国同犯罪作斗争的具体经验及实际情况，制定本法。"}]"#;
        let parsed = parse_qa(r, 1).unwrap();
        assert_eq!(parsed.pairs[0].input, "刑法第一条的内容是什么？");
        assert!(parsed.pairs[0].output.starts_with("【立法宗旨】"));
        assert!(parsed.diagnostics.is_empty());
    }

    #[test]
    fn prose_before_array() {
        let r = "Sure! Here are the pairs [as requested]:\n```json\n[ {\"input\": \"什么是[管制]？\", \"output\": \"一种刑罚。\"} ]\n```\nHope this helps.";
        let parsed = parse_qa(r, 1).unwrap();
        assert_eq!(parsed.pairs.len(), 1);
        assert_eq!(parsed.pairs[0].input, "什么是[管制]？");
    }

    #[test]
    fn diagnostics_for_bad_entries() {
        let r = r#"[{"input":"Q","output":"A"},{"input":" Q ","output":"B"},{"input":"","output":"C"},{"question":"x"},{"input":"Q3","output":"D"}]"#;
        let parsed = parse_qa(r, 5).unwrap();
        assert_eq!(parsed.pairs.len(), 2);
        assert_eq!(
            parsed.diagnostics,
            vec![
                Diagnostic::DuplicateQuestion { index: 1 },
                Diagnostic::EmptyField { index: 2 },
                Diagnostic::MalformedEntry { index: 3 },
                Diagnostic::CountMismatch { expected: 5, got: 2 },
            ]
        );
    }

    #[test]
    fn no_array() {
        assert!(matches!(parse_qa("no json here", 1), Err(AugmentError::NoParsableArray)));
        assert!(matches!(parse_qa("[1, 2, 3]", 1), Err(AugmentError::NoParsableArray)));
        assert!(matches!(parse_qa("[{\"input\": \"unterminated", 1), Err(AugmentError::NoParsableArray)));
    }

    #[test]
    fn over_delivery_is_reported() {
        let r = r#"[{"input":"Q1","output":"A"},{"input":"Q2","output":"A"},{"input":"Q3","output":"A"}]"#;
        let parsed = parse_qa(r, 2).unwrap();
        assert_eq!(parsed.pairs.len(), 3);
        assert!(parsed.diagnostics.contains(&Diagnostic::CountMismatch { expected: 2, got: 3 }));
    }

    #[test]
    fn run_job_attaches_provenance() {
        let job = AugmentJob::new("为了惩罚犯罪，保护人民。根据宪法制定本法。", 2);
        let settings = GenerationSettings {
            seed: Some(3),
            ..Default::default()
        };
        let parsed = run_job(
            &job,
            Some("刑法第一条"),
            &TemplateRegistry::default(),
            &crate::clients::StubGenerator,
            &settings,
        )
        .unwrap();
        assert_eq!(parsed.pairs.len(), 2);
        assert!(parsed.pairs.iter().all(|p| p.source_article.as_deref() == Some("刑法第一条")));
    }
}
