//! Rule-based rewards.
//!
//! Format rewards score template conformance and penalize unreadable
//! characters and echoed input. Process rewards score the presence and order
//! of reasoning-step markers and check that a stated total equals the sum of
//! the stated item values.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{is_cjk_ideograph, is_cjk_punctuation};

pub const DEFAULT_LAMBDA_GARBLED: f64 = 1.0;
pub const DEFAULT_LAMBDA_DUPLICATION: f64 = 0.5;
pub const DUPLICATION_MIN_CHARS: usize = 30;
pub const ARITHMETIC_TOLERANCE: f64 = 0.01;
const CUE_CHARS: usize = 16;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("template placeholder [{0}] is not a required slot")]
    UndeclaredPlaceholder(String),
    #[error("required slot {0} does not appear in the template")]
    MissingSlot(String),
    #[error("bad pattern for slot {slot}: {source}")]
    BadPattern { slot: String, source: regex::Error },
    #[error("reward weights must be finite and non-negative")]
    NegativeWeight,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FormatSpecFile {
    template_text: String,
    required_slots: Vec<String>,
    #[serde(default)]
    slot_patterns: IndexMap<String, String>,
}

#[derive(Debug, Clone)]
struct SlotRule {
    slot: String,
    cue: String,
    terminator: String,
    pattern: Option<Regex>,
}

/// A document skeleton with `[slot]` placeholders. Each required slot is
/// located in an output by the literal text around its first occurrence in
/// the template (up to 16 characters on each side).
#[derive(Debug, Clone)]
pub struct FormatSpec {
    file: FormatSpecFile,
    rules: Vec<SlotRule>,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\[\]\n]+)\]").expect("slot regex"))
}

fn last_chars(s: &str, n: usize) -> &str {
    let count = s.chars().count();
    match s.char_indices().nth(count.saturating_sub(n)) {
        Some((i, _)) if count > n => &s[i..],
        _ => s,
    }
}

fn first_chars(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl FormatSpec {
    pub fn new(
        template_text: impl Into<String>,
        required_slots: Vec<String>,
        slot_patterns: IndexMap<String, String>,
    ) -> Result<Self, RewardError> {
        Self::from_file(FormatSpecFile {
            template_text: template_text.into(),
            required_slots,
            slot_patterns,
        })
    }

    fn from_file(file: FormatSpecFile) -> Result<Self, RewardError> {
        let template = &file.template_text;
        let places: Vec<_> = placeholder_re().captures_iter(template).collect();
        for c in &places {
            if !file.required_slots.iter().any(|s| s == &c[1]) {
                return Err(RewardError::UndeclaredPlaceholder(c[1].to_string()));
            }
        }
        for slot in &file.required_slots {
            if !places.iter().any(|c| &c[1] == slot) {
                return Err(RewardError::MissingSlot(slot.clone()));
            }
        }

        let mut rules: Vec<SlotRule> = Vec::new();
        for (j, c) in places.iter().enumerate() {
            let slot = &c[1];
            if rules.iter().any(|r| r.slot == slot) {
                continue;
            }
            let whole = c.get(0).expect("match");
            let prev_end = if j == 0 { 0 } else { places[j - 1].get(0).expect("match").end() };
            let next_start = places.get(j + 1).map_or(template.len(), |n| n.get(0).expect("match").start());
            let before = template[prev_end..whole.start()].trim();
            let after = template[whole.end()..next_start].trim();
            let pattern = match file.slot_patterns.get(slot) {
                Some(p) => Some(Regex::new(&format!("^(?:{p})$")).map_err(|source| {
                    RewardError::BadPattern {
                        slot: slot.to_string(),
                        source,
                    }
                })?),
                None => None,
            };
            rules.push(SlotRule {
                slot: slot.to_string(),
                cue: last_chars(before, CUE_CHARS).to_string(),
                terminator: first_chars(after, CUE_CHARS).to_string(),
                pattern,
            });
        }
        Ok(Self { file, rules })
    }

    pub fn load(path: &Path) -> Result<Self, RewardError> {
        let file: FormatSpecFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_file(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.file).expect("spec serializes")
    }

    pub fn template_text(&self) -> &str {
        &self.file.template_text
    }

    pub fn required_slots(&self) -> &[String] {
        &self.file.required_slots
    }

    /// The supervision-decision summary template.
    pub fn supervision_decision() -> Self {
        let template = "When the party applies for supervision, their statement is: [applicant] believes that \
[court] People's Court's trial of [case information] has legal violations and requests the court to supervise it. \
This case has now concluded the review of the supervision.\n\
(The expression of the court's internal review findings is:) This court has reviewed the trial activities of \
[court] People's Court in the case of [case information]. The review has been completed. Now, it is clarified:\n\
(Provide detailed and clear explanations of the specific judicial actions taken by the People's Court in the case.) \
(If necessary, include a conclusion regarding the review and clarify the reasoning and basis for the trial activities.)\n\
In summary, (list which judicial actions of the People's Court complied with or violated the law, based on the specific legal provisions), \
according to Article [law article] of the Administrative Procedure Law of the People's Republic of China, \
we hereby issue this supervision decision: (write the specific content of the decision).";
        let mut patterns = IndexMap::new();
        patterns.insert("law article".to_string(), "[0-9〇零一二两三四五六七八九十百]+".to_string());
        Self::new(
            template,
            ["applicant", "court", "case information", "law article"]
                .map(String::from)
                .to_vec(),
            patterns,
        )
        .expect("built-in template is valid")
    }

    fn slot_valid(rule: &SlotRule, value: &str) -> bool {
        !value.is_empty()
            && !value.contains(&format!("[{}]", rule.slot))
            && rule.pattern.as_ref().is_none_or(|p| p.is_match(value))
    }
}

/// Fraction of required slots present, non-empty and pattern-valid, matched
/// in template order.
pub fn format_reward(output: &str, spec: &FormatSpec) -> f64 {
    if output.trim().is_empty() || spec.rules.is_empty() {
        return 0.0;
    }
    let mut cursor = 0;
    let mut satisfied = 0usize;
    for rule in &spec.rules {
        let value_start = if rule.cue.is_empty() {
            cursor
        } else {
            match output[cursor..].find(&rule.cue) {
                Some(p) => cursor + p + rule.cue.len(),
                None => continue,
            }
        };
        let value_end = if rule.terminator.is_empty() {
            output.len()
        } else {
            match output[value_start..].find(&rule.terminator) {
                Some(p) => value_start + p,
                None => continue,
            }
        };
        if FormatSpec::slot_valid(rule, output[value_start..value_end].trim()) {
            satisfied += 1;
        }
        cursor = value_end;
    }
    satisfied as f64 / spec.rules.len() as f64
}

/// Characters that may appear in a readable output: printable ASCII, tab and
/// newline, CJK ideographs, CJK and full-width punctuation, and the general
/// punctuation Chinese text uses (curly quotes, ellipsis, dashes, middle dot).
pub fn is_allowed_char(c: char) -> bool {
    matches!(c, ' '..='~' | '\n' | '\t')
        || is_cjk_ideograph(c)
        || is_cjk_punctuation(c)
        || matches!(c, '‘' | '’' | '“' | '”' | '…' | '—' | '–' | '·')
}

/// `-lambda * (disallowed characters / total characters)`.
pub fn garbled_penalty(output: &str, lambda: f64) -> f64 {
    let total = output.chars().count();
    let bad = output.chars().filter(|&c| !is_allowed_char(c)).count();
    if bad == 0 {
        return 0.0;
    }
    -lambda * bad as f64 / total as f64
}

/// Length in characters of the longest common substring.
pub fn longest_common_substring(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    let mut best = 0;
    for ca in &a {
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// `-lambda` when the output echoes a stretch of the input longer than
/// `max(30, |output| / 2)` characters.
pub fn duplication_penalty(output: &str, input: &str, lambda: f64) -> f64 {
    let len = output.chars().count() as f64;
    let threshold = (DUPLICATION_MIN_CHARS as f64).max(0.5 * len);
    if longest_common_substring(output, input) as f64 > threshold {
        -lambda
    } else {
        0.0
    }
}

/// Step markers for a stepwise amount extraction: incident count, the
/// items of each incident, per-item values, and the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmountTask {
    pub markers: [String; 4],
    pub tolerance: f64,
}

impl Default for AmountTask {
    fn default() -> Self {
        Self {
            markers: ["作案次数：", "涉案物品：", "物品价值：", "涉案总额："].map(String::from),
            tolerance: ARITHMETIC_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ProcessScore {
    pub step_structure: f64,
    pub arithmetic_consistency: f64,
}

impl ProcessScore {
    pub fn total(&self) -> f64 {
        self.step_structure + self.arithmetic_consistency
    }
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[0-9]+(?:\.[0-9]+)?").expect("number regex"))
}

fn numbers(s: &str) -> impl Iterator<Item = f64> + '_ {
    number_re().find_iter(s).filter_map(|m| m.as_str().parse().ok())
}

/// 0.25 for each of the first three markers found in order; the final 0.25
/// only when the total marker is present and the first number after it
/// equals the sum of the numbers in the per-item-value step.
pub fn process_reward(output: &str, task: &AmountTask) -> ProcessScore {
    let mut cursor = 0;
    let mut spans: [Option<(usize, usize)>; 4] = [None; 4];
    for (k, marker) in task.markers.iter().enumerate() {
        if marker.is_empty() {
            continue;
        }
        if let Some(p) = output[cursor..].find(marker.as_str()) {
            let start = cursor + p;
            spans[k] = Some((start, start + marker.len()));
            cursor = start + marker.len();
        }
    }
    let step_structure = 0.25 * spans[..3].iter().filter(|s| s.is_some()).count() as f64;
    let arithmetic_consistency = match (spans[2], spans[3]) {
        (Some((_, values_start)), Some((total_start, total_end))) => {
            let items: Vec<f64> = numbers(&output[values_start..total_start]).collect();
            let stated = numbers(&output[total_end..]).next();
            match stated {
                Some(total)
                    if !items.is_empty()
                        && (total - items.iter().sum::<f64>()).abs() <= task.tolerance + 1e-9 =>
                {
                    0.25
                }
                _ => 0.0,
            }
        }
        _ => 0.0,
    };
    ProcessScore {
        step_structure,
        arithmetic_consistency,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub format: f64,
    pub garbled: f64,
    pub duplication: f64,
    pub process: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            format: 1.0,
            garbled: 1.0,
            duplication: 1.0,
            process: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lambda_garbled: f64,
    pub lambda_duplication: f64,
    pub weights: RewardWeights,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_garbled: DEFAULT_LAMBDA_GARBLED,
            lambda_duplication: DEFAULT_LAMBDA_DUPLICATION,
            weights: RewardWeights::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let w = self.weights;
        let all = [w.format, w.garbled, w.duplication, w.process, self.lambda_garbled, self.lambda_duplication];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(RewardError::NegativeWeight)
        }
    }
}

/// Weighted reward components. `total` is their plain sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub format_conformance: f64,
    pub garbled_penalty: f64,
    pub duplication_penalty: f64,
    pub step_structure: f64,
    pub arithmetic_consistency: f64,
}

impl RewardBreakdown {
    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("format_conformance", self.format_conformance),
            ("garbled_penalty", self.garbled_penalty),
            ("duplication_penalty", self.duplication_penalty),
            ("step_structure", self.step_structure),
            ("arithmetic_consistency", self.arithmetic_consistency),
        ]
    }

    pub fn total(&self) -> f64 {
        self.components().iter().map(|(_, v)| v).sum()
    }
}

pub fn combined_reward(
    output: &str,
    input: &str,
    spec: &FormatSpec,
    task: &AmountTask,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let w = cfg.weights;
    let process = process_reward(output, task);
    RewardBreakdown {
        format_conformance: w.format * format_reward(output, spec),
        garbled_penalty: w.garbled * garbled_penalty(output, cfg.lambda_garbled),
        duplication_penalty: w.duplication * duplication_penalty(output, input, cfg.lambda_duplication),
        step_structure: w.process * process.step_structure,
        arithmetic_consistency: w.process * process.arithmetic_consistency,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill(spec: &FormatSpec, values: &[(&str, &str)]) -> String {
        let mut out = spec.template_text().to_string();
        for (slot, v) in values {
            out = out.replace(&format!("[{slot}]"), v);
        }
        out
    }

    #[test]
    fn full_conformance() {
        let spec = FormatSpec::supervision_decision();
        let out = fill(
            &spec,
            &[
                ("applicant", "Li Si"),
                ("court", "Haidian District"),
                ("case information", "case No. 12 on a contract dispute"),
                ("law article", "101"),
            ],
        );
        assert_eq!(format_reward(&out, &spec), 1.0);
    }

    #[test]
    fn empty_output_scores_zero() {
        assert_eq!(format_reward("", &FormatSpec::supervision_decision()), 0.0);
    }

    #[test]
    fn unfilled_law_article() {
        let spec = FormatSpec::supervision_decision();
        let out = fill(
            &spec,
            &[
                ("applicant", "Li Si"),
                ("court", "Haidian District"),
                ("case information", "case No. 12"),
            ],
        );
        let k = spec.required_slots().len() as f64;
        assert_eq!(format_reward(&out, &spec), (k - 1.0) / k);
    }

    #[test]
    fn spec_validation() {
        let e = FormatSpec::new("a [x] b [y]", vec!["x".into()], IndexMap::new());
        assert!(matches!(e, Err(RewardError::UndeclaredPlaceholder(s)) if s == "y"));
        let e = FormatSpec::new("a [x]", vec!["x".into(), "z".into()], IndexMap::new());
        assert!(matches!(e, Err(RewardError::MissingSlot(_))));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = FormatSpec::supervision_decision();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("spec.json");
        fs::write(&p, spec.to_json()).unwrap();
        let back = FormatSpec::load(&p).unwrap();
        assert_eq!(back.required_slots(), spec.required_slots());
        let v: serde_json::Value = serde_json::from_str(&spec.to_json()).unwrap();
        for key in ["template_text", "required_slots", "slot_patterns"] {
            assert!(v.get(key).is_some());
        }
    }

    #[test]
    fn slot_order_enforced() {
        let spec = FormatSpec::new(
            "申请人：[a]；法院：[b]。",
            vec!["a".into(), "b".into()],
            IndexMap::new(),
        )
        .unwrap();
        assert_eq!(format_reward("申请人：张三；法院：北京。", &spec), 1.0);
        assert_eq!(format_reward("法院：北京；申请人：张三。", &spec), 0.0);
        assert_eq!(format_reward("；法院：北京。申请人：张三", &spec), 0.5);
    }

    #[test]
    fn garbled_rules() {
        assert_eq!(garbled_penalty("本院认为，被告人构成故意伤害罪。", 1.0), 0.0);
        let s = "本院认为被\u{FFFD}告\u{FFFD}人";
        assert_eq!(s.chars().count(), 9);
        let ten = format!("{s}罪");
        assert!((garbled_penalty(&ten, 1.0) + 0.2).abs() < 1e-15);
        assert_eq!(garbled_penalty("", 1.0), 0.0);
    }

    #[test]
    fn duplication_rules() {
        let input: String = "被告人张三于某日在某地殴打被害人李四致其轻伤".repeat(10);
        assert_eq!(duplication_penalty("完全不同的内容", &input, 0.5), 0.0);
        let copy: String = input.chars().take(200).collect();
        assert_eq!(duplication_penalty(&copy, &copy, 0.5), -0.5);
    }

    #[test]
    fn embedded_span_under_half_is_not_penalized() {
        let input = "甲乙丙丁戊己庚辛壬癸子丑寅卯辰巳午未申酉戌亥天地玄黄宇宙洪荒日月盈昃辰宿列张寒来暑往";
        let span: String = input.chars().take(40).collect();
        let fresh_a = "abcdefghijklmnopqrstuvwxyzABCD";
        let fresh_b = "0123456789!@#$%^&*()0123456789";
        let out = format!("{fresh_a}{span}{fresh_b}");
        assert_eq!(out.chars().count(), 100);
        assert_eq!(longest_common_substring(&out, input), 40);
        assert_eq!(duplication_penalty(&out, input, 0.5), 0.0);
    }

    fn robbery(total: &str) -> String {
        format!("作案次数：1次。涉案物品：手机、手表。物品价值：手机585.3元，手表77.7元。涉案总额：{total}元。")
    }

    #[test]
    fn arithmetic_gate_passes() {
        let s = process_reward(&robbery("663.0"), &AmountTask::default());
        assert_eq!(s.arithmetic_consistency, 0.25);
        assert_eq!(s.total(), 1.0);
    }

    #[test]
    fn arithmetic_gate_withholds_total_credit() {
        let s = process_reward(&robbery("663.02"), &AmountTask::default());
        assert_eq!(s.total(), 0.75);
        let s = process_reward(&robbery("585.3"), &AmountTask::default());
        assert_eq!(s.total(), 0.75);
    }

    #[test]
    fn out_of_order_markers() {
        let s = process_reward("涉案总额：10元。物品价值：10元。", &AmountTask::default());
        assert_eq!(s.total(), 0.25);
    }

    #[test]
    fn combined_sum() {
        let b = RewardBreakdown {
            format_conformance: 1.0,
            garbled_penalty: -0.2,
            duplication_penalty: 0.0,
            step_structure: 0.5,
            arithmetic_consistency: 0.25,
        };
        assert!((b.total() - 1.55).abs() < 1e-12);
        assert_eq!(RewardBreakdown::default().total(), 0.0);
    }

    #[test]
    fn combined_uses_weights() {
        let spec = FormatSpec::new("申请人：[a]。", vec!["a".into()], IndexMap::new()).unwrap();
        let cfg = RewardConfig {
            weights: RewardWeights {
                format: 2.0,
                process: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let b = combined_reward("申请人：张三。", "无关", &spec, &AmountTask::default(), &cfg);
        assert_eq!(b.format_conformance, 2.0);
        assert_eq!(b.total(), 2.0);
        let bad = RewardConfig {
            weights: RewardWeights {
                format: -1.0,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
