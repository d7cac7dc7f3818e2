//! Legal-element catalog, typed element values and value normalization.
//!
//! Durations are always reported in months. Life imprisonment and the death
//! penalty are flags since they carry no finite month value.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ElementError {
    #[error("unparseable duration: {0:?}")]
    UnparseableDuration(String),
    #[error("invalid value {raw:?} for element {name} ({kind:?})")]
    InvalidValue {
        name: String,
        kind: ElementKind,
        raw: String,
    },
    #[error("unknown element: {0}")]
    UnknownElement(String),
    #[error("element catalog is empty")]
    EmptyCatalog,
    #[error("duplicate element name in catalog: {0}")]
    DuplicateElement(String),
    #[error("catalog line {line}: {source}")]
    CatalogParse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Flag,
    Count,
    DurationMonths,
    Amount,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementDef {
    pub name: String,
    pub kind: ElementKind,
    pub description: String,
    #[serde(default)]
    pub augmented_description: Option<String>,
}

impl ElementDef {
    pub fn new(name: &str, kind: ElementKind, augmented: Option<&str>) -> Self {
        Self {
            name: name.to_string(),
            kind,
            description: name.to_string(),
            augmented_description: augmented.map(str::to_string),
        }
    }

    /// Text used for embedding: the augmented description when requested and
    /// available, the plain description otherwise.
    pub fn retrieval_text(&self, use_augmented: bool) -> &str {
        match (&self.augmented_description, use_augmented) {
            (Some(aug), true) => aug,
            _ => &self.description,
        }
    }
}

/// Ordered, immutable set of element definitions. Order is significant: it
/// breaks ties during retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementCatalog {
    elements: Vec<ElementDef>,
    by_name: HashMap<String, usize>,
}

impl ElementCatalog {
    pub fn new(elements: Vec<ElementDef>) -> Result<Self, ElementError> {
        if elements.is_empty() {
            return Err(ElementError::EmptyCatalog);
        }
        let mut by_name = HashMap::with_capacity(elements.len());
        for (i, e) in elements.iter().enumerate() {
            if by_name.insert(e.name.clone(), i).is_some() {
                return Err(ElementError::DuplicateElement(e.name.clone()));
            }
        }
        Ok(Self { elements, by_name })
    }

    /// The shipped catalog: every row of the augmented-element table plus the
    /// elements named in the extraction examples.
    pub fn starter() -> Self {
        Self::new(starter_elements()).expect("starter catalog is valid")
    }

    pub fn elements(&self) -> &[ElementDef] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ElementDef> {
        self.by_name.get(name).map(|&i| &self.elements[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.elements.iter().map(|e| e.name.as_str())
    }

    pub fn has_all_augmented(&self) -> bool {
        self.elements
            .iter()
            .all(|e| e.augmented_description.as_deref().is_some_and(|s| !s.is_empty()))
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self, ElementError> {
        let mut elements = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let def = serde_json::from_str(&line)
                .map_err(|source| ElementError::CatalogParse { line: i + 1, source })?;
            elements.push(def);
        }
        Self::new(elements)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ElementError> {
        Self::from_jsonl(BufReader::new(fs::File::open(path)?))
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), ElementError> {
        for e in &self.elements {
            let line = serde_json::to_string(e).expect("element serializes");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

fn starter_elements() -> Vec<ElementDef> {
    use ElementKind::*;
    let rows: &[(&str, ElementKind, &str)] = &[
        ("管制", DurationMonths, "管制（指某人被限制自由，但不完全剥夺其自由的刑罚，通常适用于罪行较轻的犯罪分子，可能包括定期报告、限制居住区域等条件）"),
        ("拘役", DurationMonths, "拘役（指对某人进行短期的限制自由的刑罚，通常为1个月至6个月，实施拘役时，嫌疑人仍然在一定程度上保留自由，但会受到某些限制，如不得随意离开指定地点等）"),
        ("有期徒刑", DurationMonths, "有期徒刑（指法院判决某人必须在监狱服刑一定年限的刑罚，通常为几年，服刑期满后，可以重获自由，但刑期长短会根据犯罪的性质和严重程度来决定）"),
        ("无期徒刑", Flag, "无期徒刑（指法院判决某人终身在监狱服刑，虽然理论上没有刑期限制，但可以在服刑一定年限后申请假释，最终是否释放取决于罪犯表现及其他相关因素）"),
        ("死刑", Flag, "死刑（指法院判决某人执行死刑，意味着对犯罪分子实施致命处罚，通常用于极其严重的犯罪行为，如故意杀人、恐怖活动等。死刑执行后，罪犯将无法再活跃于社会）"),
        ("缓刑", DurationMonths, "缓刑（指法院在判定某人有罪的情况下，暂时不执行刑罚，而是给予一定的观察期，如果在观察期内没有再犯，可以免于执行刑罚，但若在缓刑期内再犯，可能会被执行原定刑罚）"),
        ("附带民事诉讼", Flag, "附带民事诉讼（指在刑事案件审理过程中，受害人或其他相关方提出的民事赔偿请求，法院可以在审理刑事案件的同时，处理相关民事诉讼问题）"),
        ("轻微伤人数", Count, "轻微伤人数（指在某些案件中，受害人受到的伤害较轻，但依然需要评估伤害程度和责任分配，通常由医疗鉴定机构进行评估）"),
        ("轻伤人数", Count, "轻伤人数（指在案件中，受害人遭受的伤害为轻度，属于刑法中规定的轻伤范畴，通常会对加害人进行一定的刑罚处罚）"),
        ("轻伤一级人数", Count, "轻伤一级人数（指受害人在案件中遭受轻伤，伤情较为严重，但尚不构成重伤，具体伤情可根据伤残程度分级评定）"),
        ("轻伤二级人数", Count, "轻伤二级人数（指受害人所受轻伤程度较轻的一级，依据人体损伤程度鉴定标准评定为轻伤二级的人数）"),
        ("重伤人数", Count, "重伤人数（指受害人遭受肢体残废、毁人容貌或其他对人体健康有重大伤害的人数，通常加重对加害人的处罚）"),
        ("自首", Flag, "自首（指犯罪以后自动投案，如实供述自己的罪行，可以从轻或者减轻处罚）"),
        ("坦白", Flag, "坦白（指犯罪嫌疑人虽不具有自首情节，但到案后如实供述自己罪行，可以从轻处罚）"),
        ("认罪认罚", Flag, "认罪认罚（指被告人自愿如实供述罪行，承认指控的犯罪事实，愿意接受处罚，可以依法从宽处理）"),
        ("持械", Flag, "持械（指行为人在实施犯罪时持有刀具、棍棒等器械，通常被视为从重处罚情节）"),
        ("互殴", Flag, "互殴（指双方均有伤害对方的故意并相互实施殴打行为，影响责任认定与量刑）"),
        ("单独作案", Flag, "单独作案（指案件中只有一名被告人独自实施犯罪行为，不存在共同犯罪）"),
        ("从犯", Flag, "从犯（指在共同犯罪中起次要或者辅助作用的犯罪人，应当从轻、减轻处罚或者免除处罚）"),
        ("前科劣迹", Flag, "前科劣迹（指被告人曾因违法犯罪受过刑事处罚或行政处罚的记录，通常作为酌定从重情节）"),
        ("遵守社区矫正", Flag, "遵守社区矫正（指被判处缓刑等刑罚的人员在社区中接受监督管理，须遵守相关规定并定期报告）"),
        ("赔偿金额", Amount, "赔偿金额（指被告人因犯罪行为给被害人造成损失而支付的经济赔偿数额，单位为元）"),
        ("罚金", Amount, "罚金（指人民法院判处犯罪分子向国家缴纳一定数额金钱的刑罚，单位为元）"),
        ("犯罪金额", Amount, "犯罪金额（指犯罪行为所涉及的财物价值总额，由各项涉案物品价值相加得出，单位为元）"),
    ];
    rows.iter()
        .map(|&(name, kind, aug)| ElementDef::new(name, kind, Some(aug)))
        .collect()
}

/// A typed element value. Integers cover counts and month durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Flag(bool),
    Integer(u64),
    Decimal(f64),
    Text(String),
}

impl Value {
    /// Whether this value is admissible for an element of `kind`.
    pub fn fits(&self, kind: ElementKind) -> bool {
        match (kind, self) {
            (ElementKind::Flag, Value::Flag(_)) => true,
            (ElementKind::Count | ElementKind::DurationMonths, Value::Integer(_)) => true,
            (ElementKind::Amount, Value::Integer(_)) => true,
            (ElementKind::Amount, Value::Decimal(d)) => d.is_finite() && *d >= 0.0,
            (ElementKind::Text, Value::Text(_)) => true,
            _ => false,
        }
    }

    /// Exact-match comparison used for scoring. Numbers compare by value;
    /// decimals are compared at cent resolution.
    pub fn matches(&self, other: &Value) -> bool {
        match (self.as_number(), other.as_number()) {
            (Some(a), Some(b)) => (a * 100.0).round() == (b * 100.0).round(),
            _ => self == other,
        }
    }

    fn as_number(&self) -> Option<f64> {
        match self {
            Value::Integer(n) => Some(*n as f64),
            Value::Decimal(d) => Some(*d),
            _ => None,
        }
    }
}

impl std::fmt::Display for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Value::Flag(b) => write!(f, "{}", if *b { "是" } else { "否" }),
            Value::Integer(n) => write!(f, "{n}"),
            Value::Decimal(d) => write!(f, "{d}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementValue {
    pub name: String,
    pub value: Value,
}

impl ElementValue {
    pub fn new(name: impl Into<String>, value: Value) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

fn cn_digit(c: char) -> Option<u64> {
    Some(match c {
        '〇' | '零' => 0,
        '一' => 1,
        '二' | '两' => 2,
        '三' => 3,
        '四' => 4,
        '五' => 5,
        '六' => 6,
        '七' => 7,
        '八' => 8,
        '九' => 9,
        _ => return None,
    })
}

/// Parses a non-negative integer written with ASCII digits or Chinese
/// numerals (〇一二三四五六七八九十百, plus 两/零). Any ASCII digit makes the
/// whole token digit-only.
pub fn parse_numeral(s: &str) -> Option<u64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    if s.chars().any(|c| c.is_ascii_digit()) {
        return if s.chars().all(|c| c.is_ascii_digit()) {
            s.parse().ok()
        } else {
            None
        };
    }
    let mut total = 0u64;
    let mut pending: Option<u64> = None;
    let mut last_unit = u64::MAX;
    for c in s.chars() {
        if let Some(d) = cn_digit(c) {
            pending = Some(pending.map_or(d, |p| p * 10 + d));
            continue;
        }
        let unit = match c {
            '十' => 10,
            '百' => 100,
            _ => return None,
        };
        if unit >= last_unit {
            return None;
        }
        last_unit = unit;
        total += pending.take().unwrap_or(1) * unit;
    }
    Some(total + pending.unwrap_or(0))
}

const NUM_CLASS: &str = "0-9〇零一二两三四五六七八九十百";

fn duration_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"^(?:(?P<y>[{NUM_CLASS}]+)\s*年)?\s*(?:零|又)?\s*(?:(?P<m>[{NUM_CLASS}]+)\s*个?\s*月)?$"
        ))
        .expect("duration regex")
    })
}

/// Converts a duration such as `五年`, `十二个月` or `一年二个月` to months.
pub fn normalize_duration(text: &str) -> Result<u32, ElementError> {
    let err = || ElementError::UnparseableDuration(text.to_string());
    let trimmed = text.trim();
    let caps = duration_re().captures(trimmed).ok_or_else(err)?;
    let years = caps.name("y").map(|m| parse_numeral(m.as_str()));
    let months = caps.name("m").map(|m| parse_numeral(m.as_str()));
    if years.is_none() && months.is_none() {
        return Err(err());
    }
    let years = years.unwrap_or(Some(0)).ok_or_else(err)?;
    let months = months.unwrap_or(Some(0)).ok_or_else(err)?;
    let total = years
        .checked_mul(12)
        .and_then(|y| y.checked_add(months))
        .ok_or_else(err)?;
    u32::try_from(total).map_err(|_| err())
}

/// Parses a raw string value for `def` into its typed form. A bare number for
/// a duration element is taken to be in months already.
pub fn parse_value(def: &ElementDef, raw: &str) -> Result<Value, ElementError> {
    let bad = || ElementError::InvalidValue {
        name: def.name.clone(),
        kind: def.kind,
        raw: raw.to_string(),
    };
    let s = raw.trim();
    match def.kind {
        ElementKind::Flag => match s {
            "是" | "有" | "true" | "1" | "yes" => Ok(Value::Flag(true)),
            "否" | "无" | "false" | "0" | "no" => Ok(Value::Flag(false)),
            _ => Err(bad()),
        },
        ElementKind::Count => {
            let s = s.trim_end_matches('人').trim_end_matches('名');
            parse_numeral(s).map(Value::Integer).ok_or_else(bad)
        }
        ElementKind::DurationMonths => {
            if let Some(n) = parse_numeral(s) {
                return Ok(Value::Integer(n));
            }
            normalize_duration(s)
                .map(|m| Value::Integer(u64::from(m)))
                .map_err(|_| bad())
        }
        ElementKind::Amount => {
            let cleaned: String = s
                .trim_end_matches('元')
                .chars()
                .filter(|&c| c != ',' && c != '，')
                .collect();
            match cleaned.parse::<f64>() {
                Ok(d) if d.is_finite() && d >= 0.0 => Ok(Value::Decimal(d)),
                _ => Err(bad()),
            }
        }
        ElementKind::Text => {
            if s.is_empty() {
                Err(bad())
            } else {
                Ok(Value::Text(s.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    HallucinatedElement,
    TypeMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub name: String,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Validated {
    pub values: Vec<ElementValue>,
    pub violations: Vec<Violation>,
}

/// Splits predicted values into schema-valid values and violations. Scale
/// errors (e.g. a duration reported in years) are not schema violations.
pub fn validate_extraction(pred: &[ElementValue], catalog: &ElementCatalog) -> Validated {
    let mut out = Validated::default();
    for v in pred {
        match catalog.get(&v.name) {
            None => out.violations.push(Violation {
                name: v.name.clone(),
                kind: ViolationKind::HallucinatedElement,
            }),
            Some(def) if !v.value.fits(def.kind) => out.violations.push(Violation {
                name: v.name.clone(),
                kind: ViolationKind::TypeMismatch,
            }),
            Some(_) => out.values.push(v.clone()),
        }
    }
    out
}

/// Keyword/pattern extractor for the given elements. Flags fire on the
/// element name appearing in the text; numeric kinds read the value that
/// follows the name.
pub fn extract_rule_based<'a>(
    text: &str,
    elements: impl IntoIterator<Item = &'a ElementDef>,
) -> Vec<ElementValue> {
    let mut out = Vec::new();
    for def in elements {
        let name = regex::escape(&def.name);
        let found = match def.kind {
            ElementKind::Flag => text.contains(&def.name).then_some(Value::Flag(true)),
            ElementKind::DurationMonths => {
                let re = Regex::new(&format!(
                    r"{name}[：:为]?\s*(?P<v>[{NUM_CLASS}年个月又]+)"
                ))
                .expect("duration pattern");
                re.captures(text).and_then(|c| {
                    let raw = c["v"].trim_end_matches('又');
                    parse_value(def, raw).ok()
                })
            }
            ElementKind::Count => {
                let re = Regex::new(&format!(r"{name}[：:为]?\s*(?P<v>[{NUM_CLASS}]+)"))
                    .expect("count pattern");
                re.captures(text).and_then(|c| parse_value(def, &c["v"]).ok())
            }
            ElementKind::Amount => {
                let re = Regex::new(&format!(r"{name}[：:为]?\s*(?P<v>[0-9][0-9,]*(?:\.[0-9]+)?)"))
                    .expect("amount pattern");
                re.captures(text).and_then(|c| parse_value(def, &c["v"]).ok())
            }
            ElementKind::Text => None,
        };
        if let Some(value) = found {
            out.push(ElementValue::new(def.name.clone(), value));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_years_is_sixty_months() {
        assert_eq!(normalize_duration("五年").unwrap(), 60);
    }

    #[test]
    fn months_pass_through() {
        assert_eq!(normalize_duration("十二个月").unwrap(), 12);
        assert_eq!(normalize_duration("6个月").unwrap(), 6);
    }

    #[test]
    fn years_and_months() {
        assert_eq!(normalize_duration("一年二个月").unwrap(), 14);
        assert_eq!(normalize_duration("一年零二个月").unwrap(), 14);
        assert_eq!(normalize_duration("两年六个月").unwrap(), 30);
        assert_eq!(normalize_duration("15年").unwrap(), 180);
    }

    #[test]
    fn non_durations_rejected() {
        for s in ["", "无期徒刑", "五", "五天", "年", "1十年"] {
            assert!(
                matches!(normalize_duration(s), Err(ElementError::UnparseableDuration(_))),
                "{s:?}"
            );
        }
    }

    #[test]
    fn numerals() {
        assert_eq!(parse_numeral("十"), Some(10));
        assert_eq!(parse_numeral("十二"), Some(12));
        assert_eq!(parse_numeral("二十"), Some(20));
        assert_eq!(parse_numeral("二十三"), Some(23));
        assert_eq!(parse_numeral("一百零五"), Some(105));
        assert_eq!(parse_numeral("二〇"), Some(20));
        assert_eq!(parse_numeral("十百"), None);
        assert_eq!(parse_numeral("3a"), None);
    }

    #[test]
    fn hallucinated_element_flagged() {
        let cat = ElementCatalog::starter();
        let pred = vec![
            ElementValue::new("无不良影响", Value::Flag(true)),
            ElementValue::new("自首", Value::Flag(true)),
        ];
        let v = validate_extraction(&pred, &cat);
        assert_eq!(v.values.len(), 1);
        assert_eq!(
            v.violations,
            vec![Violation {
                name: "无不良影响".into(),
                kind: ViolationKind::HallucinatedElement
            }]
        );
    }

    #[test]
    fn empty_prediction_validates_clean() {
        let v = validate_extraction(&[], &ElementCatalog::starter());
        assert!(v.values.is_empty() && v.violations.is_empty());
    }

    #[test]
    fn misscaled_duration_is_not_a_violation() {
        let cat = ElementCatalog::starter();
        let v = validate_extraction(&[ElementValue::new("有期徒刑", Value::Integer(5))], &cat);
        assert_eq!(v.values, vec![ElementValue::new("有期徒刑", Value::Integer(5))]);
        assert!(v.violations.is_empty());
    }

    #[test]
    fn type_mismatch_flagged() {
        let cat = ElementCatalog::starter();
        let pred = vec![
            ElementValue::new("有期徒刑", Value::Text("五年".into())),
            ElementValue::new("罚金", Value::Decimal(-3.0)),
        ];
        let v = validate_extraction(&pred, &cat);
        assert!(v.values.is_empty());
        assert!(v.violations.iter().all(|x| x.kind == ViolationKind::TypeMismatch));
    }

    #[test]
    fn catalog_rejects_duplicates_and_empty() {
        assert!(matches!(ElementCatalog::new(vec![]), Err(ElementError::EmptyCatalog)));
        let d = ElementDef::new("自首", ElementKind::Flag, None);
        assert!(matches!(
            ElementCatalog::new(vec![d.clone(), d]),
            Err(ElementError::DuplicateElement(_))
        ));
    }

    #[test]
    fn catalog_jsonl_round_trip() {
        let cat = ElementCatalog::starter();
        let mut buf = Vec::new();
        cat.write_jsonl(&mut buf).unwrap();
        let back = ElementCatalog::from_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, cat);
        let first = String::from_utf8(buf).unwrap();
        let line = first.lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["name", "kind", "description", "augmented_description"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn starter_catalog_kinds() {
        let cat = ElementCatalog::starter();
        assert_eq!(cat.get("有期徒刑").unwrap().kind, ElementKind::DurationMonths);
        assert_eq!(cat.get("无期徒刑").unwrap().kind, ElementKind::Flag);
        assert_eq!(cat.get("死刑").unwrap().kind, ElementKind::Flag);
        assert_eq!(cat.get("轻伤人数").unwrap().kind, ElementKind::Count);
        assert!(cat.has_all_augmented());
    }

    #[test]
    fn value_json_shape() {
        let v = ElementValue::new("有期徒刑", Value::Integer(60));
        assert_eq!(
            serde_json::to_string(&v).unwrap(),
            r#"{"name":"有期徒刑","value":60}"#
        );
        let back: ElementValue = serde_json::from_str(r#"{"name":"罚金","value":2000.5}"#).unwrap();
        assert_eq!(back.value, Value::Decimal(2000.5));
    }

    #[test]
    fn parse_raw_values() {
        let cat = ElementCatalog::starter();
        let d = |n| cat.get(n).unwrap();
        assert_eq!(parse_value(d("有期徒刑"), "一年二个月").unwrap(), Value::Integer(14));
        assert_eq!(parse_value(d("有期徒刑"), "9").unwrap(), Value::Integer(9));
        assert_eq!(parse_value(d("轻伤人数"), "2人").unwrap(), Value::Integer(2));
        assert_eq!(parse_value(d("自首"), "是").unwrap(), Value::Flag(true));
        assert_eq!(parse_value(d("罚金"), "20,000元").unwrap(), Value::Decimal(20000.0));
        assert!(parse_value(d("自首"), "maybe").is_err());
    }

    #[test]
    fn numeric_match_ignores_representation() {
        assert!(Value::Integer(663).matches(&Value::Decimal(663.0)));
        assert!(!Value::Decimal(585.3).matches(&Value::Decimal(663.0)));
        assert!(!Value::Flag(true).matches(&Value::Integer(1)));
    }

    #[test]
    fn rule_extraction_reads_values() {
        let cat = ElementCatalog::starter();
        let text = "判处有期徒刑一年二个月，缓刑二年。被告人自首。轻伤人数：2。罚金2000元。";
        let got = extract_rule_based(text, cat.elements());
        let find = |n: &str| got.iter().find(|v| v.name == n).map(|v| v.value.clone());
        assert_eq!(find("有期徒刑"), Some(Value::Integer(14)));
        assert_eq!(find("缓刑"), Some(Value::Integer(24)));
        assert_eq!(find("自首"), Some(Value::Flag(true)));
        assert_eq!(find("轻伤人数"), Some(Value::Integer(2)));
        assert_eq!(find("罚金"), Some(Value::Decimal(2000.0)));
        assert_eq!(find("死刑"), None);
    }
}
