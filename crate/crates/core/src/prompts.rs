//! Stage prompt templates and tolerant parsing of structured model output.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::client::StageTag;
use crate::error::{Error, Result};
use crate::stage2::ElementKind;
use crate::stage3::FindingKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignRule {
    pub rule_id: String,
    pub title: String,
    pub rule_text: String,
    #[serde(default)]
    pub machine_checkable: bool,
}

/// A natural-language review instruction plus the rules it should be checked against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_text: String,
    pub rules: Vec<DesignRule>,
}

impl ReviewTask {
    pub fn new(task_text: impl Into<String>, rules: Vec<DesignRule>) -> Result<Self> {
        let t = ReviewTask {
            task_text: task_text.into(),
            rules,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_text.trim().is_empty() {
            return Err(Error::Config("task_text is empty".into()));
        }
        if self.rules.is_empty() {
            return Err(Error::Config("task has no rules".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &self.rules {
            if !seen.insert(r.rule_id.as_str()) {
                return Err(Error::Config(format!("duplicate rule_id {}", r.rule_id)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: ReviewTask = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }

    /// Rules as a bullet list for prompt bindings.
    pub fn rules_text(&self) -> String {
        self.rules
            .iter()
            .map(|r| format!("- [{}] {}: {}", r.rule_id, r.title, r.rule_text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn rule(&self, id: &str) -> Option<&DesignRule> {
        self.rules.iter().find(|r| r.rule_id == id)
    }
}

pub const SCHEMA_REGIONS: &str = "stage1.regions.v1";
pub const SCHEMA_ELEMENTS: &str = "stage2.elements.v1";
pub const SCHEMA_FINDINGS: &str = "stage3.findings.v1";

pub fn schema_for(stage: StageTag) -> &'static str {
    match stage {
        StageTag::Stage1 => SCHEMA_REGIONS,
        StageTag::Stage2 => SCHEMA_ELEMENTS,
        StageTag::Stage3 => SCHEMA_FINDINGS,
    }
}

fn required_placeholders(stage: StageTag) -> &'static [&'static str] {
    match stage {
        StageTag::Stage1 => &["task", "rules"],
        StageTag::Stage2 => &["task", "rules", "region_label"],
        StageTag::Stage3 => &["task", "rules", "aggregate_json"],
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub stage: StageTag,
    pub template_text: String,
    pub schema_id: String,
}

impl PromptTemplate {
    pub fn new(stage: StageTag, template_text: impl Into<String>, schema_id: impl Into<String>) -> Result<Self> {
        let t = PromptTemplate {
            stage,
            template_text: template_text.into(),
            schema_id: schema_id.into(),
        };
        let present = t.placeholders();
        for p in required_placeholders(stage) {
            if !present.contains(*p) {
                return Err(Error::Template(format!("{stage} template lacks placeholder {{{p}}}")));
            }
        }
        Ok(t)
    }

    /// Builtin template for a stage.
    pub fn builtin(stage: StageTag) -> Self {
        let text = match stage {
            StageTag::Stage1 => include_str!("../templates/stage1.txt"),
            StageTag::Stage2 => include_str!("../templates/stage2.txt"),
            StageTag::Stage3 => include_str!("../templates/stage3.txt"),
        };
        PromptTemplate::new(stage, text, schema_for(stage)).expect("builtin templates are valid")
    }

    /// Reads `{dir}/stage1.txt` etc.
    pub fn load(dir: impl AsRef<Path>, stage: StageTag) -> Result<Self> {
        let path = dir.as_ref().join(format!("{}.txt", stage.as_str()));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        PromptTemplate::new(stage, text, schema_for(stage))
    }

    pub fn placeholders(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for_each_token(&self.template_text, |tok| {
            if let Token::Placeholder(name) = tok {
                out.insert(name.to_owned());
            }
        });
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.template_text.as_bytes()))
    }
}

/// The three stage templates.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub stage1: PromptTemplate,
    pub stage2: PromptTemplate,
    pub stage3: PromptTemplate,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet {
            stage1: PromptTemplate::builtin(StageTag::Stage1),
            stage2: PromptTemplate::builtin(StageTag::Stage2),
            stage3: PromptTemplate::builtin(StageTag::Stage3),
        }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(TemplateSet {
            stage1: PromptTemplate::load(dir, StageTag::Stage1)?,
            stage2: PromptTemplate::load(dir, StageTag::Stage2)?,
            stage3: PromptTemplate::load(dir, StageTag::Stage3)?,
        })
    }

    pub fn digests(&self) -> BTreeMap<String, String> {
        [&self.stage1, &self.stage2, &self.stage3]
            .iter()
            .map(|t| (t.stage.as_str().to_owned(), t.digest()))
            .collect()
    }
}

enum Token<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

/// `{ident}` with `ident = [A-Za-z_][A-Za-z0-9_]*` is a placeholder; any other
/// brace is literal text, so JSON examples in templates need no escaping.
fn for_each_token<'a>(text: &'a str, mut f: impl FnMut(Token<'a>)) {
    let bytes = text.as_bytes();
    let mut lit_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            let ident_ok = j > i + 1 && !bytes[i + 1].is_ascii_digit();
            if ident_ok && j < bytes.len() && bytes[j] == b'}' {
                if lit_start < i {
                    f(Token::Literal(&text[lit_start..i]));
                }
                f(Token::Placeholder(&text[i + 1..j]));
                i = j + 1;
                lit_start = i;
                continue;
            }
        }
        i += 1;
    }
    if lit_start < text.len() {
        f(Token::Literal(&text[lit_start..]));
    }
}

/// Single-pass placeholder substitution. Bound values are inserted verbatim
/// and never re-expanded.
pub fn render(tmpl: &PromptTemplate, bindings: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(tmpl.template_text.len());
    let mut missing = None;
    for_each_token(&tmpl.template_text, |tok| match tok {
        Token::Literal(s) => out.push_str(s),
        Token::Placeholder(name) => match bindings.get(name) {
            Some(v) => out.push_str(v),
            None => {
                missing.get_or_insert_with(|| name.to_owned());
            }
        },
    });
    match missing {
        Some(name) => Err(Error::Template(format!("unbound placeholder {{{name}}}"))),
        None => Ok(out),
    }
}

// ---------------------------------------------------------------------------
// Parsed document types

/// One stage-1 proposal, in the coordinates of the image the model saw.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionProposal {
    pub label: String,
    pub boxes: Vec<[f64; 4]>,
    pub rationale: Option<String>,
    pub score: Option<f64>,
}

/// One stage-2 element, in crop model-input coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementItem {
    pub kind: ElementKind,
    pub bbox: [f64; 4],
    pub text: Option<String>,
    pub attributes: BTreeMap<String, String>,
    pub confidence: f64,
}

/// One stage-3 judgment, in original-image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FindingItem {
    pub finding_kind: FindingKind,
    pub rule_id: Option<String>,
    pub description: String,
    pub bbox: Option<[f64; 4]>,
    pub supporting_ids: Vec<String>,
    pub diagnostic_confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedDocument {
    Regions(Vec<RegionProposal>),
    Elements(Vec<ElementItem>),
    Findings(Vec<FindingItem>),
}

impl ParsedDocument {
    /// Schema-conformant JSON for this document.
    pub fn to_json(&self) -> Value {
        match self {
            ParsedDocument::Regions(items) => Value::Array(items.iter().map(region_to_json).collect()),
            ParsedDocument::Elements(items) => Value::Array(items.iter().map(element_to_json).collect()),
            ParsedDocument::Findings(items) => Value::Array(items.iter().map(finding_to_json).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub value: T,
    /// Non-fatal coercions applied while parsing.
    pub warnings: Vec<String>,
}

pub fn region_to_json(r: &RegionProposal) -> Value {
    let mut m = Map::new();
    m.insert("label".into(), Value::from(r.label.clone()));
    let bbox = if r.boxes.len() == 1 {
        Value::from(r.boxes[0].to_vec())
    } else {
        Value::from(r.boxes.iter().map(|b| Value::from(b.to_vec())).collect::<Vec<_>>())
    };
    m.insert("bbox_2d".into(), bbox);
    if let Some(x) = &r.rationale {
        m.insert("rationale".into(), Value::from(x.clone()));
    }
    if let Some(s) = r.score {
        m.insert("score".into(), Value::from(s));
    }
    Value::Object(m)
}

pub fn element_to_json(e: &ElementItem) -> Value {
    let mut m = Map::new();
    m.insert("kind".into(), Value::from(e.kind.as_str()));
    m.insert("bbox_2d".into(), Value::from(e.bbox.to_vec()));
    if let Some(t) = &e.text {
        m.insert("text".into(), Value::from(t.clone()));
    }
    if !e.attributes.is_empty() {
        let attrs: Map<String, Value> = e
            .attributes
            .iter()
            .map(|(k, v)| (k.clone(), Value::from(v.clone())))
            .collect();
        m.insert("attributes".into(), Value::Object(attrs));
    }
    m.insert("confidence".into(), Value::from(e.confidence));
    Value::Object(m)
}

pub fn finding_to_json(f: &FindingItem) -> Value {
    let mut m = Map::new();
    m.insert("finding_kind".into(), Value::from(f.finding_kind.as_str()));
    if let Some(r) = &f.rule_id {
        m.insert("rule_id".into(), Value::from(r.clone()));
    }
    m.insert("description".into(), Value::from(f.description.clone()));
    if let Some(b) = f.bbox {
        m.insert("bbox_2d".into(), Value::from(b.to_vec()));
    }
    m.insert(
        "supporting_ids".into(),
        Value::from(f.supporting_ids.iter().cloned().map(Value::from).collect::<Vec<_>>()),
    );
    m.insert("diagnostic_confidence".into(), Value::from(f.diagnostic_confidence));
    Value::Object(m)
}

// ---------------------------------------------------------------------------
// Extraction

/// Extract and validate the structured answer in `raw_text` against `schema_id`.
pub fn parse_structured(raw_text: &str, schema_id: &str) -> Result<Parsed<ParsedDocument>> {
    let value = extract_json(raw_text)?;
    let mut warnings = Vec::new();
    let doc = match schema_id {
        SCHEMA_REGIONS => ParsedDocument::Regions(validate_array(&value, &mut warnings, validate_region)?),
        SCHEMA_ELEMENTS => ParsedDocument::Elements(validate_array(&value, &mut warnings, validate_element)?),
        SCHEMA_FINDINGS => ParsedDocument::Findings(validate_array(&value, &mut warnings, validate_finding)?),
        other => {
            return Err(Error::Schema {
                path: "$".into(),
                reason: format!("unknown schema {other}"),
            })
        }
    };
    for w in &warnings {
        log::warn!("{schema_id}: {w}");
    }
    Ok(Parsed { value: doc, warnings })
}

pub fn parse_regions(raw_text: &str) -> Result<Parsed<Vec<RegionProposal>>> {
    let p = parse_structured(raw_text, SCHEMA_REGIONS)?;
    match p.value {
        ParsedDocument::Regions(v) => Ok(Parsed { value: v, warnings: p.warnings }),
        _ => unreachable!(),
    }
}

pub fn parse_elements(raw_text: &str) -> Result<Parsed<Vec<ElementItem>>> {
    let p = parse_structured(raw_text, SCHEMA_ELEMENTS)?;
    match p.value {
        ParsedDocument::Elements(v) => Ok(Parsed { value: v, warnings: p.warnings }),
        _ => unreachable!(),
    }
}

pub fn parse_findings(raw_text: &str) -> Result<Parsed<Vec<FindingItem>>> {
    let p = parse_structured(raw_text, SCHEMA_FINDINGS)?;
    match p.value {
        ParsedDocument::Findings(v) => Ok(Parsed { value: v, warnings: p.warnings }),
        _ => unreachable!(),
    }
}

/// Body of the first fenced block (```` ``` ```` at line start), if any.
/// A fence can never sit inside a JSON string because JSON strings cannot span
/// lines.
fn fenced_block(text: &str) -> Option<&str> {
    let mut offset = 0;
    let mut open: Option<usize> = None;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_start();
        if trimmed.starts_with("```") {
            match open {
                None => open = Some(offset + line.len()),
                Some(start) => return Some(&text[start..offset]),
            }
        }
        offset += line.len();
    }
    open.map(|start| &text[start..])
}

/// First syntactically complete JSON array or object in `text`.
fn first_json_value(text: &str) -> Option<Value> {
    for (i, c) in text.char_indices() {
        if c != '[' && c != '{' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            return Some(v);
        }
    }
    None
}

/// Locate the answer: fenced block first, then the whole text.
pub fn extract_json(raw_text: &str) -> Result<Value> {
    fenced_block(raw_text)
        .and_then(first_json_value)
        .or_else(|| first_json_value(raw_text))
        .ok_or_else(|| Error::Parse {
            excerpt: raw_text.chars().take(120).collect(),
        })
}

fn schema_err(path: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        reason: reason.into(),
    }
}

fn validate_array<T>(
    value: &Value,
    warnings: &mut Vec<String>,
    item: impl Fn(&Map<String, Value>, &str, &mut Vec<String>) -> Result<T>,
) -> Result<Vec<T>> {
    let arr = value
        .as_array()
        .ok_or_else(|| schema_err("$", "expected a JSON array"))?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            let path = format!("$[{i}]");
            let obj = v.as_object().ok_or_else(|| schema_err(&path, "expected an object"))?;
            item(obj, &path, warnings)
        })
        .collect()
}

fn get<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key).filter(|v| !v.is_null())
}

/// A number, or a string holding one.
fn coerce_number(v: &Value, path: &str) -> Result<f64> {
    let n = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    match n {
        Some(x) if x.is_finite() => Ok(x),
        _ => Err(schema_err(path, format!("expected a number, got {v}"))),
    }
}

fn coerce_box(v: &Value, path: &str, warnings: &mut Vec<String>) -> Result<[f64; 4]> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| schema_err(path, "expected [x1, y1, x2, y2]"))?;
    let mut b = [0.0; 4];
    for (i, x) in arr.iter().enumerate() {
        b[i] = coerce_number(x, &format!("{path}[{i}]"))?;
    }
    if b[0] > b[2] {
        b.swap(0, 2);
        warnings.push(format!("{path}: swapped x corners"));
    }
    if b[1] > b[3] {
        b.swap(1, 3);
        warnings.push(format!("{path}: swapped y corners"));
    }
    if b[0] == b[2] || b[1] == b[3] {
        return Err(schema_err(path, "zero-area box"));
    }
    Ok(b)
}

/// Either one box or a non-empty list of boxes.
fn coerce_boxes(v: &Value, path: &str, warnings: &mut Vec<String>) -> Result<Vec<[f64; 4]>> {
    match v.as_array() {
        Some(a) if !a.is_empty() && a.iter().all(Value::is_array) => a
            .iter()
            .enumerate()
            .map(|(i, b)| coerce_box(b, &format!("{path}[{i}]"), warnings))
            .collect(),
        _ => Ok(vec![coerce_box(v, path, warnings)?]),
    }
}

/// Map a model-emitted confidence into `[0, 1]`.
///
/// * `[0, 1]` is taken as is;
/// * `(1, 2)` is an overshoot and clamps to 1;
/// * `[2, 100]`, or any string ending in `%`, is a percentage;
/// * anything else clamps to the nearest bound.
pub fn coerce_confidence(v: &Value, path: &str, warnings: &mut Vec<String>) -> Result<f64> {
    let (x, percent) = match v {
        Value::String(s) if s.trim().ends_with('%') => {
            let inner = s.trim().trim_end_matches('%');
            (coerce_number(&Value::from(inner), path)?, true)
        }
        other => (coerce_number(other, path)?, false),
    };
    let out = if percent {
        x / 100.0
    } else if (0.0..=1.0).contains(&x) {
        if v.is_string() {
            warnings.push(format!("{path}: confidence {v} read as a number"));
        }
        return Ok(x);
    } else if x > 1.0 && x < 2.0 {
        1.0
    } else if (2.0..=100.0).contains(&x) {
        x / 100.0
    } else {
        x
    };
    let clamped = out.clamp(0.0, 1.0);
    warnings.push(format!("{path}: confidence {v} coerced to {clamped}"));
    Ok(clamped)
}

fn opt_string(obj: &Map<String, Value>, key: &str, path: &str) -> Result<Option<String>> {
    match get(obj, key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(Value::Number(n)) => Ok(Some(n.to_string())),
        Some(other) => Err(schema_err(format!("{path}.{key}"), format!("expected a string, got {other}"))),
    }
}

fn validate_region(obj: &Map<String, Value>, path: &str, warnings: &mut Vec<String>) -> Result<RegionProposal> {
    let label = opt_string(obj, "label", path)?
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| schema_err(format!("{path}.label"), "missing or empty"))?;
    let bbox = get(obj, "bbox_2d").ok_or_else(|| schema_err(format!("{path}.bbox_2d"), "missing"))?;
    let boxes = coerce_boxes(bbox, &format!("{path}.bbox_2d"), warnings)?;
    let rationale = opt_string(obj, "rationale", path)?;
    let score = get(obj, "score")
        .map(|v| coerce_confidence(v, &format!("{path}.score"), warnings))
        .transpose()?;
    Ok(RegionProposal {
        label,
        boxes,
        rationale,
        score,
    })
}

fn validate_element(obj: &Map<String, Value>, path: &str, warnings: &mut Vec<String>) -> Result<ElementItem> {
    let kind_raw = opt_string(obj, "kind", path)?.ok_or_else(|| schema_err(format!("{path}.kind"), "missing"))?;
    let kind = ElementKind::parse_lenient(&kind_raw).unwrap_or_else(|| {
        warnings.push(format!("{path}.kind: unknown kind {kind_raw:?} mapped to other"));
        ElementKind::Other
    });
    let bbox = get(obj, "bbox_2d").ok_or_else(|| schema_err(format!("{path}.bbox_2d"), "missing"))?;
    let bbox = coerce_box(bbox, &format!("{path}.bbox_2d"), warnings)?;
    let text = opt_string(obj, "text", path)?.filter(|t| !t.trim().is_empty());
    if kind == ElementKind::TextAnnotation && text.is_none() {
        return Err(schema_err(format!("{path}.text"), "required for text_annotation"));
    }
    let mut attributes = BTreeMap::new();
    match get(obj, "attributes") {
        None => {}
        Some(Value::Object(m)) => {
            for (k, v) in m {
                let s = match v {
                    Value::String(s) => s.clone(),
                    Value::Number(_) | Value::Bool(_) => v.to_string(),
                    Value::Null => continue,
                    _ => {
                        return Err(schema_err(
                            format!("{path}.attributes.{k}"),
                            "expected a scalar value",
                        ))
                    }
                };
                attributes.insert(k.clone(), s);
            }
        }
        Some(_) => return Err(schema_err(format!("{path}.attributes"), "expected an object")),
    }
    let conf = get(obj, "confidence").ok_or_else(|| schema_err(format!("{path}.confidence"), "missing"))?;
    let confidence = coerce_confidence(conf, &format!("{path}.confidence"), warnings)?;
    Ok(ElementItem {
        kind,
        bbox,
        text,
        attributes,
        confidence,
    })
}

fn validate_finding(obj: &Map<String, Value>, path: &str, warnings: &mut Vec<String>) -> Result<FindingItem> {
    let kind_raw = opt_string(obj, "finding_kind", path)?
        .ok_or_else(|| schema_err(format!("{path}.finding_kind"), "missing"))?;
    let finding_kind = FindingKind::parse_lenient(&kind_raw)
        .ok_or_else(|| schema_err(format!("{path}.finding_kind"), format!("unknown kind {kind_raw:?}")))?;
    let description = opt_string(obj, "description", path)?
        .ok_or_else(|| schema_err(format!("{path}.description"), "missing"))?;
    let bbox = get(obj, "bbox_2d")
        .map(|v| coerce_box(v, &format!("{path}.bbox_2d"), warnings))
        .transpose()?;
    let supporting_ids = match get(obj, "supporting_ids") {
        None => Vec::new(),
        Some(Value::Array(a)) => a
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                Value::String(s) => Ok(s.clone()),
                _ => Err(schema_err(format!("{path}.supporting_ids[{i}]"), "expected a string")),
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(schema_err(format!("{path}.supporting_ids"), "expected an array")),
    };
    let conf = get(obj, "diagnostic_confidence")
        .ok_or_else(|| schema_err(format!("{path}.diagnostic_confidence"), "missing"))?;
    let diagnostic_confidence = coerce_confidence(conf, &format!("{path}.diagnostic_confidence"), warnings)?;
    Ok(FindingItem {
        finding_kind,
        rule_id: opt_string(obj, "rule_id", path)?,
        description,
        bbox,
        supporting_ids,
        diagnostic_confidence,
    })
}
