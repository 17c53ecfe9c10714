//! Stage 3: aggregation of extracted elements, confidence-aware conflict
//! resolution, rule diagnosis (model plus deterministic checkers) and
//! reliability scoring.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::client::{ChatRequest, Client, StageTag};
use crate::config::{Config, ReliabilityFormula};
use crate::error::{Error, Result};
use crate::geometry::{clamp, greedy_match_with, iou, BBox};
use crate::prompts::{parse_findings, render, DesignRule, FindingItem, PromptTemplate, ReviewTask};
use crate::pyramid::RasterImage;
use crate::report::canonical_json;
use crate::stage1::SemanticRegion;
use crate::stage2::{ElementKind, ExtractedElement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Violation,
    Validated,
    NeedsHumanReview,
}

impl FindingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FindingKind::Violation => "violation",
            FindingKind::Validated => "validated",
            FindingKind::NeedsHumanReview => "needs_human_review",
        }
    }

    pub fn parse_lenient(s: &str) -> Option<Self> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c.to_ascii_lowercase() })
            .collect();
        match norm.as_str() {
            "violation" => Some(FindingKind::Violation),
            "validated" | "valid" | "compliant" => Some(FindingKind::Validated),
            "needs_human_review" | "needs_review" | "human_review" => Some(FindingKind::NeedsHumanReview),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingSource {
    Llm,
    DeterministicRule,
}

impl FindingSource {
    pub fn as_str(self) -> &'static str {
        match self {
            FindingSource::Llm => "llm",
            FindingSource::DeterministicRule => "deterministic_rule",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub finding_id: String,
    pub kind: FindingKind,
    pub rule_id: String,
    pub description: String,
    #[serde(default)]
    pub bbox_global: Option<BBox>,
    #[serde(default)]
    pub supporting_ids: Vec<String>,
    pub diagnostic_confidence: f64,
    pub reliability: f64,
    pub source: FindingSource,
}

impl Finding {
    fn new(
        kind: FindingKind,
        rule_id: &str,
        description: String,
        bbox_global: Option<BBox>,
        supporting_ids: Vec<String>,
        diagnostic_confidence: f64,
        source: FindingSource,
    ) -> Self {
        Finding {
            finding_id: String::new(),
            kind,
            rule_id: rule_id.to_owned(),
            description,
            bbox_global,
            supporting_ids,
            diagnostic_confidence,
            reliability: diagnostic_confidence,
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    KeptHigherConfidence,
    FlaggedForHuman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub element_id: String,
    pub value: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub entity_key: String,
    pub contested_field: String,
    pub candidates: Vec<Candidate>,
    /// `None` until [`resolve_conflicts`] has run.
    pub resolution: Option<Resolution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_element_id: Option<String>,
}

/// Rule id used for findings raised by conflict resolution.
pub const CONFLICT_RULE_ID: &str = "data_consistency";

/// Slack for the confidence-policy comparisons, so that decimal inputs such as
/// 0.8 vs 0.7 at epsilon 0.1 land on the "gap <= epsilon" side as written.
pub const POLICY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateModel {
    pub elements: BTreeMap<String, ExtractedElement>,
    /// Each group is one logical entity; ids in acquisition order.
    pub entity_groups: Vec<Vec<String>>,
    pub conflicts: Vec<ConflictRecord>,
    pub regions: Vec<SemanticRegion>,
    pub image_width: u32,
    pub image_height: u32,
}

fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut i = i;
        while self.0[i] != r {
            let next = self.0[i];
            self.0[i] = r;
            i = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

/// Groups same-kind elements whose boxes overlap with IoU >= `dedup_iou`
/// (transitively) and records a conflict for every field on which members of
/// a group disagree. Matching texts (or a missing text) make a plain duplicate.
pub fn aggregate(
    elements: &[ExtractedElement],
    regions: &[SemanticRegion],
    image_width: u32,
    image_height: u32,
    dedup_iou: f64,
) -> AggregateModel {
    let n = elements.len();
    let mut dsu = Dsu((0..n).collect());
    for i in 0..n {
        for j in i + 1..n {
            if elements[i].kind == elements[j].kind
                && iou(&elements[i].bbox_global, &elements[j].bbox_global) >= dedup_iou
            {
                dsu.union(i, j);
            }
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        by_root.entry(dsu.find(i)).or_default().push(i);
    }

    let mut entity_groups = Vec::new();
    let mut conflicts = Vec::new();
    for (gi, members) in by_root.into_values().enumerate() {
        let key = format!("g{gi:03}");
        let group: Vec<&ExtractedElement> = members.iter().map(|&i| &elements[i]).collect();

        let texts: Vec<&ExtractedElement> = group
            .iter()
            .copied()
            .filter(|e| e.text.as_deref().is_some_and(|t| !t.trim().is_empty()))
            .collect();
        let distinct: BTreeSet<String> = texts.iter().map(|e| normalize_text(e.text.as_deref().unwrap_or(""))).collect();
        if distinct.len() > 1 {
            conflicts.push(ConflictRecord {
                entity_key: key.clone(),
                contested_field: "text".into(),
                candidates: texts
                    .iter()
                    .map(|e| Candidate {
                        element_id: e.element_id.clone(),
                        value: e.text.clone().unwrap_or_default(),
                        confidence: e.confidence,
                    })
                    .collect(),
                resolution: None,
                kept_element_id: None,
            });
        }

        let keys: BTreeSet<&String> = group
            .iter()
            .flat_map(|e| e.attributes.keys())
            .filter(|k| k.as_str() != "source")
            .collect();
        for attr in keys {
            let holders: Vec<&ExtractedElement> =
                group.iter().copied().filter(|e| e.attributes.contains_key(attr)).collect();
            let distinct: BTreeSet<String> = holders.iter().map(|e| normalize_text(&e.attributes[attr])).collect();
            if distinct.len() > 1 {
                conflicts.push(ConflictRecord {
                    entity_key: key.clone(),
                    contested_field: format!("attributes.{attr}"),
                    candidates: holders
                        .iter()
                        .map(|e| Candidate {
                            element_id: e.element_id.clone(),
                            value: e.attributes[attr].clone(),
                            confidence: e.confidence,
                        })
                        .collect(),
                    resolution: None,
                    kept_element_id: None,
                });
            }
        }
        entity_groups.push(group.iter().map(|e| e.element_id.clone()).collect());
    }

    AggregateModel {
        elements: elements.iter().map(|e| (e.element_id.clone(), e.clone())).collect(),
        entity_groups,
        conflicts,
        regions: regions.to_vec(),
        image_width,
        image_height,
    }
}

impl AggregateModel {
    /// Highest-confidence member of a group (ties: first in acquisition order).
    pub fn representative(&self, group: &[String]) -> &ExtractedElement {
        let mut best = &self.elements[&group[0]];
        for id in &group[1..] {
            let e = &self.elements[id];
            if e.confidence > best.confidence {
                best = e;
            }
        }
        best
    }

    pub fn representatives(&self) -> Vec<&ExtractedElement> {
        self.entity_groups.iter().map(|g| self.representative(g)).collect()
    }

    pub fn support_confidences(&self, ids: &[String]) -> Vec<f64> {
        ids.iter()
            .filter_map(|id| self.elements.get(id))
            .map(|e| e.confidence)
            .collect()
    }

    fn hull_of(&self, ids: &[String]) -> Option<BBox> {
        ids.iter()
            .filter_map(|id| self.elements.get(id))
            .map(|e| e.bbox_global)
            .reduce(|a, b| a.union_hull(&b))
    }

    /// The JSON embedded in the stage-3 prompt.
    pub fn prompt_json(&self) -> Value {
        let elements: Vec<Value> = self
            .elements
            .values()
            .map(|e| {
                let mut v = json!({
                    "element_id": e.element_id,
                    "kind": e.kind.as_str(),
                    "bbox_2d": e.bbox_global.rounded(),
                    "confidence": e.confidence,
                    "region_id": e.source_region_id,
                });
                if let Some(t) = &e.text {
                    v["text"] = json!(t);
                }
                if !e.attributes.is_empty() {
                    v["attributes"] = json!(e.attributes);
                }
                v
            })
            .collect();
        let regions: Vec<Value> = self
            .regions
            .iter()
            .map(|r| {
                json!({
                    "region_id": r.region_id,
                    "label": r.label,
                    "boxes": r.boxes.iter().map(BBox::rounded).collect::<Vec<_>>(),
                })
            })
            .collect();
        json!({
            "regions": regions,
            "elements": elements,
            "entities": self.entity_groups.iter().filter(|g| g.len() > 1).collect::<Vec<_>>(),
            "conflicts": self.conflicts,
        })
    }
}

/// Applies the confidence policy to every conflict: the best value wins when
/// it beats the runner-up by more than `epsilon` and reaches `conf_threshold`;
/// otherwise the conflict is flagged and a review finding is returned for it.
/// Candidates proposing the same value count once, at their best confidence.
pub fn resolve_conflicts(model: &mut AggregateModel, epsilon: f64, conf_threshold: f64) -> Vec<Finding> {
    let mut queued = Vec::new();
    for c in &mut model.conflicts {
        let mut best: BTreeMap<String, &Candidate> = BTreeMap::new();
        for cand in &c.candidates {
            let slot = best.entry(normalize_text(&cand.value)).or_insert(cand);
            if cand.confidence > slot.confidence {
                *slot = cand;
            }
        }
        let mut ranked: Vec<&Candidate> = best.into_values().collect();
        ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.element_id.cmp(&b.element_id)));
        let c_max = ranked[0].confidence;
        let c_second = ranked.get(1).map_or(0.0, |r| r.confidence);
        if c_max - c_second > epsilon + POLICY_TOLERANCE && c_max >= conf_threshold - POLICY_TOLERANCE {
            c.resolution = Some(Resolution::KeptHigherConfidence);
            c.kept_element_id = Some(ranked[0].element_id.clone());
        } else {
            c.resolution = Some(Resolution::FlaggedForHuman);
            c.kept_element_id = None;
            let ids: Vec<String> = c.candidates.iter().map(|x| x.element_id.clone()).collect();
            let listing: Vec<String> = c
                .candidates
                .iter()
                .map(|x| format!("{:?} ({:.2})", x.value, x.confidence))
                .collect();
            let bbox = ids
                .iter()
                .filter_map(|id| model.elements.get(id))
                .map(|e| e.bbox_global)
                .reduce(|a, b| a.union_hull(&b));
            queued.push(Finding::new(
                FindingKind::NeedsHumanReview,
                CONFLICT_RULE_ID,
                format!(
                    "conflicting {} for entity {}: {}",
                    c.contested_field,
                    c.entity_key,
                    listing.join(" vs ")
                ),
                bbox,
                ids,
                c_max,
                FindingSource::DeterministicRule,
            ));
        }
    }
    queued
}

/// Whether a region is a CT secondary circuit context: its label contains the
/// token "CT", or one of its elements carries `circuit=ct_secondary`.
pub fn is_ct_context(region: &SemanticRegion, model: &AggregateModel) -> bool {
    let by_label = region
        .label
        .split(|c: char| !c.is_ascii_alphanumeric())
        .any(|t| t.eq_ignore_ascii_case("ct"));
    by_label
        || model.elements.values().any(|e| {
            e.source_region_id == region.region_id
                && e.attributes.get("circuit").is_some_and(|v| v == "ct_secondary")
        })
}

/// Order in which grounds are considered legitimate: a ground marked as on the
/// CT side first, then top-left reading order.
fn ground_order(a: &ExtractedElement, b: &ExtractedElement) -> std::cmp::Ordering {
    let ct_side = |e: &ExtractedElement| e.attributes.get("side").map(String::as_str) != Some("ct");
    ct_side(a)
        .cmp(&ct_side(b))
        .then(a.bbox_global.x1.total_cmp(&b.bbox_global.x1))
        .then(a.bbox_global.y1.total_cmp(&b.bbox_global.y1))
        .then(a.element_id.cmp(&b.element_id))
}

/// Deterministic single-point grounding checker. For every CT context region,
/// counts grounding entities whose box center lies in the region: one ground
/// validates the region, each additional ground is a violation located at
/// that ground, and no ground needs a human.
pub fn check_single_point_grounding(model: &AggregateModel, rule_id: &str) -> Vec<Finding> {
    let grounds: Vec<&ExtractedElement> = model
        .representatives()
        .into_iter()
        .filter(|e| e.kind == ElementKind::GroundingSymbol)
        .collect();
    let mut out = Vec::new();
    let mut reported: BTreeSet<&str> = BTreeSet::new();
    for region in model.regions.iter().filter(|r| is_ct_context(r, model)) {
        let mut inside: Vec<&ExtractedElement> = grounds
            .iter()
            .copied()
            .filter(|g| {
                let (cx, cy) = g.bbox_global.center();
                region.contains_point(cx, cy)
            })
            .collect();
        inside.sort_by(|a, b| ground_order(a, b));
        match inside.as_slice() {
            [] => out.push(Finding::new(
                FindingKind::NeedsHumanReview,
                rule_id,
                format!("no grounding found in {} ({})", region.label, region.region_id),
                Some(region.hull()),
                Vec::new(),
                1.0,
                FindingSource::DeterministicRule,
            )),
            [only] => out.push(Finding::new(
                FindingKind::Validated,
                rule_id,
                format!("{} ({}) is grounded at a single point", region.label, region.region_id),
                Some(only.bbox_global),
                vec![only.element_id.clone()],
                1.0,
                FindingSource::DeterministicRule,
            )),
            [first, extra @ ..] => {
                for g in extra {
                    if !reported.insert(g.element_id.as_str()) {
                        continue;
                    }
                    out.push(Finding::new(
                        FindingKind::Violation,
                        rule_id,
                        format!(
                            "additional ground in {} ({}); circuit already grounded at {:?}",
                            region.label,
                            region.region_id,
                            first.bbox_global.rounded()
                        ),
                        Some(g.bbox_global),
                        vec![g.element_id.clone(), first.element_id.clone()],
                        1.0,
                        FindingSource::DeterministicRule,
                    ));
                }
            }
        }
    }
    out
}

/// Whether a deterministic checker covers this rule: it must be marked
/// machine-checkable and mention grounding in its id or title.
pub fn has_grounding_checker(rule: &DesignRule) -> bool {
    let text = format!("{} {}", rule.rule_id, rule.title).to_lowercase();
    rule.machine_checkable && text.contains("ground")
}

pub fn reliability(f: &Finding, model: &AggregateModel, formula: ReliabilityFormula) -> f64 {
    let supports = model.support_confidences(&f.supporting_ids);
    let d = f.diagnostic_confidence;
    let r = if supports.is_empty() {
        d
    } else {
        match formula {
            ReliabilityFormula::ProductMin => d * supports.iter().copied().fold(f64::INFINITY, f64::min),
            ReliabilityFormula::GeometricMean => {
                let logs: f64 = supports.iter().map(|c| c.ln()).sum::<f64>() + d.ln();
                (logs / (supports.len() + 1) as f64).exp()
            }
        }
    };
    r.clamp(0.0, 1.0)
}

pub fn stage3_bindings(task: &ReviewTask, model: &AggregateModel) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("task".to_owned(), task.task_text.clone()),
        ("rules".to_owned(), task.rules_text()),
        ("aggregate_json".to_owned(), canonical_json(&model.prompt_json()).trim_end().to_owned()),
    ])
}

#[derive(Debug, Clone)]
pub struct Diagnosis {
    pub findings: Vec<Finding>,
    pub warnings: Vec<String>,
    pub latency_ms: u64,
}

/// Converts parsed model findings: unknown support ids are dropped, boxes are
/// clipped to the drawing, and a violation without a box takes the hull of its
/// supports.
pub fn llm_findings(items: &[FindingItem], task: &ReviewTask, model: &AggregateModel, warnings: &mut Vec<String>) -> Vec<Finding> {
    let default_rule = match task.rules.as_slice() {
        [only] => only.rule_id.clone(),
        _ => "unspecified".to_owned(),
    };
    let (w, h) = (f64::from(model.image_width), f64::from(model.image_height));
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let mut supports = Vec::new();
        for id in &item.supporting_ids {
            if model.elements.contains_key(id) {
                if !supports.contains(id) {
                    supports.push(id.clone());
                }
            } else {
                warnings.push(format!("finding {i}: unknown element id {id:?} dropped"));
            }
        }
        let mut bbox = item.bbox.and_then(|b| match clamp(&BBox::from_array(b), w, h) {
            Ok(c) => Some(c),
            Err(e) => {
                warnings.push(format!("finding {i}: box dropped: {e}"));
                None
            }
        });
        if bbox.is_none() && item.finding_kind == FindingKind::Violation {
            bbox = model.hull_of(&supports);
        }
        out.push(Finding::new(
            item.finding_kind,
            item.rule_id.as_deref().unwrap_or(&default_rule),
            item.description.clone(),
            bbox,
            supports,
            item.diagnostic_confidence,
            FindingSource::Llm,
        ));
    }
    out
}

/// Asks the model to diagnose the aggregate against the task's rules.
pub fn diagnose_llm(
    model: &AggregateModel,
    task: &ReviewTask,
    cfg: &Config,
    client: &Client,
    template: &PromptTemplate,
    images: Vec<RasterImage>,
    drawing_id: &str,
) -> Result<Diagnosis> {
    let prompt = render(template, &stage3_bindings(task, model))?;
    let req = ChatRequest::new(StageTag::Stage3, prompt, images).with_context(Some(drawing_id), None);
    let asked = client
        .ask_structured(&req, cfg.max_retries, parse_findings)
        .map_err(|e| match e {
            Error::Parse { .. } | Error::Schema { .. } => Error::Stage3Parse(e.to_string()),
            other => other,
        })?;
    let mut warnings = asked.warnings;
    let findings = llm_findings(&asked.value, task, model, &mut warnings);
    Ok(Diagnosis {
        findings,
        warnings,
        latency_ms: asked.latency_ms,
    })
}

/// Reconciles model findings with checker findings for the checked rules.
/// Violations found by both (boxes overlapping at IoU >= 0.5) are reported
/// once, from the checker, with the model's evidence merged in. Violations
/// found by only one side are kept (checker) or downgraded (model) and each
/// disagreement is surfaced as a review finding.
pub fn cross_check(
    checker: Vec<Finding>,
    llm: Vec<Finding>,
    checked_rules: &BTreeSet<String>,
) -> (Vec<Finding>, Vec<Finding>) {
    let mut checker = checker;
    let mut kept_llm = Vec::new();
    let mut disagreements = Vec::new();

    let mut contested: Vec<Finding> = Vec::new();
    for f in llm {
        if f.kind == FindingKind::Violation && checked_rules.contains(&f.rule_id) {
            contested.push(f);
        } else {
            kept_llm.push(f);
        }
    }

    let oracle_idx: Vec<usize> = (0..checker.len())
        .filter(|&i| checker[i].kind == FindingKind::Violation)
        .collect();
    let model_boxes: Vec<BBox> = contested
        .iter()
        .map(|f| f.bbox_global.unwrap_or(BBox::raw(0.0, 0.0, 0.0, 0.0)))
        .collect();
    let oracle_boxes: Vec<BBox> = oracle_idx.iter().map(|&i| checker[i].bbox_global.expect("violation has a box")).collect();
    let matches = greedy_match_with(&model_boxes, &oracle_boxes, 0.5, |p, g| {
        contested[p].bbox_global.is_some() && contested[p].rule_id == checker[oracle_idx[g]].rule_id
    });

    let mut model_matched = vec![false; contested.len()];
    let mut oracle_matched = vec![false; oracle_idx.len()];
    for m in &matches {
        model_matched[m.pred] = true;
        oracle_matched[m.gt] = true;
        let target = &mut checker[oracle_idx[m.gt]];
        for id in &contested[m.pred].supporting_ids {
            if !target.supporting_ids.contains(id) {
                target.supporting_ids.push(id.clone());
            }
        }
    }
    for (k, &i) in oracle_idx.iter().enumerate() {
        if !oracle_matched[k] {
            let f = &checker[i];
            disagreements.push(Finding {
                kind: FindingKind::NeedsHumanReview,
                description: format!("rule checker violation not reported by the model: {}", f.description),
                ..f.clone()
            });
        }
    }
    for (f, matched) in contested.into_iter().zip(model_matched) {
        if !matched {
            disagreements.push(Finding {
                kind: FindingKind::NeedsHumanReview,
                description: format!("model violation not confirmed by the rule checker: {}", f.description),
                ..f
            });
        }
    }
    let mut merged = checker;
    merged.extend(kept_llm);
    (merged, disagreements)
}

#[derive(Debug, Clone)]
pub struct Stage3Output {
    pub findings: Vec<Finding>,
    pub conflicts: Vec<ConflictRecord>,
    pub warnings: Vec<String>,
    pub latency_ms: u64,
}

/// Numbers findings `f000`, `f001`, ... and fills in reliability.
pub fn finalize_findings(findings: Vec<Finding>, model: &AggregateModel, formula: ReliabilityFormula) -> Vec<Finding> {
    findings
        .into_iter()
        .enumerate()
        .map(|(n, mut f)| {
            f.finding_id = format!("f{n:03}");
            f.reliability = reliability(&f, model, formula);
            f
        })
        .collect()
}

/// Full stage: aggregate, resolve conflicts, diagnose, check, reconcile.
#[allow(clippy::too_many_arguments)]
pub fn review(
    elements: &[ExtractedElement],
    regions: &[SemanticRegion],
    drawing: &RasterImage,
    overview: Option<&RasterImage>,
    task: &ReviewTask,
    cfg: &Config,
    client: &Client,
    template: &PromptTemplate,
) -> Result<Stage3Output> {
    let mut model = aggregate(elements, regions, drawing.width(), drawing.height(), cfg.dedup_iou);
    let queued = resolve_conflicts(&mut model, cfg.epsilon, cfg.conf_threshold);

    let images = match (cfg.stage3_attach_overview, overview) {
        (true, Some(img)) => vec![img.clone()],
        _ => Vec::new(),
    };
    let diagnosis = diagnose_llm(&model, task, cfg, client, template, images, drawing.source_id())?;

    let mut checked = BTreeSet::new();
    let mut checker = Vec::new();
    for rule in task.rules.iter().filter(|r| has_grounding_checker(r)) {
        checked.insert(rule.rule_id.clone());
        checker.extend(check_single_point_grounding(&model, &rule.rule_id));
    }
    let (mut findings, disagreements) = cross_check(checker, diagnosis.findings, &checked);

    let mut warnings = diagnosis.warnings;
    // a model violation that still lacks evidence cannot stand as a violation
    for f in &mut findings {
        if f.kind == FindingKind::Violation && (f.bbox_global.is_none() || f.supporting_ids.is_empty()) {
            warnings.push(format!("model violation without location or evidence downgraded: {}", f.description));
            f.kind = FindingKind::NeedsHumanReview;
        }
    }
    findings.extend(queued);
    findings.extend(disagreements);

    Ok(Stage3Output {
        findings: finalize_findings(findings, &model, cfg.reliability_formula),
        conflicts: model.conflicts,
        warnings,
        latency_ms: diagnosis.latency_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn el(id: &str, kind: ElementKind, b: [f64; 4], text: Option<&str>, conf: f64) -> ExtractedElement {
        ExtractedElement {
            element_id: id.into(),
            kind,
            bbox_global: BBox::from_array(b),
            text: text.map(Into::into),
            attributes: BTreeMap::new(),
            confidence: conf,
            source_region_id: "r000".into(),
        }
    }

    fn region(label: &str, b: [f64; 4]) -> SemanticRegion {
        SemanticRegion {
            region_id: "r000".into(),
            label: label.into(),
            boxes: vec![BBox::from_array(b)],
            rationale: None,
            proposal_score: None,
        }
    }

    #[test]
    fn duplicates_group_without_conflict() {
        let a = el("e0000", ElementKind::TextAnnotation, [0.0, 0.0, 100.0, 100.0], Some("16D0:4"), 0.9);
        let b = el("e0001", ElementKind::TextAnnotation, [0.0, 0.0, 100.0, 85.0], Some("16d0:4 "), 0.8);
        let m = aggregate(&[a, b], &[], 200, 200, 0.7);
        assert_eq!(m.entity_groups, vec![vec!["e0000".to_string(), "e0001".to_string()]]);
        assert!(m.conflicts.is_empty());
    }

    #[test]
    fn differing_texts_conflict() {
        let a = el("e0000", ElementKind::TextAnnotation, [0.0, 0.0, 100.0, 100.0], Some("16D0:4"), 0.9);
        let b = el("e0001", ElementKind::TextAnnotation, [0.0, 0.0, 100.0, 90.0], Some("16D0:1"), 0.5);
        let c = el("e0002", ElementKind::TextAnnotation, [150.0, 150.0, 190.0, 190.0], Some("X"), 0.5);
        let mut m = aggregate(&[a, b, c], &[], 200, 200, 0.7);
        assert_eq!(m.entity_groups.len(), 2);
        assert_eq!(m.conflicts.len(), 1);
        assert_eq!(m.conflicts[0].contested_field, "text");
        let queued = resolve_conflicts(&mut m, 0.1, 0.6);
        assert!(queued.is_empty());
        assert_eq!(m.conflicts[0].resolution, Some(Resolution::KeptHigherConfidence));
        assert_eq!(m.conflicts[0].kept_element_id.as_deref(), Some("e0000"));
    }

    #[test]
    fn kinds_never_merge() {
        let a = el("e0000", ElementKind::TextAnnotation, [0.0, 0.0, 100.0, 100.0], Some("A"), 0.9);
        let b = el("e0001", ElementKind::GroundingSymbol, [0.0, 0.0, 100.0, 100.0], None, 0.9);
        assert_eq!(aggregate(&[a, b], &[], 200, 200, 0.7).entity_groups.len(), 2);
    }

    #[test]
    fn reliability_formulas() {
        let mut m = aggregate(
            &[
                el("e0000", ElementKind::Other, [0.0, 0.0, 1.0, 1.0], None, 0.92),
                el("e0001", ElementKind::Other, [5.0, 5.0, 6.0, 6.0], None, 0.95),
            ],
            &[],
            10,
            10,
            0.7,
        );
        m.conflicts.clear();
        let f = Finding::new(
            FindingKind::Violation,
            "R",
            String::new(),
            None,
            vec!["e0000".into(), "e0001".into()],
            0.8,
            FindingSource::Llm,
        );
        assert!((reliability(&f, &m, ReliabilityFormula::ProductMin) - 0.736).abs() < 1e-12);
        let g = reliability(&f, &m, ReliabilityFormula::GeometricMean);
        assert!((g - (0.8f64 * 0.92 * 0.95).cbrt()).abs() < 1e-12);
        let bare = Finding { supporting_ids: vec![], diagnostic_confidence: 0.5, ..f };
        assert_eq!(reliability(&bare, &m, ReliabilityFormula::ProductMin), 0.5);
    }

    #[test]
    fn grounding_cases() {
        let reg = region("CT Secondary Circuit Panel", [0.0, 0.0, 500.0, 500.0]);
        let g1 = el("e0000", ElementKind::GroundingSymbol, [10.0, 10.0, 30.0, 30.0], None, 0.9);
        let g2 = el("e0001", ElementKind::GroundingSymbol, [300.0, 10.0, 320.0, 30.0], None, 0.8);
        let outside = el("e0002", ElementKind::GroundingSymbol, [600.0, 10.0, 620.0, 30.0], None, 0.8);

        let m = aggregate(&[g1.clone(), outside.clone()], &[reg.clone()], 1000, 1000, 0.7);
        let f = check_single_point_grounding(&m, "SPG");
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].kind, FindingKind::Validated);

        let m = aggregate(&[g2.clone(), g1.clone()], &[reg.clone()], 1000, 1000, 0.7);
        let f = check_single_point_grounding(&m, "SPG");
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].kind, FindingKind::Violation);
        assert_eq!(f[0].bbox_global, Some(g2.bbox_global));
        assert_eq!(f[0].supporting_ids, ["e0001", "e0000"]);

        let m = aggregate(&[outside], &[reg.clone()], 1000, 1000, 0.7);
        assert_eq!(check_single_point_grounding(&m, "SPG")[0].kind, FindingKind::NeedsHumanReview);

        let other = region("Grounding Point Cluster", [0.0, 0.0, 500.0, 500.0]);
        let m = aggregate(&[g1, g2], &[other], 1000, 1000, 0.7);
        assert!(check_single_point_grounding(&m, "SPG").is_empty());
    }

    #[test]
    fn ct_token_matching() {
        let m = aggregate(&[], &[], 10, 10, 0.7);
        assert!(is_ct_context(&region("ct-secondary wiring", [0.0, 0.0, 1.0, 1.0]), &m));
        assert!(!is_ct_context(&region("Relay Protection Panel", [0.0, 0.0, 1.0, 1.0]), &m));
    }

    #[test]
    fn cross_check_merges_and_flags() {
        let oracle = Finding::new(
            FindingKind::Violation,
            "SPG",
            "o".into(),
            Some(BBox::raw(0.0, 0.0, 10.0, 10.0)),
            vec!["e0001".into()],
            1.0,
            FindingSource::DeterministicRule,
        );
        let same = Finding {
            source: FindingSource::Llm,
            supporting_ids: vec!["e0004".into()],
            bbox_global: Some(BBox::raw(1.0, 0.0, 10.0, 10.0)),
            ..oracle.clone()
        };
        let stray = Finding {
            bbox_global: Some(BBox::raw(50.0, 50.0, 60.0, 60.0)),
            ..same.clone()
        };
        let checked = BTreeSet::from(["SPG".to_string()]);
        let (merged, dis) = cross_check(vec![oracle.clone()], vec![same], &checked);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].supporting_ids, ["e0001", "e0004"]);
        assert!(dis.is_empty());

        let (merged, dis) = cross_check(vec![oracle], vec![stray], &checked);
        assert_eq!(merged.len(), 1);
        assert_eq!(dis.len(), 2);
        assert!(dis.iter().all(|f| f.kind == FindingKind::NeedsHumanReview));
    }
}
