//! Review report assembly and canonical rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::prompts::ReviewTask;
use crate::stage3::{ConflictRecord, Finding, FindingKind};

pub const REPORT_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCrop {
    pub region_id: String,
    pub crop_index: usize,
    pub bbox: crate::geometry::BBox,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub template_digests: BTreeMap<String, String>,
    pub backend_id: String,
    pub reliability_formula: String,
}

/// Backend latency per stage, summed over calls. Cached responses report the
/// latency recorded when they were first produced.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    pub stage1_ms: u64,
    pub stage2_ms: u64,
    pub stage3_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewReport {
    pub schema_version: String,
    pub drawing_id: String,
    pub task: ReviewTask,
    pub findings: Vec<Finding>,
    pub conflicts: Vec<ConflictRecord>,
    pub failed_crops: Vec<FailedCrop>,
    pub provenance: Provenance,
    pub timings: Timings,
}

impl ReviewReport {
    pub fn count(&self, kind: FindingKind) -> usize {
        self.findings.iter().filter(|f| f.kind == kind).count()
    }

    pub fn has_violations(&self) -> bool {
        self.count(FindingKind::Violation) > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

pub fn render_report(report: &ReviewReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let v = serde_json::to_value(report).expect("report serializes");
            canonical_json(&v).into_bytes()
        }
        ReportFormat::Markdown => render_markdown(report).into_bytes(),
    }
}

/// Sorted keys, two-space indentation, floats with exactly four decimals,
/// LF line endings and a trailing newline.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, v, 0);
    out.push('\n');
    out
}

fn write_value(out: &mut String, v: &Value, depth: usize) {
    let pad = |out: &mut String, d: usize| {
        for _ in 0..d {
            out.push_str("  ");
        }
    };
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                let x = n.as_f64().unwrap_or(0.0);
                let s = format!("{x:.4}");
                out.push_str(if s == "-0.0000" { "0.0000" } else { &s });
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
        Value::Array(a) => {
            if a.is_empty() {
                out.push_str("[]");
                return;
            }
            // numeric arrays (boxes) stay on one line
            if a.iter().all(Value::is_number) {
                out.push('[');
                for (i, x) in a.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_value(out, x, depth);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (i, x) in a.iter().enumerate() {
                pad(out, depth + 1);
                write_value(out, x, depth + 1);
                if i + 1 < a.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            pad(out, depth);
            out.push(']');
        }
        Value::Object(m) => {
            if m.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                pad(out, depth + 1);
                out.push_str(&serde_json::to_string(k).expect("key serializes"));
                out.push_str(": ");
                write_value(out, &m[*k], depth + 1);
                if i + 1 < keys.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            pad(out, depth);
            out.push('}');
        }
    }
}

fn kind_rank(k: FindingKind) -> u8 {
    match k {
        FindingKind::Violation => 0,
        FindingKind::NeedsHumanReview => 1,
        FindingKind::Validated => 2,
    }
}

/// Findings ordered for human reading: violations first, then items needing
/// review, then validated sections; reliability descending within a kind.
pub fn sorted_for_display(findings: &[Finding]) -> Vec<&Finding> {
    let mut v: Vec<&Finding> = findings.iter().collect();
    v.sort_by(|a, b| {
        kind_rank(a.kind)
            .cmp(&kind_rank(b.kind))
            .then(b.reliability.total_cmp(&a.reliability))
            .then(a.finding_id.cmp(&b.finding_id))
    });
    v
}

fn render_markdown(r: &ReviewReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Drawing review: {}\n", r.drawing_id);
    let _ = writeln!(s, "**Task:** {}\n", r.task.task_text);
    let _ = writeln!(s, "| Violations | Needs human review | Validated | Conflicts | Failed crops |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    let _ = writeln!(
        s,
        "| {} | {} | {} | {} | {} |\n",
        r.count(FindingKind::Violation),
        r.count(FindingKind::NeedsHumanReview),
        r.count(FindingKind::Validated),
        r.conflicts.len(),
        r.failed_crops.len()
    );
    if r.findings.is_empty() {
        let _ = writeln!(s, "No findings.\n");
    } else {
        let _ = writeln!(s, "## Findings\n");
        for f in sorted_for_display(&r.findings) {
            let loc = f
                .bbox_global
                .map(|b| format!("{:?}", b.rounded()))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "- **{}** `{}` [{}] reliability {:.4} (diagnostic {:.4}, {}) at {}: {}",
                f.kind.as_str(),
                f.finding_id,
                f.rule_id,
                f.reliability,
                f.diagnostic_confidence,
                f.source.as_str(),
                loc,
                f.description
            );
            if !f.supporting_ids.is_empty() {
                let _ = writeln!(s, "  - evidence: {}", f.supporting_ids.join(", "));
            }
        }
        s.push('\n');
    }
    if !r.failed_crops.is_empty() {
        let _ = writeln!(s, "## Failed crops\n");
        for c in &r.failed_crops {
            let _ = writeln!(s, "- {} crop {} {:?}: {}", c.region_id, c.crop_index, c.bbox.rounded(), c.reason);
        }
        s.push('\n');
    }
    let _ = writeln!(
        s,
        "_backend {}, config {}, reliability {}_",
        r.provenance.backend_id,
        &r.provenance.config_digest[..r.provenance.config_digest.len().min(12)],
        r.provenance.reliability_formula
    );
    s
}
