//! Stage 1: propose domain-semantic regions from a low-resolution overview.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::{ChatRequest, Client, StageTag};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{nms_indices, BBox, ScoredBox};
use crate::prompts::{parse_regions, render, PromptTemplate, RegionProposal, ReviewTask};
use crate::pyramid::{make_overview, Overview, OverviewFrame, RasterImage};

/// A labeled focus area in original-image coordinates; may span several boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticRegion {
    pub region_id: String,
    pub label: String,
    pub boxes: Vec<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_score: Option<f64>,
}

impl SemanticRegion {
    /// Bounding hull of all boxes.
    pub fn hull(&self) -> BBox {
        self.boxes
            .iter()
            .skip(1)
            .fold(self.boxes[0], |acc, b| acc.union_hull(b))
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.boxes.iter().any(|b| b.contains_point(x, y))
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub regions: Vec<SemanticRegion>,
    pub overview: Overview,
    pub warnings: Vec<String>,
    pub latency_ms: u64,
}

pub fn stage1_bindings(task: &ReviewTask) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("task".to_owned(), task.task_text.clone()),
        ("rules".to_owned(), task.rules_text()),
    ])
}

/// Maps raw proposals (overview pixels) into original-image regions: boxes in
/// the letterbox padding or outside the image are dropped, then per-label NMS
/// runs on region hulls. Ids are assigned in keep order.
pub fn finalize_proposals(
    proposals: &[RegionProposal],
    frame: &OverviewFrame,
    nms_iou: f64,
    warnings: &mut Vec<String>,
) -> Vec<SemanticRegion> {
    let mut mapped: Vec<SemanticRegion> = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        let mut boxes = Vec::new();
        for raw in &p.boxes {
            match frame.to_global(&BBox::from_array(*raw)) {
                Ok(b) => boxes.push(b),
                Err(e) => warnings.push(format!("proposal {i} ({}): box dropped: {e}", p.label)),
            }
        }
        if boxes.is_empty() {
            warnings.push(format!("proposal {i} ({}) dropped: no box inside the drawing", p.label));
            continue;
        }
        mapped.push(SemanticRegion {
            region_id: String::new(),
            label: p.label.clone(),
            boxes,
            rationale: p.rationale.clone(),
            proposal_score: p.score,
        });
    }

    // omitted scores count as fully confident
    let scored: Vec<ScoredBox> = mapped
        .iter()
        .map(|r| ScoredBox::new(r.hull(), r.label.clone(), r.proposal_score.unwrap_or(1.0)))
        .collect();
    let kept = nms_indices(&scored, nms_iou, true);
    if kept.len() < mapped.len() {
        warnings.push(format!("NMS suppressed {} proposals", mapped.len() - kept.len()));
    }
    kept.into_iter()
        .enumerate()
        .map(|(n, idx)| SemanticRegion {
            region_id: format!("r{n:03}"),
            ..mapped[idx].clone()
        })
        .collect()
}

/// Renders the stage-1 prompt, sends the overview, and turns the answer into
/// NMS-filtered regions in original-image coordinates.
pub fn propose_regions(
    drawing: &RasterImage,
    task: &ReviewTask,
    cfg: &Config,
    client: &Client,
    template: &PromptTemplate,
) -> Result<Stage1Output> {
    let overview = make_overview(drawing, cfg.overview_size, cfg.overview_size)?;
    let prompt = render(template, &stage1_bindings(task))?;
    let req = ChatRequest::new(StageTag::Stage1, prompt, vec![overview.image.clone()])
        .with_context(Some(drawing.source_id()), None);
    let asked = client
        .ask_structured(&req, cfg.max_retries, parse_regions)
        .map_err(|e| match e {
            Error::Parse { .. } | Error::Schema { .. } => Error::Stage1Parse(e.to_string()),
            other => other,
        })?;
    let mut warnings = asked.warnings;
    let regions = finalize_proposals(&asked.value, &overview.frame, cfg.nms_iou, &mut warnings);
    if regions.is_empty() {
        return Err(Error::NoRegions);
    }
    Ok(Stage1Output {
        regions,
        overview,
        warnings,
        latency_ms: asked.latency_ms,
    })
}
