//! The deterministic single-point-grounding rule over an aggregated model.

use std::collections::BTreeMap;

use gridlens::config::ReliabilityFormula;
use gridlens::stage1::SemanticRegion;
use gridlens::stage2::{ElementKind, ExtractedElement};
use gridlens::stage3::{aggregate, check_single_point_grounding, reliability};
use gridlens::BBox;

fn ground(id: &str, x: f64, confidence: f64, side: Option<&str>) -> ExtractedElement {
    ExtractedElement {
        element_id: id.into(),
        kind: ElementKind::GroundingSymbol,
        bbox_global: BBox::raw(x, 100.0, x + 20.0, 120.0),
        text: None,
        attributes: side.map(|s| BTreeMap::from([("side".to_string(), s.to_string())])).unwrap_or_default(),
        confidence,
        source_region_id: "r00".into(),
    }
}

pub fn run_example() -> gridlens::Result<()> {
    let regions = vec![SemanticRegion {
        region_id: "r00".into(),
        label: "CT secondary circuit".into(),
        boxes: vec![BBox::new(0.0, 0.0, 600.0, 300.0)?],
        rationale: None,
        proposal_score: None,
    }];
    // the CT-side ground sits right of the relay-side one
    let elements = [ground("e0000", 50.0, 0.88, None), ground("e0001", 400.0, 0.93, Some("ct"))];
    let model = aggregate(&elements, &regions, 600, 300, 0.7);
    for f in check_single_point_grounding(&model, "CT-SPG-01") {
        println!(
            "{} at {:?}: {} (supports {:?}, reliability {:.2})",
            f.kind.as_str(),
            f.bbox_global.map(|b| b.rounded()),
            f.description,
            f.supporting_ids,
            reliability(&f, &model, ReliabilityFormula::ProductMin)
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gridlens::Result<()> {
    run_example()
}
