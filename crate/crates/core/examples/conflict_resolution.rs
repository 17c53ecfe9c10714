//! Two crops read the same terminal label differently; the confidence policy
//! either keeps one reading or queues the entity for a human.

use std::collections::BTreeMap;

use gridlens::stage1::SemanticRegion;
use gridlens::stage2::{ElementKind, ExtractedElement};
use gridlens::stage3::{aggregate, resolve_conflicts};
use gridlens::BBox;

fn label(id: &str, text: &str, confidence: f64) -> ExtractedElement {
    ExtractedElement {
        element_id: id.into(),
        kind: ElementKind::TextAnnotation,
        bbox_global: BBox::raw(100.0, 40.0, 160.0, 52.0),
        text: Some(text.into()),
        attributes: BTreeMap::new(),
        confidence,
        source_region_id: "r00".into(),
    }
}

pub fn run_example() -> gridlens::Result<()> {
    let region = SemanticRegion {
        region_id: "r00".into(),
        label: "Terminal block".into(),
        boxes: vec![BBox::new(0.0, 0.0, 400.0, 200.0)?],
        rationale: None,
        proposal_score: None,
    };
    for (a, b) in [(0.95, 0.60), (0.80, 0.75), (0.55, 0.30)] {
        let elements = [label("e0000", "16D0:4", a), label("e0001", "16D0:1", b)];
        let mut model = aggregate(&elements, std::slice::from_ref(&region), 400, 200, 0.7);
        let queued = resolve_conflicts(&mut model, 0.1, 0.6);
        let c = &model.conflicts[0];
        println!(
            "{a:.2} vs {b:.2}: {:?}, kept {:?}, {} finding(s) for review",
            c.resolution,
            c.kept_element_id,
            queued.len()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gridlens::Result<()> {
    run_example()
}
