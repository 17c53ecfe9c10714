//! Suppress overlapping region proposals, then match survivors to ground truth.

use gridlens::geometry::{greedy_match, iou, nms, BBox, ScoredBox};

pub fn run_example() -> gridlens::Result<()> {
    let proposals = vec![
        ScoredBox::new(BBox::new(100.0, 100.0, 400.0, 300.0)?, "CT secondary", 0.92),
        ScoredBox::new(BBox::new(110.0, 105.0, 410.0, 310.0)?, "CT secondary", 0.85),
        ScoredBox::new(BBox::new(120.0, 110.0, 420.0, 320.0)?, "Relay panel", 0.80),
        ScoredBox::new(BBox::new(600.0, 100.0, 900.0, 300.0)?, "Relay panel", 0.75),
    ];
    println!("IoU of the first two: {:.3}", iou(&proposals[0].bbox, &proposals[1].bbox));

    for per_label in [true, false] {
        let kept = nms(&proposals, 0.3, per_label);
        let labels: Vec<String> = kept.iter().map(|k| format!("{} {:.2}", k.label, k.score)).collect();
        println!("per_label={per_label}: kept {labels:?}");
    }

    let truth = [BBox::new(105.0, 100.0, 400.0, 305.0)?, BBox::new(590.0, 90.0, 890.0, 290.0)?];
    for m in greedy_match(&nms(&proposals, 0.3, true), &truth, 0.5) {
        println!("prediction {} matches truth {} at IoU {:.3}", m.pred, m.gt, m.iou);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gridlens::Result<()> {
    run_example()
}
