//! Extract structured answers from typical chat-model replies.

use gridlens::prompts::{parse_elements, parse_regions};

pub fn run_example() -> gridlens::Result<()> {
    let chatty = r#"Sure, here are the elements I found:
```json
[
  {"kind": "Grounding Symbol", "bbox_2d": [40, 12, 20, 30], "confidence": "85%"},
  {"kind": "text_annotation", "bbox_2d": [5, 5, 60, 18], "text": "16D0:4", "confidence": 0.97},
  {"kind": "busbar", "bbox_2d": [0, 100, 400, 104], "confidence": 1.3}
]
```
Let me know if you need more."#;
    let parsed = parse_elements(chatty)?;
    for e in &parsed.value {
        println!("{:<18} {:?} conf {}", e.kind.as_str(), e.bbox, e.confidence);
    }
    for w in &parsed.warnings {
        println!("warning: {w}");
    }

    let regions = parse_regions(r#"[{"label": "CT secondary", "bbox_2d": [[10, 10, 200, 90], [220, 10, 300, 90]]}]"#)?;
    println!("{} region(s), first has {} boxes", regions.value.len(), regions.value[0].boxes.len());

    for bad in ["I could not find anything.", r#"{"elements": []}"#, r#"[{"kind": "other", "bbox_2d": [1, 1, 1, 9], "confidence": 0.5}]"#] {
        match parse_elements(bad) {
            Ok(p) => println!("unexpectedly parsed {:?}", p.value),
            Err(e) => println!("{}: {e}", e.kind()),
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gridlens::Result<()> {
    run_example()
}
