//! Restore boxes reported in a downscaled crop to original-image pixels.

use gridlens::geometry::{global_to_local, local_to_global, BBox};
use gridlens::CropSpec;

pub fn run_example() -> gridlens::Result<()> {
    // a 3000x2000 crop at (5000, 1200), sent to the model at 1500x1000
    let spec = CropSpec::new(5000, 1200, 3000, 2000, 1500, 1000)?;
    println!("scale {} x {}", spec.scale_w(), spec.scale_h());

    for local in [[100.0, 50.0, 180.0, 90.0], [0.0, 0.0, 1500.0, 1000.0], [1400.5, 900.25, 1600.0, 1100.0]] {
        let r = local_to_global(&BBox::from_array(local), &spec)?;
        println!(
            "local {local:?} -> global {:?}{}",
            r.bbox.to_array(),
            if r.clamped { " (clamped to the crop)" } else { "" }
        );
        let back = global_to_local(&r.bbox, &spec);
        println!("  and back {:?}", back.to_array());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gridlens::Result<()> {
    run_example()
}
