//! Letterbox a 4K sheet into the 1024 px overview, map a proposal back to
//! native pixels and cut the crop the second stage would see.

use gridlens::geometry::BBox;
use gridlens::pyramid::{crop_native, make_overview, overview_to_global, plan_crops};
use gridlens::RasterImage;

pub fn run_example() -> gridlens::Result<()> {
    let mut sheet = RasterImage::filled(3840, 2160, [255, 255, 255], "sheet-4k")?;
    for x in 1000..2000 {
        sheet.put_pixel(x, 1080, [0, 0, 0]);
    }

    let ov = make_overview(&sheet, 1024, 1024)?;
    let f = &ov.frame;
    println!(
        "overview {}x{}: content {}x{} at ({}, {}), scale {}",
        ov.image.width(),
        ov.image.height(),
        f.content_width,
        f.content_height,
        f.pad_left,
        f.pad_top,
        f.scale_x
    );

    // a proposal the model drew on the overview, in overview pixels
    let proposal = BBox::new(256.0, 480.0, 544.0, 592.0)?;
    let native = overview_to_global(&proposal, &ov)?;
    println!("proposal {:?} -> native {:?}", proposal.to_array(), native.to_array());

    let crop = crop_native(&sheet, &native)?;
    println!("crop {}x{} at offset ({}, {})", crop.image.width(), crop.image.height(), crop.spec.offset_x, crop.spec.offset_y);

    // a region wider than the crop limit is tiled with 10% overlap
    let wide = BBox::new(0.0, 0.0, 3840.0, 600.0)?;
    for t in plan_crops(&wide, 3840, 2160, 1500, 1500, 0.1)? {
        println!("tile {:?}", t.rounded());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gridlens::Result<()> {
    run_example()
}
