//! Raster loading, letterboxed overviews, native-resolution crops, and the
//! bookkeeping needed to map boxes back to original-image pixels.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox};

/// 8-bit RGB raster, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    source_id: String,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("source_id", &self.source_id)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>, source_id: impl Into<String>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("zero dimension {width}x{height}")));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::InvalidImage(format!(
                "buffer length {} != {width}x{height}x3",
                pixels.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            pixels,
            source_id: source_id.into(),
        })
    }

    /// Uniformly filled raster.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3], source_id: impl Into<String>) -> Result<Self> {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        RasterImage::new(width, height, pixels, source_id)
    }

    /// Reads a PNG or TIFF; grayscale and alpha inputs are converted to RGB.
    /// The source id is the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::open(path)?.to_rgb8();
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (w, h) = decoded.dimensions();
        RasterImage::new(w, h, decoded.into_raw(), stem)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            encoder,
            &self.pixels,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(out)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn bounds(&self) -> BBox {
        BBox::raw(0.0, 0.0, f64::from(self.width), f64::from(self.height))
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y as usize * self.width as usize + x as usize) * 3;
            self.pixels[i..i + 3].copy_from_slice(&rgb);
        }
    }

    /// SHA-256 over dimensions and decoded pixel bytes; independent of file encoding.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.pixels);
        hex::encode(h.finalize())
    }

    /// Copies a rectangle with integer bounds (already validated).
    fn sub_image(&self, x: u32, y: u32, w: u32, h: u32) -> RasterImage {
        let mut pixels = Vec::with_capacity(w as usize * h as usize * 3);
        let stride = self.width as usize * 3;
        for row in y..y + h {
            let start = row as usize * stride + x as usize * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w as usize * 3]);
        }
        RasterImage {
            width: w,
            height: h,
            pixels,
            source_id: self.source_id.clone(),
        }
    }
}

/// Per-axis source intervals for area averaging: output index `o` covers
/// `[o * scale, (o + 1) * scale)` clipped to `[0, src_len)`.
fn area_weights(src_len: u32, out_len: u32, scale: f64) -> Vec<Vec<(usize, f64)>> {
    (0..out_len)
        .map(|o| {
            let lo = f64::from(o) * scale;
            let hi = (f64::from(o + 1) * scale).min(f64::from(src_len));
            let mut w = Vec::new();
            let first = lo.floor() as u32;
            let mut i = first;
            while f64::from(i) < hi && i < src_len {
                let a = f64::from(i).max(lo);
                let b = f64::from(i + 1).min(hi);
                if b > a {
                    w.push((i as usize, b - a));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Box-filter (area-averaging) resample to `out_w x out_h`, where each output
/// pixel averages the source area it covers under per-axis `scale_x`/`scale_y`.
pub fn resample_area(src: &RasterImage, out_w: u32, out_h: u32, scale_x: f64, scale_y: f64) -> Result<RasterImage> {
    if out_w == 0 || out_h == 0 || !(scale_x > 0.0) || !(scale_y > 0.0) {
        return Err(Error::InvalidImage(format!("bad resample target {out_w}x{out_h}")));
    }
    let xw = area_weights(src.width, out_w, scale_x);
    let yw = area_weights(src.height, out_h, scale_y);
    let ow = out_w as usize;
    let sw = src.width as usize;

    let mut out = vec![0u8; ow * out_h as usize * 3];
    let mut acc = vec![0f64; ow * 3];
    let mut hrow = vec![0f64; ow * 3];
    for (oy, rows) in yw.iter().enumerate() {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let mut wsum_y = 0.0;
        for &(sy, wy) in rows {
            wsum_y += wy;
            let row = &src.pixels[sy * sw * 3..(sy + 1) * sw * 3];
            for (ox, cols) in xw.iter().enumerate() {
                let mut px = [0f64; 3];
                for &(sx, wx) in cols {
                    let p = &row[sx * 3..sx * 3 + 3];
                    px[0] += wx * f64::from(p[0]);
                    px[1] += wx * f64::from(p[1]);
                    px[2] += wx * f64::from(p[2]);
                }
                hrow[ox * 3..ox * 3 + 3].copy_from_slice(&px);
            }
            for (a, h) in acc.iter_mut().zip(&hrow) {
                *a += wy * h;
            }
        }
        for (ox, cols) in xw.iter().enumerate() {
            let wsum: f64 = cols.iter().map(|c| c.1).sum::<f64>() * wsum_y;
            for c in 0..3 {
                let v = if wsum > 0.0 { acc[ox * 3 + c] / wsum } else { 255.0 };
                out[(oy * ow + ox) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RasterImage::new(out_w, out_h, out, src.source_id.clone())
}

/// Placement of a letterboxed overview within its target canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverviewFrame {
    /// Original pixels per overview pixel.
    pub scale_x: f64,
    pub scale_y: f64,
    pub pad_left: u32,
    pub pad_top: u32,
    pub content_width: u32,
    pub content_height: u32,
    pub original_width: u32,
    pub original_height: u32,
    /// True when the source already fits and was passed through unchanged.
    pub noop: bool,
}

impl OverviewFrame {
    /// Aspect-preserving fit of `width x height` into `target_w x target_h`.
    pub fn letterbox(width: u32, height: u32, target_w: u32, target_h: u32) -> Result<Self> {
        if target_w < 16 || target_h < 16 {
            return Err(Error::InvalidImage(format!(
                "overview target {target_w}x{target_h} below 16 px"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage("zero-size source".into()));
        }
        let scale = (f64::from(width) / f64::from(target_w)).max(f64::from(height) / f64::from(target_h));
        if scale < 1.0 {
            return Ok(OverviewFrame {
                scale_x: 1.0,
                scale_y: 1.0,
                pad_left: 0,
                pad_top: 0,
                content_width: width,
                content_height: height,
                original_width: width,
                original_height: height,
                noop: true,
            });
        }
        let cw = ((f64::from(width) / scale).round() as u32).clamp(1, target_w);
        let ch = ((f64::from(height) / scale).round() as u32).clamp(1, target_h);
        Ok(OverviewFrame {
            scale_x: scale,
            scale_y: scale,
            pad_left: (target_w - cw) / 2,
            pad_top: (target_h - ch) / 2,
            content_width: cw,
            content_height: ch,
            original_width: width,
            original_height: height,
            noop: false,
        })
    }

    /// Region of the overview canvas that carries image content.
    pub fn content_rect(&self) -> BBox {
        let l = f64::from(self.pad_left);
        let t = f64::from(self.pad_top);
        BBox::raw(l, t, l + f64::from(self.content_width), t + f64::from(self.content_height))
    }

    /// Maps an overview-space box into original-image pixels: subtract pads,
    /// scale, then clamp to the original bounds.
    pub fn to_global(&self, b: &BBox) -> Result<BBox> {
        let content = self.content_rect();
        if content.intersection(b).is_none() {
            return Err(Error::ProposalInPadding(format!("{:?}", b.rounded())));
        }
        let l = f64::from(self.pad_left);
        let t = f64::from(self.pad_top);
        let mapped = BBox::raw(
            (b.x1 - l) * self.scale_x,
            (b.y1 - t) * self.scale_y,
            (b.x2 - l) * self.scale_x,
            (b.y2 - t) * self.scale_y,
        );
        geometry::clamp(
            &mapped,
            f64::from(self.original_width),
            f64::from(self.original_height),
        )
    }

    /// Maps an original-image box into overview space (no clamping).
    pub fn to_overview(&self, b: &BBox) -> BBox {
        let l = f64::from(self.pad_left);
        let t = f64::from(self.pad_top);
        BBox::raw(
            b.x1 / self.scale_x + l,
            b.y1 / self.scale_y + t,
            b.x2 / self.scale_x + l,
            b.y2 / self.scale_y + t,
        )
    }
}

/// Low-resolution global view of a drawing.
#[derive(Debug, Clone)]
pub struct Overview {
    pub image: RasterImage,
    pub frame: OverviewFrame,
}

/// Letterbox background.
pub const PAD_COLOR: [u8; 3] = [255, 255, 255];

/// Downscale `img` into a `target_w x target_h` canvas, preserving aspect
/// ratio with white letterbox bars.
pub fn make_overview(img: &RasterImage, target_w: u32, target_h: u32) -> Result<Overview> {
    let frame = OverviewFrame::letterbox(img.width, img.height, target_w, target_h)?;
    if frame.noop {
        log::warn!(
            "no-op overview: {}x{} already fits {}x{}",
            img.width,
            img.height,
            target_w,
            target_h
        );
        return Ok(Overview {
            image: img.clone(),
            frame,
        });
    }
    let content = resample_area(img, frame.content_width, frame.content_height, frame.scale_x, frame.scale_y)?;
    let mut canvas = RasterImage::filled(target_w, target_h, PAD_COLOR, img.source_id.clone())?;
    let cw = content.width as usize * 3;
    let tw = target_w as usize * 3;
    for row in 0..content.height as usize {
        let dst = (row + frame.pad_top as usize) * tw + frame.pad_left as usize * 3;
        canvas.pixels[dst..dst + cw].copy_from_slice(&content.pixels[row * cw..(row + 1) * cw]);
    }
    Ok(Overview { image: canvas, frame })
}

pub fn overview_to_global(b: &BBox, ov: &Overview) -> Result<BBox> {
    ov.frame.to_global(b)
}

pub fn global_to_overview(b: &BBox, ov: &Overview) -> BBox {
    ov.frame.to_overview(b)
}

/// Geometry of a native-resolution crop and the model-input size it was sent at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropSpec {
    pub offset_x: u32,
    pub offset_y: u32,
    pub crop_width: u32,
    pub crop_height: u32,
    pub model_input_width: u32,
    pub model_input_height: u32,
}

impl CropSpec {
    pub fn new(
        offset_x: u32,
        offset_y: u32,
        crop_width: u32,
        crop_height: u32,
        model_input_width: u32,
        model_input_height: u32,
    ) -> Result<Self> {
        if crop_width == 0 || crop_height == 0 || model_input_width == 0 || model_input_height == 0 {
            return Err(Error::DegenerateCrop(format!(
                "crop {crop_width}x{crop_height} / input {model_input_width}x{model_input_height}"
            )));
        }
        Ok(CropSpec {
            offset_x,
            offset_y,
            crop_width,
            crop_height,
            model_input_width,
            model_input_height,
        })
    }

    /// Original crop pixels per model-input pixel, horizontally.
    pub fn scale_w(&self) -> f64 {
        f64::from(self.crop_width) / f64::from(self.model_input_width)
    }

    pub fn scale_h(&self) -> f64 {
        f64::from(self.crop_height) / f64::from(self.model_input_height)
    }

    /// The crop rectangle in original-image pixels.
    pub fn rect(&self) -> BBox {
        BBox::raw(
            f64::from(self.offset_x),
            f64::from(self.offset_y),
            f64::from(self.offset_x + self.crop_width),
            f64::from(self.offset_y + self.crop_height),
        )
    }

    pub fn with_model_input(self, w: u32, h: u32) -> Result<Self> {
        CropSpec::new(self.offset_x, self.offset_y, self.crop_width, self.crop_height, w, h)
    }
}

/// A crop taken at native resolution.
#[derive(Debug, Clone)]
pub struct NativeCrop {
    pub image: RasterImage,
    pub spec: CropSpec,
    /// The requested box extended past the image and was clipped.
    pub clamped: bool,
}

/// Integer pixel rectangle covering `b` after clipping to the image:
/// `floor` on the near edges, `ceil` on the far edges.
pub fn pixel_rect(b: &BBox, width: u32, height: u32) -> Result<(u32, u32, u32, u32)> {
    let c = geometry::clamp(b, f64::from(width), f64::from(height))
        .map_err(|e| Error::DegenerateCrop(e.to_string()))?;
    let x1 = c.x1.floor() as u32;
    let y1 = c.y1.floor() as u32;
    let x2 = (c.x2.ceil() as u32).min(width);
    let y2 = (c.y2.ceil() as u32).min(height);
    if x2 <= x1 || y2 <= y1 {
        return Err(Error::DegenerateCrop(format!("{:?}", b.rounded())));
    }
    Ok((x1, y1, x2 - x1, y2 - y1))
}

/// Cut `b` out of `img` at native resolution. The model-input size starts out
/// equal to the crop size.
pub fn crop_native(img: &RasterImage, b: &BBox) -> Result<NativeCrop> {
    let (x, y, w, h) = pixel_rect(b, img.width, img.height)?;
    let clamped = b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > f64::from(img.width) || b.y2 > f64::from(img.height);
    if clamped {
        log::warn!("crop {:?} exceeds {}x{}; clamped", b.rounded(), img.width, img.height);
    }
    Ok(NativeCrop {
        image: img.sub_image(x, y, w, h),
        spec: CropSpec::new(x, y, w, h, w, h)?,
        clamped,
    })
}

/// Tile a region that exceeds `max_w x max_h` into an overlapping grid.
/// Returns integer-aligned crop rectangles; a region that fits yields itself.
pub fn plan_crops(
    region: &BBox,
    img_w: u32,
    img_h: u32,
    max_w: u32,
    max_h: u32,
    overlap: f64,
) -> Result<Vec<BBox>> {
    let (x, y, w, h) = pixel_rect(region, img_w, img_h)?;
    let xs = split_axis(x, w, max_w.max(1), overlap);
    let ys = split_axis(y, h, max_h.max(1), overlap);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &(ty, th) in &ys {
        for &(tx, tw) in &xs {
            out.push(BBox::raw(
                f64::from(tx),
                f64::from(ty),
                f64::from(tx + tw),
                f64::from(ty + th),
            ));
        }
    }
    Ok(out)
}

fn split_axis(start: u32, len: u32, tile: u32, overlap: f64) -> Vec<(u32, u32)> {
    if len <= tile {
        return vec![(start, len)];
    }
    let overlap = overlap.clamp(0.0, 0.9);
    let stride = (f64::from(tile) * (1.0 - overlap)).floor().max(1.0);
    let n = ((f64::from(len - tile)) / stride).ceil() as u32 + 1;
    let span = u64::from(len - tile);
    (0..n)
        .map(|i| {
            let off = (span * u64::from(i) + u64::from(n - 1) / 2) / u64::from(n - 1);
            (start + off as u32, tile)
        })
        .collect()
}
