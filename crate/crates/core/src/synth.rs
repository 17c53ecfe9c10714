//! Deterministic synthetic schematics with injected double-grounding faults,
//! plus mock-backend scenarios that answer like a model looking at them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::client::{FallbackResponse, Scenario, StageTag};
use crate::config::DEFAULT_EXPECTED_LABELS;
use crate::error::{Error, Result};
use crate::evaluation::{AnnotatedDrawing, GtRegion, GtViolation, Manifest, ManifestEntry};
use crate::geometry::BBox;
use crate::prompts::{DesignRule, ReviewTask};
use crate::pyramid::{pixel_rect, OverviewFrame, RasterImage};
use crate::report::canonical_json;
use crate::stage2::{model_input_size, ElementKind};

pub const RULE_ID: &str = "CT-SPG-01";
pub const SCENARIO_FILE: &str = "scenario.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const TASK_FILE: &str = "task.json";

const INK: [u8; 3] = [0, 0, 0];
const BACKGROUND: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub bbox_jitter_px: f64,
    pub confidence_mean: f64,
    pub confidence_sigma: f64,
    pub element_drop_rate: f64,
    pub text_corruption_rate: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            bbox_jitter_px: 0.0,
            confidence_mean: 0.9,
            confidence_sigma: 0.0,
            element_drop_rate: 0.0,
            text_corruption_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub n_drawings: usize,
    pub width: u32,
    pub height: u32,
    /// Fraction of drawings (rounded to a whole count) that get a second ground.
    pub violation_rate: f64,
    pub noise: NoiseSpec,
    /// Overview size the scripted stage-1 answers are expressed in; must match
    /// the reviewing config.
    pub overview_size: u32,
    /// Payload limit the scripted stage-2 answers assume; must match the
    /// reviewing config.
    pub payload_limit_bytes: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            seed: 42,
            n_drawings: 12,
            width: 3840,
            height: 2160,
            violation_rate: 0.5,
            noise: NoiseSpec::default(),
            overview_size: 1024,
            payload_limit_bytes: 20_000_000,
        }
    }
}

impl ScenarioSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: ScenarioSpec = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("violation_rate", self.violation_rate)?;
        unit("noise.element_drop_rate", self.noise.element_drop_rate)?;
        unit("noise.text_corruption_rate", self.noise.text_corruption_rate)?;
        unit("noise.confidence_mean", self.noise.confidence_mean)?;
        if self.noise.confidence_sigma < 0.0 || !self.noise.confidence_sigma.is_finite() {
            return Err(Error::Config("noise.confidence_sigma must be >= 0".into()));
        }
        if self.noise.bbox_jitter_px < 0.0 || !self.noise.bbox_jitter_px.is_finite() {
            return Err(Error::Config("noise.bbox_jitter_px must be >= 0".into()));
        }
        if self.width < 512 || self.height < 512 {
            return Err(Error::Config(format!("drawing must be at least 512x512, got {}x{}", self.width, self.height)));
        }
        if self.n_drawings == 0 {
            return Err(Error::Config("n_drawings must be positive".into()));
        }
        if self.overview_size < 16 {
            return Err(Error::Config("overview_size must be at least 16".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Rasterization

/// Drawing primitives in pixel units. Rectangles are `[x, y, w, h]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Frame { rect: [u32; 4], thickness: u32 },
    Fill { rect: [u32; 4] },
    Ring { cx: u32, cy: u32, r: u32, thickness: u32 },
    /// Three-bar earth symbol of width `size`, stem on top.
    Ground { x: u32, y: u32, size: u32 },
    Text { x: u32, y: u32, scale: u32, text: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub width: u32,
    pub height: u32,
    pub shapes: Vec<Shape>,
}

struct Canvas {
    img: RasterImage,
    extent: Option<(u32, u32, u32, u32)>,
}

impl Canvas {
    fn new(width: u32, height: u32) -> Result<Self> {
        Ok(Canvas {
            img: RasterImage::filled(width, height, BACKGROUND, "synthetic")?,
            extent: None,
        })
    }

    fn set(&mut self, x: i64, y: i64) {
        if x < 0 || y < 0 || x >= i64::from(self.img.width()) || y >= i64::from(self.img.height()) {
            return;
        }
        let (x, y) = (x as u32, y as u32);
        self.img.put_pixel(x, y, INK);
        self.extent = Some(match self.extent {
            None => (x, y, x, y),
            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
        });
    }

    fn fill(&mut self, x: u32, y: u32, w: u32, h: u32) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(i64::from(xx), i64::from(yy));
            }
        }
    }

    /// Pixel-edge box around everything drawn since the last call.
    fn take_extent(&mut self) -> Option<BBox> {
        self.extent.take().map(|(a, b, c, d)| {
            BBox::raw(f64::from(a), f64::from(b), f64::from(c) + 1.0, f64::from(d) + 1.0)
        })
    }
}

fn glyph(c: char) -> Option<[u8; 7]> {
    Some(match c {
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11110, 0b00001, 0b00001, 0b01110, 0b00001, 0b00001, 0b11110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        'C' => [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
        'D' => [0b11110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        ':' => [0b00000, 0b01100, 0b01100, 0b00000, 0b01100, 0b01100, 0b00000],
        ' ' => [0; 7],
        _ => return None,
    })
}

fn draw(canvas: &mut Canvas, shape: &Shape) {
    match shape {
        Shape::Frame { rect: [x, y, w, h], thickness: t } => {
            let t = (*t).min(*w / 2).min(*h / 2).max(1);
            canvas.fill(*x, *y, *w, t);
            canvas.fill(*x, y + h - t, *w, t);
            canvas.fill(*x, *y, t, *h);
            canvas.fill(x + w - t, *y, t, *h);
        }
        Shape::Fill { rect: [x, y, w, h] } => canvas.fill(*x, *y, *w, *h),
        Shape::Ring { cx, cy, r, thickness } => {
            let (cx, cy, r) = (i64::from(*cx), i64::from(*cy), i64::from(*r));
            let inner = (r - i64::from(*thickness)).max(0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let d2 = dx * dx + dy * dy;
                    if d2 <= r * r && d2 > inner * inner {
                        canvas.set(cx + dx, cy + dy);
                    }
                }
            }
        }
        Shape::Ground { x, y, size } => {
            let s = (*size).max(8);
            let bar = (s / 12).max(2);
            let stem_w = bar;
            let stem_h = s / 2;
            canvas.fill(x + s / 2 - stem_w / 2, *y, stem_w, stem_h);
            let widths = [s, s * 2 / 3, s / 3];
            for (i, w) in widths.iter().enumerate() {
                let yy = y + stem_h + i as u32 * (bar * 2);
                canvas.fill(x + (s - w) / 2, yy, *w, bar);
            }
        }
        Shape::Text { x, y, scale, text } => {
            let s = (*scale).max(1);
            for (i, c) in text.chars().enumerate() {
                let Some(rows) = glyph(c) else { continue };
                let ox = x + i as u32 * 6 * s;
                for (ry, bits) in rows.iter().enumerate() {
                    for rx in 0..5u32 {
                        if bits & (1 << (4 - rx)) != 0 {
                            canvas.fill(ox + rx * s, y + ry as u32 * s, s, s);
                        }
                    }
                }
            }
        }
    }
}

/// Deterministic, alias-free rendering: black ink on white.
pub fn render_schematic(layout: &Layout) -> Result<RasterImage> {
    Ok(render_with_extents(layout)?.0)
}

/// Renders and reports the exact pixel-edge box of each shape (`None` for a
/// shape that drew nothing).
pub fn render_with_extents(layout: &Layout) -> Result<(RasterImage, Vec<Option<BBox>>)> {
    let mut canvas = Canvas::new(layout.width, layout.height)?;
    let mut extents = Vec::with_capacity(layout.shapes.len());
    for s in &layout.shapes {
        draw(&mut canvas, s);
        extents.push(canvas.take_extent());
    }
    Ok((canvas.img, extents))
}

// ---------------------------------------------------------------------------
// Layout sampling

/// A ground-truth element: one or more shapes forming one drawing symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthElement {
    pub kind: ElementKind,
    pub shapes: Vec<usize>,
    pub text: Option<String>,
    pub attributes: BTreeMap<String, String>,
    pub region: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDrawing {
    pub drawing_id: String,
    pub layout: Layout,
    pub region_labels: Vec<String>,
    /// Panel frame shape per region.
    pub region_shapes: Vec<usize>,
    pub elements: Vec<SynthElement>,
    /// Index into `elements` of the injected second ground.
    pub violation_element: Option<usize>,
}

struct Builder {
    layout: Layout,
    elements: Vec<SynthElement>,
}

impl Builder {
    fn shape(&mut self, s: Shape) -> usize {
        self.layout.shapes.push(s);
        self.layout.shapes.len() - 1
    }

    fn element(&mut self, kind: ElementKind, shapes: Vec<Shape>, text: Option<&str>, attrs: &[(&str, &str)], region: usize) -> usize {
        let ids = shapes.into_iter().map(|s| self.shape(s)).collect();
        self.elements.push(SynthElement {
            kind,
            shapes: ids,
            text: text.map(Into::into),
            attributes: attrs.iter().map(|(k, v)| ((*k).to_owned(), (*v).to_owned())).collect(),
            region,
        });
        self.elements.len() - 1
    }
}

fn sample_layout(id: &str, w: u32, h: u32, violating: bool, rng: &mut ChaCha8Rng) -> SynthDrawing {
    let f = (f64::from(w) / 3840.0).min(f64::from(h) / 2160.0);
    let px = |v: f64| ((v * f).round() as u32).max(1);
    let text_scale = px(3.0).max(1);
    let ground = px(60.0).max(12);
    let line = px(3.0);
    let mut b = Builder {
        layout: Layout {
            width: w,
            height: h,
            shapes: Vec::new(),
        },
        elements: Vec::new(),
    };
    let fw = f64::from(w);
    let fh = f64::from(h);
    let mut jit = |lo: f64, hi: f64| rng.gen_range(lo..hi);

    // panels: CT circuit on the left, terminal block in the middle, grounds on the right
    let spans = [(0.03, 0.35), (0.39, 0.65), (0.69, 0.97)];
    let mut panels = Vec::new();
    let mut region_shapes = Vec::new();
    for (x0, x1) in spans {
        let left = (fw * (x0 + jit(0.0, 0.01))) as u32;
        let right = (fw * (x1 - jit(0.0, 0.01))) as u32;
        let top = (fh * jit(0.08, 0.14)) as u32;
        let bottom = (fh * jit(0.86, 0.92)) as u32;
        let rect = [left, top, right - left, bottom - top];
        region_shapes.push(b.shape(Shape::Frame { rect, thickness: px(4.0) }));
        panels.push(rect);
    }

    // CT secondary circuit panel
    let [x, y, pw, ph] = panels[0];
    let r = px(34.0);
    let ctx = x + (f64::from(pw) * jit(0.14, 0.2)) as u32;
    let cty = y + (f64::from(ph) * jit(0.22, 0.3)) as u32;
    b.element(
        ElementKind::EquipmentSymbol,
        vec![
            Shape::Ring { cx: ctx, cy: cty, r, thickness: line },
            Shape::Ring { cx: ctx + r, cy: cty, r, thickness: line },
        ],
        None,
        &[("circuit", "ct_secondary"), ("symbol", "current_transformer")],
        0,
    );
    b.element(
        ElementKind::TextAnnotation,
        vec![Shape::Text { x: ctx - r, y: cty - r - px(40.0), scale: text_scale, text: "CT1".into() }],
        Some("CT1"),
        &[],
        0,
    );
    let ground_top = cty + r + px(70.0);
    b.element(
        ElementKind::ConnectionLine,
        vec![Shape::Fill { rect: [ctx + r / 2, cty + r + px(4.0), line, ground_top - (cty + r + px(4.0))] }],
        None,
        &[],
        0,
    );
    b.element(
        ElementKind::GroundingSymbol,
        vec![Shape::Ground { x: ctx + r / 2 - ground / 2, y: ground_top, size: ground }],
        None,
        &[("side", "ct")],
        0,
    );

    let rx = x + (f64::from(pw) * jit(0.5, 0.56)) as u32;
    let ry = y + (f64::from(ph) * jit(0.14, 0.2)) as u32;
    let rw = (f64::from(pw) * 0.22) as u32;
    let rh = (f64::from(ph) * 0.4) as u32;
    b.element(
        ElementKind::EquipmentSymbol,
        vec![Shape::Frame { rect: [rx, ry, rw, rh], thickness: line }],
        None,
        &[("symbol", "relay")],
        0,
    );
    let wire_x0 = ctx + 2 * r + px(6.0);
    b.element(
        ElementKind::ConnectionLine,
        vec![Shape::Fill { rect: [wire_x0, cty, rx - px(6.0) - wire_x0, line] }],
        None,
        &[],
        0,
    );
    for k in 0..3u32 {
        let label = format!("16D0:{}", 4 + k);
        let ty = ry + rh / 5 + k * (rh / 4);
        b.element(
            ElementKind::TextAnnotation,
            vec![Shape::Text { x: rx + rw + px(20.0), y: ty, scale: text_scale, text: label.clone() }],
            Some(&label),
            &[("terminal", &label)],
            0,
        );
    }
    let violation_element = violating.then(|| {
        let gx = rx + rw / 2;
        let gy = ry + rh + px(90.0);
        b.element(
            ElementKind::ConnectionLine,
            vec![Shape::Fill { rect: [gx, ry + rh + px(6.0), line, gy - (ry + rh + px(6.0))] }],
            None,
            &[],
            0,
        );
        b.element(
            ElementKind::GroundingSymbol,
            vec![Shape::Ground { x: gx - ground / 2, y: gy, size: ground }],
            None,
            &[("side", "relay")],
            0,
        )
    });

    // secondary terminal block panel
    let [x, y, pw, ph] = panels[1];
    let n_terms = rng.gen_range(4..=8u32);
    let step = (ph - px(120.0)) / n_terms;
    let tx = x + (f64::from(pw) * 0.2) as u32;
    for k in 0..n_terms {
        let ty = y + px(60.0) + k * step;
        b.element(
            ElementKind::EquipmentSymbol,
            vec![Shape::Frame { rect: [tx, ty, px(90.0), px(50.0)], thickness: line }],
            None,
            &[("symbol", "terminal")],
            1,
        );
        let label = format!("1D{}", k + 1);
        b.element(
            ElementKind::TextAnnotation,
            vec![Shape::Text { x: tx + px(130.0), y: ty + px(8.0), scale: text_scale, text: label.clone() }],
            Some(&label),
            &[("terminal", &label)],
            1,
        );
    }

    // grounding point cluster
    let [x, y, pw, ph] = panels[2];
    let n_grounds = rng.gen_range(2..=4u32);
    let bus_y = y + (f64::from(ph) * 0.35) as u32;
    let gap = (pw - px(80.0)) / n_grounds;
    b.element(
        ElementKind::ConnectionLine,
        vec![Shape::Fill { rect: [x + px(40.0), bus_y, pw - px(80.0), line] }],
        None,
        &[],
        2,
    );
    for k in 0..n_grounds {
        let gx = x + px(40.0) + k * gap + gap / 2;
        b.element(
            ElementKind::ConnectionLine,
            vec![Shape::Fill { rect: [gx - line / 2, bus_y + line, line, px(80.0) - line] }],
            None,
            &[],
            2,
        );
        b.element(
            ElementKind::GroundingSymbol,
            vec![Shape::Ground { x: gx - ground / 2, y: bus_y + px(80.0), size: ground }],
            None,
            &[("side", "station")],
            2,
        );
    }

    SynthDrawing {
        drawing_id: id.to_owned(),
        layout: b.layout,
        region_labels: DEFAULT_EXPECTED_LABELS.iter().map(|s| (*s).to_owned()).collect(),
        region_shapes,
        elements: b.elements,
        violation_element,
    }
}

// ---------------------------------------------------------------------------
// Scenario (noisy model answers) and truth

/// What the scripted model reports for one element, in global pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthElement {
    pub region_label: String,
    pub kind: ElementKind,
    pub bbox_exact: BBox,
    /// Box as reported (jittered, clipped to the crop).
    pub bbox_reported: BBox,
    pub text: Option<String>,
    pub attributes: BTreeMap<String, String>,
    pub confidence: f64,
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRegion {
    pub label: String,
    pub bbox_exact: BBox,
    /// Region as the pipeline will see it after overview mapping.
    pub bbox_reported: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawingTruth {
    pub drawing_id: String,
    pub violating: bool,
    pub regions: Vec<TruthRegion>,
    pub elements: Vec<TruthElement>,
    pub gt_violations: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusTruth {
    pub spec: ScenarioSpec,
    pub drawings: Vec<DrawingTruth>,
}

pub struct GeneratedDrawing {
    pub image: RasterImage,
    pub annotation: AnnotatedDrawing,
    pub truth: DrawingTruth,
}

pub struct Corpus {
    pub drawings: Vec<GeneratedDrawing>,
    pub scenario: Scenario,
    pub task: ReviewTask,
    pub spec: ScenarioSpec,
}

impl Corpus {
    pub fn truth(&self) -> CorpusTruth {
        CorpusTruth {
            spec: self.spec.clone(),
            drawings: self.drawings.iter().map(|d| d.truth.clone()).collect(),
        }
    }
}

pub fn default_task() -> ReviewTask {
    ReviewTask {
        task_text: "Check that every CT secondary circuit in this drawing is grounded at exactly one point.".into(),
        rules: vec![DesignRule {
            rule_id: RULE_ID.into(),
            title: "CT secondary single-point grounding".into(),
            rule_text: "A current transformer secondary circuit must be earthed at exactly one point. \
                        A second ground, for example at the relay output terminals, is a violation."
                .into(),
            machine_checkable: true,
        }],
    }
}

fn mix(seed: u64, index: u64, stream: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn jitter_box(b: &BBox, j: i64, rng: &mut ChaCha8Rng) -> BBox {
    if j == 0 {
        return *b;
    }
    let mut d = || rng.gen_range(-j..=j) as f64;
    let (dx1, dy1, dx2, dy2) = (d(), d(), d(), d());
    let mut out = BBox::raw(b.x1 + dx1, b.y1 + dy1, b.x2 + dx2, b.y2 + dy2);
    if out.x2 - out.x1 < 2.0 {
        out.x1 = b.x1;
        out.x2 = b.x2;
    }
    if out.y2 - out.y1 < 2.0 {
        out.y1 = b.y1;
        out.y2 = b.y2;
    }
    out
}

fn clip_to(b: &BBox, r: &BBox) -> BBox {
    let c = BBox::raw(b.x1.max(r.x1), b.y1.max(r.y1), b.x2.min(r.x2), b.y2.min(r.y2));
    if c.x2 - c.x1 < 1.0 || c.y2 - c.y1 < 1.0 {
        // fully jittered out of the crop: keep the clipped exact box instead
        return *r;
    }
    c
}

fn corrupt_text(t: &str, rng: &mut ChaCha8Rng) -> String {
    let chars: Vec<char> = t.chars().collect();
    let digits: Vec<usize> = (0..chars.len()).filter(|&i| chars[i].is_ascii_digit()).collect();
    let Some(&i) = digits.choose(rng) else { return t.to_owned() };
    let mut out = chars.clone();
    let old = chars[i].to_digit(10).unwrap_or(0);
    out[i] = char::from_digit((old + rng.gen_range(1..10)) % 10, 10).unwrap_or('0');
    out.into_iter().collect()
}

fn num(v: f64) -> Value {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        json!(v as i64)
    } else {
        json!(v)
    }
}

fn box_json(b: &BBox) -> Value {
    Value::Array(b.to_array().iter().map(|v| num(*v)).collect())
}

/// Builds one drawing: raster, annotation, scripted answers and truth.
fn generate_drawing(
    spec: &ScenarioSpec,
    index: usize,
    violating: bool,
    fallbacks: &mut Vec<FallbackResponse>,
) -> Result<GeneratedDrawing> {
    let id = format!("drawing_{index:02}");
    let mut layout_rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, index as u64, 0));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, index as u64, 1));
    let d = sample_layout(&id, spec.width, spec.height, violating, &mut layout_rng);
    let (image, extents) = render_with_extents(&d.layout)?;
    let image = image.with_source_id(&id);

    let hull = |shapes: &[usize]| -> BBox {
        shapes
            .iter()
            .filter_map(|&s| extents[s])
            .reduce(|a, b| a.union_hull(&b))
            .expect("every synthetic shape draws pixels")
    };

    let frame = OverviewFrame::letterbox(spec.width, spec.height, spec.overview_size, spec.overview_size)?;
    let j = spec.noise.bbox_jitter_px.round() as i64;
    let conf_dist = Normal::new(spec.noise.confidence_mean, spec.noise.confidence_sigma)
        .map_err(|e| Error::Config(format!("confidence distribution: {e}")))?;

    let mut regions = Vec::new();
    let mut stage1 = Vec::new();
    let mut crops = Vec::new();
    for (k, label) in d.region_labels.iter().enumerate() {
        let exact = extents[d.region_shapes[k]].expect("panel frame drawn");
        let jittered = jitter_box(&exact, j, &mut noise_rng);
        let ov = frame.to_overview(&jittered);
        // outward to whole overview pixels so the region keeps covering the panel
        let ov = BBox::raw(ov.x1.floor(), ov.y1.floor(), ov.x2.ceil(), ov.y2.ceil());
        let reported = frame.to_global(&ov)?;
        // panels never exceed the crop-side limit, so each region is one crop
        let (cx, cy, cw, ch) = pixel_rect(&reported, spec.width, spec.height)?;
        crops.push((cx, cy, cw, ch));
        stage1.push(json!({
            "label": label,
            "bbox_2d": box_json(&ov),
            "rationale": format!("{label} located from panel outline"),
            "score": 0.95,
        }));
        regions.push(TruthRegion {
            label: label.clone(),
            bbox_exact: exact,
            bbox_reported: reported,
        });
    }
    fallbacks.push(FallbackResponse {
        stage: StageTag::Stage1,
        drawing_id: Some(id.clone()),
        region_label: None,
        raw_text: serde_json::to_string(&Value::Array(stage1))?,
        latency_ms: 1200,
    });

    let mut elements = Vec::new();
    let mut per_region: Vec<Vec<Value>> = vec![Vec::new(); d.region_labels.len()];
    for el in &d.elements {
        let exact = hull(&el.shapes);
        let (cx, cy, cw, ch) = crops[el.region];
        let crop_rect = BBox::raw(f64::from(cx), f64::from(cy), f64::from(cx + cw), f64::from(cy + ch));
        let reported = clip_to(&jitter_box(&exact, j, &mut noise_rng), &crop_rect);
        let sampled: f64 = conf_dist.sample(&mut noise_rng);
        let confidence = ((sampled * 100.0).round() / 100.0).clamp(0.01, 1.0);
        let dropped = noise_rng.gen_bool(spec.noise.element_drop_rate);
        let corrupt = noise_rng.gen_bool(spec.noise.text_corruption_rate);
        let text = el.text.as_ref().map(|t| if corrupt { corrupt_text(t, &mut noise_rng) } else { t.clone() });

        if !dropped {
            let (mw, mh) = model_input_size(cw, ch, spec.payload_limit_bytes);
            let sx = f64::from(mw) / f64::from(cw);
            let sy = f64::from(mh) / f64::from(ch);
            let local = BBox::raw(
                (reported.x1 - f64::from(cx)) * sx,
                (reported.y1 - f64::from(cy)) * sy,
                (reported.x2 - f64::from(cx)) * sx,
                (reported.y2 - f64::from(cy)) * sy,
            );
            let mut item = json!({
                "kind": el.kind.as_str(),
                "bbox_2d": box_json(&local),
                "confidence": num(confidence),
            });
            if let Some(t) = &text {
                item["text"] = json!(t);
            }
            if !el.attributes.is_empty() {
                item["attributes"] = json!(el.attributes);
            }
            per_region[el.region].push(item);
        }
        elements.push(TruthElement {
            region_label: d.region_labels[el.region].clone(),
            kind: el.kind,
            bbox_exact: exact,
            bbox_reported: reported,
            text,
            attributes: el.attributes.clone(),
            confidence,
            dropped,
        });
    }
    for (k, items) in per_region.into_iter().enumerate() {
        fallbacks.push(FallbackResponse {
            stage: StageTag::Stage2,
            drawing_id: Some(id.clone()),
            region_label: Some(d.region_labels[k].clone()),
            raw_text: format!("```json\n{}\n```", serde_json::to_string(&Value::Array(items))?),
            latency_ms: 800,
        });
    }

    // the scripted reviewer reasons over what it was told, not over the truth
    let ct_grounds: Vec<&TruthElement> = elements
        .iter()
        .filter(|e| e.region_label == d.region_labels[0] && e.kind == ElementKind::GroundingSymbol && !e.dropped)
        .collect();
    let stage3 = match ct_grounds.as_slice() {
        [] => json!([{
            "finding_kind": "needs_human_review",
            "rule_id": RULE_ID,
            "description": "No grounding symbol found for the CT secondary circuit.",
            "supporting_ids": [],
            "diagnostic_confidence": 0.6,
        }]),
        [_] => json!([{
            "finding_kind": "validated",
            "rule_id": RULE_ID,
            "description": "CT secondary circuit is grounded at a single point.",
            "supporting_ids": [],
            "diagnostic_confidence": 0.8,
        }]),
        [_, extra @ ..] => Value::Array(
            extra
                .iter()
                .map(|g| {
                    json!({
                        "finding_kind": "violation",
                        "rule_id": RULE_ID,
                        "description": "CT secondary circuit is grounded at the relay output side in addition to the CT side.",
                        "bbox_2d": box_json(&g.bbox_reported),
                        "supporting_ids": [],
                        "diagnostic_confidence": 0.85,
                    })
                })
                .collect(),
        ),
    };
    fallbacks.push(FallbackResponse {
        stage: StageTag::Stage3,
        drawing_id: Some(id.clone()),
        region_label: None,
        raw_text: serde_json::to_string(&stage3)?,
        latency_ms: 1500,
    });

    let gt_violations: Vec<BBox> = d.violation_element.map(|v| hull(&d.elements[v].shapes)).into_iter().collect();
    let annotation = AnnotatedDrawing {
        drawing_path: format!("{id}.png").into(),
        gt_regions: regions
            .iter()
            .map(|r| GtRegion {
                label: r.label.clone(),
                bbox: r.bbox_exact,
            })
            .collect(),
        gt_violations: gt_violations.iter().map(|b| GtViolation { bbox: *b }).collect(),
    };
    Ok(GeneratedDrawing {
        image,
        annotation,
        truth: DrawingTruth {
            drawing_id: id,
            violating,
            regions,
            elements,
            gt_violations,
        },
    })
}

/// Generates the whole corpus in memory. Exactly `round(n * violation_rate)`
/// drawings, at seed-chosen positions, carry a second ground.
pub fn generate_corpus(spec: &ScenarioSpec) -> Result<Corpus> {
    spec.validate()?;
    let n = spec.n_drawings;
    let n_violating = (n as f64 * spec.violation_rate).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(spec.seed, u64::MAX, 2)));
    let mut violating = vec![false; n];
    for &i in &order[..n_violating] {
        violating[i] = true;
    }

    let mut fallbacks = Vec::new();
    let mut drawings = Vec::with_capacity(n);
    for (i, v) in violating.into_iter().enumerate() {
        drawings.push(generate_drawing(spec, i, v, &mut fallbacks)?);
    }
    Ok(Corpus {
        drawings,
        scenario: Scenario {
            responses: BTreeMap::new(),
            fallbacks,
        },
        task: default_task(),
        spec: spec.clone(),
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(bytes))
}

/// Writes PNGs, annotations, `scenario.json`, `truth.json`, `task.json` and a
/// `manifest.json` with content digests. Returns the manifest.
pub fn write_corpus(corpus: &Corpus, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for d in &corpus.drawings {
        let id = &d.truth.drawing_id;
        let png = format!("{id}.png");
        let ann = format!("{id}.json");
        let image_sha256 = write_file(&dir.join(&png), &d.image.encode_png()?)?;
        let ann_json = canonical_json(&serde_json::to_value(&d.annotation)?);
        let annotation_sha256 = write_file(&dir.join(&ann), ann_json.as_bytes())?;
        entries.push(ManifestEntry {
            drawing_id: id.clone(),
            image: png,
            annotation: ann,
            image_sha256: Some(image_sha256),
            annotation_sha256: Some(annotation_sha256),
        });
    }
    let scenario_sha256 = write_file(
        &dir.join(SCENARIO_FILE),
        canonical_json(&serde_json::to_value(&corpus.scenario)?).as_bytes(),
    )?;
    write_file(&dir.join(TRUTH_FILE), canonical_json(&serde_json::to_value(corpus.truth())?).as_bytes())?;
    write_file(&dir.join(TASK_FILE), canonical_json(&serde_json::to_value(&corpus.task)?).as_bytes())?;
    let manifest = Manifest {
        drawings: entries,
        scenario: Some(SCENARIO_FILE.into()),
        scenario_sha256: Some(scenario_sha256),
        task: Some(TASK_FILE.into()),
    };
    write_file(
        &dir.join(crate::evaluation::MANIFEST_FILE),
        canonical_json(&serde_json::to_value(&manifest)?).as_bytes(),
    )?;
    Ok(manifest)
}

pub fn load_truth(corpus_dir: impl AsRef<Path>) -> Result<CorpusTruth> {
    let path = corpus_dir.as_ref().join(TRUTH_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
