//! Stage 2: native-resolution crops of each proposed region, fine-grained
//! element extraction with confidences, and restoration of every box to
//! original-image coordinates.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::client::{ChatRequest, Client, StageTag};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{local_to_global, BBox};
use crate::prompts::{parse_elements, render, ElementItem, PromptTemplate, ReviewTask};
use crate::pyramid::{crop_native, plan_crops, resample_area, CropSpec, RasterImage};
use crate::report::FailedCrop;
use crate::stage1::SemanticRegion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    EquipmentSymbol,
    ConnectionLine,
    TextAnnotation,
    GroundingSymbol,
    Other,
}

impl ElementKind {
    pub const ALL: [ElementKind; 5] = [
        ElementKind::EquipmentSymbol,
        ElementKind::ConnectionLine,
        ElementKind::TextAnnotation,
        ElementKind::GroundingSymbol,
        ElementKind::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ElementKind::EquipmentSymbol => "equipment_symbol",
            ElementKind::ConnectionLine => "connection_line",
            ElementKind::TextAnnotation => "text_annotation",
            ElementKind::GroundingSymbol => "grounding_symbol",
            ElementKind::Other => "other",
        }
    }

    /// Accepts case and separator variants such as `"Grounding Symbol"`.
    pub fn parse_lenient(s: &str) -> Option<Self> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c.to_ascii_lowercase() })
            .collect();
        ElementKind::ALL.into_iter().find(|k| k.as_str() == norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedElement {
    pub element_id: String,
    pub kind: ElementKind,
    pub bbox_global: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    pub confidence: f64,
    pub source_region_id: String,
}

// ---------------------------------------------------------------------------
// OCR hook

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrDetection {
    pub text: String,
    /// Native crop pixels.
    #[serde(rename = "bbox_2d")]
    pub bbox: BBox,
    pub confidence: f64,
}

pub trait OcrEngine: Send + Sync {
    fn recognize(&self, crop: &RasterImage) -> Result<Vec<OcrDetection>>;
}

/// Model-supplied text only.
pub struct NoOcr;

impl OcrEngine for NoOcr {
    fn recognize(&self, _crop: &RasterImage) -> Result<Vec<OcrDetection>> {
        Ok(Vec::new())
    }
}

/// Runs `program [args..] <png-path>` and reads a JSON array of
/// `{text, bbox_2d, confidence}` from standard output.
pub struct ExternalOcr {
    program: PathBuf,
    args: Vec<String>,
}

impl ExternalOcr {
    /// `command` is split on whitespace: program followed by fixed arguments.
    pub fn from_command(command: &str) -> Option<Self> {
        let mut parts = command.split_whitespace();
        let program = PathBuf::from(parts.next()?);
        Some(ExternalOcr {
            program,
            args: parts.map(str::to_owned).collect(),
        })
    }
}

impl OcrEngine for ExternalOcr {
    fn recognize(&self, crop: &RasterImage) -> Result<Vec<OcrDetection>> {
        let file = tempfile::Builder::new()
            .suffix(".png")
            .tempfile()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        crop.save_png(file.path())?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(file.path())
            .output()
            .map_err(|e| Error::io(&self.program, e))?;
        if !out.status.success() {
            return Err(Error::Config(format!(
                "OCR adapter exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(serde_json::from_slice(&out.stdout)?)
    }
}

/// Runs the OCR engine on a native crop. Failures are logged and yield no
/// detections; detections below `floor` or with unusable boxes are dropped.
pub fn ocr_fallback(engine: &dyn OcrEngine, crop: &RasterImage, floor: f64) -> Vec<OcrDetection> {
    match engine.recognize(crop) {
        Ok(dets) => dets
            .into_iter()
            .filter(|d| d.confidence >= floor && d.confidence <= 1.0 && !d.text.trim().is_empty())
            .filter(|d| d.bbox.x1 < d.bbox.x2 && d.bbox.y1 < d.bbox.y2)
            .collect(),
        Err(e) => {
            log::warn!("OCR adapter failed: {e}");
            Vec::new()
        }
    }
}

// ---------------------------------------------------------------------------
// Acquisition

#[derive(Debug, Clone)]
struct CropJob {
    region_idx: usize,
    crop_index: usize,
    rect: BBox,
}

#[derive(Debug, Default)]
struct CropOutcome {
    /// Elements without ids, in response order (model first, then OCR).
    elements: Vec<ExtractedElement>,
    warnings: Vec<String>,
    latency_ms: u64,
    failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub elements: Vec<ExtractedElement>,
    pub failed_crops: Vec<FailedCrop>,
    pub warnings: Vec<String>,
    pub latency_ms: u64,
    pub crop_count: usize,
}

pub fn stage2_bindings(task: &ReviewTask, region_label: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("task".to_owned(), task.task_text.clone()),
        ("rules".to_owned(), task.rules_text()),
        ("region_label".to_owned(), region_label.to_owned()),
    ])
}

/// Model-input size for a crop: native unless the raw RGB payload exceeds
/// `limit`, in which case both sides shrink by a common factor.
pub fn model_input_size(crop_w: u32, crop_h: u32, limit: usize) -> (u32, u32) {
    let raw = crop_w as usize * crop_h as usize * 3;
    if raw <= limit {
        return (crop_w, crop_h);
    }
    let k = (raw as f64 / limit as f64).sqrt();
    let mut w = ((f64::from(crop_w) / k).floor() as u32).max(1);
    let mut h = ((f64::from(crop_h) / k).floor() as u32).max(1);
    while w as usize * h as usize * 3 > limit && (w > 1 || h > 1) {
        w = (w - 1).max(1);
        h = (h - 1).max(1);
    }
    (w, h)
}

/// Turns parsed model items into global elements for one crop.
pub fn restore_items(
    items: &[ElementItem],
    spec: &CropSpec,
    region_id: &str,
    floor: f64,
    warnings: &mut Vec<String>,
) -> Vec<ExtractedElement> {
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        if item.confidence < floor {
            warnings.push(format!("{region_id} item {i}: confidence {} below floor", item.confidence));
            continue;
        }
        match local_to_global(&BBox::from_array(item.bbox), spec) {
            Ok(r) => {
                if r.clamped {
                    warnings.push(format!("{region_id} item {i}: box clamped to crop"));
                }
                out.push(ExtractedElement {
                    element_id: String::new(),
                    kind: item.kind,
                    bbox_global: r.bbox,
                    text: item.text.clone(),
                    attributes: item.attributes.clone(),
                    confidence: item.confidence,
                    source_region_id: region_id.to_owned(),
                });
            }
            Err(e) => warnings.push(format!("{region_id} item {i}: dropped: {e}")),
        }
    }
    out
}

fn run_job(
    job: &CropJob,
    drawing: &RasterImage,
    region: &SemanticRegion,
    task: &ReviewTask,
    cfg: &Config,
    client: &Client,
    template: &PromptTemplate,
    ocr: &dyn OcrEngine,
) -> Result<CropOutcome> {
    let mut outcome = CropOutcome::default();
    let crop = crop_native(drawing, &job.rect)?;
    let (mw, mh) = model_input_size(crop.spec.crop_width, crop.spec.crop_height, client.payload_limit_bytes());
    let spec = crop.spec.with_model_input(mw, mh)?;
    let model_image = if (mw, mh) == (crop.spec.crop_width, crop.spec.crop_height) {
        crop.image.clone()
    } else {
        outcome.warnings.push(format!(
            "{} crop {}: downscaled to {mw}x{mh} for payload limit",
            region.region_id, job.crop_index
        ));
        resample_area(&crop.image, mw, mh, spec.scale_w(), spec.scale_h())?
    };

    let prompt = render(template, &stage2_bindings(task, &region.label))?;
    let req = ChatRequest::new(StageTag::Stage2, prompt, vec![model_image])
        .with_context(Some(drawing.source_id()), Some(&region.label));
    match client.ask_structured(&req, cfg.max_retries, parse_elements) {
        Ok(asked) => {
            outcome.latency_ms = asked.latency_ms;
            outcome.warnings.extend(asked.warnings);
            outcome.elements = restore_items(
                &asked.value,
                &spec,
                &region.region_id,
                cfg.confidence_floor,
                &mut outcome.warnings,
            );
        }
        Err(e @ Error::MockMiss { .. }) => return Err(e),
        Err(e) => {
            outcome.failure = Some(e.to_string());
            return Ok(outcome);
        }
    }

    let native = CropSpec::new(
        spec.offset_x,
        spec.offset_y,
        spec.crop_width,
        spec.crop_height,
        spec.crop_width,
        spec.crop_height,
    )?;
    for det in ocr_fallback(ocr, &crop.image, cfg.confidence_floor) {
        match local_to_global(&det.bbox, &native) {
            Ok(r) => outcome.elements.push(ExtractedElement {
                element_id: String::new(),
                kind: ElementKind::TextAnnotation,
                bbox_global: r.bbox,
                text: Some(det.text),
                attributes: BTreeMap::from([("source".to_owned(), "ocr".to_owned())]),
                confidence: det.confidence,
                source_region_id: region.region_id.clone(),
            }),
            Err(e) => outcome.warnings.push(format!("OCR detection dropped: {e}")),
        }
    }
    Ok(outcome)
}

/// Crops every region box (tiling oversized ones), queries the model per crop
/// with bounded parallelism, and merges results in (region, crop, response)
/// order with element ids `e0000`, `e0001`, ...
pub fn acquire(
    drawing: &RasterImage,
    regions: &[SemanticRegion],
    task: &ReviewTask,
    cfg: &Config,
    client: &Client,
    template: &PromptTemplate,
    ocr: &dyn OcrEngine,
) -> Result<Stage2Output> {
    if regions.is_empty() {
        return Err(Error::NoRegions);
    }
    let mut jobs = Vec::new();
    let mut warnings = Vec::new();
    for (region_idx, region) in regions.iter().enumerate() {
        let mut crop_index = 0;
        for b in &region.boxes {
            match plan_crops(
                b,
                drawing.width(),
                drawing.height(),
                cfg.max_crop_side,
                cfg.max_crop_side,
                cfg.crop_overlap,
            ) {
                Ok(rects) => {
                    for rect in rects {
                        jobs.push(CropJob {
                            region_idx,
                            crop_index,
                            rect,
                        });
                        crop_index += 1;
                    }
                }
                Err(e) => warnings.push(format!("{}: box skipped: {e}", region.region_id)),
            }
        }
    }

    let slots: Mutex<Vec<Option<Result<CropOutcome>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = cfg.max_inflight.clamp(1, jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let r = run_job(
                    job,
                    drawing,
                    &regions[job.region_idx],
                    task,
                    cfg,
                    client,
                    template,
                    ocr,
                );
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });

    let mut elements = Vec::new();
    let mut failed_crops = Vec::new();
    let mut latency_ms = 0;
    for (job, slot) in jobs.iter().zip(slots.into_inner().expect("workers joined")) {
        let region = &regions[job.region_idx];
        let outcome = slot.expect("every job ran")?;
        latency_ms += outcome.latency_ms;
        warnings.extend(outcome.warnings);
        if let Some(reason) = outcome.failure {
            failed_crops.push(FailedCrop {
                region_id: region.region_id.clone(),
                crop_index: job.crop_index,
                bbox: job.rect,
                reason,
            });
            continue;
        }
        elements.extend(outcome.elements);
    }
    for (n, e) in elements.iter_mut().enumerate() {
        e.element_id = format!("e{n:04}");
    }
    if elements.is_empty() {
        return Err(Error::Stage2Empty {
            failed: failed_crops.len(),
            total: jobs.len(),
        });
    }
    Ok(Stage2Output {
        elements,
        failed_crops,
        warnings,
        latency_ms,
        crop_count: jobs.len(),
    })
}
