//! Ground-truth formats, detection metrics and the leave-one-out harness.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{greedy_match_with, BBox};
use crate::stage1::SemanticRegion;
use crate::stage3::{Finding, FindingKind};

/// IoU a prediction needs to count as a hit, for regions and violations alike.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRegion {
    pub label: String,
    #[serde(rename = "bbox_2d")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtViolation {
    #[serde(rename = "bbox_2d")]
    pub bbox: BBox,
}

/// One annotation file. `drawing` is resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedDrawing {
    #[serde(rename = "drawing")]
    pub drawing_path: PathBuf,
    #[serde(default)]
    pub gt_regions: Vec<GtRegion>,
    #[serde(default)]
    pub gt_violations: Vec<GtViolation>,
}

impl AnnotatedDrawing {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut a: AnnotatedDrawing = serde_json::from_str(&text)?;
        if a.drawing_path.is_relative() {
            if let Some(dir) = path.parent() {
                a.drawing_path = dir.join(&a.drawing_path);
            }
        }
        Ok(a)
    }

    pub fn drawing_id(&self) -> String {
        self.drawing_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn violation_boxes(&self) -> Vec<BBox> {
        self.gt_violations.iter().map(|v| v.bbox).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub drawing_id: String,
    pub image: String,
    pub annotation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_sha256: Option<String>,
}

/// `manifest.json` at the root of a corpus directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub drawings: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(corpus_dir: impl AsRef<Path>) -> Result<Self> {
        let path = corpus_dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Annotations listed in a corpus manifest, in manifest order.
pub fn load_corpus(corpus_dir: impl AsRef<Path>) -> Result<Vec<AnnotatedDrawing>> {
    let dir = corpus_dir.as_ref();
    let m = Manifest::load(dir)?;
    if m.drawings.is_empty() {
        return Err(Error::Evaluation(format!("{}: manifest lists no drawings", dir.display())));
    }
    m.drawings
        .iter()
        .map(|e| AnnotatedDrawing::load(dir.join(&e.annotation)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_gt: usize,
    pub n_pr: usize,
    /// `None` when there are no predictions.
    pub precision: Option<f64>,
    /// `None` when there is no ground truth.
    pub recall: Option<f64>,
    /// `None` only when both sides are empty.
    pub f1: Option<f64>,
    /// Fraction of ground-truth boxes matched at IoU >= 0.5.
    pub iou_at_05: Option<f64>,
}

impl MetricsRecord {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let n_pr = tp + fp;
        let n_gt = tp + fn_;
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        let precision = ratio(tp, n_pr);
        let recall = ratio(tp, n_gt);
        let f1 = match (precision, recall) {
            (None, None) => None,
            _ if tp == 0 => Some(0.0),
            (Some(p), Some(r)) => Some(2.0 * p * r / (p + r)),
            _ => unreachable!("tp > 0 implies both denominators are positive"),
        };
        MetricsRecord {
            tp,
            fp,
            fn_,
            n_gt,
            n_pr,
            precision,
            recall,
            f1,
            iou_at_05: recall,
        }
    }
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn normalize_label(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Maps a label onto the annotation vocabulary: exact match after
/// normalization, else the longest vocabulary entry the label contains.
pub fn canonical_label(label: &str, vocabulary: &[String]) -> String {
    let norm = normalize_label(label);
    let mut best: Option<String> = None;
    for v in vocabulary {
        let nv = normalize_label(v);
        if nv == norm {
            return nv;
        }
        if norm.contains(&nv) && best.as_ref().map_or(true, |b| nv.len() > b.len()) {
            best = Some(nv);
        }
    }
    best.unwrap_or(norm)
}

/// Class-aware region scoring. Each region counts once, by the hull of its boxes.
pub fn region_metrics(preds: &[SemanticRegion], gts: &[GtRegion], vocabulary: &[String]) -> MetricsRecord {
    let pred_boxes: Vec<BBox> = preds.iter().map(SemanticRegion::hull).collect();
    let pred_labels: Vec<String> = preds.iter().map(|p| canonical_label(&p.label, vocabulary)).collect();
    let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    let gt_labels: Vec<String> = gts.iter().map(|g| canonical_label(&g.label, vocabulary)).collect();
    let tp = greedy_match_with(&pred_boxes, &gt_boxes, MATCH_IOU, |p, g| pred_labels[p] == gt_labels[g]).len();
    MetricsRecord::from_counts(tp, preds.len() - tp, gts.len() - tp)
}

/// Violation findings at or above `conf_threshold` reliability, matched
/// one-to-one against ground-truth violation boxes.
pub fn violation_metrics(findings: &[Finding], gts: &[BBox], conf_threshold: f64) -> MetricsRecord {
    let kept: Vec<BBox> = findings
        .iter()
        .filter(|f| f.kind == FindingKind::Violation && f.reliability >= conf_threshold)
        .filter_map(|f| f.bbox_global)
        .collect();
    let tp = greedy_match_with(&kept, gts, MATCH_IOU, |_, _| true).len();
    MetricsRecord::from_counts(tp, kept.len() - tp, gts.len() - tp)
}

/// Arithmetic mean and sample standard deviation (n - 1 denominator; 0 for a
/// single value).
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Evaluation("mean_std of an empty list".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// 0.30, 0.35, ..., 0.90.
pub fn default_grid() -> Vec<f64> {
    (30..=90).step_by(5).map(|c| f64::from(c) / 100.0).collect()
}

/// Parses a comma-separated threshold list, or `lo:hi:step`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = |m: &str| Error::Config(format!("grid {s:?}: {m}"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad("not a number"));
    let mut grid: Vec<f64> = if let [lo, hi, step] = s.split(':').collect::<Vec<_>>()[..] {
        let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
        if step <= 0.0 || hi < lo {
            return Err(bad("empty range"));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| ((lo + step * i as f64) * 1e6).round() / 1e6).collect()
    } else {
        s.split(',').map(num).collect::<Result<_>>()?
    };
    if grid.is_empty() || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(bad("thresholds must lie in [0, 1]"));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid)
}

/// What the pipeline produced for one drawing; all the harness needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawingPrediction {
    pub drawing_id: String,
    pub regions: Vec<SemanticRegion>,
    pub findings: Vec<Finding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub drawing_id: String,
    pub tuned_threshold: f64,
    /// Mean training F1 reached at the tuned threshold.
    pub train_f1: Option<f64>,
    pub region_metrics: Option<MetricsRecord>,
    pub test_metrics: Option<MetricsRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    /// Folds on which the metric was defined.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub region_precision: Option<MeanStd>,
    pub region_recall: Option<MeanStd>,
    pub region_iou_at_05: Option<MeanStd>,
    pub violation_precision: Option<MeanStd>,
    pub violation_recall: Option<MeanStd>,
    pub violation_f1: Option<MeanStd>,
    pub n_folds: usize,
    pub n_failed: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoocvResult {
    pub grid: Vec<f64>,
    pub folds: Vec<FoldResult>,
    pub summary: Summary,
}

/// Picks the grid threshold with the highest mean F1 over `train`; ties go
/// to the lowest threshold. Drawings where F1 is undefined do not vote.
pub fn tune_threshold(train: &[(&DrawingPrediction, &AnnotatedDrawing)], grid: &[f64]) -> (f64, Option<f64>) {
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (sorted[0], None::<f64>);
    for &t in &sorted {
        let f1s: Vec<f64> = train
            .iter()
            .filter_map(|(p, a)| violation_metrics(&p.findings, &a.violation_boxes(), t).f1)
            .collect();
        let score = mean_std(&f1s).ok().map(|(m, _)| m);
        let better = match (score, best.1) {
            (Some(s), Some(b)) => s > b,
            (Some(_), None) => true,
            _ => false,
        };
        if better {
            best = (t, score);
        }
    }
    best
}

fn summarize(values: impl Iterator<Item = Option<f64>>) -> Option<MeanStd> {
    let xs: Vec<f64> = values.flatten().collect();
    mean_std(&xs).ok().map(|(mean, std)| MeanStd { mean, std, n: xs.len() })
}

/// Leave-one-out evaluation over precomputed predictions (`Err` marks a
/// drawing the pipeline failed on). Fold `i` tunes on every other drawing and
/// tests on drawing `i`; only the training annotations are read while tuning.
pub fn loocv_from_predictions(
    corpus: &[AnnotatedDrawing],
    predictions: &[std::result::Result<DrawingPrediction, String>],
    grid: &[f64],
    vocabulary: &[String],
) -> Result<LoocvResult> {
    if corpus.len() < 2 {
        return Err(Error::Evaluation(format!("LOOCV needs at least 2 drawings, got {}", corpus.len())));
    }
    if grid.is_empty() {
        return Err(Error::Evaluation("empty threshold grid".into()));
    }
    if predictions.len() != corpus.len() {
        return Err(Error::Evaluation("one prediction per drawing required".into()));
    }
    let mut folds = Vec::new();
    let mut notes = Vec::new();
    for (i, held_out) in corpus.iter().enumerate() {
        let train: Vec<(&DrawingPrediction, &AnnotatedDrawing)> = predictions
            .iter()
            .zip(corpus)
            .enumerate()
            .filter(|(j, _)| *j != i)
            .filter_map(|(_, (p, a))| p.as_ref().ok().map(|p| (p, a)))
            .collect();
        let (tuned_threshold, train_f1) = tune_threshold(&train, grid);
        let fold = match &predictions[i] {
            Ok(p) => FoldResult {
                fold_index: i,
                drawing_id: held_out.drawing_id(),
                tuned_threshold,
                train_f1,
                region_metrics: Some(region_metrics(&p.regions, &held_out.gt_regions, vocabulary)),
                test_metrics: Some(violation_metrics(&p.findings, &held_out.violation_boxes(), tuned_threshold)),
                failure: None,
            },
            Err(reason) => {
                notes.push(format!("fold {i} ({}) excluded: {reason}", held_out.drawing_id()));
                FoldResult {
                    fold_index: i,
                    drawing_id: held_out.drawing_id(),
                    tuned_threshold,
                    train_f1,
                    region_metrics: None,
                    test_metrics: None,
                    failure: Some(reason.clone()),
                }
            }
        };
        folds.push(fold);
    }

    let ok: Vec<&FoldResult> = folds.iter().filter(|f| f.failure.is_none()).collect();
    let reg = |g: fn(&MetricsRecord) -> Option<f64>| summarize(ok.iter().map(|f| f.region_metrics.as_ref().and_then(g)));
    let vio = |g: fn(&MetricsRecord) -> Option<f64>| summarize(ok.iter().map(|f| f.test_metrics.as_ref().and_then(g)));
    let summary = Summary {
        region_precision: reg(|m| m.precision),
        region_recall: reg(|m| m.recall),
        region_iou_at_05: reg(|m| m.iou_at_05),
        violation_precision: vio(|m| m.precision),
        violation_recall: vio(|m| m.recall),
        violation_f1: vio(|m| m.f1),
        n_folds: folds.len(),
        n_failed: folds.len() - ok.len(),
        notes,
    };
    Ok(LoocvResult {
        grid: grid.to_vec(),
        folds,
        summary,
    })
}

/// Runs `predict` on every drawing (at most `max_inflight` at once), then
/// evaluates with [`loocv_from_predictions`].
pub fn loocv(
    corpus: &[AnnotatedDrawing],
    grid: &[f64],
    vocabulary: &[String],
    max_inflight: usize,
    predict: impl Fn(&AnnotatedDrawing) -> Result<DrawingPrediction> + Sync,
) -> Result<LoocvResult> {
    let slots: Mutex<Vec<Option<std::result::Result<DrawingPrediction, String>>>> =
        Mutex::new(vec![None; corpus.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..max_inflight.clamp(1, corpus.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(a) = corpus.get(i) else { break };
                let r = predict(a).map_err(|e| e.to_string());
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let predictions: Vec<_> = slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|s| s.expect("every drawing ran"))
        .collect();
    loocv_from_predictions(corpus, &predictions, grid, vocabulary)
}

fn cell(m: Option<MeanStd>) -> String {
    match m {
        Some(m) => format!("{:.2} ± {:.2}", m.mean, m.std),
        None => "n/a".into(),
    }
}

/// Plain-text results table: one row per stage metric, mean ± sample std
/// over folds.
pub fn summary_table(r: &LoocvResult) -> String {
    let s = &r.summary;
    let rows = [
        ("Region Proposal", "Precision", s.region_precision),
        ("", "Recall", s.region_recall),
        ("", "IoU@0.5", s.region_iou_at_05),
        ("Violation Detection", "Precision", s.violation_precision),
        ("", "Recall", s.violation_recall),
        ("", "F1", s.violation_f1),
    ];
    let mut out = String::new();
    let _ = writeln!(out, "{:<22}{:<12}{}", "Stage", "Metric", "Mean ± Std");
    let _ = writeln!(out, "{}", "-".repeat(48));
    for (stage, metric, v) in rows {
        let _ = writeln!(out, "{stage:<22}{metric:<12}{}", cell(v));
    }
    let _ = writeln!(out, "{}", "-".repeat(48));
    let _ = writeln!(out, "folds: {} ({} failed)", s.n_folds, s.n_failed);
    for n in &s.notes {
        let _ = writeln!(out, "note: {n}");
    }
    out
}
