//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Run alone with `cargo test --test acceptance`; pass criterion ids
//! (`c4 c5`) to run a subset.

mod oracle;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use gridlens::cli::{cmd_review, ConfigArgs, EXIT_VIOLATIONS};
use gridlens::client::{MockBackend, Scenario};
use gridlens::evaluation::{
    default_grid, f1_score, load_corpus, loocv, loocv_from_predictions, region_metrics, violation_metrics,
    AnnotatedDrawing, DrawingPrediction, GtRegion, GtViolation, LoocvResult, MetricsRecord,
};
use gridlens::geometry::{iou, local_to_global, nms_indices, ScoredBox};
use gridlens::prompts::{parse_structured, ReviewTask};
use gridlens::stage1::SemanticRegion;
use gridlens::stage2::{ElementKind, ExtractedElement};
use gridlens::stage3::{
    aggregate, check_single_point_grounding, resolve_conflicts, Finding, FindingKind, FindingSource, Resolution,
    CONFLICT_RULE_ID,
};
use gridlens::synth::{self, generate_corpus, load_truth, write_corpus, NoiseSpec, ScenarioSpec};
use gridlens::{BBox, Client, Config, CropSpec, Pipeline, RasterImage};

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure!(took < limit, "{what} took {took:.2?}, limit {limit:?}");
    Ok(())
}

// ---------------------------------------------------------------------------
// 1. crop-local to global restoration

fn quarter_or_free(rng: &mut ChaCha8Rng, limit: u32) -> (f64, f64) {
    let m = f64::from(limit);
    loop {
        let (a, b) = match rng.gen_range(0..3) {
            0 => (f64::from(rng.gen_range(0..limit)), f64::from(rng.gen_range(1..=limit))),
            1 => (rng.gen_range(0..4 * limit) as f64 / 4.0, rng.gen_range(1..=4 * limit) as f64 / 4.0),
            // two-decimal values as a model would print them
            _ => (
                (rng.gen_range(0.0..m) * 100.0).round() / 100.0,
                (rng.gen_range(0.0..m) * 100.0).round() / 100.0,
            ),
        };
        if a < b {
            return (a, b);
        }
        if b < a {
            return (b, a);
        }
    }
}

fn c1_restoration() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let exact = |v: f64| BigRational::from_float(v).expect("finite");
    for case in 0..1000 {
        let spec = CropSpec::new(
            rng.gen_range(0..30_000),
            rng.gen_range(0..30_000),
            rng.gen_range(1..=9000),
            rng.gen_range(1..=9000),
            rng.gen_range(1..=4096),
            rng.gen_range(1..=4096),
        )
        .map_err(|e| e.to_string())?;
        let (x1, x2) = quarter_or_free(&mut rng, spec.model_input_width);
        let (y1, y2) = quarter_or_free(&mut rng, spec.model_input_height);
        let local = BBox::new(x1, y1, x2, y2).map_err(|e| e.to_string())?;
        let got = local_to_global(&local, &spec).map_err(|e| e.to_string())?;
        ensure!(!got.clamped, "case {case}: in-range box reported as clamped");
        let g = got.bbox.to_array();
        let axes = [
            (x1, spec.crop_width, spec.offset_x, spec.model_input_width),
            (y1, spec.crop_height, spec.offset_y, spec.model_input_height),
            (x2, spec.crop_width, spec.offset_x, spec.model_input_width),
            (y2, spec.crop_height, spec.offset_y, spec.model_input_height),
        ];
        for (k, (l, crop, off, input)) in axes.into_iter().enumerate() {
            let want = exact(l) * exact(f64::from(crop)) / exact(f64::from(input)) + exact(f64::from(off));
            ensure!(
                oracle::correctly_rounded(g[k], &want),
                "case {case} coord {k}: got {} for local {l} under {spec:?}",
                g[k]
            );
        }
    }
    // identity: S = 1, O = 0 returns the input bit for bit
    for _ in 0..200 {
        let w = rng.gen_range(1..=8192u32);
        let h = rng.gen_range(1..=8192u32);
        let spec = CropSpec::new(0, 0, w, h, w, h).map_err(|e| e.to_string())?;
        let (a, b) = (rng.gen_range(0.0..f64::from(w)), rng.gen_range(0.0..f64::from(w)));
        let (c, d) = (rng.gen_range(0.0..f64::from(h)), rng.gen_range(0.0..f64::from(h)));
        let local = BBox::new(a.min(b), c.min(d), a.max(b), c.max(d)).map_err(|e| e.to_string())?;
        let got = local_to_global(&local, &spec).map_err(|e| e.to_string())?.bbox;
        ensure!(got == local, "identity changed {local:?} to {got:?}");
    }
    within(start, Duration::from_secs(1), "1000 cases")?;
    Ok(format!("1000 random cases correctly rounded, 200 identity cases exact, {:.0?}", start.elapsed()))
}

// ---------------------------------------------------------------------------
// 2. IoU and NMS

fn random_ibox(rng: &mut ChaCha8Rng, span: i64) -> oracle::IBox {
    let x1 = rng.gen_range(0..span);
    let y1 = rng.gen_range(0..span);
    [x1, y1, rng.gen_range(x1 + 1..=span), rng.gen_range(y1 + 1..=span)]
}

fn to_bbox(b: &oracle::IBox) -> BBox {
    BBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64).expect("positive area")
}

fn c2_iou_nms() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..500 {
        let (a, b) = (random_ibox(&mut rng, 64), random_ibox(&mut rng, 64));
        let (inter, union) = oracle::pixel_counts(&a, &b);
        let want = inter as f64 / union as f64;
        let got = iou(&to_bbox(&a), &to_bbox(&b));
        ensure!(got == want, "pair {case} {a:?} {b:?}: iou {got} vs pixel count {inter}/{union}");
    }
    let mut kept_total = 0;
    let mut sets = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for n in 0..=10usize {
            let cands: Vec<oracle::Cand> = (0..n)
                .map(|_| oracle::Cand {
                    b: random_ibox(&mut rng, 24),
                    label: ["bus", "relay"][rng.gen_range(0..2)],
                    score: [50, 60, 70, 80, 90][rng.gen_range(0..5)],
                })
                .collect();
            let scored: Vec<ScoredBox> = cands
                .iter()
                .map(|c| ScoredBox::new(to_bbox(&c.b), c.label, c.score as f64 / 100.0))
                .collect();
            for per_label in [false, true] {
                let want = oracle::nms_brute_force(&cands, 3, 10, per_label);
                let got = nms_indices(&scored, 0.3, per_label);
                ensure!(got == want, "seed {seed} n {n} per_label {per_label}: kept {got:?}, oracle {want:?}");
                kept_total += got.len();
                sets += 1;
            }
        }
    }
    within(start, Duration::from_secs(5), "IoU and NMS checks")?;
    Ok(format!(
        "500 IoU pairs exact; {sets} NMS inputs (0-10 boxes x 200 seeds, global and per-label) match, {kept_total} kept, {:.2?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// 3. metric closed forms

fn finding_at(b: [f64; 4], reliability: f64) -> Finding {
    Finding {
        finding_id: String::new(),
        kind: FindingKind::Violation,
        rule_id: "R".into(),
        description: String::new(),
        bbox_global: Some(BBox::from_array(b)),
        supporting_ids: Vec::new(),
        diagnostic_confidence: reliability,
        reliability,
        source: FindingSource::Llm,
    }
}

fn c3_closed_forms() -> Verdict {
    let f1 = f1_score(0.75, 0.80);
    ensure!((f1 - 0.7742).abs() <= 0.0005, "F1(0.75, 0.80) = {f1}");
    ensure!((f1 - 24.0 / 31.0).abs() < 1e-15, "F1(0.75, 0.80) = {f1}, expected 24/31");
    ensure!(format!("{f1:.2}") == "0.77", "F1 rounds to {f1:.2}");

    let m = MetricsRecord::from_counts(3, 1, 2);
    ensure!(m.precision == Some(0.75) && m.recall == Some(0.6), "TP=3 FP=1 FN=2 gave {m:?}");

    // the same counts reached through region and violation matching
    let gts: Vec<[f64; 4]> = (0..5).map(|i| [i as f64 * 100.0, 0.0, i as f64 * 100.0 + 50.0, 50.0]).collect();
    let mut preds: Vec<[f64; 4]> = gts[..3].to_vec();
    preds.push([0.0, 500.0, 50.0, 550.0]);
    let regions: Vec<SemanticRegion> = preds
        .iter()
        .enumerate()
        .map(|(i, b)| SemanticRegion {
            region_id: format!("r{i:03}"),
            label: "CT Secondary Circuit Panel".into(),
            boxes: vec![BBox::from_array(*b)],
            rationale: None,
            proposal_score: None,
        })
        .collect();
    let gt_regions: Vec<GtRegion> = gts
        .iter()
        .map(|b| GtRegion { label: "ct secondary circuit panel".into(), bbox: BBox::from_array(*b) })
        .collect();
    let vocab = vec!["CT Secondary Circuit Panel".to_string()];
    let r = region_metrics(&regions, &gt_regions, &vocab);
    ensure!((r.tp, r.fp, r.fn_) == (3, 1, 2), "region counts {r:?}");
    ensure!(r.precision == Some(0.75) && r.recall == Some(0.6) && r.iou_at_05 == Some(0.6), "region metrics {r:?}");

    let findings: Vec<Finding> = preds.iter().map(|b| finding_at(*b, 0.9)).collect();
    let gt_boxes: Vec<BBox> = gts.iter().map(|b| BBox::from_array(*b)).collect();
    let v = violation_metrics(&findings, &gt_boxes, 0.6);
    ensure!(v.precision == Some(0.75) && v.recall == Some(0.6), "violation metrics {v:?}");
    ensure!(v.f1 == Some(f1_score(0.75, 0.6)), "violation F1 {v:?}");
    Ok(format!("F1(0.75, 0.80) = {f1:.4}; TP=3/FP=1/FN=2 -> P=0.75, R=0.60 on counts, regions and violations"))
}

// ---------------------------------------------------------------------------
// 4 and 5. end-to-end LOOCV over synthetic corpora

struct Evaluated {
    result: LoocvResult,
    truth: synth::CorpusTruth,
    predictions: BTreeMap<String, DrawingPrediction>,
}

/// Writes the corpus, then reads everything back from disk the way the
/// `evaluate` command does.
fn evaluate_synthetic(spec: &ScenarioSpec, dir: &Path) -> Result<Evaluated, String> {
    let corpus = generate_corpus(spec).map_err(|e| e.to_string())?;
    write_corpus(&corpus, dir).map_err(|e| e.to_string())?;
    let scenario = Scenario::load(dir.join(synth::SCENARIO_FILE)).map_err(|e| e.to_string())?;
    let task = ReviewTask::load(dir.join(synth::TASK_FILE)).map_err(|e| e.to_string())?;
    let annotated = load_corpus(dir).map_err(|e| e.to_string())?;
    let truth = load_truth(dir).map_err(|e| e.to_string())?;

    let cfg = Config::default();
    let vocab = cfg.expected_labels.clone();
    let pipeline = Pipeline::with_client(cfg, Client::new(Box::new(MockBackend::new(scenario)), None))
        .map_err(|e| e.to_string())?;
    let predictions = std::sync::Mutex::new(BTreeMap::new());
    let result = loocv(&annotated, &default_grid(), &vocab, 4, |a| {
        let img = RasterImage::load(&a.drawing_path)?;
        let p = pipeline.review(&img, &task)?.prediction();
        predictions.lock().expect("not poisoned").insert(p.drawing_id.clone(), p.clone());
        Ok(p)
    })
    .map_err(|e| e.to_string())?;
    Ok(Evaluated { result, truth, predictions: predictions.into_inner().expect("not poisoned") })
}

fn is_one(x: Option<f64>) -> bool {
    x == Some(1.0)
}

fn c4_noiseless() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ev = evaluate_synthetic(&ScenarioSpec::default(), dir.path())?;
    let r = &ev.result;
    ensure!(r.folds.len() == 12 && r.summary.n_failed == 0, "folds {} failed {}", r.folds.len(), r.summary.n_failed);
    let mut violating = 0;
    for f in &r.folds {
        let reg = f.region_metrics.as_ref().ok_or("missing region metrics")?;
        ensure!(
            is_one(reg.precision) && is_one(reg.recall) && is_one(reg.iou_at_05),
            "fold {} regions {reg:?}",
            f.fold_index
        );
        let t = f.test_metrics.as_ref().ok_or("missing violation metrics")?;
        if t.n_gt > 0 {
            violating += 1;
            ensure!(is_one(t.precision) && is_one(t.recall) && is_one(t.f1), "fold {} violations {t:?}", f.fold_index);
        } else {
            // nothing to find and nothing reported: all three undefined
            ensure!(t.n_pr == 0 && t.f1.is_none(), "fold {} compliant drawing got {t:?}", f.fold_index);
        }
    }
    let s = &r.summary;
    for (name, m) in [
        ("region P", s.region_precision),
        ("region R", s.region_recall),
        ("region IoU@0.5", s.region_iou_at_05),
        ("violation P", s.violation_precision),
        ("violation R", s.violation_recall),
        ("violation F1", s.violation_f1),
    ] {
        let m = m.ok_or(format!("{name} undefined"))?;
        ensure!(m.mean == 1.0 && m.std == 0.0, "{name} = {} ± {}", m.mean, m.std);
    }
    within(start, Duration::from_secs(180), "noiseless LOOCV")?;
    Ok(format!(
        "12 folds, {violating} with violations: every defined metric 1.0, std 0.0, {:.1?}",
        start.elapsed()
    ))
}

/// Scenario noise for the oracle-equivalence run. The mean is lowered from the
/// default so that confidences straddle the threshold grid; with this seed the
/// drops cost recall on two folds.
pub fn noisy_spec() -> ScenarioSpec {
    ScenarioSpec {
        seed: 1,
        noise: NoiseSpec {
            bbox_jitter_px: 8.0,
            confidence_mean: 0.7,
            confidence_sigma: 0.15,
            element_drop_rate: 0.1,
            text_corruption_rate: 0.0,
        },
        ..ScenarioSpec::default()
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn c5_noisy_oracle() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ev = evaluate_synthetic(&noisy_spec(), dir.path())?;
    let r = &ev.result;
    ensure!(r.summary.n_failed == 0, "pipeline failures: {:?}", r.summary.notes);

    let grid_pct: Vec<i64> = (30..=90).step_by(5).collect();
    let data: Vec<(Vec<oracle::PredViolation>, Vec<oracle::IBox>)> = ev
        .truth
        .drawings
        .iter()
        .map(|t| (oracle::expected_violations(t), oracle::gt_boxes(t)))
        .collect();

    // the pipeline's violations are the ones the truth file implies
    for (t, (want, _)) in ev.truth.drawings.iter().zip(&data) {
        let p = ev.predictions.get(&t.drawing_id).ok_or(format!("{} not reviewed", t.drawing_id))?;
        let mut got: Vec<(oracle::IBox, i64)> = p
            .findings
            .iter()
            .filter(|f| f.kind == FindingKind::Violation)
            .map(|f| {
                let b = f.bbox_global.expect("violations carry a box").rounded();
                (b, (f.reliability * 100.0).round() as i64)
            })
            .collect();
        let mut exp: Vec<(oracle::IBox, i64)> = want.iter().map(|v| (v.b, v.pct)).collect();
        got.sort();
        exp.sort();
        ensure!(got == exp, "{}: pipeline violations {got:?}, truth implies {exp:?}", t.drawing_id);
    }

    let folds = oracle::loocv(&data, &grid_pct);
    ensure!(folds.len() == r.folds.len(), "{} oracle folds vs {}", folds.len(), r.folds.len());
    for (o, h) in folds.iter().zip(&r.folds) {
        let want_t = o.threshold_pct as f64 / 100.0;
        ensure!(h.tuned_threshold == want_t, "fold {}: tuned {} vs oracle {want_t}", h.fold_index, h.tuned_threshold);
        let m = h.test_metrics.as_ref().ok_or("missing metrics")?;
        ensure!(
            (m.tp, m.fp, m.fn_) == (o.counts.tp, o.counts.fp, o.counts.fn_),
            "fold {}: harness {:?} vs oracle {:?}",
            h.fold_index,
            (m.tp, m.fp, m.fn_),
            o.counts
        );
    }
    let s = &r.summary;
    let metrics: [(&str, fn(&oracle::Counts) -> _, _); 3] = [
        ("precision", oracle::Counts::precision, s.violation_precision),
        ("recall", oracle::Counts::recall, s.violation_recall),
        ("F1", oracle::Counts::f1, s.violation_f1),
    ];
    let mut line = Vec::new();
    for (name, get, harness) in metrics {
        let xs: Vec<_> = folds.iter().filter_map(|f| get(&f.counts)).collect();
        match (oracle::mean_std(&xs), harness) {
            (None, None) => line.push(format!("{name} n/a")),
            (Some((mean, std, n)), Some(h)) => {
                ensure!(
                    h.n == n && close(h.mean, mean, 1e-12) && close(h.std, std, 1e-9),
                    "{name}: harness {h:?} vs oracle {mean} ± {std} over {n}"
                );
                line.push(format!("{name} {mean:.4} ± {std:.4} (n={n})"));
            }
            (o, h) => return Err(format!("{name}: harness {h:?} vs oracle {o:?}")),
        }
    }
    let tuned: std::collections::BTreeSet<i64> = folds.iter().map(|f| f.threshold_pct).collect();
    Ok(format!(
        "violations, thresholds {tuned:?}%, counts and summary agree: {}",
        line.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// 6. conflict resolution

fn text_el(id: &str, text: &str, conf: f64) -> ExtractedElement {
    ExtractedElement {
        element_id: id.into(),
        kind: ElementKind::TextAnnotation,
        bbox_global: BBox::from_array([100.0, 100.0, 160.0, 120.0]),
        text: Some(text.into()),
        attributes: BTreeMap::new(),
        confidence: conf,
        source_region_id: "r000".into(),
    }
}

/// Returns (resolution, kept id, queued finding count).
fn resolve_pair(a: f64, b: f64) -> Result<(Resolution, Option<String>, Vec<Finding>), String> {
    let els = [text_el("e0000", "16D0:4", a), text_el("e0001", "16D0:1", b)];
    let mut model = aggregate(&els, &[], 1000, 1000, 0.7);
    ensure!(model.conflicts.len() == 1, "expected one conflict, got {:?}", model.conflicts);
    let queued = resolve_conflicts(&mut model, 0.1, 0.6);
    let c = &model.conflicts[0];
    Ok((c.resolution.ok_or("unresolved")?, c.kept_element_id.clone(), queued))
}

fn c6_conflicts() -> Verdict {
    let table: [(&str, f64, f64, Resolution, Option<&str>); 6] = [
        ("clear winner", 0.9, 0.5, Resolution::KeptHigherConfidence, Some("e0000")),
        ("clear winner, second id", 0.4, 0.95, Resolution::KeptHigherConfidence, Some("e0001")),
        ("gap within epsilon", 0.85, 0.8, Resolution::FlaggedForHuman, None),
        ("gap exactly epsilon", 0.8, 0.7, Resolution::FlaggedForHuman, None),
        ("best below threshold", 0.55, 0.3, Resolution::FlaggedForHuman, None),
        ("best exactly at threshold", 0.6, 0.45, Resolution::KeptHigherConfidence, Some("e0000")),
    ];
    for (name, a, b, want, kept) in table {
        let (res, got_kept, queued) = resolve_pair(a, b)?;
        ensure!(res == want && got_kept.as_deref() == kept, "{name}: {res:?} {got_kept:?}");
        match want {
            Resolution::KeptHigherConfidence => ensure!(queued.is_empty(), "{name}: queued {queued:?}"),
            Resolution::FlaggedForHuman => ensure!(
                queued.len() == 1
                    && queued[0].kind == FindingKind::NeedsHumanReview
                    && queued[0].rule_id == CONFLICT_RULE_ID
                    && queued[0].supporting_ids == ["e0000", "e0001"],
                "{name}: queued {queued:?}"
            ),
        }
    }
    // thousandths hit every boundary; the rule is decided in integers
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut kept_n, mut flagged_n) = (0, 0);
    for _ in 0..1000 {
        let (ka, kb): (i64, i64) = (rng.gen_range(0..=1000), rng.gen_range(0..=1000));
        if ka == kb {
            continue;
        }
        let (res, kept, _) = resolve_pair(ka as f64 / 1000.0, kb as f64 / 1000.0)?;
        if (ka - kb).abs() > 100 && ka.max(kb) >= 600 {
            let argmax = if ka > kb { "e0000" } else { "e0001" };
            ensure!(
                res == Resolution::KeptHigherConfidence && kept.as_deref() == Some(argmax),
                "{ka}/{kb} per mille: {res:?} {kept:?}"
            );
            kept_n += 1;
        } else {
            ensure!(res == Resolution::FlaggedForHuman, "{ka}/{kb} per mille: {res:?}");
            flagged_n += 1;
        }
    }
    ensure!(kept_n > 100 && flagged_n > 100, "sample too lopsided: {kept_n} kept, {flagged_n} flagged");
    Ok(format!("6 table rows; random pairs: {kept_n} argmax kept, {flagged_n} flagged"))
}

// ---------------------------------------------------------------------------
// 7. single-point grounding

fn c7_grounding() -> Verdict {
    let ct = SemanticRegion {
        region_id: "r000".into(),
        label: "CT Secondary Circuit Panel".into(),
        boxes: vec![BBox::from_array([0.0, 0.0, 1000.0, 200.0])],
        rationale: None,
        proposal_score: None,
    };
    let cluster = SemanticRegion {
        region_id: "r001".into(),
        label: "Grounding Point Cluster".into(),
        boxes: vec![BBox::from_array([1100.0, 0.0, 1500.0, 200.0])],
        rationale: None,
        proposal_score: None,
    };
    // six slots inside the CT panel, one in the cluster panel, one in no region
    let mut slots: Vec<[f64; 4]> = (0..6).map(|i| [50.0 + 150.0 * i as f64, 80.0, 70.0 + 150.0 * i as f64, 100.0]).collect();
    slots.push([1200.0, 80.0, 1220.0, 100.0]);
    slots.push([50.0, 400.0, 70.0, 420.0]);
    let mut cases = 0;
    let mut by_count = [0usize; 7];
    for mask in 0u32..256 {
        for mark_ct_side in [false, true] {
            let present: Vec<usize> = (0..8).filter(|i| mask & (1 << i) != 0).collect();
            let inside: Vec<usize> = present.iter().copied().filter(|&i| i < 6).collect();
            // the marked ground is the right-most inside one, so marking changes the answer
            let marked = if mark_ct_side { inside.last().copied() } else { None };
            let els: Vec<ExtractedElement> = present
                .iter()
                .map(|&i| ExtractedElement {
                    element_id: format!("e{i:04}"),
                    kind: ElementKind::GroundingSymbol,
                    bbox_global: BBox::from_array(slots[i]),
                    text: None,
                    attributes: if Some(i) == marked {
                        BTreeMap::from([("side".to_string(), "ct".to_string())])
                    } else {
                        BTreeMap::new()
                    },
                    confidence: 0.9,
                    source_region_id: if i == 6 { "r001".into() } else { "r000".into() },
                })
                .collect();
            let model = aggregate(&els, &[ct.clone(), cluster.clone()], 2000, 1000, 0.7);
            let got = check_single_point_grounding(&model, synth::RULE_ID);

            let k = inside.len();
            by_count[k] += 1;
            let id = |i: usize| format!("e{i:04}");
            let kinds: Vec<FindingKind> = got.iter().map(|f| f.kind).collect();
            match k {
                0 => ensure!(kinds == [FindingKind::NeedsHumanReview], "mask {mask:08b}: {kinds:?}"),
                1 => ensure!(
                    kinds == [FindingKind::Validated] && got[0].supporting_ids == [id(inside[0])],
                    "mask {mask:08b}: {got:?}"
                ),
                _ => {
                    let legit = marked.unwrap_or(inside[0]);
                    let mut want: Vec<(String, [f64; 4])> = inside
                        .iter()
                        .filter(|&&i| i != legit)
                        .map(|&i| (id(i), slots[i]))
                        .collect();
                    let mut have: Vec<(String, [f64; 4])> = Vec::new();
                    for f in &got {
                        ensure!(f.kind == FindingKind::Violation, "mask {mask:08b}: {kinds:?}");
                        ensure!(
                            f.supporting_ids.len() == 2 && f.supporting_ids[1] == id(legit),
                            "mask {mask:08b}: supports {:?}, legitimate {}",
                            f.supporting_ids,
                            id(legit)
                        );
                        have.push((f.supporting_ids[0].clone(), f.bbox_global.ok_or("no box")?.to_array()));
                    }
                    want.sort_by(|a, b| a.0.cmp(&b.0));
                    have.sort_by(|a, b| a.0.cmp(&b.0));
                    ensure!(have.len() == k - 1 && have == want, "mask {mask:08b}: {have:?} vs {want:?}");
                }
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} layouts, grounds per CT region 0..6: {by_count:?}"))
}

// ---------------------------------------------------------------------------
// 8. determinism

fn c8_determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = ScenarioSpec { n_drawings: 2, violation_rate: 0.5, ..noisy_spec() };
    let corpus = generate_corpus(&spec).map_err(|e| e.to_string())?;
    write_corpus(&corpus, dir.path()).map_err(|e| e.to_string())?;
    let d = dir.path();
    let scenario = format!("backend.scenario_path={}", d.join(synth::SCENARIO_FILE).display());
    let cache = format!("backend.cache_dir={}", d.join("cache").display());
    let task = d.join(synth::TASK_FILE);

    let mut checked = 0;
    for g in &corpus.drawings {
        let id = &g.truth.drawing_id;
        let image = d.join(format!("{id}.png"));
        let run = |out: &str, with_cache: bool| -> Result<(i32, Vec<u8>), String> {
            let mut overrides = vec![scenario.clone()];
            if with_cache {
                overrides.push(cache.clone());
            }
            let args = ConfigArgs { config: None, overrides };
            let out = d.join(out).join(id);
            let code = cmd_review(&image, &task, &args, &out);
            let bytes = std::fs::read(out.join("report.json")).map_err(|e| format!("{id}: {e}"))?;
            Ok((code, bytes))
        };
        let first = run("plain_1", false)?;
        let second = run("plain_2", false)?;
        let cold = run("cache_cold", true)?;
        let warm = run("cache_warm", true)?;
        let want_code = if g.truth.violating { EXIT_VIOLATIONS } else { 0 };
        for (name, r) in [("second run", &second), ("cache cold", &cold), ("cache warm", &warm)] {
            ensure!(r.0 == first.0, "{id}: {name} exit {} vs {}", r.0, first.0);
            ensure!(r.1 == first.1, "{id}: {name} report.json differs");
        }
        ensure!(first.0 == want_code, "{id}: exit {} expected {want_code}", first.0);
        checked += 1;
    }
    let entries = std::fs::read_dir(d.join("cache")).map_err(|e| e.to_string())?.count();
    ensure!(entries > 0, "cache directory stayed empty");
    Ok(format!("{checked} drawings x 4 runs byte-identical (cache held {entries} entries)"))
}

// ---------------------------------------------------------------------------
// 9. LOOCV protocol

fn random_corpus(rng: &mut ChaCha8Rng, n: usize) -> (Vec<AnnotatedDrawing>, Vec<DrawingPrediction>) {
    let mut annotated = Vec::new();
    let mut preds = Vec::new();
    for j in 0..n {
        let gts: Vec<BBox> = (0..rng.gen_range(0..3)).map(|_| to_bbox(&random_ibox(rng, 40))).collect();
        let mut findings = Vec::new();
        for g in &gts {
            if rng.gen_bool(0.7) {
                findings.push(finding_at(g.to_array(), rng.gen_range(20..=100) as f64 / 100.0));
            }
        }
        for _ in 0..rng.gen_range(0..3) {
            findings.push(finding_at(to_bbox(&random_ibox(rng, 40)).to_array(), rng.gen_range(20..=100) as f64 / 100.0));
        }
        annotated.push(AnnotatedDrawing {
            drawing_path: format!("d{j:02}.png").into(),
            gt_regions: Vec::new(),
            gt_violations: gts.iter().map(|b| GtViolation { bbox: *b }).collect(),
        });
        preds.push(DrawingPrediction { drawing_id: format!("d{j:02}"), regions: Vec::new(), findings });
    }
    (annotated, preds)
}

fn c9_loocv_protocol() -> Verdict {
    let grid = default_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut corpora, mut poisonings, mut test_changed) = (0, 0, 0);
    for _ in 0..200 {
        let n = rng.gen_range(2..=9);
        let (annotated, preds) = random_corpus(&mut rng, n);
        let ok: Vec<Result<DrawingPrediction, String>> = preds.iter().cloned().map(Ok).collect();
        let base = loocv_from_predictions(&annotated, &ok, &grid, &[]).map_err(|e| e.to_string())?;
        ensure!(base.folds.len() == n, "{n} drawings gave {} folds", base.folds.len());
        let held: Vec<String> = base.folds.iter().map(|f| f.drawing_id.clone()).collect();
        let expected: Vec<String> = (0..n).map(|j| format!("d{j:02}")).collect();
        ensure!(held == expected, "held-out order {held:?}");
        for (i, f) in base.folds.iter().enumerate() {
            ensure!(f.fold_index == i, "fold index {} at {i}", f.fold_index);
            ensure!(grid.contains(&f.tuned_threshold), "threshold {} not on the grid", f.tuned_threshold);

            // poison the held-out annotations: move every box, add decoys that
            // the held-out predictions match perfectly at one threshold
            let mut poisoned = annotated.clone();
            let victim = &mut poisoned[i];
            victim.gt_violations = preds[i]
                .findings
                .iter()
                .filter(|x| x.reliability >= 0.9)
                .map(|x| GtViolation { bbox: x.bbox_global.expect("box") })
                .chain((0..rng.gen_range(0..3)).map(|_| GtViolation { bbox: to_bbox(&random_ibox(&mut rng, 40)) }))
                .collect();
            let again = loocv_from_predictions(&poisoned, &ok, &grid, &[]).map_err(|e| e.to_string())?;
            let g = &again.folds[i];
            ensure!(
                g.tuned_threshold == f.tuned_threshold && g.train_f1 == f.train_f1,
                "fold {i}: poisoning the held-out drawing moved tuning {} -> {}",
                f.tuned_threshold,
                g.tuned_threshold
            );
            if g.test_metrics != f.test_metrics {
                test_changed += 1;
            }
            poisonings += 1;
        }
        corpora += 1;
    }
    ensure!(test_changed > 0, "poisoning never reached the test metrics; the check would be vacuous");
    Ok(format!(
        "{corpora} corpora (2-9 drawings), {poisonings} poisoned folds: tuning unchanged every time, test metrics moved in {test_changed}"
    ))
}

// ---------------------------------------------------------------------------
// 10. robust parsing

fn numbers_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.as_f64() == y.as_f64(),
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| numbers_equal(p, q)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| numbers_equal(v, w)))
        }
        _ => a == b,
    }
}

fn c10_parsing() -> Verdict {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/malformed_outputs.json");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let cases: Vec<Value> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure!(cases.len() == 50, "fixture has {} cases", cases.len());
    let (mut parsed, mut rejected) = (0, 0);
    for c in &cases {
        let name = c["name"].as_str().unwrap_or("?");
        let raw = c["raw"].as_str().ok_or(format!("{name}: no raw text"))?;
        let schema = c["schema"].as_str().ok_or(format!("{name}: no schema"))?;
        let outcome = catch_unwind(|| parse_structured(raw, schema)).map_err(|_| format!("{name}: panicked"))?;
        match (c["expect"].as_str(), outcome) {
            (Some("ok"), Ok(p)) => {
                let got = p.value.to_json();
                ensure!(numbers_equal(&got, &c["value"]), "{name}: parsed {got}");
                let warnings = c["warnings"].as_u64().unwrap_or(0) as usize;
                ensure!(p.warnings.len() == warnings, "{name}: warnings {:?}", p.warnings);
                parsed += 1;
            }
            (Some(kind), Err(e)) if kind != "ok" => {
                ensure!(e.kind() == kind, "{name}: expected {kind}, got {e}");
                if let (Some(want), gridlens::Error::Schema { path, .. }) = (c["path"].as_str(), &e) {
                    ensure!(path == want, "{name}: error at {path}, expected {want}");
                }
                rejected += 1;
            }
            (want, got) => return Err(format!("{name}: expected {want:?}, got {got:?}")),
        }
    }
    Ok(format!("{parsed} parsed as specified, {rejected} rejected with the specified error, no panics"))
}

// ---------------------------------------------------------------------------

type Criterion = (&'static str, &'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 10] = [
        ("c1", "crop restoration vs rational oracle", c1_restoration),
        ("c2", "IoU and NMS vs brute force", c2_iou_nms),
        ("c3", "metric closed forms", c3_closed_forms),
        ("c4", "noiseless end-to-end LOOCV", c4_noiseless),
        ("c5", "noisy corpus vs independent metrics oracle", c5_noisy_oracle),
        ("c6", "conflict resolution truth table", c6_conflicts),
        ("c7", "single-point grounding, exhaustive", c7_grounding),
        ("c8", "byte-identical reports, cache on/off", c8_determinism),
        ("c9", "LOOCV protocol and held-out poisoning", c9_loocv_protocol),
        ("c10", "malformed model output fixture", c10_parsing),
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match verdict {
            Ok(detail) => println!("PASS {id:<3} {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id:<3} {name}: {why} [{:.1?}]", start.elapsed());
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
