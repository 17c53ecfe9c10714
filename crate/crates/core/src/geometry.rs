//! Pixel-space rectangle algebra.
//!
//! Coordinates are `f64` throughout and only rounded (half-up) when a box is
//! serialized, so the crop-to-global restoration stays exact internally.

use std::cmp::Ordering;

use num_rational::BigRational;
use num_traits::ToPrimitive;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::pyramid::CropSpec;

/// Axis-aligned rectangle `[x1, y1, x2, y2)` in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Checked constructor: finite, `x1 < x2`, `y1 < y2`, all non-negative.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox(format!("{:?}", b.to_array())))
        }
    }

    /// Unchecked constructor for raw model output that is clamped later.
    pub const fn raw(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox::raw(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let b = BBox::raw(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        );
        (b.x1 < b.x2 && b.y1 < b.y2).then_some(b)
    }

    /// Smallest box enclosing both.
    pub fn union_hull(&self, other: &BBox) -> BBox {
        BBox::raw(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }

    /// Integer coordinates, rounded half-up.
    pub fn rounded(&self) -> [i64; 4] {
        self.to_array().map(round_half_up)
    }
}

pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.rounded().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 4]>::deserialize(deserializer)?;
        Ok(BBox::from_array(a))
    }
}

/// A labeled detection with a score in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub label: String,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, label: impl Into<String>, score: f64) -> Self {
        ScoredBox {
            bbox,
            label: label.into(),
            score: score.clamp(0.0, 1.0),
        }
    }
}

/// Intersection over union; 0 for disjoint or empty boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = match a.intersection(b) {
        Some(i) => i.area(),
        None => return 0.0,
    };
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Clip a box to `[0, w] x [0, h]`.
pub fn clamp(b: &BBox, w: f64, h: f64) -> Result<BBox> {
    let c = BBox::raw(
        b.x1.clamp(0.0, w),
        b.y1.clamp(0.0, h),
        b.x2.clamp(0.0, w),
        b.y2.clamp(0.0, h),
    );
    if !(c.x1 < c.x2 && c.y1 < c.y2) {
        return Err(Error::DegenerateAfterClamp(format!(
            "{:?} in {}x{}",
            b.rounded(),
            w,
            h
        )));
    }
    Ok(c)
}

/// Result of restoring a crop-local box to original-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Restored {
    pub bbox: BBox,
    /// The local box exceeded the model-input bounds and was clipped first.
    pub clamped: bool,
}

/// Map a box from model-input coordinates of a crop back to the original image:
/// `x_g = x_l * S_w + O_x`, `y_g = y_l * S_h + O_y` for both corners, with
/// `S_w = crop_width / model_input_width` and `S_h` likewise.
///
/// Each coordinate is the correctly rounded `f64` of the exact rational
/// `(x_l * crop + O * input) / input`; the inputs are converted exactly.
pub fn local_to_global(local: &BBox, spec: &CropSpec) -> Result<Restored> {
    let mw = f64::from(spec.model_input_width);
    let mh = f64::from(spec.model_input_height);
    let clipped = clamp(local, mw, mh)?;
    let clamped = clipped != *local;
    if clamped {
        log::warn!(
            "local box {:?} exceeds model input {}x{}; clamped",
            local.rounded(),
            spec.model_input_width,
            spec.model_input_height
        );
    }
    let x = Axis::new(spec.crop_width, spec.offset_x, spec.model_input_width);
    let y = Axis::new(spec.crop_height, spec.offset_y, spec.model_input_height);
    Ok(Restored {
        bbox: BBox::raw(x.map(clipped.x1), y.map(clipped.y1), x.map(clipped.x2), y.map(clipped.y2)),
        clamped,
    })
}

struct Axis {
    crop: BigRational,
    offset_times_input: BigRational,
    input: BigRational,
}

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite coordinate")
}

impl Axis {
    fn new(crop: u32, offset: u32, input: u32) -> Self {
        Axis {
            crop: exact(f64::from(crop)),
            offset_times_input: exact(f64::from(offset)) * exact(f64::from(input)),
            input: exact(f64::from(input)),
        }
    }

    fn map(&self, v: f64) -> f64 {
        let q = (exact(v) * &self.crop + &self.offset_times_input) / &self.input;
        q.to_f64().expect("ratio converts to f64")
    }
}

/// Inverse of [`local_to_global`], without clamping.
pub fn global_to_local(global: &BBox, spec: &CropSpec) -> BBox {
    let cw = f64::from(spec.crop_width);
    let ch = f64::from(spec.crop_height);
    let mw = f64::from(spec.model_input_width);
    let mh = f64::from(spec.model_input_height);
    let ox = f64::from(spec.offset_x);
    let oy = f64::from(spec.offset_y);
    BBox::raw(
        (global.x1 - ox) * mw / cw,
        (global.y1 - oy) * mh / ch,
        (global.x2 - ox) * mw / cw,
        (global.y2 - oy) * mh / ch,
    )
}

/// Deterministic candidate order: score descending, then smaller `x1`, `y1`,
/// then label.
fn candidate_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then_with(|| a.label.cmp(&b.label))
}

/// Greedy non-maximum suppression. A candidate is kept iff its IoU with every
/// previously kept box (of the same label when `per_label`) is below
/// `iou_threshold`. Output is in keep order.
pub fn nms(candidates: &[ScoredBox], iou_threshold: f64, per_label: bool) -> Vec<ScoredBox> {
    nms_indices(candidates, iou_threshold, per_label)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect()
}

/// Like [`nms`] but returns indices into `candidates`.
pub fn nms_indices(candidates: &[ScoredBox], iou_threshold: f64, per_label: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidate_order(&candidates[a], &candidates[b]).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        let cand = &candidates[idx];
        let suppressed = kept.iter().any(|&k| {
            let other = &candidates[k];
            (!per_label || other.label == cand.label) && iou(&other.bbox, &cand.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(idx);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

/// One-to-one greedy matching by descending IoU (ties by pred index, then gt
/// index) over all pairs with IoU >= `iou_min`.
pub fn greedy_match(preds: &[ScoredBox], gts: &[BBox], iou_min: f64) -> Vec<Match> {
    let boxes: Vec<BBox> = preds.iter().map(|p| p.bbox).collect();
    greedy_match_with(&boxes, gts, iou_min, |_, _| true)
}

/// [`greedy_match`] restricted to pairs accepted by `compatible(pred, gt)`.
pub fn greedy_match_with(
    preds: &[BBox],
    gts: &[BBox],
    iou_min: f64,
    compatible: impl Fn(usize, usize) -> bool,
) -> Vec<Match> {
    let mut pairs = Vec::new();
    for (p, pb) in preds.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            if !compatible(p, g) {
                continue;
            }
            let v = iou(pb, gb);
            if v >= iou_min && v > 0.0 {
                pairs.push(Match { pred: p, gt: g, iou: v });
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(a.pred.cmp(&b.pred))
            .then(a.gt.cmp(&b.gt))
    });

    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut out = Vec::new();
    for m in pairs {
        if pred_used[m.pred] || gt_used[m.gt] {
            continue;
        }
        pred_used[m.pred] = true;
        gt_used[m.gt] = true;
        out.push(m);
    }
    out
}
