//! Reference implementations the library is checked against. Nothing here
//! calls into the code under test except for plain data types.

use num_rational::{BigRational, Rational64};
use num_traits::{Signed, Zero};

use gridlens::stage2::ElementKind;
use gridlens::synth::DrawingTruth;

/// True when `got` is the `f64` nearest to `exact` (either side on a tie).
pub fn correctly_rounded(got: f64, exact: &BigRational) -> bool {
    let dist = |v: f64| match BigRational::from_float(v) {
        Some(r) => (r - exact).abs(),
        None => panic!("non-finite value {v}"),
    };
    let d = dist(got);
    d <= dist(got.next_up()) && d <= dist(got.next_down())
}

pub type IBox = [i64; 4];

/// (intersection, union) in whole pixels, by visiting every pixel of the
/// bounding hull.
pub fn pixel_counts(a: &IBox, b: &IBox) -> (i64, i64) {
    let inside = |r: &IBox, x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0, 0);
    for y in a[1].min(b[1])..a[3].max(b[3]) {
        for x in a[0].min(b[0])..a[2].max(b[2]) {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += i64::from(ia && ib);
            union += i64::from(ia || ib);
        }
    }
    (inter, union)
}

#[derive(Debug, Clone)]
pub struct Cand {
    pub b: IBox,
    pub label: &'static str,
    /// Score in hundredths.
    pub score: i64,
}

/// Whether `a` is considered before `b`: higher score, then smaller x1, y1,
/// then label, then input position.
fn precedes(c: &[Cand], a: usize, b: usize) -> bool {
    let (p, q) = (&c[a], &c[b]);
    (-p.score, p.b[0], p.b[1], p.label, a) < (-q.score, q.b[0], q.b[1], q.label, b)
}

/// Greedy NMS defined as a fixed point and found by enumerating subsets: the
/// kept set K is the unique set where a candidate belongs to K iff no earlier
/// member of K overlaps it at IoU >= num/den.
pub fn nms_brute_force(c: &[Cand], num: i64, den: i64, per_label: bool) -> Vec<usize> {
    let n = c.len();
    let overlaps = |i: usize, j: usize| {
        if per_label && c[i].label != c[j].label {
            return false;
        }
        let (inter, union) = pixel_counts(&c[i].b, &c[j].b);
        union > 0 && inter * den >= num * union
    };
    let mut hits = Vec::new();
    for mask in 0u32..(1 << n) {
        let in_k = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| j != i && in_k(j) && precedes(c, j, i) && overlaps(i, j));
            in_k(i) == !blocked
        });
        if consistent {
            hits.push(mask);
        }
    }
    assert_eq!(hits.len(), 1, "fixed point must be unique");
    let mut kept: Vec<usize> = (0..n).filter(|&i| hits[0] & (1 << i) != 0).collect();
    kept.sort_by(|&a, &b| if precedes(c, a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    kept
}

// ---------------------------------------------------------------------------
// Violation metrics straight from a scenario's truth file

#[derive(Debug, Clone)]
pub struct PredViolation {
    pub b: IBox,
    /// Reliability in hundredths.
    pub pct: i64,
}

fn ibox(b: &gridlens::BBox) -> IBox {
    let a = b.to_array();
    let mut out = [0i64; 4];
    for (o, v) in out.iter_mut().zip(a) {
        assert!(v.fract() == 0.0, "synthetic boxes are whole pixels, got {v}");
        *o = v as i64;
    }
    out
}

fn pct(c: f64) -> i64 {
    (c * 100.0).round() as i64
}

/// What the rule checker must flag, computed from the reported (perturbed)
/// elements: in every CT region, grounds whose center lies inside; the one
/// marked `side=ct` (else the top-left one) is legitimate, every other one is
/// a violation with reliability min(own confidence, legitimate confidence).
pub fn expected_violations(t: &DrawingTruth) -> Vec<PredViolation> {
    let seen: Vec<_> = t.elements.iter().filter(|e| !e.dropped).collect();
    let mut flagged = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for r in &t.regions {
        let by_label = r.label.split(|c: char| !c.is_ascii_alphanumeric()).any(|w| w.eq_ignore_ascii_case("ct"));
        let by_attr = seen
            .iter()
            .any(|e| e.region_label == r.label && e.attributes.get("circuit").map(String::as_str) == Some("ct_secondary"));
        if !(by_label || by_attr) {
            continue;
        }
        // region corners may be fractional (overview scale); centers of whole
        // pixel boxes are exact halves, so f64 comparison is exact here
        let rb = r.bbox_reported.to_array();
        let mut grounds: Vec<(usize, IBox, i64, bool)> = seen
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ElementKind::GroundingSymbol)
            .map(|(i, e)| (i, ibox(&e.bbox_reported), pct(e.confidence), e.attributes.get("side").map(String::as_str) == Some("ct")))
            .filter(|(_, b, _, _)| {
                let (cx, cy) = ((b[0] + b[2]) as f64 / 2.0, (b[1] + b[3]) as f64 / 2.0);
                cx >= rb[0] && cx <= rb[2] && cy >= rb[1] && cy <= rb[3]
            })
            .collect();
        grounds.sort_by_key(|g| (!g.3, g.1[0], g.1[1], g.0));
        if let [first, extra @ ..] = grounds.as_slice() {
            for g in extra {
                if flagged.insert(g.0) {
                    out.push(PredViolation { b: g.1, pct: g.2.min(first.2) });
                }
            }
        }
    }
    out
}

pub fn gt_boxes(t: &DrawingTruth) -> Vec<IBox> {
    t.gt_violations.iter().map(ibox).collect()
}

/// IoU as an exact fraction.
fn iou_exact(a: &IBox, b: &IBox) -> Rational64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    let inter = w * h;
    let area = |r: &IBox| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if inter == 0 {
        Rational64::zero()
    } else {
        Rational64::new(inter, union)
    }
}

/// Greedy one-to-one matching at IoU >= 1/2, best pairs first, ties by
/// prediction then ground-truth index. Returns the number of matches.
pub fn match_count(preds: &[IBox], gts: &[IBox]) -> usize {
    let half = Rational64::new(1, 2);
    let mut pairs: Vec<(Rational64, usize, usize)> = Vec::new();
    for (p, pb) in preds.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            let v = iou_exact(pb, gb);
            if v >= half {
                pairs.push((v, p, g));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_g) = (vec![false; preds.len()], vec![false; gts.len()]);
    let mut n = 0;
    for (_, p, g) in pairs {
        if !used_p[p] && !used_g[g] {
            used_p[p] = true;
            used_g[g] = true;
            n += 1;
        }
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> Option<Rational64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| Rational64::new(self.tp as i64, d as i64))
    }

    pub fn recall(&self) -> Option<Rational64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| Rational64::new(self.tp as i64, d as i64))
    }

    /// 2TP / (2TP + FP + FN); undefined only when nothing was predicted or expected.
    pub fn f1(&self) -> Option<Rational64> {
        let d = 2 * self.tp + self.fp + self.fn_;
        (d > 0).then(|| Rational64::new(2 * self.tp as i64, d as i64))
    }
}

pub fn counts_at(preds: &[PredViolation], gts: &[IBox], threshold_pct: i64) -> Counts {
    let kept: Vec<IBox> = preds.iter().filter(|p| p.pct >= threshold_pct).map(|p| p.b).collect();
    let tp = match_count(&kept, gts);
    Counts { tp, fp: kept.len() - tp, fn_: gts.len() - tp }
}

#[derive(Debug, Clone)]
pub struct OracleFold {
    pub threshold_pct: i64,
    pub counts: Counts,
}

/// Leave-one-out with threshold tuning by mean training F1 (exact fractions,
/// ties to the lowest threshold). The held-out drawing is never consulted
/// while tuning.
pub fn loocv(drawings: &[(Vec<PredViolation>, Vec<IBox>)], grid_pct: &[i64]) -> Vec<OracleFold> {
    (0..drawings.len())
        .map(|held| {
            let mut best: Option<(Rational64, i64)> = None;
            for &t in grid_pct {
                let f1s: Vec<Rational64> = drawings
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != held)
                    .filter_map(|(_, (p, g))| counts_at(p, g, t).f1())
                    .collect();
                if f1s.is_empty() {
                    continue;
                }
                let mean = f1s.iter().sum::<Rational64>() / Rational64::from_integer(f1s.len() as i64);
                if best.map_or(true, |(b, _)| mean > b) {
                    best = Some((mean, t));
                }
            }
            let threshold_pct = best.map_or(grid_pct[0], |b| b.1);
            let (p, g) = &drawings[held];
            OracleFold { threshold_pct, counts: counts_at(p, g, threshold_pct) }
        })
        .collect()
}

/// Mean and sample standard deviation of exact values, as `f64`.
pub fn mean_std(xs: &[Rational64]) -> Option<(f64, f64, usize)> {
    if xs.is_empty() {
        return None;
    }
    let n = Rational64::from_integer(xs.len() as i64);
    let mean = xs.iter().sum::<Rational64>() / n;
    let std = if xs.len() == 1 {
        0.0
    } else {
        let ss: Rational64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        let var = ss / (n - Rational64::from_integer(1));
        (*var.numer() as f64 / *var.denom() as f64).sqrt()
    };
    Some((*mean.numer() as f64 / *mean.denom() as f64, std, xs.len()))
}
