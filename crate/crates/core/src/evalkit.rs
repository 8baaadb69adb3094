//! Detection metrics: overlap in the ground plane and in the image,
//! greedy matching, precision/recall curves, AP and AOS.

use std::cmp::Ordering;
use std::fmt::Write as _;

use nalgebra::Vector2;

use crate::boxcodec::{normalize_angle, Box3D};
use crate::kittio::ObjectClass;

/// Axis-aligned image rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn clip(&self, width: f64, height: f64) -> Rect {
        Rect {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

pub fn image_iou(a: &Rect, b: &Rect) -> f64 {
    let inter = Rect {
        x1: a.x1.max(b.x1),
        y1: a.y1.max(b.y1),
        x2: a.x2.min(b.x2),
        y2: a.y2.min(b.y2),
    }
    .area();
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn cross(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

pub fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| cross(poly[i], poly[(i + 1) % n])).sum::<f64>() / 2.0
}

/// Sutherland-Hodgman clip of `subject` by the convex counterclockwise
/// polygon `clip`.
pub fn clip_polygon(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: Vector2<f64>| cross(b - a, p - a);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(prev + (cur - prev) * (sp / (sp - sc)));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(prev + (cur - prev) * (sp / (sp - sc)));
            }
        }
    }
    out
}

/// Overlap of the ground-plane footprints of two boxes.
pub fn ground_iou(a: &Box3D, b: &Box3D) -> f64 {
    let pa = a.footprint();
    let pb = b.footprint();
    let area_a = polygon_area(&pa);
    let area_b = polygon_area(&pb);
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let inter = polygon_area(&clip_polygon(&pa, &pb)).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    /// Occlusion level 3: never counted, only absorbs detections.
    Unknown,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
            Difficulty::Unknown => "unknown",
        }
    }

    fn from_level(level: i32) -> Self {
        match level {
            i32::MIN..=0 => Difficulty::Easy,
            1 => Difficulty::Moderate,
            2 => Difficulty::Hard,
            _ => Difficulty::Unknown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyConfig {
    pub easy_max_distance: f64,
    pub moderate_max_distance: f64,
    /// Bin by projected pixel height instead of distance when a rectangle
    /// is available.
    pub use_pixel_height: bool,
    pub easy_min_height_px: f64,
    pub moderate_min_height_px: f64,
    /// Let the label's occlusion level (0, 1, 2) raise the difficulty.
    pub use_occlusion: bool,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        Self {
            easy_max_distance: 28.0,
            moderate_max_distance: 47.0,
            use_pixel_height: false,
            easy_min_height_px: 40.0,
            moderate_min_height_px: 25.0,
            use_occlusion: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthObject {
    pub bbox: Box3D,
    pub class: ObjectClass,
    pub difficulty: Difficulty,
    pub rect: Option<Rect>,
}

/// Difficulty bin of a box from its horizontal range, or from the pixel
/// height of its image rectangle, raised by the occlusion level if given.
pub fn assign_difficulty(
    bbox: &Box3D,
    rect: Option<&Rect>,
    occlusion: Option<i32>,
    cfg: &DifficultyConfig,
) -> Difficulty {
    let base = match rect {
        Some(r) if cfg.use_pixel_height => {
            if r.height() >= cfg.easy_min_height_px {
                Difficulty::Easy
            } else if r.height() >= cfg.moderate_min_height_px {
                Difficulty::Moderate
            } else {
                Difficulty::Hard
            }
        }
        _ => {
            let d = bbox.center.coords.xy().norm();
            if d <= cfg.easy_max_distance {
                Difficulty::Easy
            } else if d <= cfg.moderate_max_distance {
                Difficulty::Moderate
            } else {
                Difficulty::Hard
            }
        }
    };
    match occlusion {
        Some(o) if cfg.use_occlusion => base.max(Difficulty::from_level(o)),
        _ => base,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalDetection {
    pub bbox: Box3D,
    pub confidence: f64,
    pub rect: Option<Rect>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    /// Ground-plane footprint overlap.
    World,
    /// Overlap of projected image rectangles.
    Image,
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::World => "world",
            Criterion::Image => "image",
        }
    }

    fn overlap(&self, det: &EvalDetection, gt: &GroundTruthObject) -> f64 {
        match self {
            Criterion::World => ground_iou(&det.bbox, &gt.bbox),
            Criterion::Image => match (&det.rect, &gt.rect) {
                (Some(a), Some(b)) => image_iou(a, b),
                _ => 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedDetection {
    pub confidence: f64,
    pub is_tp: bool,
    /// `(1 + cos dyaw) / 2` for true positives, 0 otherwise.
    pub similarity: f64,
}

/// Matching result of one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameMatch {
    pub ranked: Vec<RankedDetection>,
    pub num_gt: usize,
}

pub fn orientation_similarity(a: f64, b: f64) -> f64 {
    (1.0 + normalize_angle(a - b).cos()) / 2.0
}

fn by_confidence(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Greedy matching of one frame's detections, highest confidence first.
///
/// Cars at or below `level` are the objects to find. Ignore-class objects
/// and cars harder than `level` absorb detections that overlap them
/// without counting either way.
pub fn match_frame(
    detections: &[EvalDetection],
    groundtruth: &[GroundTruthObject],
    criterion: Criterion,
    threshold: f64,
    level: Difficulty,
) -> FrameMatch {
    let cares: Vec<bool> = groundtruth
        .iter()
        .map(|g| g.class == ObjectClass::Car && g.difficulty <= level)
        .collect();
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| by_confidence(detections[a].confidence, detections[b].confidence));
    let mut taken = vec![false; groundtruth.len()];
    let mut ranked = Vec::with_capacity(detections.len());
    for i in order {
        let det = &detections[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in groundtruth.iter().enumerate() {
            if !cares[j] || taken[j] {
                continue;
            }
            let ov = criterion.overlap(det, gt);
            if ov >= threshold && best.is_none_or(|(_, b)| ov > b) {
                best = Some((j, ov));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            ranked.push(RankedDetection {
                confidence: det.confidence,
                is_tp: true,
                similarity: orientation_similarity(det.bbox.yaw, groundtruth[j].bbox.yaw),
            });
            continue;
        }
        let neutral = groundtruth.iter().enumerate().any(|(j, gt)| {
            gt.class != ObjectClass::Background && !cares[j] && criterion.overlap(det, gt) >= threshold
        });
        if !neutral {
            ranked.push(RankedDetection {
                confidence: det.confidence,
                is_tp: false,
                similarity: 0.0,
            });
        }
    }
    FrameMatch {
        ranked,
        num_gt: cares.iter().filter(|c| **c).count(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub ranked: Vec<RankedDetection>,
    pub num_gt: usize,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Accumulated orientation similarity divided by detections so far.
    pub similarity: Vec<f64>,
}

impl PrCurve {
    /// Pools frame matches into one curve ranked by confidence.
    pub fn from_frames<'a>(frames: impl IntoIterator<Item = &'a FrameMatch>) -> Self {
        let mut ranked = Vec::new();
        let mut num_gt = 0;
        for f in frames {
            ranked.extend_from_slice(&f.ranked);
            num_gt += f.num_gt;
        }
        Self::new(ranked, num_gt)
    }

    pub fn new(mut ranked: Vec<RankedDetection>, num_gt: usize) -> Self {
        // stable on equal confidence: true positives first, then by similarity
        ranked.sort_by(|a, b| {
            by_confidence(a.confidence, b.confidence)
                .then(b.is_tp.cmp(&a.is_tp))
                .then(b.similarity.total_cmp(&a.similarity))
        });
        let mut precision = Vec::with_capacity(ranked.len());
        let mut recall = Vec::with_capacity(ranked.len());
        let mut similarity = Vec::with_capacity(ranked.len());
        let (mut tp, mut sim) = (0usize, 0.0);
        for (i, r) in ranked.iter().enumerate() {
            if r.is_tp {
                tp += 1;
                sim += r.similarity;
            }
            let n = (i + 1) as f64;
            precision.push(tp as f64 / n);
            similarity.push(sim / n);
            recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
        }
        Self {
            ranked,
            num_gt,
            precision,
            recall,
            similarity,
        }
    }

    fn interpolated(&self, values: &[f64]) -> Option<f64> {
        if self.num_gt == 0 {
            return None;
        }
        let mut total = 0.0;
        for step in 0..=10 {
            let level = step as f64 / 10.0;
            let best = self
                .recall
                .iter()
                .zip(values)
                .filter(|(r, _)| **r >= level - 1e-12)
                .map(|(_, v)| *v)
                .fold(0.0, f64::max);
            total += best;
        }
        Some(total / 11.0)
    }

    /// 11-point interpolated average precision; `None` without groundtruth.
    pub fn average_precision(&self) -> Option<f64> {
        self.interpolated(&self.precision)
    }

    pub fn average_orientation_similarity(&self) -> Option<f64> {
        self.interpolated(&self.similarity)
    }

    pub fn max_recall(&self) -> f64 {
        self.recall.last().copied().unwrap_or(0.0)
    }

    /// Area under the raw precision/recall steps.
    pub fn area_under_curve(&self) -> Option<f64> {
        if self.num_gt == 0 {
            return None;
        }
        let mut prev = 0.0;
        let mut area = 0.0;
        for (r, p) in self.recall.iter().zip(&self.precision) {
            area += (r - prev) * p;
            prev = *r;
        }
        Some(area)
    }

    /// `confidence,precision,recall,similarity` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("confidence,precision,recall,similarity\n");
        for i in 0..self.ranked.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.ranked[i].confidence, self.precision[i], self.recall[i], self.similarity[i]
            );
        }
        s
    }
}

/// Matches every frame and pools the result into one curve.
pub fn evaluate(
    frames: &[(Vec<EvalDetection>, Vec<GroundTruthObject>)],
    criterion: Criterion,
    threshold: f64,
    level: Difficulty,
) -> PrCurve {
    let matches: Vec<FrameMatch> = frames
        .iter()
        .map(|(d, g)| match_frame(d, g, criterion, threshold, level))
        .collect();
    PrCurve::from_frames(&matches)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub criterion: Criterion,
    pub difficulty: Difficulty,
    pub ap: Option<f64>,
    pub aos: Option<f64>,
    pub max_recall: f64,
    pub auc: Option<f64>,
}

impl MetricsRow {
    pub fn from_curve(criterion: Criterion, difficulty: Difficulty, curve: &PrCurve) -> Self {
        Self {
            criterion,
            difficulty,
            ap: curve.average_precision(),
            aos: curve.average_orientation_similarity(),
            max_recall: curve.max_recall(),
            auc: curve.area_under_curve(),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("criterion,difficulty,AP,AOS,max_recall\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.criterion.name(),
            r.difficulty.name(),
            opt(r.ap),
            opt(r.aos),
            r.max_recall
        );
    }
    s
}
