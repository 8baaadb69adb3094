//! Test-time decoding: positive cells become box candidates, which are
//! clustered by neighbor-count suppression.

use std::fmt::Write as _;

use crate::boxcodec::{decode_box, params_from_corners, Box3D, CornerSet, EncodedBox24};
use crate::error::{Error, Result};
use crate::pointmap::{project_scan, Point3, PointMap, ProjectionConfig, RawScan};
use crate::tensornet::{forward, NetworkSpec, Parameters, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Decoded sensor-frame corners, concatenated.
    pub corners: [f64; 24],
    pub cell: (usize, usize),
    pub point: Point3,
    /// Softmax probability of the vehicle class.
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    /// Candidates within the neighbor radius when picked, self included.
    pub score: usize,
    /// Mean vehicle probability over the consumed candidates.
    pub confidence: f64,
    pub cell: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    /// Neighbor radius in the 24-value corner space, meters.
    pub delta: f64,
    pub min_score: usize,
    /// Slack on every face when consuming points inside a picked box.
    pub margin: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            delta: 2.0,
            min_score: 5,
            margin: 0.1,
        }
    }
}

fn vehicle_probability(o0: f64, o1: f64) -> f64 {
    1.0 / (1.0 + (o0 - o1).exp())
}

/// One candidate per occupied cell whose vehicle logit beats the background
/// logit, in row-major order.
pub fn extract_candidates<T: Scalar>(
    objectness: &Tensor<T>,
    boxes: &Tensor<T>,
    map: &PointMap,
    scan: &RawScan,
) -> Result<Vec<Candidate>> {
    let (h, w) = (map.rows(), map.cols());
    if objectness.shape() != [2, h, w] || boxes.shape() != [24, h, w] {
        return Err(Error::shape(
            "detector",
            format!("heads {:?}/{:?} do not match a {h}x{w} map", objectness.shape(), boxes.shape()),
        ));
    }
    let plane = h * w;
    let o = objectness.data();
    let b = boxes.data();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let Some(src) = map.cell(r, c).source else { continue };
            let (o0, o1) = (o[i].as_f64(), o[plane + i].as_f64());
            if !(o1 > o0) {
                continue;
            }
            let point = scan.points[src];
            let enc = EncodedBox24(std::array::from_fn(|k| b[k * plane + i].as_f64()));
            out.push(Candidate {
                corners: decode_box(&enc, &point)?.to_flat(),
                cell: (r, c),
                point,
                probability: vehicle_probability(o0, o1),
            });
        }
    }
    Ok(out)
}

fn dist2(a: &[f64; 24], b: &[f64; 24]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Neighbor-count suppression.
///
/// Each round picks the remaining candidate with the most remaining
/// candidates strictly within `delta` (itself included; ties go to the lower
/// cell), fits a box to it, and removes it together with every candidate
/// whose source point lies inside that box. Stops once the best score falls
/// below `min_score`. A pick whose corners do not fit a box is removed
/// without a detection.
pub fn nms(candidates: &[Candidate], cfg: &DetectorConfig) -> Vec<Detection> {
    nms_with_survivors(candidates, cfg).0
}

/// [`nms`] plus the mask of candidates left unconsumed.
pub fn nms_with_survivors(candidates: &[Candidate], cfg: &DetectorConfig) -> (Vec<Detection>, Vec<bool>) {
    let n = candidates.len();
    let d2 = cfg.delta * cfg.delta;
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..i {
            if dist2(&candidates[i].corners, &candidates[j].corners) < d2 {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    let mut score: Vec<usize> = neighbors.iter().map(|v| v.len() + 1).collect();
    let mut alive = vec![true; n];
    let mut out = Vec::new();
    loop {
        let best = (0..n)
            .filter(|&i| alive[i])
            .max_by(|&a, &b| {
                score[a]
                    .cmp(&score[b])
                    .then_with(|| candidates[b].cell.cmp(&candidates[a].cell))
                    .then_with(|| b.cmp(&a))
            });
        let Some(pick) = best else { break };
        let picked_score = score[pick];
        if picked_score < cfg.min_score.max(1) {
            break;
        }
        let fitted = params_from_corners(&CornerSet::from_flat(&candidates[pick].corners)).ok();
        let consumed: Vec<usize> = match &fitted {
            Some(b) => (0..n)
                .filter(|&j| alive[j] && (j == pick || b.contains(&candidates[j].point, cfg.margin)))
                .collect(),
            None => vec![pick],
        };
        for &j in &consumed {
            alive[j] = false;
            for &k in &neighbors[j] {
                score[k] -= 1;
            }
        }
        if let Some(bbox) = fitted {
            let confidence = consumed.iter().map(|&j| candidates[j].probability).sum::<f64>() / consumed.len() as f64;
            out.push(Detection {
                bbox,
                score: picked_score,
                confidence,
                cell: candidates[pick].cell,
            });
        }
    }
    (out, alive)
}

/// Network outputs and detections of one scan.
#[derive(Debug, Clone)]
pub struct DetectionOutput {
    pub map: PointMap,
    /// Vehicle probability per cell, row-major; 0 on empty cells.
    pub probability: Vec<f64>,
    pub candidates: Vec<Candidate>,
    pub detections: Vec<Detection>,
}

pub fn detect(
    spec: &NetworkSpec,
    params: &Parameters<f32>,
    scan: &RawScan,
    proj: &ProjectionConfig,
    input_scale: [f64; 2],
    cfg: &DetectorConfig,
) -> Result<DetectionOutput> {
    params.check(spec)?;
    let map = project_scan(scan, proj)?;
    let (heads, _) = forward(spec, params, &map.to_tensor::<f32>(input_scale))?;
    let plane = map.rows() * map.cols();
    let o = heads.objectness.data();
    let probability = (0..plane)
        .map(|i| {
            if map.cells()[i].occupied() {
                vehicle_probability(o[i] as f64, o[plane + i] as f64)
            } else {
                0.0
            }
        })
        .collect();
    let candidates = extract_candidates(&heads.objectness, &heads.boxes, &map, scan)?;
    let detections = nms(&candidates, cfg);
    Ok(DetectionOutput {
        map,
        probability,
        candidates,
        detections,
    })
}

pub const DETECTION_HEADER: &str = "scan_id,cx,cy,cz,length,width,height,yaw,score,confidence";

pub fn detections_csv(scan_id: &str, dets: &[Detection]) -> String {
    let mut s = String::from(DETECTION_HEADER);
    s.push('\n');
    for d in dets {
        let b = &d.bbox;
        let _ = writeln!(
            s,
            "{scan_id},{},{},{},{},{},{},{},{},{}",
            b.center.x, b.center.y, b.center.z, b.length, b.width, b.height, b.yaw, d.score, d.confidence
        );
    }
    s
}

/// Parses a detection CSV written by [`detections_csv`].
pub fn parse_detections_csv(text: &str, path: &std::path::Path) -> Result<Vec<(String, Detection)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 10 {
            return Err(bad(format!("expected 10 fields, found {}", f.len())));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(format!("bad number `{}`", f[k])));
        let bbox = Box3D::new(Point3::new(num(1)?, num(2)?, num(3)?), num(4)?, num(5)?, num(6)?, num(7)?)
            .map_err(|e| bad(e.to_string()))?;
        let score = f[8].parse::<usize>().map_err(|_| bad(format!("bad score `{}`", f[8])))?;
        out.push((
            f[0].to_string(),
            Detection {
                bbox,
                score,
                confidence: num(9)?,
                cell: (0, 0),
            },
        ));
    }
    Ok(out)
}
